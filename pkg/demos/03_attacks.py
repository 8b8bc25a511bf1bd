"""Membership and attribute inference against an overfit MLP, then the same
attacks against a private one."""

import numpy as np

from dplab.accountant import PrivacyBudget, advantage_bound, calibrate_sigma
from dplab.attacks import MembershipEvalSet, ShadowConfig, attribute_recovery, shokri_build, shokri_scores, yeom_membership
from dplab.data import SplitSpec, split, synth_multiclass
from dplab.metrics import attribute_advantage, membership_advantage
from dplab.models import ModelArch, TrainingConfig, train

data = synth_multiclass(3000, 50, 10, label_noise=0.6, spread=0.6, seed=5, num_binary=5)
tr, te, pool = split(data, SplitSpec(500, 500, 2000, seed=1))
ev = MembershipEvalSet.balanced(tr, te)
arch = ModelArch.mlp(50, 10, (128, 128))


def leak(model, label):
    yeom = membership_advantage(yeom_membership(model, ev.features, ev.labels), ev.is_member)
    attrs = []
    for spec in data.attributes:
        hit = attribute_recovery(model, ev.features, ev.labels, spec)
        attrs.append(attribute_advantage(hit[ev.is_member].mean(), hit[~ev.is_member].mean()))
    print(f"{label:>22}: test acc {model.accuracy(te.features, te.labels):.3f} "
          f"loss-threshold adv {yeom.advantage:+.3f} (PPV {yeom.ppv}) attribute adv {np.mean(attrs):+.3f}")


cfg = TrainingConfig(arch, batch_size=100, epochs=60)
target = train(tr, cfg)
leak(target, "non-private")

attack = shokri_build(pool, ShadowConfig(num_shadows=2, shadow_train_size=500, attack_epochs=30), cfg)
shadow = membership_advantage(shokri_scores(attack, target, ev.features, ev.labels) > 0.5, ev.is_member)
print(f"{'shadow-model attack':>22}: adv {shadow.advantage:+.3f}")

steps = cfg.epochs * (len(tr) // cfg.batch_size)
for eps in (1.0, 100.0):
    sigma = calibrate_sigma("RDP", PrivacyBudget(eps, 1e-5), steps)
    private = train(tr, TrainingConfig(arch, batch_size=100, epochs=60, noise_sigma=sigma))
    leak(private, f"RDP eps={eps:g}")
    print(f"{'':>22}  bound e^eps-1 = {advantage_bound(eps):.4g}")

"""Train a private softmax model and compare it with the non-private one."""

from dplab.accountant import PrivacyBudget, calibrate_sigma
from dplab.data import SplitSpec, split, synth_multiclass
from dplab.metrics import accuracy_loss
from dplab.models import ModelArch, TrainingConfig, train

data = synth_multiclass(2000, 50, 10, label_noise=0.2, spread=0.6, seed=1)
tr, te, _ = split(data, SplitSpec(1000, 1000))
base_cfg = TrainingConfig(ModelArch.softmax(50, 10), batch_size=200, epochs=50)
steps = base_cfg.epochs * (len(tr) // base_cfg.batch_size)

baseline = train(tr, base_cfg)
base_acc = baseline.accuracy(te.features, te.labels)
print(f"non-private: train {baseline.accuracy(tr.features, tr.labels):.3f} test {base_acc:.3f}")

for eps in (0.1, 1.0, 10.0, 100.0):
    sigma = calibrate_sigma("ZCDP", PrivacyBudget(eps, 1e-5), steps)
    cfg = TrainingConfig(base_cfg.arch, batch_size=200, epochs=50, noise_sigma=sigma, seed=7)
    model = train(tr, cfg)
    acc = model.accuracy(te.features, te.labels)
    print(f"zCDP eps={eps:>6g}: sigma={sigma:8.3f} test {acc:.3f} accuracy loss {accuracy_loss(acc, base_acc):+.3f}")

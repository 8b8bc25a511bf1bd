"""Membership and attribute inference attacks.

* Loss-threshold membership inference (``yeom_membership``): a record is a
  member when its loss is at most the target's average training loss.
* Loss-matching attribute inference (``yeom_attribute``): try every admissible
  value of the hidden attribute and keep the one whose loss lands closest to
  that average.
* Shadow-model membership inference (``shokri_*``): shadow models trained on
  attacker data supply confidence vectors labelled in/out, and an MLP learns
  to separate them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dplab.data import AttributeSpec, Dataset
from dplab.models import ModelArch, TrainedModel, TrainingConfig, train
from dplab.rng import stream

__all__ = [
    "AttackError",
    "AttackModel",
    "MembershipEvalSet",
    "PredictionRow",
    "ShadowConfig",
    "attack_features",
    "attribute_recovery",
    "read_predictions",
    "shokri_build",
    "shokri_infer",
    "shokri_scores",
    "shokri_training_set",
    "write_predictions",
    "yeom_attribute",
    "yeom_membership",
]


class AttackError(ValueError):
    pass


@dataclass
class MembershipEvalSet:
    """Member and non-member records with the (attacker-hidden) truth bit."""

    features: np.ndarray
    labels: np.ndarray
    is_member: np.ndarray
    record_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def balanced(
        cls,
        members: Dataset,
        nonmembers: Dataset,
        size: int | None = None,
        seed: int = 0,
        allow_unbalanced: bool = False,
    ) -> "MembershipEvalSet":
        """Sample `size` members and `size` non-members (default: as many as
        the smaller side allows). Members come first in the record order."""
        n_m, n_n = len(members), len(nonmembers)
        if size is None:
            if allow_unbalanced:
                m_idx, n_idx = np.arange(n_m), np.arange(n_n)
            else:
                size = min(n_m, n_n)
        if size is not None:
            if size > n_m or size > n_n:
                raise AttackError(f"cannot draw {size} members and non-members from {n_m}/{n_n}")
            rng = stream(seed, "eval-set")
            m_idx = np.sort(rng.choice(n_m, size, replace=False))
            n_idx = np.sort(rng.choice(n_n, size, replace=False))
        x = np.vstack([members.features[m_idx], nonmembers.features[n_idx]])
        y = np.concatenate([members.labels[m_idx], nonmembers.labels[n_idx]])
        truth = np.concatenate([np.ones(len(m_idx), bool), np.zeros(len(n_idx), bool)])
        return cls(x, y, truth, np.arange(len(y)))


# --------------------------------------------------------------------------
# loss-based attacks


def yeom_membership(target: TrainedModel, x: np.ndarray, y, threshold: float | None = None):
    """Member iff ``loss(x, y) <= threshold`` (default: the target's average
    training loss). Vectorized over rows; a single record returns a bool."""
    thr = target.avg_train_loss if threshold is None else threshold
    if thr is None or not math.isfinite(thr):
        raise AttackError("target has no usable average training loss")
    x = np.asarray(x, dtype=np.float64)
    losses = target.losses(np.atleast_2d(x), np.atleast_1d(y))
    decisions = losses <= thr
    return bool(decisions[0]) if x.ndim == 1 else decisions


def yeom_attribute(target: TrainedModel, x: np.ndarray, y, spec: AttributeSpec, threshold: float | None = None):
    """Recover attribute `spec.attr_index` of each row.

    Every domain value is substituted in turn; the value whose loss is
    closest to the threshold wins, ties going to the earliest domain entry.
    Whatever is stored at the attribute position is ignored.
    """
    if not spec.domain:
        raise AttackError("empty attribute domain")
    thr = target.avg_train_loss if threshold is None else threshold
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y))
    if not 0 <= spec.attr_index < x2.shape[1]:
        raise AttackError(f"attribute index {spec.attr_index} outside {x2.shape[1]} features")
    gaps = np.empty((len(x2), len(spec.domain)))
    for j, v in enumerate(spec.domain):
        probe = x2.copy()
        probe[:, spec.attr_index] = v
        gaps[:, j] = np.abs(target.losses(probe, y) - thr)
    best = np.asarray(spec.domain)[np.argmin(gaps, axis=1)]
    return float(best[0]) if single else best


def attribute_recovery(target: TrainedModel, x: np.ndarray, y: np.ndarray, spec: AttributeSpec) -> np.ndarray:
    """Boolean array: did the attack recover the true attribute of each row?"""
    guess = yeom_attribute(target, x, y, spec)
    return np.asarray(guess) == np.asarray(x)[:, spec.attr_index]


# --------------------------------------------------------------------------
# shadow-model attack


@dataclass(frozen=True)
class ShadowConfig:
    num_shadows: int = 5
    shadow_train_size: int = 500
    shadow_arch: ModelArch | None = None
    attack_hidden: tuple[int, ...] = (64, 64)
    attack_epochs: int = 100
    attack_learning_rate: float = 0.01
    attack_batch_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.num_shadows < 1 or self.shadow_train_size < 1:
            raise AttackError("need at least one shadow model with a nonempty training set")


@dataclass
class AttackModel:
    model: TrainedModel
    num_classes: int
    info: dict = field(default_factory=dict)

    def member_probability(self, confidences: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(attack_features(confidences, labels, self.num_classes))[:, 1]


def attack_features(confidences: np.ndarray, labels, num_classes: int) -> np.ndarray:
    """Confidence vector concatenated with the one-hot true label."""
    conf = np.atleast_2d(np.asarray(confidences, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if conf.shape[1] != num_classes:
        raise AttackError(f"expected {num_classes} confidences, got {conf.shape[1]}")
    return np.hstack([conf, np.eye(num_classes)[labels]])


def shokri_training_set(
    pool: Dataset, cfg: ShadowConfig, training: TrainingConfig
) -> tuple[np.ndarray, np.ndarray, list[TrainedModel]]:
    """Train the shadow models and label their outputs.

    The pool is shuffled and cut into `num_shadows` disjoint slices of
    ``2 * shadow_train_size`` rows. Each shadow trains on a random half of its
    slice ("in") and the other half supplies "out" records. Returns
    (attack features, in/out labels, shadow models).
    """
    m = cfg.shadow_train_size
    need = cfg.num_shadows * 2 * m
    if len(pool) < need:
        raise AttackError(f"shadow pool has {len(pool)} rows, need {need}")
    arch = cfg.shadow_arch or training.arch
    perm = stream(cfg.seed, "shokri/pool").permutation(len(pool))
    feats, inout, shadows = [], [], []
    for s in range(cfg.num_shadows):
        sl = perm[s * 2 * m : (s + 1) * 2 * m]
        halves = stream(cfg.seed, f"shokri/shadow-{s}/halves").permutation(2 * m)
        in_idx, out_idx = sl[halves[:m]], sl[halves[m:]]
        sub = pool.subset(in_idx, f"shadow-{s}")
        shadow_cfg = replace(
            training,
            arch=arch,
            seed=int(stream(cfg.seed, f"shokri/shadow-{s}/seed").integers(2**63)),
            batch_size=min(training.batch_size, m),
        )
        shadow = train(sub, shadow_cfg)
        shadows.append(shadow)
        for idx, bit in ((in_idx, 1), (out_idx, 0)):
            conf = shadow.predict_proba(pool.features[idx])
            feats.append(attack_features(conf, pool.labels[idx], arch.num_classes))
            inout.append(np.full(len(idx), bit, dtype=np.int64))
    return np.vstack(feats), np.concatenate(inout), shadows


def fit_attack_model(features: np.ndarray, inout: np.ndarray, cfg: ShadowConfig, num_classes: int) -> AttackModel:
    """Non-private MLP (no clipping, no noise) mapping attack features to in/out."""
    arch = ModelArch.mlp(features.shape[1], 2, cfg.attack_hidden)
    tc = TrainingConfig(
        arch,
        learning_rate=cfg.attack_learning_rate,
        batch_size=min(cfg.attack_batch_size, len(inout)),
        epochs=cfg.attack_epochs,
        clip_threshold=math.inf,
        seed=int(stream(cfg.seed, "shokri/attack-model").integers(2**63)),
    )
    model = train(Dataset(features, inout, 2, name="shokri-attack"), tc)
    return AttackModel(model, num_classes)


def shokri_build(pool: Dataset, cfg: ShadowConfig, training: TrainingConfig) -> AttackModel:
    feats, inout, _ = shokri_training_set(pool, cfg, training)
    num_classes = (cfg.shadow_arch or training.arch).num_classes
    attack = fit_attack_model(feats, inout, cfg, num_classes)
    attack.info["train_size"] = len(inout)
    return attack


def shokri_scores(attack: AttackModel, target: TrainedModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Attack-model member probability for each record, from the target's
    confidence vectors."""
    return attack.member_probability(target.predict_proba(np.atleast_2d(x)), y)


def shokri_infer(attack: AttackModel, target_confidences: np.ndarray, label):
    """Member iff the attack model's member probability exceeds 0.5."""
    conf = np.asarray(target_confidences, dtype=np.float64)
    p = attack.member_probability(conf, label)
    return bool(p[0] > 0.5) if conf.ndim == 1 else p > 0.5


# --------------------------------------------------------------------------
# prediction export

PREDICTION_HEADER = ("record_id", "attack_name", "decision", "truth", "score")


@dataclass(frozen=True)
class PredictionRow:
    record_id: int
    attack_name: str
    decision: bool
    truth: bool
    score: float


def write_predictions(path: str | Path, rows) -> None:
    """Comma-delimited table, one row per evaluated record. Booleans are 0/1;
    scores use 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for r in rows:
            w.writerow([r.record_id, r.attack_name, int(r.decision), int(r.truth), f"{r.score:.17g}"])


def read_predictions(path: str | Path) -> list[PredictionRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREDICTION_HEADER:
            raise AttackError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            PredictionRow(int(r["record_id"]), r["attack_name"], r["decision"] == "1", r["truth"] == "1", float(r["score"]))
            for r in reader
        ]

"""Experiment orchestration: calibrate, train, attack, tabulate.

A sweep runs one *cell* per (variant, epsilon, seed). Every cell with the
same seed shares data split, initialization, batch order and noise
direction; only the noise scale differs. Per-cell outputs land in
``<out>/cells/`` as soon as the cell finishes and are recorded in
``<out>/manifest.json``, so an interrupted sweep resumes where it stopped.
The final tables are assembled in canonical cell order, which makes them
independent of scheduling.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from dplab import accountant as acc
from dplab.attacks import (
    AttackModel,
    MembershipEvalSet,
    PredictionRow,
    ShadowConfig,
    attribute_recovery,
    read_predictions,
    shokri_build,
    shokri_scores,
    write_predictions,
)
from dplab.data import (
    AttributeSpec,
    Dataset,
    SplitSpec,
    load_with_schema,
    normalize_rows,
    read_schema,
    split_indices,
    synth_multiclass,
)
from dplab.metrics import accuracy_loss, attribute_advantage, mean_se, membership_advantage, overlap_analysis
from dplab.models import ClipMode, ModelArch, TrainedModel, TrainingConfig, train
from dplab.rng import stream

log = logging.getLogger(__name__)

ATTACKS = ("yeom_membership", "yeom_attribute", "shokri")
ENV_OUTPUT_DIR = "DPLAB_OUTPUT_DIR"
ENV_THREADS = "DPLAB_THREADS"
NONPRIVATE = "NONPRIVATE"


class ConfigError(ValueError):
    pass


class CellError(RuntimeError):
    def __init__(self, variant: str, epsilon: float, seed: int, cause: BaseException):
        super().__init__(f"cell ({variant}, eps={epsilon:g}, seed={seed}): {cause}")
        self.variant, self.epsilon, self.seed = variant, epsilon, seed


# --------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG: dict[str, Any] = {
    "dataset": {
        "source": "synth",  # "synth" or "file"
        "path": None,
        "schema": None,
        "normalize": True,
        "synth": {
            "n": 2000, "d": 50, "c": 10, "margin": 1.0, "label_noise": 0.2,
            "spread": 0.6, "num_binary": 5, "seed": 1,
        },
    },
    "split": {"train_size": 1000, "test_size": 1000, "shadow_pool_size": 0, "seed": 0},
    "training": {
        "model": "softmax",
        "hidden_widths": [256, 256],
        "learning_rate": 0.01,
        "batch_size": 200,
        "epochs": 100,
        "lam": 1e-5,
        "clip_threshold": 1.0,
        "clip_mode": "PER_INSTANCE",
        "loss_includes_reg": False,
    },
    "privacy": {
        "variants": ["NC", "AC", "ZCDP", "RDP"],
        "epsilons": [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        "delta": 1e-5,
        "rdp_orders": None,
    },
    "seeds": [0, 1, 2, 3, 4],
    "attacks": ["yeom_membership"],
    "attribute": {"indices": None, "count": 5, "seed": 0},
    "shadow": {
        "num_shadows": 5, "shadow_train_size": 500, "attack_epochs": 100,
        "attack_hidden": [64, 64], "seed": 0,
    },
    "eval": {"size": None},
    "report": {"overlap_variant": "RDP", "overlap_epsilon": None, "overlap_attack": "yeom_membership"},
    "output": {"dir": "results", "record_timing": False, "workers": None},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict | None = None, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        raw = _merge(DEFAULT_CONFIG, d or {})
        for k, v in (overrides or {}).items():
            set_dotted(raw, k, v)
        if os.environ.get(ENV_OUTPUT_DIR):
            raw["output"]["dir"] = os.environ[ENV_OUTPUT_DIR]
        if os.environ.get(ENV_THREADS):
            raw["output"]["workers"] = int(os.environ[ENV_THREADS])
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d, overrides)

    # accessors ---------------------------------------------------------

    @property
    def variants(self) -> list[acc.Variant]:
        return [acc.Variant(v) for v in self.raw["privacy"]["variants"]]

    @property
    def epsilons(self) -> list[float]:
        return [float(e) for e in self.raw["privacy"]["epsilons"]]

    @property
    def delta(self) -> float:
        return float(self.raw["privacy"]["delta"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.raw["seeds"]]

    @property
    def attacks(self) -> list[str]:
        return list(self.raw["attacks"])

    @property
    def rdp_orders(self) -> tuple[float, ...]:
        o = self.raw["privacy"]["rdp_orders"]
        return acc.DEFAULT_RDP_ORDERS if o is None else tuple(float(a) for a in o)

    @property
    def split_spec(self) -> SplitSpec:
        s = self.raw["split"]
        return SplitSpec(int(s["train_size"]), int(s["test_size"]), int(s["shadow_pool_size"]), int(s["seed"]))

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    @property
    def workers(self) -> int:
        w = self.raw["output"]["workers"]
        return int(w) if w else (os.cpu_count() or 1)

    def digest(self) -> str:
        core = {k: v for k, v in self.raw.items() if k not in ("output", "report")}
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()

    def training_config(self, arch: ModelArch, noise_sigma: float, seed: int) -> TrainingConfig:
        t = self.raw["training"]
        return TrainingConfig(
            arch=arch,
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            lam=float(t["lam"]),
            clip_threshold=float(t["clip_threshold"]),
            clip_mode=ClipMode(t["clip_mode"]),
            noise_sigma=float(noise_sigma),
            seed=int(seed),
            loss_includes_reg=bool(t["loss_includes_reg"]),
        )

    def arch_for(self, dim: int, num_classes: int) -> ModelArch:
        t = self.raw["training"]
        if t["model"] == "softmax":
            return ModelArch.softmax(dim, num_classes)
        return ModelArch.mlp(dim, num_classes, tuple(t["hidden_widths"]))

    def steps(self) -> int:
        t = self.raw["training"]
        n = int(self.raw["split"]["train_size"])
        return int(t["epochs"]) * -(-n // int(t["batch_size"]))

    def validate(self) -> None:
        r = self.raw
        try:
            variants = self.variants
        except ValueError as exc:
            raise ConfigError(f"privacy.variants: {exc}") from None
        if not variants:
            raise ConfigError("privacy.variants is empty")
        eps = self.epsilons
        if not eps or any(e <= 0 for e in eps):
            raise ConfigError("privacy.epsilons must be a nonempty list of positive reals")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("privacy.epsilons must be strictly increasing")
        seeds = self.seeds
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be a nonempty list of distinct integers")
        bad = [a for a in self.attacks if a not in ATTACKS]
        if bad:
            raise ConfigError(f"unknown attack(s) {bad}; choose from {list(ATTACKS)}")
        sp = self.split_spec
        if sp.train_size < 1 or sp.test_size < 1:
            raise ConfigError("split.train_size and split.test_size must be positive")
        if not 0 < self.delta < 1.0 / sp.train_size:
            raise ConfigError(f"privacy.delta={self.delta:g} must lie in (0, 1/train_size={1.0 / sp.train_size:g})")
        if r["training"]["model"] not in ("softmax", "mlp"):
            raise ConfigError("training.model must be 'softmax' or 'mlp'")
        try:
            ClipMode(r["training"]["clip_mode"])
        except ValueError:
            raise ConfigError("training.clip_mode must be PER_INSTANCE or BATCH") from None
        if int(r["training"]["batch_size"]) > sp.train_size:
            raise ConfigError("training.batch_size exceeds split.train_size")
        if r["dataset"]["source"] not in ("synth", "file"):
            raise ConfigError("dataset.source must be 'synth' or 'file'")
        if r["dataset"]["source"] == "file" and not r["dataset"]["path"]:
            raise ConfigError("dataset.path is required for file datasets")
        if "shokri" in self.attacks:
            sh = r["shadow"]
            need = int(sh["num_shadows"]) * 2 * int(sh["shadow_train_size"])
            if sp.shadow_pool_size < need:
                raise ConfigError(f"shokri needs split.shadow_pool_size >= {need}")
        if any(o <= 1 for o in self.rdp_orders):
            raise ConfigError("privacy.rdp_orders must all exceed 1")


# --------------------------------------------------------------------------
# shared per-experiment state


@dataclass
class Context:
    cfg: ExperimentConfig
    dataset: Dataset
    train: Dataset
    test: Dataset
    shadow_pool: Dataset
    eval_set: MembershipEvalSet
    attributes: list[AttributeSpec]
    arch: ModelArch
    baselines: dict[int, "BaselineResult"] = field(default_factory=dict)
    shokri_models: dict[int, AttackModel] = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.raw["dataset"]
    if d["source"] == "synth":
        s = d["synth"]
        ds = synth_multiclass(
            int(s["n"]), int(s["d"]), int(s["c"]), float(s["margin"]), float(s["label_noise"]),
            int(s["seed"]), float(s["spread"]), int(s["num_binary"]),
        )
    else:
        schema_path = d["schema"] or str(Path(d["path"]).with_suffix(".schema"))
        ds = load_with_schema(d["path"], read_schema(schema_path))
    return normalize_rows(ds) if d["normalize"] else ds


def prepare(cfg: ExperimentConfig) -> Context:
    ds = load_dataset(cfg)
    sp = cfg.split_spec
    tr_idx, te_idx, sh_idx = split_indices(len(ds), sp)
    if len(set(tr_idx) | set(te_idx) | set(sh_idx)) != len(tr_idx) + len(te_idx) + len(sh_idx):
        raise AssertionError("train / test / shadow splits overlap")
    tr, te, sh = ds.subset(tr_idx), ds.subset(te_idx), ds.subset(sh_idx)
    size = cfg.raw["eval"]["size"]
    eval_set = MembershipEvalSet.balanced(tr, te, None if size is None else int(size), seed=sp.seed)
    attrs = list(ds.attributes)
    a = cfg.raw["attribute"]
    if a["indices"] is not None:
        by_idx = {s.attr_index: s for s in attrs}
        missing = [i for i in a["indices"] if i not in by_idx]
        if missing:
            raise ConfigError(f"attribute.indices {missing} have no declared domain")
        attrs = [by_idx[i] for i in a["indices"]]
    elif len(attrs) > int(a["count"]):
        pick = np.sort(stream(int(a["seed"]), "attribute-choice").choice(len(attrs), int(a["count"]), replace=False))
        attrs = [attrs[i] for i in pick]
    if "yeom_attribute" in cfg.attacks and not attrs:
        raise ConfigError("yeom_attribute needs attribute domains in the dataset schema")
    return Context(cfg, ds, tr, te, sh, eval_set, attrs, cfg.arch_for(ds.dim, ds.num_classes))


# --------------------------------------------------------------------------
# cells

RESULT_COLUMNS = (
    "variant", "epsilon", "seed", "sigma_used", "eps_step_or_rho", "train_acc", "test_acc",
    "accuracy_loss", "attack_name", "tp", "fp", "tn", "fn", "advantage", "ppv",
    "bound_raw", "bound_clamped", "wall_time_seconds",
)


@dataclass(frozen=True)
class ResultRow:
    variant: str
    epsilon: float | None
    seed: int
    sigma_used: float
    eps_step_or_rho: float | None
    train_acc: float
    test_acc: float
    accuracy_loss: float | None
    attack_name: str
    tp: int | None
    fp: int | None
    tn: int | None
    fn: int | None
    advantage: float
    ppv: float | None
    bound_raw: float | None
    bound_clamped: float | None
    wall_time_seconds: float | None


@dataclass
class BaselineResult:
    seed: int
    model: TrainedModel
    train_acc: float
    test_acc: float


@dataclass
class CellResult:
    rows: list[ResultRow]
    predictions: list[PredictionRow]


def baseline(ctx: Context, seed: int) -> BaselineResult:
    """Noise-free model on the same split and hyperparameters, cached per seed."""
    if seed not in ctx.baselines:
        model = train(ctx.train, ctx.cfg.training_config(ctx.arch, 0.0, seed))
        ctx.baselines[seed] = BaselineResult(
            seed,
            model,
            model.accuracy(ctx.train.features, ctx.train.labels),
            model.accuracy(ctx.test.features, ctx.test.labels),
        )
    return ctx.baselines[seed]


def shokri_attack(ctx: Context, seed: int) -> AttackModel:
    """Shadow models use the target's hyperparameters without noise; built
    once per seed and reused for every cell with that seed."""
    if seed not in ctx.shokri_models:
        sh = ctx.cfg.raw["shadow"]
        scfg = ShadowConfig(
            num_shadows=int(sh["num_shadows"]),
            shadow_train_size=int(sh["shadow_train_size"]),
            attack_hidden=tuple(sh["attack_hidden"]),
            attack_epochs=int(sh["attack_epochs"]),
            seed=int(stream(seed, f"shokri/{sh['seed']}").integers(2**63)),
        )
        ctx.shokri_models[seed] = shokri_build(ctx.shadow_pool, scfg, ctx.cfg.training_config(ctx.arch, 0.0, seed))
    return ctx.shokri_models[seed]


def attack_rows(ctx: Context, model: TrainedModel, epsilon: float | None):
    ev = ctx.eval_set
    for name in ctx.cfg.attacks:
        if name == "yeom_attribute":
            adv = []
            for spec in ctx.attributes:
                hit = attribute_recovery(model, ev.features, ev.labels, spec)
                adv.append(attribute_advantage(hit[ev.is_member].mean(), hit[~ev.is_member].mean()))
            yield name, None, float(np.mean(adv)), []
            continue
        if name == "yeom_membership":
            score = model.losses(ev.features, ev.labels)
            decision = score <= model.avg_train_loss
        else:
            score = shokri_scores(shokri_attack(ctx, _seed_of(model)), model, ev.features, ev.labels)
            decision = score > 0.5
        rep = membership_advantage(decision, ev.is_member, epsilon)
        preds = [
            PredictionRow(int(i), name, bool(d), bool(t), float(s))
            for i, d, t, s in zip(ev.record_ids, decision, ev.is_member, score)
        ]
        yield name, rep, rep.advantage, preds


def _seed_of(model: TrainedModel) -> int:
    return model.info["seed"]


def run_cell(
    ctx: Context,
    variant: acc.Variant | str,
    epsilon: float,
    seed: int,
    sigma_override: float | None = None,
) -> CellResult:
    """Calibrate, train the private model, attack it and tabulate one row per attack."""
    variant = acc.Variant(variant)
    cfg = ctx.cfg
    t0 = time.perf_counter()
    try:
        k = cfg.steps()
        if sigma_override is None:
            sigma = acc.calibrate_sigma(variant, acc.PrivacyBudget(epsilon, cfg.delta), k, 1.0, cfg.rdp_orders)
            step = acc.step_budget(variant, sigma, k, cfg.delta)
        else:
            sigma, step = float(sigma_override), None
        model = train(ctx.train, cfg.training_config(ctx.arch, sigma, seed))
        model.info["seed"] = seed
        if sigma > 0:
            model.accountant_record = acc.achieved_budget(variant, sigma, k, cfg.delta, 1.0, cfg.rdp_orders)
        base = baseline(ctx, seed)
        base.model.info["seed"] = seed
        train_acc = model.accuracy(ctx.train.features, ctx.train.labels)
        test_acc = model.accuracy(ctx.test.features, ctx.test.labels)
        loss = accuracy_loss(test_acc, base.test_acc)
        rows, preds = [], []
        bound = acc.advantage_bound(epsilon)
        for name, rep, adv, p in attack_rows(ctx, model, epsilon):
            elapsed = time.perf_counter() - t0 if cfg.raw["output"]["record_timing"] else None
            rows.append(ResultRow(
                variant.value, float(epsilon), int(seed), sigma, step, train_acc, test_acc, loss, name,
                rep and rep.tp, rep and rep.fp, rep and rep.tn, rep and rep.fn, adv, rep and rep.ppv,
                bound, min(bound, 1.0), elapsed,
            ))
            preds.extend(p)
        return CellResult(rows, preds)
    except ConfigError:
        raise
    except Exception as exc:
        raise CellError(variant.value, epsilon, seed, exc) from exc


def baseline_rows(ctx: Context, seed: int) -> CellResult:
    base = baseline(ctx, seed)
    base.model.info["seed"] = seed
    rows, preds = [], []
    for name, rep, adv, p in attack_rows(ctx, base.model, None):
        rows.append(ResultRow(
            NONPRIVATE, None, seed, 0.0, None, base.train_acc, base.test_acc, 0.0, name,
            rep and rep.tp, rep and rep.fp, rep and rep.tn, rep and rep.fn, adv, rep and rep.ppv,
            None, None, None,
        ))
        preds.extend(p)
    return CellResult(rows, preds)


# --------------------------------------------------------------------------
# tables


def fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "NA"
        return f"{v:.17g}"
    return str(v)


def write_table(path: Path, columns: Iterable[str], rows: Iterable[Iterable]) -> None:
    columns = tuple(columns)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _row_values(r: ResultRow) -> list:
    return [getattr(r, f.name) for f in fields(ResultRow)]


def read_table(path: str | Path, required: Iterable[str] = ()) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        missing = [c for c in required if c not in cols]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        return list(reader)


def _num(s: str) -> float:
    return math.nan if s in ("NA", "") else float(s)


AGGREGATE_COLUMNS = (
    "variant", "epsilon", "attack_name", "n_seeds", "sigma_used",
    "train_acc_mean", "train_acc_se", "test_acc_mean", "test_acc_se",
    "accuracy_loss_mean", "accuracy_loss_se", "advantage_mean", "advantage_se",
    "ppv_mean", "ppv_se", "bound_raw", "bound_clamped",
)


def aggregate_rows(rows: list[dict[str, str]]) -> list[list]:
    """Mean and standard error over seeds per (variant, epsilon, attack)."""
    groups: dict[tuple, list[dict[str, str]]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["epsilon"], r["attack_name"]), []).append(r)
    out = []
    for (variant, eps, attack), g in groups.items():
        stat = lambda col: mean_se([_num(r[col]) for r in g])  # noqa: E731
        ppvs = [_num(r["ppv"]) for r in g if r["ppv"] != "NA"]
        out.append([
            variant, _num(eps), attack, len(g), _num(g[0]["sigma_used"]),
            *stat("train_acc"), *stat("test_acc"), *stat("accuracy_loss"), *stat("advantage"),
            *(mean_se(ppvs) if ppvs else (None, None)),
            _num(g[0]["bound_raw"]), _num(g[0]["bound_clamped"]),
        ])
    return out


# --------------------------------------------------------------------------
# sweep

_WORKER_CTX: dict[str, Context] = {}


def _worker_context(cfg: ExperimentConfig) -> Context:
    key = cfg.digest()
    if key not in _WORKER_CTX:
        _WORKER_CTX.clear()
        _WORKER_CTX[key] = prepare(cfg)
    return _WORKER_CTX[key]


def _task_baseline(raw: dict, seed: int):
    ctx = _worker_context(ExperimentConfig(raw))
    res = baseline_rows(ctx, seed)
    attack = ctx.shokri_models.get(seed)
    return seed, ctx.baselines[seed], attack, res


def _task_cell(raw: dict, variant: str, epsilon: float, seed: int, base: BaselineResult, attack):
    ctx = _worker_context(ExperimentConfig(raw))
    ctx.baselines[seed] = base
    if attack is not None:
        ctx.shokri_models[seed] = attack
    return run_cell(ctx, variant, epsilon, seed)


def cell_key(variant: str, epsilon: float, seed: int) -> str:
    return f"{variant}_{epsilon!r}_{seed}"


@dataclass
class SweepResult:
    ok: bool
    out_dir: Path
    completed: list[str]
    skipped: list[str]
    failed: dict[str, str]
    trainings: int


def _load_manifest(path: Path, digest: str) -> dict:
    if path.exists():
        m = json.loads(path.read_text())
        if m.get("config_digest") == digest:
            return m
    return {"config_digest": digest, "cells": {}}


def _save_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _write_cell(cells_dir: Path, key: str, res: CellResult) -> None:
    write_table(cells_dir / f"{key}.csv", RESULT_COLUMNS, (_row_values(r) for r in res.rows))
    write_predictions(cells_dir / f"{key}.predictions.csv", res.predictions)


def sweep(cfg: ExperimentConfig, workers: int | None = None) -> SweepResult:
    """Run every (variant, epsilon, seed) cell not already recorded as done.

    Writes ``results.csv`` (one row per cell and attack), ``aggregate.csv``
    (mean and SE over seeds), ``baseline.csv`` (non-private rows) and
    ``manifest.json`` (per-cell status and errors) into the output directory.
    """
    out = cfg.out_dir
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.raw, sort_keys=True))
    manifest_path = out / "manifest.json"
    manifest = _load_manifest(manifest_path, cfg.digest())
    done = {k for k, v in manifest["cells"].items() if v.get("status") == "ok" and (cells_dir / f"{k}.csv").exists()}

    cells = [(v.value, e, s) for v in cfg.variants for e in cfg.epsilons for s in cfg.seeds]
    todo = [c for c in cells if cell_key(*c) not in done]
    skipped = [cell_key(*c) for c in cells if cell_key(*c) in done]
    todo_seeds = sorted({s for _, _, s in todo})
    base_keys = [f"{NONPRIVATE}_{s}" for s in cfg.seeds]
    need_base = [s for s in cfg.seeds if f"{NONPRIVATE}_{s}" not in done or s in todo_seeds]
    workers = workers or cfg.workers
    failed: dict[str, str] = {}
    completed: list[str] = []
    trainings = 0

    def record(key: str, status: str, **extra) -> None:
        manifest["cells"][key] = {"status": status, **extra}
        _save_manifest(manifest_path, manifest)

    bases: dict[int, tuple[BaselineResult, Any]] = {}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        submit = (lambda fn, *a: pool.submit(fn, *a)) if pool else _inline
        futs = {submit(_task_baseline, cfg.raw, s): s for s in need_base}
        for f in _completed(futs, pool):
            s = futs[f]
            key = f"{NONPRIVATE}_{s}"
            try:
                seed, base, attack, res = f.result()
            except Exception as exc:  # noqa: BLE001
                failed[key] = str(exc)
                record(key, "error", error=str(exc))
                continue
            trainings += 1
            bases[seed] = (base, attack)
            _write_cell(cells_dir, key, res)
            record(key, "ok")
        futs = {}
        for c in todo:
            if c[2] not in bases:
                failed[cell_key(*c)] = f"baseline for seed {c[2]} unavailable"
                record(cell_key(*c), "error", error=failed[cell_key(*c)])
                continue
            base, attack = bases[c[2]]
            futs[submit(_task_cell, cfg.raw, c[0], c[1], c[2], base, attack)] = c
        for f in _completed(futs, pool):
            key = cell_key(*futs[f])
            t0 = time.perf_counter()
            try:
                res = f.result()
            except Exception as exc:  # noqa: BLE001
                log.error("%s failed: %s", key, exc)
                failed[key] = str(exc)
                record(key, "error", error=str(exc))
                continue
            trainings += 1
            _write_cell(cells_dir, key, res)
            completed.append(key)
            record(key, "ok", wall_time_seconds=time.perf_counter() - t0)
    finally:
        if pool:
            pool.shutdown()

    _assemble(cfg, cells, base_keys)
    return SweepResult(not failed, out, completed, skipped, failed, trainings)


class _Done:
    def __init__(self, fn, args):
        try:
            self._value, self._exc = fn(*args), None
        except Exception as exc:  # noqa: BLE001
            self._value, self._exc = None, exc

    def result(self):
        if self._exc is not None:
            raise self._exc
        return self._value


def _inline(fn, *args):
    return _Done(fn, args)


def _completed(futs: dict, pool):
    return as_completed(futs) if pool else list(futs)


def _assemble(cfg: ExperimentConfig, cells, base_keys) -> None:
    out = cfg.out_dir
    cells_dir = out / "cells"

    def gather(keys):
        rows = []
        for k in keys:
            p = cells_dir / f"{k}.csv"
            if p.exists():
                rows.extend(read_table(p))
        return rows

    rows = gather(cell_key(*c) for c in cells)
    write_table(out / "results.csv", RESULT_COLUMNS, ([r[c] for c in RESULT_COLUMNS] for r in rows))
    write_table(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate_rows(rows))
    base = gather(base_keys)
    write_table(out / "baseline.csv", RESULT_COLUMNS, ([r[c] for c in RESULT_COLUMNS] for r in base))


def audit(cfg: ExperimentConfig, results_path: str | Path) -> list[str]:
    """Re-account every row's sigma forward; return rows whose achieved
    epsilon exceeds the row's target."""
    problems = []
    k = cfg.steps()
    for r in read_table(results_path, RESULT_COLUMNS):
        sigma = _num(r["sigma_used"])
        if sigma <= 0:
            continue
        got = acc.achieved_budget(r["variant"], sigma, k, cfg.delta, 1.0, cfg.rdp_orders).epsilon
        if got > _num(r["epsilon"]):
            problems.append(f"{r['variant']} eps={r['epsilon']} seed={r['seed']}: achieved {got!r}")
    return problems


# --------------------------------------------------------------------------
# report

ACCURACY_COLUMNS = ("variant", "epsilon", "n_seeds", "accuracy_loss_mean", "accuracy_loss_se")
LEAKAGE_COLUMNS = ("variant", "attack_name", "epsilon", "n_seeds", "advantage_mean", "advantage_se", "bound_raw", "bound_clamped")
OVERLAP_COLUMNS = ("min_runs", "predicted", "true_members", "ppv", "random_predicted", "random_ppv")


def report(results_dir: str | Path, out_dir: str | Path | None = None, overlap: tuple[str, float, str] | None = None) -> list[Path]:
    """Figure-shaped data files from a sweep's ``results.csv``.

    * ``accuracy_loss_vs_epsilon.csv``: per variant and epsilon.
    * ``leakage_vs_epsilon.csv``: per variant, attack and epsilon, with the bound.
    * ``overlap_<variant>_<eps>_<attack>.csv`` and ``..._pairwise.csv``: member
      predictions across seeds for the designated cell, when its prediction
      files exist.
    """
    results_dir = Path(results_dir)
    out = Path(out_dir) if out_dir else results_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = read_table(results_dir / "results.csv", RESULT_COLUMNS)
    written = []

    per_seed: dict[tuple, dict[str, float]] = {}
    for r in rows:
        per_seed.setdefault((r["variant"], _num(r["epsilon"])), {})[r["seed"]] = _num(r["accuracy_loss"])
    acc_rows = [[v, e, len(s), *mean_se(list(s.values()))] for (v, e), s in per_seed.items()]
    p = out / "accuracy_loss_vs_epsilon.csv"
    write_table(p, ACCURACY_COLUMNS, acc_rows)
    written.append(p)

    leak: dict[tuple, list[float]] = {}
    for r in rows:
        leak.setdefault((r["variant"], r["attack_name"], _num(r["epsilon"])), []).append(_num(r["advantage"]))
    leak_rows = []
    for (v, a, e), vals in leak.items():
        bound = acc.advantage_bound(e)
        leak_rows.append([v, a, e, len(vals), *mean_se(vals), bound, min(bound, 1.0)])
    p = out / "leakage_vs_epsilon.csv"
    write_table(p, LEAKAGE_COLUMNS, leak_rows)
    written.append(p)

    if overlap is None:
        cfg_path = results_dir / "config.yaml"
        if cfg_path.exists() and rows:
            rep = (yaml.safe_load(cfg_path.read_text()) or {}).get("report", {})
            eps = rep.get("overlap_epsilon")
            if eps is None:
                eps = max(_num(r["epsilon"]) for r in rows)
            overlap = (rep.get("overlap_variant", "RDP"), float(eps), rep.get("overlap_attack", "yeom_membership"))
    if overlap is not None:
        written.extend(_overlap_files(results_dir, out, rows, *overlap))
    return written


def _overlap_files(results_dir: Path, out: Path, rows, variant: str, epsilon: float, attack: str) -> list[Path]:
    seeds = sorted({int(r["seed"]) for r in rows if r["variant"] == variant and _num(r["epsilon"]) == epsilon})
    runs, truth = [], None
    for s in seeds:
        p = results_dir / "cells" / f"{cell_key(variant, float(epsilon), s)}.predictions.csv"
        if not p.exists():
            continue
        preds = sorted((r for r in read_predictions(p) if r.attack_name == attack), key=lambda r: r.record_id)
        if not preds:
            continue
        runs.append([r.decision for r in preds])
        truth = [r.truth for r in preds]
    if len(runs) < 2:
        return []
    rep = overlap_analysis(runs, truth)
    stem = f"overlap_{variant}_{epsilon:g}_{attack}"
    p1 = out / f"{stem}.csv"
    write_table(p1, OVERLAP_COLUMNS, (
        [lv.min_runs, lv.predicted, lv.true_members, lv.ppv, lv.random_predicted, lv.random_ppv] for lv in rep.levels
    ))
    p2 = out / f"{stem}_pairwise.csv"
    write_table(p2, ["run"] + [f"run{j}" for j in range(len(runs))], (
        [f"run{i}", *rep.pairwise[i]] for i in range(len(runs))
    ))
    return [p1, p2]

"""Softmax regression and ReLU MLPs trained from scratch with ADAM, per-instance
or batch gradient clipping, and Gaussian gradient perturbation.

Also holds the exact binary logistic-regression solver and its output
perturbation, plus the JSON checkpoint format.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dplab.accountant import PrivacyBudget
from dplab.data import Dataset
from dplab.rng import stream

__all__ = [
    "AdamState",
    "ClipInvariantError",
    "ClipMode",
    "GradientSet",
    "ModelArch",
    "ModelError",
    "ModelKind",
    "ModelParams",
    "TrainedModel",
    "TrainingConfig",
    "TrainingDivergedError",
    "adam_step",
    "clip",
    "fit_binary_lr",
    "forward",
    "gradient",
    "init_params",
    "load_checkpoint",
    "objective",
    "output_perturb_binary_lr",
    "per_example_loss",
    "private_gradient",
    "save_checkpoint",
    "train",
]

CHECKPOINT_FORMAT = "dplab-checkpoint"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LOSS = 1e6


class ModelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (batch loss {loss!r})")
        self.step = step
        self.loss = loss


class ClipInvariantError(AssertionError):
    pass


class ModelKind(str, enum.Enum):
    SOFTMAX_REGRESSION = "SOFTMAX_REGRESSION"
    MLP = "MLP"


class ClipMode(str, enum.Enum):
    PER_INSTANCE = "PER_INSTANCE"
    BATCH = "BATCH"


@dataclass(frozen=True)
class ModelArch:
    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_widths: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ModelError("need input_dim >= 1 and num_classes >= 2")
        if self.kind is ModelKind.MLP and not self.hidden_widths:
            raise ModelError("an MLP needs at least one hidden layer")
        if self.kind is ModelKind.SOFTMAX_REGRESSION and self.hidden_widths:
            raise ModelError("softmax regression has no hidden layers")
        if any(h < 1 for h in self.hidden_widths):
            raise ModelError("hidden widths must be positive")

    @classmethod
    def softmax(cls, input_dim: int, num_classes: int) -> "ModelArch":
        return cls(ModelKind.SOFTMAX_REGRESSION, input_dim, num_classes)

    @classmethod
    def mlp(cls, input_dim: int, num_classes: int, hidden: Sequence[int] = (256, 256)) -> "ModelArch":
        return cls(ModelKind.MLP, input_dim, num_classes, tuple(hidden))

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, self.num_classes]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_widths": list(self.hidden_widths),
        }


@dataclass
class ModelParams:
    """Layer list of (weight[out, in], bias[out]) pairs."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for w, b in self.layers:
            nw = flat[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            nb = flat[pos : pos + b.size].copy()
            pos += b.size
            out.append((nw.copy(), nb))
        return ModelParams(out)

    def weight_mask(self) -> np.ndarray:
        """1 on weight entries, 0 on biases, in flattened order."""
        return np.concatenate([np.concatenate([np.ones(w.size), np.zeros(b.size)]) for w, b in self.layers])

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])


def init_params(arch: ModelArch, rng: np.random.Generator) -> ModelParams:
    """Zeros for softmax regression; He-normal weights and zero biases for MLPs."""
    layers = []
    for out_dim, in_dim in arch.layer_shapes:
        if arch.kind is ModelKind.SOFTMAX_REGRESSION:
            w = np.zeros((out_dim, in_dim))
        else:
            w = rng.standard_normal((out_dim, in_dim)) * math.sqrt(2.0 / in_dim)
        layers.append((w, np.zeros(out_dim)))
    return ModelParams(layers)


# --------------------------------------------------------------------------
# forward / loss / gradients


def _logits_cache(params: ModelParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        if h.shape[1] != w.shape[1]:
            raise ModelError(f"layer {i} expects {w.shape[1]} inputs, got {h.shape[1]}")
        z = h @ w.T + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, pre, z


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    _, _, z = _logits_cache(params, np.atleast_2d(x))
    p = np.exp(_log_softmax(z))
    return p[0] if single else p


def per_example_loss(params: ModelParams, x: np.ndarray, y) -> np.ndarray | float:
    """Cross-entropy ``-ln p_y`` (no regularizer). Vectorized over rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, _, z = _logits_cache(params, np.atleast_2d(x))
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ModelError("class index out of range")
    losses = -_log_softmax(z)[np.arange(len(y)), y]
    return float(losses[0]) if single else losses


def objective(params: ModelParams, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Mean cross-entropy plus ``lam/2 * ||weights||^2`` (biases unregularized)."""
    reg = sum(float(np.sum(w * w)) for w, _ in params.layers)
    return float(np.mean(per_example_loss(params, x, y))) + 0.5 * lam * reg


def _backward(params: ModelParams, acts, pre, dout: np.ndarray) -> list[np.ndarray]:
    """Per-example deltas at every layer output; the gradient of example i
    w.r.t. layer l is ``outer(deltas[l][i], acts[l][i])`` and ``deltas[l][i]``."""
    n_layers = len(params.layers)
    deltas = [None] * n_layers
    deltas[-1] = dout
    for l in range(n_layers - 1, 0, -1):
        d = deltas[l] @ params.layers[l][0]
        d *= pre[l - 1] > 0
        deltas[l - 1] = d
    return deltas


def _per_example_norms(acts, deltas) -> np.ndarray:
    sq = np.zeros(len(deltas[0]))
    for a, d in zip(acts, deltas):
        # ||outer(d, a)||_F^2 + ||d||^2
        sq += np.einsum("bi,bi->b", d, d) * (np.einsum("bj,bj->b", a, a) + 1.0)
    return np.sqrt(sq)


def _weighted_sum(acts, deltas, weights: np.ndarray) -> np.ndarray:
    parts = []
    for a, d in zip(acts, deltas):
        wd = d * weights[:, None]
        parts.append((wd.T @ a).ravel())
        parts.append(wd.sum(axis=0))
    return np.concatenate(parts)


def _output_delta(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.exp(_log_softmax(z))
    p[np.arange(len(y)), y] -= 1.0
    return p


@dataclass
class GradientSet:
    """Flattened gradients of a batch.

    `per_example` (PER_INSTANCE mode) is a (batch, num_params) matrix of
    cross-entropy gradients; `aggregate` (BATCH mode) is their mean.
    `regularizer` is ``lam * weights`` and is added after clipping.
    """

    per_example: np.ndarray | None
    aggregate: np.ndarray | None
    regularizer: np.ndarray


def gradient(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    lam: float = 0.0,
    clip_mode: ClipMode | str = ClipMode.PER_INSTANCE,
) -> GradientSet:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(x) == 0:
        raise ModelError("empty batch")
    acts, pre, z = _logits_cache(params, x)
    deltas = _backward(params, acts, pre, _output_delta(z, y))
    reg = lam * params.flatten() * params.weight_mask()
    if ClipMode(clip_mode) is ClipMode.BATCH:
        return GradientSet(None, _weighted_sum(acts, deltas, np.full(len(y), 1.0 / len(y))), reg)
    parts = []
    for a, d in zip(acts, deltas):
        parts.append(np.einsum("bi,bj->bij", d, a).reshape(len(y), -1))
        parts.append(d)
    return GradientSet(np.concatenate(parts, axis=1), None, reg)


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """Scale `g` by ``min(1, c/||g||)``."""
    if not c > 0:
        raise ModelError("clip threshold must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g
    return g * (c / norm)


# --------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, params: np.ndarray) -> "AdamState":
        return cls(params.copy(), np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(state: AdamState, grad: np.ndarray, lr: float) -> AdamState:
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(params, m, v, t)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    arch: ModelArch
    learning_rate: float = 0.01
    batch_size: int = 200
    epochs: int = 100
    lam: float = 0.0
    clip_threshold: float = 1.0
    clip_mode: ClipMode = ClipMode.PER_INSTANCE
    noise_sigma: float = 0.0
    seed: int = 0
    loss_includes_reg: bool = False

    def __post_init__(self):
        object.__setattr__(self, "clip_mode", ClipMode(self.clip_mode))
        for name in ("learning_rate", "lam", "noise_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ModelError(f"{name} must be finite and >= 0")
        if self.learning_rate <= 0 or not self.clip_threshold > 0:
            raise ModelError("learning_rate and clip_threshold must be positive")
        # C = inf disables clipping, which only makes sense without noise
        if self.noise_sigma > 0 and not math.isfinite(self.clip_threshold):
            raise ModelError("noisy training needs a finite clip threshold")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["clip_mode"] = self.clip_mode.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def steps_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)

    def total_steps(self, n: int) -> int:
        """Number of noisy gradient steps, i.e. the k the accountant composes over."""
        return self.epochs * self.steps_per_epoch(n)


@dataclass
class TrainedModel:
    arch: ModelArch
    params: ModelParams
    avg_train_loss: float
    config_digest: str
    sigma_used: float
    accountant_record: PrivacyBudget | None = None
    info: dict = field(default_factory=dict)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, x)

    def losses(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return per_example_loss(self.params, np.atleast_2d(x), y)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(np.argmax(self.predict_proba(x), axis=1) == y))

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def _debug_check_clip(params, xb, yb, c, fast_sum):
    per = gradient(params, xb, yb, 0.0, ClipMode.PER_INSTANCE).per_example
    clipped = np.array([clip(g, c) for g in per])
    norms = np.linalg.norm(clipped, axis=1)
    if np.any(norms > c + 1e-12):
        raise ClipInvariantError(f"clipped gradient norm {norms.max()!r} exceeds C={c}")
    ref = clipped.sum(axis=0)
    if not np.allclose(ref, fast_sum, rtol=1e-9, atol=1e-12):
        raise ClipInvariantError("fast clipped sum disagrees with explicit per-example clipping")
    return float(norms.max()), len(norms)


def private_gradient(
    params: ModelParams,
    xb: np.ndarray,
    yb: np.ndarray,
    config: TrainingConfig,
    noise_rng: np.random.Generator | None,
    *,
    debug: bool = False,
) -> tuple[np.ndarray, float, tuple[float, int] | None]:
    """One step's update direction: clipped mean gradient, plus ``lam * weights``,
    plus Gaussian noise of std ``noise_sigma * 2C/B`` per coordinate.

    Returns (gradient, mean batch loss, debug clip statistics or None).
    """
    b = len(yb)
    c = config.clip_threshold
    acts, pre, z = _logits_cache(params, xb)
    batch_loss = float(-np.mean(_log_softmax(z)[np.arange(b), yb]))
    deltas = _backward(params, acts, pre, _output_delta(z, yb))
    check = None
    if config.clip_mode is ClipMode.PER_INSTANCE:
        norms = _per_example_norms(acts, deltas)
        factors = np.where(norms > c, c / np.where(norms > 0, norms, 1.0), 1.0)
        g_sum = _weighted_sum(acts, deltas, factors)
        if debug:
            check = _debug_check_clip(params, xb, yb, c, g_sum)
        g = g_sum / b
    else:
        g = clip(_weighted_sum(acts, deltas, np.full(b, 1.0 / b)), c)
    g = g + config.lam * params.flatten() * params.weight_mask()
    if config.noise_sigma > 0:
        g = g + config.noise_sigma * (2.0 * c / b) * noise_rng.standard_normal(g.shape)
    return g, batch_loss, check


def train(data: Dataset, config: TrainingConfig, *, debug: bool = False) -> TrainedModel:
    """Minibatch ADAM with clipping and optional Gaussian gradient noise.

    Each step averages the clipped per-example (or clipped batch-mean)
    cross-entropy gradients, adds ``lam * weights`` and then i.i.d. Gaussian
    noise of std ``noise_sigma * 2C/B`` per coordinate, where B is the size
    of the current batch. Init, shuffling and noise use separate seeded
    streams, so runs that differ only in `noise_sigma` share their noise
    direction.

    With ``debug=True`` every step also materializes and clips the
    per-example gradients one by one and checks them against the fast path.
    """
    arch = config.arch
    x, y = data.features, data.labels
    n = len(y)
    if data.dim != arch.input_dim:
        raise ModelError(f"data has {data.dim} features, arch expects {arch.input_dim}")
    if data.num_classes > arch.num_classes:
        raise ModelError("data has more classes than the model outputs")
    if config.batch_size > n:
        raise ModelError(f"batch_size {config.batch_size} exceeds training-set size {n}")

    params = init_params(arch, stream(config.seed, "train/init"))
    shuffle_rng = stream(config.seed, "train/shuffle")
    noise_rng = stream(config.seed, "train/noise")
    mask = params.weight_mask()
    state = AdamState.start(params.flatten())
    bs = config.batch_size
    step = 0
    max_norm = 0.0
    checked = 0

    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g, batch_loss, check = private_gradient(params, x[idx], y[idx], config, noise_rng, debug=debug)
            if not math.isfinite(batch_loss) or batch_loss > DIVERGENCE_LOSS:
                raise TrainingDivergedError(step, batch_loss)
            if check is not None:
                max_norm, checked = max(max_norm, check[0]), checked + check[1]
            state = adam_step(state, g, config.learning_rate)
            if not np.all(np.isfinite(state.params)):
                raise TrainingDivergedError(step, math.nan)
            params = params.with_flat(state.params)
            step += 1

    avg = float(np.mean(per_example_loss(params, x, y)))
    if config.loss_includes_reg:
        avg += 0.5 * config.lam * float(np.sum((state.params * mask) ** 2))
    if not math.isfinite(avg):
        raise TrainingDivergedError(step, avg)
    info = {"steps": step}
    if debug:
        info.update(clip_checks=checked, clip_violations=0, max_clipped_norm=max_norm)
    return TrainedModel(arch, params, avg, config.digest(), config.noise_sigma, None, info)


# --------------------------------------------------------------------------
# binary logistic regression with output perturbation


def fit_binary_lr(data: Dataset, lam: float, tol: float = 1e-12, max_iter: int = 100) -> TrainedModel:
    """Exact minimizer of ``mean log(1 + exp(-y theta.x)) + lam/2 ||theta||^2``
    (labels {0,1} mapped to {-1,+1}, no intercept) by Newton's method.

    The result is stored as a two-class softmax model with class-0 weights
    fixed at zero, so ``p(1|x) = sigmoid(theta.x)``.
    """
    if data.num_classes != 2:
        raise ModelError("binary logistic regression needs exactly two classes")
    if not lam > 0:
        raise ModelError("lam must be positive for a strongly convex objective")
    x = data.features
    s = np.where(data.labels == 1, 1.0, -1.0)
    n, d = x.shape
    theta = np.zeros(d)
    for _ in range(max_iter):
        m = s * (x @ theta)
        sig = 0.5 * (1.0 - np.tanh(0.5 * m))  # sigmoid(-m)
        grad = -(x.T @ (s * sig)) / n + lam * theta
        if np.linalg.norm(grad) < tol:
            break
        hess = (x.T * (sig * (1.0 - sig))) @ x / n + lam * np.eye(d)
        theta = theta - np.linalg.solve(hess, grad)
    arch = ModelArch.softmax(d, 2)
    params = ModelParams([(np.vstack([np.zeros(d), theta]), np.zeros(2))])
    avg = float(np.mean(per_example_loss(params, x, data.labels)))
    digest = hashlib.sha256(f"binary-lr:lam={lam!r}".encode()).hexdigest()
    return TrainedModel(arch, params, avg, digest, 0.0, None, {"grad_norm": float(np.linalg.norm(grad))})


def output_perturb_binary_lr(model: TrainedModel, n: int, lam: float, eps: float, seed: int) -> TrainedModel:
    """Release ``theta + b`` where b has density proportional to
    ``exp(-||b|| / scale)`` with ``scale = 2/(n*lam*eps)``: a uniform direction
    and a Gamma(d, scale) norm.

    `model` must be the exact regularized minimizer over n rows with norm
    <= 1 (see `fit_binary_lr`). `avg_train_loss` is carried over unchanged.
    """
    arch = model.arch
    if arch.kind is not ModelKind.SOFTMAX_REGRESSION or arch.num_classes != 2:
        raise ModelError("output perturbation needs a two-class regression model")
    if not lam > 0 or not eps > 0 or n < 1:
        raise ModelError("need lam > 0, eps > 0 and n >= 1")
    (w, bias), = model.params.layers
    if np.any(bias != 0):
        raise ModelError("output perturbation assumes a model without intercept")
    d = arch.input_dim
    scale = 2.0 / (n * lam * eps)
    rng = stream(seed, "output-perturbation")
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    noise = rng.gamma(shape=d, scale=scale) * direction
    new_w = w.copy()
    new_w[1] += noise
    return TrainedModel(
        arch,
        ModelParams([(new_w, bias.copy())]),
        model.avg_train_loss,
        model.config_digest,
        scale,
        PrivacyBudget(eps, 0.0),
        {**model.info, "laplace_scale": scale},
    )


# --------------------------------------------------------------------------
# checkpoints


def _model_payload(model: TrainedModel) -> dict:
    rec = model.accountant_record
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "layers": [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in model.params.layers
        ],
        "avg_train_loss": model.avg_train_loss,
        "config_digest": model.config_digest,
        "sigma_used": model.sigma_used,
        "accountant_record": None if rec is None else {"epsilon": rec.epsilon, "delta": rec.delta},
    }


def checkpoint_bytes(model: TrainedModel) -> bytes:
    return (json.dumps(_model_payload(model), sort_keys=True, indent=1) + "\n").encode()


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path}: not a dplab checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    a = doc["arch"]
    arch = ModelArch(ModelKind(a["kind"]), a["input_dim"], a["num_classes"], tuple(a["hidden_widths"]))
    layers = [
        (np.array(L["weight"], dtype=np.float64).reshape(L["weight_shape"]), np.array(L["bias"], dtype=np.float64))
        for L in doc["layers"]
    ]
    if [w.shape for w, _ in layers] != arch.layer_shapes:
        raise ModelError(f"{path}: layer shapes do not match the architecture")
    rec = doc["accountant_record"]
    return TrainedModel(
        arch,
        ModelParams(layers),
        float(doc["avg_train_loss"]),
        doc["config_digest"],
        float(doc["sigma_used"]),
        None if rec is None else PrivacyBudget(rec["epsilon"], rec["delta"]),
    )

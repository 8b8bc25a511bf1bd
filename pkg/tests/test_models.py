import math

import numpy as np
import pytest

from fdcheck import run_battery
from oracles import central_difference, relative_error
from dplab.accountant import PrivacyBudget
from dplab.data import Dataset, SplitSpec, split, synth_multiclass
from dplab.models import (
    AdamState,
    ClipMode,
    ModelArch,
    ModelError,
    ModelKind,
    ModelParams,
    TrainingConfig,
    TrainingDivergedError,
    adam_step,
    checkpoint_bytes,
    clip,
    fit_binary_lr,
    forward,
    gradient,
    init_params,
    load_checkpoint,
    output_perturb_binary_lr,
    per_example_loss,
    private_gradient,
    save_checkpoint,
    train,
)
from dplab.rng import stream


@pytest.fixture(scope="module")
def separable():
    ds = synth_multiclass(2000, 20, 10, margin=1.0, spread=0.3, seed=0)
    return split(ds, SplitSpec(1000, 1000))


# ---------------------------------------------------------------- architecture


def test_arch_invariants():
    assert ModelArch.softmax(4, 3).layer_shapes == [(3, 4)]
    assert ModelArch.mlp(4, 3).layer_shapes == [(256, 4), (256, 256), (3, 256)]
    with pytest.raises(ModelError):
        ModelArch(ModelKind.MLP, 4, 3, ())
    with pytest.raises(ModelError):
        ModelArch(ModelKind.SOFTMAX_REGRESSION, 4, 3, (5,))


def test_params_flatten_round_trip():
    arch = ModelArch.mlp(3, 2, (4,))
    p = init_params(arch, np.random.default_rng(0))
    flat = p.flatten()
    assert flat.size == p.num_params == 3 * 4 + 4 + 4 * 2 + 2
    q = p.with_flat(flat * 2)
    assert np.array_equal(q.flatten(), flat * 2)
    assert p.weight_mask().sum() == 3 * 4 + 4 * 2


# ---------------------------------------------------------------- forward / loss


def test_forward_examples():
    zero = init_params(ModelArch.softmax(5, 4), np.random.default_rng(0))
    assert np.allclose(forward(zero, np.ones(5) * 0.3), 0.25)
    w = np.array([[0.0], [math.log(3)]])
    p = ModelParams([(w, np.zeros(2))])
    assert np.allclose(forward(p, np.array([1.0])), [0.25, 0.75], atol=1e-15)
    with pytest.raises(ModelError):
        forward(zero, np.ones(3))


def test_forward_sums_to_one_and_permutes():
    rng = np.random.default_rng(1)
    arch = ModelArch.mlp(6, 5, (7, 4))
    p = init_params(arch, rng)
    x = rng.standard_normal((30, 6)) * 0.3
    out = forward(p, x)
    assert np.all(out > 0) and np.all(out < 1)
    assert np.allclose(out.sum(axis=1), 1, atol=1e-9)
    perm = rng.permutation(5)
    layers = list(p.layers)
    w, b = layers[-1]
    layers[-1] = (w[perm], b[perm])
    assert np.allclose(forward(ModelParams(layers), x), out[:, perm])


def test_loss_examples():
    w = np.array([[0.0], [800.0]])
    p = ModelParams([(w, np.zeros(2))])
    assert per_example_loss(p, np.array([1.0]), 1) == 0.0
    uni = init_params(ModelArch.softmax(3, 100), np.random.default_rng(0))
    assert per_example_loss(uni, np.ones(3) * 0.1, 7) == pytest.approx(math.log(100))
    half = ModelParams([(np.zeros((2, 1)), np.zeros(2))])
    assert per_example_loss(half, np.array([0.5]), 0) == pytest.approx(math.log(2))
    with pytest.raises(ModelError):
        per_example_loss(half, np.array([0.5]), 2)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", list(ModelKind))
def test_gradient_finite_differences(kind):
    errs = run_battery(kind, 100, seed=11)
    assert max(errs) <= 1e-5


def test_fd_small_worked_instance():
    rng = np.random.default_rng(5)
    arch = ModelArch.mlp(4, 3, (5,))
    p = init_params(arch, rng)
    x = rng.standard_normal((5, 4)) * 0.4
    y = rng.integers(0, 3, 5)
    g = gradient(p, x, y, 0.0, ClipMode.BATCH).aggregate
    from dplab.models import objective

    fd = central_difference(lambda t: objective(p.with_flat(t), x, y, 0.0), p.flatten())
    assert relative_error(g, fd) <= 1e-5


def test_duplicated_example_identical_gradients():
    rng = np.random.default_rng(2)
    p = init_params(ModelArch.mlp(4, 3, (6,)), rng)
    x = np.vstack([rng.standard_normal(4)] * 2) * 0.3
    g = gradient(p, x, [1, 1]).per_example
    assert np.array_equal(g[0], g[1])


def test_gradient_vanishes_at_fit():
    w = np.array([[0.0, 0.0], [60.0, 0.0]])
    p = ModelParams([(w, np.zeros(2))])
    g = gradient(p, np.array([[1.0, 0.0]]), [1], 0.0).per_example[0]
    assert np.linalg.norm(g) <= 1e-8


def test_gradient_empty_batch():
    p = init_params(ModelArch.softmax(2, 2), np.random.default_rng(0))
    with pytest.raises(ModelError):
        gradient(p, np.empty((0, 2)), np.empty(0, dtype=int))


# ---------------------------------------------------------------- clipping


def test_clip_examples():
    g = np.array([0.0, 2.0])
    assert np.array_equal(clip(g, 1.0), g / 2)
    h = np.array([0.3, 0.4])
    assert clip(h, 1.0) is h
    z = np.zeros(3)
    assert np.array_equal(clip(z, 1.0), z)
    tie = np.array([0.6, 0.8])
    assert np.array_equal(clip(tie, 1.0), tie)
    with pytest.raises(ModelError):
        clip(g, 0.0)


def test_clip_property():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        g = rng.standard_normal(rng.integers(1, 50)) * rng.uniform(0, 10)
        c = rng.uniform(0.01, 5)
        assert np.linalg.norm(clip(g, c)) <= c + 1e-12


def test_debug_training_has_no_clip_violations(separable):
    tr, _, _ = separable
    arch = ModelArch.mlp(tr.dim, 10, (16, 16))
    m = train(tr, TrainingConfig(arch, batch_size=100, epochs=2, clip_threshold=0.05, noise_sigma=1.0), debug=True)
    assert m.info["clip_violations"] == 0
    assert m.info["clip_checks"] == 2 * 1000
    assert m.info["max_clipped_norm"] <= 0.05 + 1e-12


# ---------------------------------------------------------------- ADAM


def test_adam_zero_gradient_keeps_params():
    s = AdamState.start(np.array([1.0, -2.0]))
    for _ in range(50):
        s = adam_step(s, np.zeros(2), 0.1)
    assert np.array_equal(s.params, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.2, 1e-3])
    s = adam_step(AdamState.start(np.zeros(3)), g, 0.01)
    assert np.allclose(s.params, -0.01 * np.sign(g), rtol=1e-4)
    assert s.t == 1


def test_adam_minimizes_quadratic():
    s = AdamState.start(np.array([1.0]))
    for _ in range(2000):
        s = adam_step(s, 2 * s.params, 0.01)
        if abs(s.params[0]) < 1e-3:
            break
    assert abs(s.params[0]) < 1e-3


# ---------------------------------------------------------------- training


def test_nonprivate_training_separable(separable):
    tr, te, _ = separable
    m = train(tr, TrainingConfig(ModelArch.softmax(tr.dim, 10), batch_size=100, epochs=30))
    assert m.accuracy(te.features, te.labels) >= 0.9
    assert m.info["steps"] == 30 * 10


def test_training_is_deterministic(separable):
    tr, _, _ = separable
    cfg = TrainingConfig(ModelArch.mlp(tr.dim, 10, (8,)), batch_size=128, epochs=3, noise_sigma=2.0, seed=9)
    a, b = train(tr, cfg), train(tr, cfg)
    assert a.digest() == b.digest()
    assert a.params.flatten().tobytes() == b.params.flatten().tobytes()
    c = train(tr, TrainingConfig(cfg.arch, batch_size=128, epochs=3, noise_sigma=2.0, seed=10))
    assert c.digest() != a.digest()


def test_huge_noise_gives_chance_accuracy(separable):
    tr, te, _ = separable
    accs = [
        train(tr, TrainingConfig(ModelArch.softmax(tr.dim, 10), batch_size=100, epochs=30, noise_sigma=1e6, seed=s))
        .accuracy(te.features, te.labels)
        for s in range(5)
    ]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_noise_scaling_isolated(separable):
    tr, _, _ = separable
    arch = ModelArch.mlp(tr.dim, 10, (8,))
    params = init_params(arch, stream(0, "train/init"))
    xb, yb = tr.features[:50], tr.labels[:50]
    base = TrainingConfig(arch, batch_size=50, lam=0.01, clip_threshold=0.5)
    g0, _, _ = private_gradient(params, xb, yb, base, None)
    deltas = {}
    for sigma in (1.0, 2.0):
        cfg = TrainingConfig(arch, batch_size=50, lam=0.01, clip_threshold=0.5, noise_sigma=sigma)
        g, _, _ = private_gradient(params, xb, yb, cfg, stream(3, "train/noise"))
        deltas[sigma] = g - g0
    assert np.allclose(deltas[2.0], 2 * deltas[1.0], rtol=1e-12, atol=1e-15)
    expected_std = 1.0 * 2 * 0.5 / 50
    assert np.std(deltas[1.0]) == pytest.approx(expected_std, rel=0.05)
    assert np.var(deltas[2.0]) / np.var(deltas[1.0]) == pytest.approx(4.0, rel=1e-9)


def test_batch_clip_mode_trains(separable):
    tr, te, _ = separable
    m = train(tr, TrainingConfig(ModelArch.softmax(tr.dim, 10), batch_size=100, epochs=20, clip_mode="BATCH"))
    assert m.accuracy(te.features, te.labels) >= 0.9


def test_mlp_memorizes_random_labels():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 50))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    ds = Dataset(x, rng.integers(0, 10, 1000), 10)
    m = train(ds, TrainingConfig(ModelArch.mlp(50, 10), batch_size=200, epochs=100))
    assert m.accuracy(ds.features, ds.labels) >= 0.99


def test_divergence_guard(separable):
    tr, _, _ = separable
    with pytest.raises(TrainingDivergedError) as exc:
        train(tr, TrainingConfig(ModelArch.mlp(tr.dim, 10, (32,)), learning_rate=1e4, batch_size=100, epochs=5))
    assert exc.value.step >= 1


def test_config_validation(separable):
    tr, _, _ = separable
    arch = ModelArch.softmax(tr.dim, 10)
    with pytest.raises(ModelError):
        TrainingConfig(arch, noise_sigma=1.0, clip_threshold=math.inf)
    with pytest.raises(ModelError):
        TrainingConfig(arch, learning_rate=0.0)
    with pytest.raises(ModelError):
        train(tr, TrainingConfig(arch, batch_size=5000))
    with pytest.raises(ModelError):
        train(tr, TrainingConfig(ModelArch.softmax(3, 10)))


def test_avg_train_loss_excludes_regularizer(separable):
    tr, _, _ = separable
    arch = ModelArch.softmax(tr.dim, 10)
    a = train(tr, TrainingConfig(arch, batch_size=100, epochs=2, lam=0.1))
    b = train(tr, TrainingConfig(arch, batch_size=100, epochs=2, lam=0.1, loss_includes_reg=True))
    assert a.avg_train_loss == pytest.approx(float(np.mean(a.losses(tr.features, tr.labels))), rel=1e-12)
    assert b.avg_train_loss > a.avg_train_loss


# ---------------------------------------------------------------- output perturbation


@pytest.fixture(scope="module")
def binary():
    ds = synth_multiclass(1000, 10, 2, margin=1.0, spread=0.5, seed=2, label_noise=0.1)
    return ds, fit_binary_lr(ds, 0.01)


def test_binary_lr_is_exact_minimizer(binary):
    ds, m = binary
    w = m.params.layers[0][0]
    assert np.all(w[0] == 0)
    s = np.where(ds.labels == 1, 1.0, -1.0)

    def obj(theta):
        return float(np.mean(np.logaddexp(0, -s * (ds.features @ theta))) + 0.005 * theta @ theta)

    assert np.linalg.norm(central_difference(obj, w[1])) < 1e-7


def test_output_perturbation_scale(binary):
    ds, m = binary
    out = output_perturb_binary_lr(m, 1000, 0.01, 1.0, seed=0)
    assert out.sigma_used == pytest.approx(0.2)
    assert out.accountant_record == PrivacyBudget(1.0, 0.0)
    same = output_perturb_binary_lr(m, 1000, 0.01, 1e9, seed=0)
    assert np.allclose(same.params.flatten(), m.params.flatten(), atol=1e-9)
    norms = [
        np.linalg.norm(output_perturb_binary_lr(m, 1000, 0.01, 1.0, seed=s).params.layers[0][0][1] - m.params.layers[0][0][1])
        for s in range(400)
    ]
    # the norm is Gamma(d, scale): mean d*scale, sd sqrt(d)*scale
    assert np.mean(norms) == pytest.approx(10 * 0.2, abs=4 * math.sqrt(10) * 0.2 / math.sqrt(400))


def test_output_perturbation_preconditions(binary):
    _, m = binary
    with pytest.raises(ModelError):
        output_perturb_binary_lr(m, 1000, 0.0, 1.0, 0)
    multi = train(
        synth_multiclass(100, 4, 3, seed=0),
        TrainingConfig(ModelArch.softmax(4, 3), batch_size=50, epochs=1),
    )
    with pytest.raises(ModelError):
        output_perturb_binary_lr(multi, 100, 0.01, 1.0, 0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, separable):
    tr, te, _ = separable
    m = train(tr, TrainingConfig(ModelArch.mlp(tr.dim, 10, (8,)), batch_size=100, epochs=2, noise_sigma=1.0))
    m.accountant_record = PrivacyBudget(3.5, 1e-5)
    p = tmp_path / "m.json"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert back.digest() == m.digest()
    assert checkpoint_bytes(back) == p.read_bytes()
    assert back.params.flatten().tobytes() == m.params.flatten().tobytes()
    assert back.accountant_record == m.accountant_record
    assert np.array_equal(back.losses(te.features, te.labels), m.losses(te.features, te.labels))


def test_checkpoint_rejects_foreign(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ModelError):
        load_checkpoint(p)
    p.write_text('{"format": "dplab-checkpoint", "format_version": 99}')
    with pytest.raises(ModelError, match="version"):
        load_checkpoint(p)

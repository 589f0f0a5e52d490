"""White-box attacks on differentiable models."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstkit.attacks import (
    AdvBatch, AttackConfig, bim, ce_input_gradient, cw_l2, fgsm, perturbation_stats, pgd, predict, run_attack,
)
from dstkit.core import load_arrays, ops
from dstkit.nets import LeNet, SubstituteNet, TargetMLP, init_params
from dstkit.oracle import TargetOracle

from oracles import norms_scalar


class Linear2:
    """Two-class model with logits (0, w·x + b)."""

    def __init__(self, w, b=0.0):
        w = np.asarray(w, dtype=np.float64)
        self.w = np.stack([np.zeros_like(w), w], axis=1)
        self.b = np.array([0.0, float(b)])

    def __call__(self, x):
        return ops.bias_add(ops.matmul(x, self.w), self.b)


def _mlp(seed, k=3, d=2):
    return init_params(TargetMLP(d, k, (16,)), seed, std=1.0)


def test_fgsm_linear_example():
    model = Linear2([2.0, -3.0])
    cfg = AttackConfig("fgsm", epsilon=0.1, clamp=(-1.0, 1.0))
    out = fgsm(model, np.zeros((1, 2)), [0], cfg)
    np.testing.assert_allclose(out.adversarial - out.original, [[0.1, -0.1]], atol=1e-15)


def test_epsilon_zero_is_identity():
    x = np.random.default_rng(0).uniform(size=(5, 2))
    model = _mlp(0)
    for method in ("fgsm", "bim", "pgd"):
        out = run_attack(model, x, predict(model, x), AttackConfig(method, epsilon=0.0))
        np.testing.assert_array_equal(out.adversarial, x)
        assert perturbation_stats(out) == (0.0, 0.0)


def test_fgsm_moves_every_nonzero_gradient_coordinate_by_epsilon():
    model = init_params(LeNet((1, 8, 8), 4), 1, std=0.5)
    x = np.random.default_rng(1).uniform(0.2, 0.8, size=(3, 1, 8, 8))
    y = predict(model, x)
    g = ce_input_gradient(model, x, y)
    out = fgsm(model, x, y, AttackConfig("fgsm", epsilon=0.05))
    delta = np.abs(out.adversarial - x)
    np.testing.assert_allclose(delta[g != 0], 0.05, atol=1e-12)
    assert (delta[g == 0] == 0).all()


def test_fgsm_zero_gradient_warns():
    model = Linear2([0.0, 0.0])
    with pytest.warns(RuntimeWarning, match="zero input gradient"):
        fgsm(model, np.full((1, 2), 0.5), [0], AttackConfig("fgsm", epsilon=0.1))


def test_one_step_bim_equals_fgsm():
    model = _mlp(2)
    x = np.random.default_rng(2).uniform(size=(20, 2))
    y = predict(model, x)
    a = fgsm(model, x, y, AttackConfig("fgsm", epsilon=0.1))
    b = bim(model, x, y, AttackConfig("bim", epsilon=0.1, step_size=0.1, steps=1))
    np.testing.assert_array_equal(a.adversarial, b.adversarial)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("pgd", epsilon=0.01, step_size=0.1)
    with pytest.raises(ValueError):
        AttackConfig("deepfool")
    with pytest.raises(ValueError):
        AttackConfig("pgd", steps=0)
    with pytest.raises(ValueError):
        AttackConfig("pgd", epsilon=-0.1)
    with pytest.warns(RuntimeWarning, match="budget"):
        bim(_mlp(0), np.full((1, 2), 0.5), [0], AttackConfig("bim", epsilon=0.3, step_size=0.01, steps=5))


@pytest.mark.filterwarnings("ignore:.*budget cannot be reached")
@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["fgsm", "bim", "pgd"]), st.floats(0.0, 0.5), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_budget_invariant_every_iterate(method, eps, steps, seed):
    rng = np.random.default_rng(seed)
    model = _mlp(seed % 7)
    x = rng.uniform(size=(8, 2))
    step = eps / 2 if eps > 0 else 0.01
    cfg = AttackConfig(method, epsilon=eps, step_size=step, steps=steps)
    record = []
    if method == "fgsm":
        out = fgsm(model, x, predict(model, x), cfg)
    elif method == "bim":
        out = bim(model, x, predict(model, x), cfg, record=record)
    else:
        out = pgd(model, x, predict(model, x), cfg, rng=rng, record=record)
    for it in record + [out.adversarial]:
        assert (np.abs(it - x) <= eps + 1e-9).all()
        assert it.min() >= 0.0 and it.max() <= 1.0
    assert (out.linf <= eps + 1e-9).all()


@pytest.mark.filterwarnings("ignore:.*budget cannot be reached")
def test_pgd_seeded_determinism_and_distinct_starts():
    model = _mlp(3)
    x = np.random.default_rng(3).uniform(size=(10, 2))
    y = predict(model, x)
    cfg = AttackConfig("pgd", epsilon=0.2, step_size=0.01, steps=3)
    a = pgd(model, x, y, cfg, np.random.default_rng(5))
    b = pgd(model, x, y, cfg, np.random.default_rng(5))
    c = pgd(model, x, y, cfg, np.random.default_rng(6))
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert not np.array_equal(a.adversarial, c.adversarial)
    assert (c.linf <= 0.2 + 1e-9).all()


def test_pgd_success_nondecreasing_in_steps():
    """Mean success over 20 random models; one-sided tolerance of 2 points."""
    steps_grid = (1, 5, 10, 20, 40)
    rates = np.zeros(len(steps_grid))
    for seed in range(20):
        model = _mlp(100 + seed, k=4)
        x = np.random.default_rng(seed).uniform(size=(50, 2))
        y = predict(model, x)
        for i, s in enumerate(steps_grid):
            cfg = AttackConfig("pgd", epsilon=0.05, step_size=0.005, steps=s)
            with pytest.warns(RuntimeWarning) if s * 0.005 < 0.05 else _null():
                out = pgd(model, x, y, cfg, np.random.default_rng(seed))
            rates[i] += 100 * (out.pred_after != y).mean() / 20
    assert (np.diff(rates) >= -2.0).all(), rates
    assert rates[-1] > rates[0]


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


@pytest.mark.parametrize("method", ["fgsm", "bim", "pgd"])
def test_binary_targeted_untargeted_duality(method):
    model = _mlp(4, k=2)
    x = np.random.default_rng(4).uniform(size=(30, 2))
    y = predict(model, x)
    base = dict(epsilon=0.1, step_size=0.02, steps=5)
    u = run_attack(model, x, y, AttackConfig(method, **base), np.random.default_rng(1))
    t = run_attack(model, x, 1 - y, AttackConfig(method, targeted=True, **base), np.random.default_rng(1))
    np.testing.assert_array_equal(u.adversarial, t.adversarial)


def test_cw_matches_analytic_margin_distance():
    # boundary x0 + x1 = 1; distance from (0.3, 0.3) is 0.4 / sqrt(2)
    model = Linear2([1.0, 1.0], -1.0)
    x = np.array([[0.3, 0.3], [0.2, 0.5]])
    y = predict(model, x)
    assert (y == 0).all()
    out = cw_l2(model, x, y, AttackConfig("cw"))
    analytic = np.abs(x.sum(axis=1) - 1.0) / math.sqrt(2)
    assert out.success.all()
    assert (out.pred_after != y).all()
    np.testing.assert_allclose(out.l2, analytic, rtol=0.05)


def test_cw_best_so_far_and_failure_returns_original():
    model = _mlp(5)
    x = np.random.default_rng(5).uniform(0.2, 0.8, size=(6, 2))
    y = predict(model, x)
    out = cw_l2(model, x, y, AttackConfig("cw", cw_search_steps=3, cw_iterations=50))
    succ = out.success
    assert (out.pred_after[succ] != y[succ]).all()
    np.testing.assert_array_equal(out.adversarial[~succ], x[~succ])
    assert out.adversarial.min() >= 0 and out.adversarial.max() <= 1
    # a model whose decision never changes: nothing succeeds, the input comes back
    const = Linear2([0.0, 0.0], -5.0)
    out = cw_l2(const, x[:2], [0, 0], AttackConfig("cw", cw_search_steps=2, cw_iterations=20))
    assert not out.success.any()
    np.testing.assert_array_equal(out.adversarial, x[:2])


def test_perturbation_stats_examples():
    x = np.zeros((1, 5))
    adv = np.array([[0.3, -0.4, 0.0, 0.0, 0.0]])
    batch = AdvBatch(x, adv, np.array([0.4]), np.array([0.5]), np.array([0]), np.array([0]))
    l2, linf = perturbation_stats(batch)
    assert l2 == pytest.approx(0.5, abs=1e-15) and linf == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(ValueError):
        perturbation_stats(AdvBatch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0)))


def test_perturbation_stats_match_scalar_oracle():
    model = init_params(LeNet((1, 8, 8), 3), 6, std=0.5)
    x = np.random.default_rng(6).uniform(size=(7, 1, 8, 8))
    out = pgd(model, x, predict(model, x), AttackConfig("pgd", epsilon=0.1, step_size=0.05, steps=3))
    rows = (out.adversarial - x).reshape(7, -1).tolist()
    l2_ref, linf_ref = zip(*norms_scalar(rows))
    l2, linf = perturbation_stats(out)
    assert l2 == pytest.approx(sum(l2_ref) / 7, abs=1e-12)
    assert linf == pytest.approx(sum(linf_ref) / 7, abs=1e-12)


def test_attacks_accept_gated_substitute_and_never_query():
    sub = init_params(SubstituteNet((2,), 3, (8, 8)), 7, std=0.5)
    oracle = TargetOracle.in_process(_mlp(7))
    x = np.random.default_rng(7).uniform(size=(10, 2))
    before = oracle.ledger_snapshot()
    for method in ("fgsm", "bim", "pgd", "cw"):
        cfg = AttackConfig(method, epsilon=0.1, step_size=0.05, steps=2, cw_search_steps=1, cw_iterations=5)
        run_attack(sub, x, predict(sub, x), cfg)
    assert oracle.ledger_snapshot() == before


def test_adv_batch_export(tmp_path):
    model = _mlp(8)
    x = np.random.default_rng(8).uniform(size=(4, 2))
    out = fgsm(model, x, predict(model, x), AttackConfig("fgsm", epsilon=0.1))
    out.save(tmp_path / "adv")
    arrays, meta = load_arrays(tmp_path / "adv.ckpt")
    np.testing.assert_array_equal(arrays["adversarial"], out.adversarial)
    side = json.loads((tmp_path / "adv.json").read_text())
    assert meta["method"] == "fgsm" and len(side["examples"]) == 4
    assert side["examples"][2]["linf"] == float(out.linf[2])

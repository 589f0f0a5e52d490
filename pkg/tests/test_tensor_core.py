"""Tensor, tape, ops, Adam, gradient checks and the checkpoint container."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstkit.core import (
    Adam, AdamState, AttrError, BackwardError, CheckpointError, Module, ShapeError, Tape, Tensor,
    adam_step, backward, check_function, grad_check, load_arrays, ops, save_arrays,
)
from dstkit.core.checkpoint import MAGIC
from dstkit.nets import Dense, init_params

from oracles import adam_scalar

TOL = 1e-5


# -- forward ------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.forward("matmul", [a, np.eye(2)]).data, a)


def test_softmax_symmetric():
    np.testing.assert_array_equal(ops.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_global_avg_pool_of_ones():
    out = ops.global_avg_pool(np.ones((1, 4, 3, 5)))
    np.testing.assert_array_equal(out.data, np.ones((1, 4)))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_unknown_op_and_bad_attr():
    with pytest.raises(AttrError):
        ops.forward("nope", [np.ones(2)])
    with pytest.raises(AttrError):
        ops.forward("conv2d", [np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))], dilation=2)


def test_log_and_div_are_floored():
    assert ops.log(np.array([0.0])).data[0] == pytest.approx(np.log(1e-12))
    assert np.isfinite(ops.div(np.array([1.0]), np.array([0.0])).data).all()


def test_overflow_raises_instead_of_inf():
    with pytest.raises(FloatingPointError):
        ops.exp(np.array([1e4]))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out = ops.conv2d(x, w, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


# -- backward -----------------------------------------------------------------

def test_linear_form_gradient():
    w = np.array([0.5, -1.0, 2.0])
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    grads = backward(ops.sum(ops.mul(x, w)))
    np.testing.assert_array_equal(grads[id(x)], w)


def test_square_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(BackwardError):
        backward(ops.mul(x, 2.0))
    with pytest.raises(BackwardError):
        backward(ops.sum(Tensor(np.ones(3))))


def test_tape_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.exp(ops.mul(x, 2.0))
    loss = ops.sum(ops.add(y, y))
    tape = Tape.from_loss(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


def test_tape_consumed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(ops.exp(x))
    backward(loss)
    assert loss._parents == () and not loss.requires_grad


def test_backward_linearity():
    rng = np.random.default_rng(0)
    xa = rng.standard_normal((3, 4))

    def grads_of(build):
        x = Tensor(xa, requires_grad=True)
        return backward(build(x))[id(x)]

    f1 = lambda x: ops.sum(ops.tanh(x))
    f2 = lambda x: ops.mean(ops.mul(x, x))
    both = grads_of(lambda x: ops.add(f1(x), f2(x)))
    np.testing.assert_allclose(both, grads_of(f1) + grads_of(f2), rtol=0, atol=1e-15)


def _two_layer(seed):
    class Net(Module):
        def __init__(self):
            self.l1 = Dense(4, 6)
            self.l2 = Dense(6, 3)

        def forward(self, x):
            return self.l2(ops.tanh(self.l1(x)))

    net = init_params(Net(), seed, std=0.5)
    for p in net.parameters().values():
        p.data += np.random.default_rng(seed + 1).uniform(-0.1, 0.1, p.shape)
    return net


@pytest.mark.parametrize("seed", range(3))
def test_two_layer_net_matches_finite_differences(seed):
    net = _two_layer(seed)
    x = np.random.default_rng(seed).standard_normal((5, 4))
    report = grad_check(net, x, tolerance=TOL)
    assert report.passed, report.groups
    assert report.worst() < TOL


def test_dense_softmax_kl_grad_check():
    net = init_params(Dense(4, 3), 1, std=0.5)
    target = np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]])

    def kl(logits):
        p = ops.softmax(logits)
        return ops.sum(ops.mul(target, ops.sub(ops.log(target), ops.log(p))))

    report = grad_check(net, np.random.default_rng(0).standard_normal((2, 4)), loss_fn=kl)
    assert report.passed and report.worst() < TOL


def test_frozen_parameters_absent_from_report():
    net = _two_layer(0)
    net.l1.freeze()
    names = set(grad_check(net, np.ones((2, 4))).by_name())
    assert names == {"l2.weight", "l2.bias"}


def test_grad_check_reports_rather_than_raises():
    class Wrong(Module):
        def __init__(self):
            self.w = Tensor(np.array([1.5]), requires_grad=True)

        def forward(self, x):
            # gradient deliberately wrong: treats w as constant inside the square
            out = ops.mul(ops.mul(self.w, Tensor(self.w.data)), x)
            return out

    report = grad_check(Wrong(), np.array([2.0]))
    assert not report.passed


# -- per-op finite-difference property ------------------------------------------

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


OP_CASES = {
    "add": (lambda a, b: ops.add(a, b), lambda r, s: [r.standard_normal(s), r.standard_normal(s[-1:])]),
    "sub": (lambda a, b: ops.sub(a, b), lambda r, s: [r.standard_normal(s), r.standard_normal(s)]),
    "mul": (lambda a, b: ops.mul(a, b), lambda r, s: [r.standard_normal(s), r.standard_normal((1,) + s[1:])]),
    "div": (lambda a, b: ops.div(a, b), lambda r, s: [r.standard_normal(s), _pos(r, s)]),
    "neg": (lambda a: ops.neg(a), lambda r, s: [r.standard_normal(s)]),
    "power": (lambda a: ops.power(a, 1.7), lambda r, s: [_pos(r, s)]),
    "exp": (lambda a: ops.exp(a), lambda r, s: [r.standard_normal(s)]),
    "log": (lambda a: ops.log(a), lambda r, s: [_pos(r, s)]),
    "relu": (lambda a: ops.relu(a), lambda r, s: [r.standard_normal(s)]),
    "sigmoid": (lambda a: ops.sigmoid(a), lambda r, s: [r.standard_normal(s)]),
    "tanh": (lambda a: ops.tanh(a), lambda r, s: [r.standard_normal(s)]),
    "clamp": (lambda a: ops.clamp(a, -0.5, 0.7), lambda r, s: [r.standard_normal(s)]),
    "softmax": (lambda a: ops.softmax(a), lambda r, s: [r.standard_normal(s)]),
    "log_softmax": (lambda a: ops.log_softmax(a), lambda r, s: [r.standard_normal(s)]),
    "matmul": (lambda a, b: ops.matmul(a, b), lambda r, s: [r.standard_normal(s), r.standard_normal((s[1], 3))]),
    "bias_add": (lambda a, b: ops.bias_add(a, b), lambda r, s: [r.standard_normal(s), r.standard_normal(s[1])]),
    "sum": (lambda a: ops.sum(a, axis=0), lambda r, s: [r.standard_normal(s)]),
    "mean": (lambda a: ops.mean(a, axis=1, keepdims=True), lambda r, s: [r.standard_normal(s)]),
    "max": (lambda a: ops.max(a, axis=1), lambda r, s: [r.standard_normal(s)]),
    "reshape": (lambda a: ops.reshape(a, (-1,)), lambda r, s: [r.standard_normal(s)]),
    "transpose": (lambda a: ops.transpose(a), lambda r, s: [r.standard_normal(s)]),
    "hard_sigmoid": (lambda a: ops.hard_sigmoid(a, 1.0), lambda r, s: [r.uniform(-0.45, 0.45, s)]),
    "pairwise_distance": (lambda a: ops.pairwise_distance(a), lambda r, s: [r.standard_normal(s)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_over_random_shapes(name):
    fn, make = OP_CASES[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        errs = check_function(fn, make(rng, shape), seed=seed)
        assert max(errs) < TOL, (name, seed, errs)


@pytest.mark.parametrize("seed", range(10))
def test_spatial_op_gradients(seed):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = w = 2 * int(rng.integers(2, 4))
    x = rng.standard_normal((n, c, h, w))
    k = rng.standard_normal((2, c, 3, 3))
    stride = int(rng.integers(1, 3))
    assert max(check_function(lambda a, b: ops.conv2d(a, b, stride, 1), [x, k])) < TOL
    assert max(check_function(lambda a: ops.avg_pool2d(a, 2), [x])) < TOL
    assert max(check_function(ops.global_avg_pool, [x])) < TOL
    assert max(check_function(lambda a: ops.upsample_nearest(a, 2), [x])) < TOL
    assert max(check_function(ops.flatten, [x])) < TOL


def test_ste_binarize_passes_gradient_through():
    soft = Tensor(np.array([0.2, 0.5, 0.9]), requires_grad=True)
    out = ops.ste_binarize(soft, 0.5)
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 1.0])
    backward(ops.sum(ops.mul(out, np.array([1.0, 2.0, 3.0]))))
    np.testing.assert_array_equal(soft.grad, [1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_is_a_distribution(values):
    p = ops.softmax(np.array(values)).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12


def test_forward_backward_deterministic():
    def run():
        net = _two_layer(7)
        x = np.random.default_rng(7).standard_normal((4, 4))
        loss = ops.sum(ops.mul(net(Tensor(x)), net(Tensor(x))))
        grads = backward(loss)
        return loss.data.tobytes(), [grads[id(p)].tobytes() for p in net.parameters().values()]

    assert run() == run()


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(learning_rate=0.1)
    adam_step({"p": p}, {"p": np.array([0.5, 0.5])}, state)
    before = p.data.copy()
    m_before, v_before = state.m["p"].copy(), state.v["p"].copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    # m decays to 0.9 m; with zero gradient the update is lr * m_hat/(sqrt(v_hat)+eps), nonzero,
    # so check the pure zero case from fresh moments instead
    np.testing.assert_allclose(state.m["p"], 0.9 * m_before)
    np.testing.assert_allclose(state.v["p"], 0.999 * v_before)
    fresh = Tensor(before.copy(), requires_grad=True)
    adam_step({"p": fresh}, {"p": np.zeros(2)}, AdamState(learning_rate=0.1))
    np.testing.assert_array_equal(fresh.data, before)


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_adam_first_step_matches_scalar_oracle(g):
    p = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState(learning_rate=0.01)
    adam_step({"p": p}, {"p": np.array([g])}, state)
    assert p.data[0] == pytest.approx(adam_scalar(0.7, [g], 0.01), rel=0, abs=1e-15)
    assert np.sign(p.data[0] - 0.7) == -np.sign(g)
    assert abs(p.data[0] - 0.7) == pytest.approx(0.01, rel=1e-4)


def test_adam_multi_step_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    gs = rng.standard_normal(25)
    p = Tensor(np.array([0.2]), requires_grad=True)
    state = AdamState(learning_rate=0.05)
    for g in gs:
        adam_step({"p": p}, {"p": np.array([g])}, state)
    assert p.data[0] == pytest.approx(adam_scalar(0.2, list(gs), 0.05), abs=1e-13)
    assert state.step == 25


def test_adam_identical_params_stay_identical():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"a": a, "b": b}, 0.1)
    for g in (np.array([1.0, -1.0, 0.5]), np.array([0.1, 0.2, 0.3])):
        opt.step({id(a): g, id(b): g.copy()})
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_errors_name_the_parameter():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(FloatingPointError, match="weights"):
        adam_step({"weights": p}, {"weights": np.array([np.nan, 0.0])}, AdamState(learning_rate=0.1))
    with pytest.raises(ShapeError):
        adam_step({"weights": p}, {"weights": np.ones(3)}, AdamState(learning_rate=0.1))


# -- checkpoints --------------------------------------------------------------

def _arrays():
    rng = np.random.default_rng(0)
    return {"w": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-300]),
            "i": np.arange(5, dtype=np.int64), "m": np.array([True, False])}


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    arrays = _arrays()
    save_arrays(tmp_path / "a.ckpt", arrays, meta={"epoch": 3})
    loaded, meta = load_arrays(tmp_path / "a.ckpt")
    assert meta == {"epoch": 3}
    for k, v in arrays.items():
        assert loaded[k].dtype == v.dtype and loaded[k].tobytes() == v.tobytes()


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    save_arrays(tmp_path / "a.ckpt", _arrays(), meta={"k": [1, 2]})
    loaded, meta = load_arrays(tmp_path / "a.ckpt")
    save_arrays(tmp_path / "b.ckpt", loaded, meta=meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout_starts_with_magic_and_manifest(tmp_path):
    save_arrays(tmp_path / "a.ckpt", {"x": np.ones(2)})
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob[:8] == MAGIC == b"DSTCKPT1"
    (n,) = struct.unpack("<Q", blob[8:16])
    assert b'"tensors"' in blob[16:16 + n]


def test_checkpoint_float32_export(tmp_path):
    save_arrays(tmp_path / "a.ckpt", {"x": np.array([0.1, 0.2])}, export_dtype="float32")
    loaded, _ = load_arrays(tmp_path / "a.ckpt")
    assert loaded["x"].dtype == np.float32


def test_checkpoint_bad_magic_truncation_version(tmp_path):
    path = tmp_path / "a.ckpt"
    save_arrays(path, {"x": np.ones(4)})
    blob = path.read_bytes()
    path.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(path)
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError):
        load_arrays(path)
    path.write_bytes(blob.replace(b'"version":1', b'"version":9'))
    with pytest.raises(CheckpointError, match="version"):
        load_arrays(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from microcount import tensor as T
from microcount.tensor import ops
from microcount.tensor import flops as fl
from microcount.tensor.core import ActivationPattern


def leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# -- forward values ------------------------------------------------------------

def test_matmul_identity_and_hand_product():
    a = T.Tensor(np.arange(6).reshape(2, 3))
    assert np.array_equal(T.matmul(a, T.Tensor(np.eye(3))).data, a.data)
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_conv_examples():
    x = T.Tensor(np.arange(25, dtype=float).reshape(1, 1, 5, 5))
    assert np.array_equal(T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1)))).data, x.data)
    out = T.conv2d(T.Tensor(np.ones((1, 1, 5, 5))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 9)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 0), (7, 3, 2, 1), (8, 7, 2, 3), (5, 1, 2, 0), (6, 2, 2, 0)])
def test_conv_output_size(h, k, s, p):
    out = T.conv2d(T.Tensor(np.zeros((1, 2, h, h))), T.Tensor(np.zeros((3, 2, k, k))), stride=s, padding=p)
    assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_conv_against_direct_loop():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
    assert np.allclose(out, ref, atol=1e-5)


def test_conv_errors():
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax(T.Tensor(np.full((1, 4), 2.5))).data, 0.25)
    assert np.allclose(T.softmax(T.Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-7)
    x = np.random.default_rng(1).standard_normal((3, 5))
    assert np.allclose(T.softmax(T.Tensor(x)).data, T.softmax(T.Tensor(x + 7.0)).data, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_stochastic(x):
    out = T.softmax(T.Tensor(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm_relu_mean_pool():
    x = np.random.default_rng(2).standard_normal((4, 16)) * 3 + 5
    out = T.layernorm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)
    assert np.all(T.relu(T.Tensor(-np.abs(x) - 0.1)).data == 0)
    assert T.mean_pool(T.Tensor([2.0, 4.0, 6.0])).item() == 4.0


def test_gelu_values():
    x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    from scipy.stats import norm
    assert np.allclose(T.gelu(T.Tensor(x)).data, x * norm.cdf(x), atol=1e-6)


def test_max_pool_values():
    x = T.Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
    assert np.array_equal(T.max_pool2d(x, 2).data[0, 0], [[5, 7], [13, 15]])
    out = T.max_pool2d(x, 3, 2, 1)
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data[0, 0], [[5, 7], [13, 15]])


def test_batchnorm_modes():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((4, 3, 5, 5)) * 2 + 1)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    g, b = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    out = T.batchnorm2d(x, g, b, rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)), atol=1e-6)
    ev = T.batchnorm2d(x, g, b, rm, rv, training=False).data
    ref = (x.data - rm.reshape(1, -1, 1, 1)) / np.sqrt(rv.reshape(1, -1, 1, 1) + 1e-5)
    assert np.allclose(ev, ref, atol=1e-5)


# -- reverse pass ----------------------------------------------------------------

def test_backward_simple_losses():
    theta = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_(theta))
    assert np.array_equal(theta.grad, [1, 1])
    theta.zero_grad()
    T.backward(T.sum_(T.square(theta)))
    assert np.array_equal(theta.grad, [2, 4])


def test_backward_accumulates():
    theta = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum_(theta * theta)
    loss.backward()
    loss.backward()
    assert np.array_equal(theta.grad, [4, 8])


def test_backward_rejects_non_scalar():
    theta = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(theta * 2.0)


def test_matmul_grad_is_ones_times_bt():
    rng = np.random.default_rng(4)
    a, b = leaf(rng, 3, 4), T.Tensor(rng.standard_normal((4, 2)))
    T.backward(T.sum_(T.matmul(a, b)))
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-6)


def test_shared_node_gradient():
    x = T.Tensor([3.0], requires_grad=True)
    y = x * x
    T.backward(T.sum_(y + y * x))   # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert np.allclose(x.grad, [6 + 27])


def test_no_grad_builds_no_graph():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_getitem_grad_with_repeated_indices():
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    T.backward(T.sum_(x[np.array([0, 0, 2])]))
    assert np.array_equal(x.grad, [2, 0, 1, 0])


# -- finite-difference checks -----------------------------------------------------

def _primitive_cases():
    rng = np.random.default_rng(5)
    x = leaf(rng, 3, 5, 6)
    w, b = leaf(rng, 6, 4), leaf(rng, 4)
    g, s = T.Tensor(1 + 0.2 * rng.standard_normal(6), requires_grad=True), leaf(rng, 6)
    img = leaf(rng, 2, 3, 7, 7)
    k, kb = leaf(rng, 4, 3, 3, 3, scale=0.3), leaf(rng, 4)
    k1 = leaf(rng, 5, 3, 1, 1)
    q, kk, v = leaf(rng, 2, 2, 5, 4), leaf(rng, 2, 2, 5, 4), leaf(rng, 2, 2, 5, 4)
    bn_g, bn_b = T.Tensor(1 + 0.2 * rng.standard_normal(3), requires_grad=True), leaf(rng, 3)
    tgt = rng.standard_normal((3, 5, 6))
    pos = T.Tensor(np.abs(rng.standard_normal((3, 5, 6))) + 0.5, requires_grad=True)
    return {
        "add": (lambda: x + s, [x, s]),
        "sub": (lambda: x - s, [x, s]),
        "mul": (lambda: x * s, [x, s]),
        "div": (lambda: x / pos, [x, pos]),
        "square": (lambda: T.square(x), [x]),
        "linear": (lambda: T.linear(x, w, b), [x, w, b]),
        "matmul": (lambda: T.matmul(q, T.swap_last(kk)), [q, kk]),
        "gelu": (lambda: T.gelu(x), [x]),
        "relu": (lambda: T.relu(x), [x]),
        "softmax": (lambda: T.softmax(x, axis=-1), [x]),
        "layernorm": (lambda: T.layernorm(x, g, s), [x, g, s]),
        "l2_normalize": (lambda: T.l2_normalize(x, axis=1), [x]),
        "sum": (lambda: T.sum_(x, axis=(0, 2)), [x]),
        "mean": (lambda: T.mean(x, axis=1), [x]),
        "reshape_transpose": (lambda: T.transpose(T.reshape(x, (5, 3, 6)), (2, 0, 1)) * 1.5, [x]),
        "getitem_concat": (lambda: T.concat([x[:, 1:], x[:, :2]], axis=1), [x]),
        "expand": (lambda: T.expand(T.reshape(s, (1, 1, 6)), (3, 5, 6)) * x, [s, x]),
        "conv3x3": (lambda: T.conv2d(img, k, kb, stride=2, padding=1), [img, k, kb]),
        "conv1x1": (lambda: T.conv2d(img, k1, None, stride=2), [img, k1]),
        "max_pool": (lambda: T.max_pool2d(img, 3, 2, 1), [img]),
        "batchnorm": (lambda: T.batchnorm2d(img, bn_g, bn_b, np.zeros(3, np.float32),
                                            np.ones(3, np.float32), True), [img, bn_g, bn_b]),
        "l1_loss": (lambda: T.l1_loss(x, tgt), [x]),
        "mse_loss": (lambda: T.mse_loss(x, tgt), [x]),
        "linear_gelu_linear": (lambda: T.linear(T.gelu(T.linear(x, w, b)), T.Tensor(np.ones((4, 2))) * s[:4, None] + 0.0, None), [x, w, b, s]),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_grad_check_primitive(name):
    fn, params = _primitive_cases()[name]
    report = T.grad_check(fn, params, directions=3)
    assert report.passed, (name, report.errors)


def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(6)
    x, w = leaf(rng, 4, 3), T.Tensor(rng.standard_normal((3, 2)))
    # no truncation error at any step, so a large step leaves only rounding
    report = T.grad_check(lambda: T.matmul(x, w), [x], directions=4, step=0.5)
    assert report.max_rel_error < 1e-5


def test_grad_check_catches_corrupted_rule(monkeypatch):
    rng = np.random.default_rng(7)
    x, w = leaf(rng, 4, 6), leaf(rng, 6, 3)
    clean = T.grad_check(lambda: T.gelu(T.linear(x, w)), [x, w])
    assert clean.passed

    real_gelu = ops.gelu

    def gelu_wrong_slope(t):
        out = real_gelu(t)
        rule = out.backward_fn
        if rule is not None:
            out.backward_fn = lambda g: tuple(r * 1.1 for r in rule(g))
        return out

    monkeypatch.setattr(ops, "gelu", gelu_wrong_slope)
    bad = T.grad_check(lambda: ops.gelu(T.linear(x, w)), [x, w])
    assert not bad.passed


def test_grad_check_skips_directions_across_kinks():
    # relu evaluated right at its kink: every probe flips a unit
    x = T.Tensor(np.array([0.0, 1.0]), requires_grad=True)
    report = T.grad_check(lambda: T.relu(x), [x], max_redraws=3)
    assert report.skipped > 0 and not report.passed
    assert report.margin == 0.0


def test_activation_pattern_margin():
    with ActivationPattern() as p:
        T.relu(T.Tensor([-0.3, 0.2]))
        T.max_pool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 3.5]]]])), 2)
    assert p.margin == pytest.approx(0.2)


# -- flop counting -----------------------------------------------------------------

def test_flops_linear_closed_form():
    k, m, n = 7, 5, 3
    x = T.Tensor(np.ones((k, m)))
    w, b = T.Tensor(np.ones((m, n))), T.Tensor(np.ones(n))
    with T.FlopCounter(flops_per_mac=2) as fc:
        T.linear(x, w, b)
    assert fc.total == 2 * k * m * n + k * n == fl.linear(k, m, n, True, 2)


def test_flops_conv_and_matmul_closed_form():
    with T.FlopCounter() as fc:
        T.conv2d(T.Tensor(np.ones((2, 3, 8, 8))), T.Tensor(np.ones((4, 3, 3, 3))), padding=1)
    assert fc.total == fl.conv2d(2, 3, 4, 8, 8, 3, bias=False)
    with T.FlopCounter(2) as fc:
        T.matmul(T.Tensor(np.ones((6, 2, 3))), T.Tensor(np.ones((6, 3, 4))))
    assert fc.total == fl.matmul(6, 2, 3, 4, 2)


def test_flop_counters_nest():
    with T.FlopCounter() as outer:
        T.relu(T.Tensor(np.ones(5)))
        with T.FlopCounter() as inner:
            T.relu(T.Tensor(np.ones(3)))
    assert (outer.total, inner.total) == (8, 3)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    tensors = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32),
               "b": rng.standard_normal(7).astype(np.float32),
               "scalar": np.float32(2.5).reshape(())}
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, tensors, {"preset": "toy", "epoch": 3})
    loaded, meta = T.load_checkpoint(path)
    assert meta == {"preset": "toy", "epoch": 3}
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    T.save_checkpoint(good, {"x": np.ones(4, np.float32)})
    good.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(good)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x, w = leaf(rng, 8, 16), leaf(rng, 16, 4)
        loss = T.mean(T.gelu(T.linear(x, w)))
        loss.backward()
        return loss.item(), w.grad.copy()
    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)

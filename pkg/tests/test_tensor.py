import numpy as np
import pytest

from vlmadapt import tensor as T
from vlmadapt.rng import Rng


def rand(rng, shape, scale=1.0):
    return T.Tensor(rng.normals(shape, scale), requires_grad=True)


# ---------------------------------------------------------------------------
# Forward-value oracles


def test_softmax_symmetry():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_inputs_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data[:2], 0.5)


def test_matmul_identity():
    rng = Rng(7)
    a = rng.normals((3, 5))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_shape_error_names_op():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_layer_norm_hand_value():
    # (x - mean) / sqrt(var + 1e-5) for x=[1,2,3]: mean 2, var 2/3
    g = T.Tensor(np.ones(3))
    b = T.Tensor(np.zeros(3))
    out = T.layer_norm(T.Tensor([1.0, 2.0, 3.0]), g, b)
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0 + 1e-5)
    assert np.allclose(out.data, expected, atol=1e-12)
    assert np.allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_cross_entropy_uniform():
    logits = T.Tensor(np.zeros((4, 8)))
    loss = T.cross_entropy(logits, np.array([0, 3, 5, 7]), reduction="sum")
    assert np.isclose(loss.item(), 4 * np.log(8))


def test_cosine_similarity_values():
    a = T.Tensor([1.0, 0.0]), T.Tensor([1.0, 0.0])
    assert np.isclose(T.cosine_similarity(*a).item(), 1.0)
    b = T.Tensor([1.0, 0.0]), T.Tensor([0.0, 2.0])
    assert np.isclose(T.cosine_similarity(*b).item(), 0.0)


def test_embedding_lookup_and_oob():
    table = T.Tensor(np.arange(12.0).reshape(4, 3))
    out = T.embedding(table, np.array([2, 0]))
    assert np.array_equal(out.data, [[6, 7, 8], [0, 1, 2]])
    with pytest.raises(T.ShapeError, match="embedding"):
        T.embedding(table, np.array([4]))


# ---------------------------------------------------------------------------
# Backward basics


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_scalar():
    x = T.Tensor([3.0], requires_grad=True)
    T.backward(T.sum_(x * x))
    assert np.allclose(x.grad, [6.0])


def test_backward_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * x)


def test_grad_accumulates_across_uses():
    x = T.Tensor([2.0], requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 5
    T.backward(T.sum_(y))
    assert np.allclose(x.grad, [5.0])


def test_backward_linearity():
    rng = Rng(11)
    base = rng.normals((4,))
    for a, b in [(2.0, 3.0), (-1.0, 0.5)]:
        x1 = T.Tensor(base, requires_grad=True)
        f = T.sum_(T.tanh(x1))
        g = T.sum_(x1 * x1)
        T.backward(f * T.Tensor(a) + g * T.Tensor(b))
        combined = x1.grad.copy()

        x2 = T.Tensor(base, requires_grad=True)
        T.backward(T.sum_(T.tanh(x2)))
        gf = x2.grad.copy()
        x3 = T.Tensor(base, requires_grad=True)
        T.backward(T.sum_(x3 * x3))
        gg = x3.grad.copy()
        assert np.allclose(combined, a * gf + b * gg, rtol=1e-12)


def test_no_grad_blocks_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y.parents == ()


def test_node_ids_increase_along_graph():
    x = T.Tensor([1.0], requires_grad=True)
    y = x * x
    z = y + x
    assert x.node_id < y.node_id < z.node_id


# ---------------------------------------------------------------------------
# Finite-difference oracle, every op kind


def central_diff_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent oracle: central finite differences of a scalar fn."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def assert_grad_matches(build, shapes, seed, n_trials=10, scale=1.0):
    """Compare analytic grads of scalar(build(inputs)) with central differences."""
    rng = Rng(seed)
    for trial in range(n_trials):
        arrays = [rng.normals(s, scale) for s in shapes]
        weights = rng.normals(tuple(build(*[T.Tensor(a) for a in arrays]).shape))

        def scalar(*arrs):
            out = build(*[T.Tensor(a) for a in arrs])
            return float((out.data * weights).sum())

        tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        T.backward(T.sum_(out * T.Tensor(weights)))
        for k, t in enumerate(tensors):
            def f(x, k=k):
                args = [a.copy() for a in arrays]
                args[k] = x
                return scalar(*args)

            numeric = central_diff_grad(f, arrays[k].copy())
            analytic = t.grad if t.grad is not None else np.zeros_like(arrays[k])
            denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
            rel = np.abs(analytic - numeric) / denom
            assert rel.max() < 1e-4, f"{build.__name__ if hasattr(build, '__name__') else build}: rel={rel.max()}"


OP_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)], {}),
    ("add_broadcast", lambda a, b: T.add(a, b), [(2, 3, 4), (4,)], {}),
    ("sub", lambda a, b: T.sub(a, b), [(5,), (5,)], {}),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)], {}),
    ("mul_broadcast", lambda a, b: T.mul(a, b), [(3, 4), (1, 4)], {}),
    ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), T.Tensor(1.0))), [(3, 3), (3, 3)], {}),
    ("matmul2d", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], {}),
    ("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)], {}),
    ("matmul_bcast", lambda a, b: T.matmul(a, b), [(2, 2, 3, 2), (1, 2, 2, 3)], {}),
    ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)], {}),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)], {}),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
    ("slice", lambda a: T.slice_(a, (slice(1, 3), slice(None, 2))), [(4, 4)], {}),
    ("softmax", lambda a: T.softmax(a), [(3, 5)], {}),
    ("log_softmax", lambda a: T.log_softmax(a), [(3, 5)], {}),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(4, 6), (6,), (6,)], {}),
    ("tanh", lambda a: T.tanh(a), [(4, 4)], {}),
    ("gelu", lambda a: T.gelu(a), [(4, 4)], {}),
    ("exp", lambda a: T.exp(a), [(3, 3)], {}),
    ("log", lambda a: T.log(T.add(T.mul(a, a), T.Tensor(0.5))), [(3, 3)], {}),
    ("sqrt", lambda a: T.sqrt(T.add(T.mul(a, a), T.Tensor(0.5))), [(3, 3)], {}),
    ("mean_all", lambda a: T.mean(a), [(3, 4)], {}),
    ("mean_axis", lambda a: T.mean(a, axis=0), [(3, 4)], {}),
    ("sum_all", lambda a: T.sum_(a), [(3, 4)], {}),
    ("sum_axis", lambda a: T.sum_(a, axis=1), [(3, 4)], {}),
    ("cosine", lambda a, b: T.cosine_similarity(a, b), [(6,), (6,)], {}),
]


@pytest.mark.parametrize("name,build,shapes,kw", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_finite_difference_ops(name, build, shapes, kw):
    assert_grad_matches(build, shapes, seed=hash(name) & 0xFFFF, n_trials=8)


def test_finite_difference_embedding():
    rng = Rng(404)
    ids = np.array([1, 3, 0, 1])
    assert_grad_matches(lambda t: T.embedding(t, ids), [(4, 3)], seed=404, n_trials=8)


def test_finite_difference_cross_entropy():
    targets = np.array([1, 0, 4])

    def build(logits):
        return T.cross_entropy(logits, targets, reduction="sum")

    assert_grad_matches(build, [(3, 5)], seed=777, n_trials=8)

    def build_mean(logits):
        return T.cross_entropy(logits, targets, reduction="mean")

    assert_grad_matches(build_mean, [(3, 5)], seed=778, n_trials=8)


def test_finite_difference_composite_graph():
    # A small attention-like composite touching many op kinds at once.
    def build(x, w, g, b):
        h = T.matmul(x, w)
        h = T.layer_norm(h, g, b)
        att = T.softmax(T.matmul(h, T.transpose(h)))
        out = T.matmul(att, h)
        return T.tanh(out)

    assert_grad_matches(build, [(3, 4), (4, 4), (4,), (4,)], seed=2024, n_trials=6)

"""Reverse-mode gradients against central finite differences."""
import numpy as np
import pytest

from vlmtrace.autodiff import Graph, GraphError, ParamStore, apply_update, backprop, finite_difference_gradient

from conftest import rel_err

FD_STEP = 1e-4
TOL = 1e-4


def _store(arrays):
    ps = ParamStore()
    for k, v in arrays.items():
        ps.add(k, v, "mlp")
    return ps


def _check(build, arrays, seed):
    """Compare backprop of sum(out * R) with finite differences for every input."""
    ps = _store(arrays)
    g = Graph()
    out = build(g, ps.leaves(g, True))
    proj = np.random.default_rng(seed).normal(size=out.shape)
    root = g.sum(g.mul(out, g.leaf(proj)))
    analytic = g.backward(root)

    def f(p):
        g2 = Graph()
        return float((build(g2, p.leaves(g2, False)).data * proj).sum())

    numeric = finite_difference_gradient(f, ps, FD_STEP)
    for k in arrays:
        assert rel_err(analytic[k], numeric[k]) < TOL, k


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


def _cases(rng):
    B, T, d, e = (int(v) for v in rng.integers(1, 4, size=4))
    T += 1
    mask = np.tril(np.ones((T, T), dtype=bool))
    V = int(rng.integers(3, 7))
    ids = rng.integers(0, V, size=(B, T))
    targets = rng.integers(0, V, size=(B, T))
    weights = (rng.random((B, T)) < 0.6).astype(float)
    weights[:, -1] = 1.0
    return {
        "add": (lambda g, P: g.add(P["a"], P["b"]), {"a": rng.normal(size=(B, T, d)), "b": rng.normal(size=(T, d))}),
        "add_bias": (lambda g, P: g.add_bias(P["x"], P["b"]), {"x": rng.normal(size=(B, T, d)), "b": rng.normal(size=d)}),
        "add_bias_stacked": (lambda g, P: g.add_bias(P["x"], P["b"]),
                             {"x": rng.normal(size=(B, T, d)), "b": rng.normal(size=(B, d))}),
        "mul": (lambda g, P: g.mul(P["a"], P["b"]), {"a": rng.normal(size=(B, d)), "b": rng.normal(size=(1, d))}),
        "scale": (lambda g, P: g.scale(P["a"], -1.7), {"a": rng.normal(size=(B, d))}),
        "matmul": (lambda g, P: g.matmul(P["a"], P["b"]), {"a": rng.normal(size=(B, T, d)), "b": rng.normal(size=(d, e))}),
        "matmul_batched": (lambda g, P: g.matmul(P["a"], P["b"]),
                           {"a": rng.normal(size=(B, 2, T, d)), "b": rng.normal(size=(B, 2, d, e))}),
        "matmul_stacked_weight": (lambda g, P: g.matmul(P["a"], P["b"]),
                                  {"a": rng.normal(size=(B, T, d)), "b": rng.normal(size=(B, d, e))}),
        "relu": (lambda g, P: g.relu(P["x"]), {"x": _away_from_zero(rng, (B, d))}),
        "gelu": (lambda g, P: g.gelu(P["x"]), {"x": rng.normal(size=(B, T, d))}),
        "softmax": (lambda g, P: g.softmax(P["x"]), {"x": rng.normal(size=(B, d + 1))}),
        "softmax_masked": (lambda g, P: g.softmax(P["x"], mask), {"x": rng.normal(size=(B, T, T))}),
        "layer_norm": (lambda g, P: g.layer_norm(P["x"]), {"x": rng.normal(size=(B, T, d + 1))}),
        "embedding": (lambda g, P: g.embedding(P["t"], ids), {"t": rng.normal(size=(V, d))}),
        "embedding_stacked": (lambda g, P: g.embedding(P["t"], ids), {"t": rng.normal(size=(B, V, d))}),
        "reshape": (lambda g, P: g.reshape(P["x"], (B, T * d)), {"x": rng.normal(size=(B, T, d))}),
        "transpose": (lambda g, P: g.transpose(P["x"], (2, 0, 1)), {"x": rng.normal(size=(B, T, d))}),
        "concat": (lambda g, P: g.concat([P["a"], P["b"]], axis=1),
                   {"a": rng.normal(size=(B, T, d)), "b": rng.normal(size=(B, 2, d))}),
        "cross_entropy": (lambda g, P: g.cross_entropy(P["z"], targets, weights), {"z": rng.normal(size=(B, T, V))}),
        "sum": (lambda g, P: g.sum(P["x"]), {"x": rng.normal(size=(B, d))}),
        "mean": (lambda g, P: g.mean(P["x"]), {"x": rng.normal(size=(B, T, d))}),
        "two_layer_net": (lambda g, P: g.matmul(g.gelu(g.add_bias(g.matmul(P["x"], P["w1"]), P["b1"])), P["w2"]),
                          {"x": rng.normal(size=(B, d)), "w1": rng.normal(size=(d, e + 1)),
                           "b1": rng.normal(size=e + 1), "w2": rng.normal(size=(e + 1, 2))}),
    }


OPS = sorted(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_primitive_matches_finite_differences(op):
    # 20 random shape/value configurations per primitive
    for seed in range(20):
        build, arrays = _cases(np.random.default_rng([seed, OPS.index(op)]))[op]
        _check(build, arrays, seed)


def test_quadratic_gradient():
    g = Graph()
    w = g.leaf([1.0, -2.0, 3.0], requires_grad=True, name="w")
    grads = backprop(g, g.sum(g.mul(w, w)))
    np.testing.assert_array_equal(grads["w"], [2.0, -4.0, 6.0])


def test_constant_root_gives_zero_gradient():
    g = Graph()
    w = g.leaf([1.0, 2.0], requires_grad=True, name="w")
    c = g.leaf([3.0, 4.0])
    grads = g.backward(g.sum(c))
    np.testing.assert_array_equal(grads["w"], [0.0, 0.0])


def test_non_scalar_root_rejected():
    g = Graph()
    w = g.leaf([1.0, 2.0], requires_grad=True, name="w")
    with pytest.raises(GraphError):
        g.backward(g.scale(w, 2.0))


def test_second_backward_rejected():
    g = Graph()
    w = g.leaf([1.0, 2.0], requires_grad=True, name="w")
    root = g.sum(g.mul(w, w))
    g.backward(root)
    with pytest.raises(GraphError):
        g.backward(root)


def test_non_finite_output_rejected():
    g = Graph()
    x = g.leaf([1e308], requires_grad=True, name="x")
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        g.scale(x, 10.0)


def test_fd_square():
    ps = _store({"t": np.array([3.0])})
    grad = finite_difference_gradient(lambda p: float(p["t"][0] ** 2), ps, 1e-4)
    assert abs(grad["t"][0] - 6.0) < 1e-6


@pytest.mark.parametrize("h", [1e-1, 1e-3, 0.5])
def test_fd_linear_is_exact(h):
    ps = _store({"t": np.array([0.25])})
    grad = finite_difference_gradient(lambda p: 4.0 * float(p["t"][0]), ps, h)
    assert grad["t"][0] == pytest.approx(4.0, abs=1e-12)


def test_fd_reports_non_finite_coordinate():
    ps = _store({"t": np.array([0.0, 1.0])})
    # finite unless the second coordinate moves
    f = lambda p: 0.0 if p["t"][1] == 1.0 else float("inf")  # noqa: E731
    with pytest.raises(FloatingPointError, match=r"t\[1\]"):
        finite_difference_gradient(f, ps, 1e-3)


def test_apply_update_examples():
    ps = _store({"w": np.array([1.0, 1.0])})
    apply_update(ps, {"w": np.array([2.0, -2.0])}, 0.5)
    np.testing.assert_array_equal(ps["w"], [2.0, 0.0])
    before = ps["w"].copy()
    apply_update(ps, {"w": np.array([5.0, 5.0])}, 0.0)
    np.testing.assert_array_equal(ps["w"], before)


def test_apply_update_ascent_descent_roundtrip(rng):
    w = rng.normal(size=(4, 5))
    ps = _store({"w": w.copy()})
    d = {"w": rng.normal(size=(4, 5))}
    apply_update(ps, d, 1e-4)
    apply_update(ps, d, -1e-4)
    assert np.max(np.abs(ps["w"] - w)) < 1e-12


def test_apply_update_shape_mismatch_leaves_store_untouched():
    ps = _store({"a": np.zeros(2), "b": np.zeros(3)})
    with pytest.raises(ValueError):
        apply_update(ps, {"a": np.ones(2), "b": np.ones(4)}, 1.0)
    np.testing.assert_array_equal(ps["a"], 0.0)


def test_clone_is_independent_and_bit_identical(rng):
    ps = _store({"w": rng.normal(size=(3, 3))})
    c = ps.clone()
    assert c.checksum() == ps.checksum()
    c.entries["w"][0, 0] += 1.0
    assert c.checksum() != ps.checksum()


def test_store_rejects_duplicates_and_unknown_groups():
    ps = _store({"w": np.zeros(1)})
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(1), "mlp")
    with pytest.raises(ValueError):
        ps.add("v", np.zeros(1), "nonsense")


def test_float32_graph_keeps_dtype():
    g = Graph(np.float32)
    x = g.leaf(np.ones((2, 2)), requires_grad=True, name="x")
    y = g.sum(g.matmul(x, x))
    assert y.data.dtype == np.float32
    assert g.backward(y)["x"].dtype == np.float32

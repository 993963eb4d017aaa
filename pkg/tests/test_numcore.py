"""Autodiff core: primitive contracts, finite-difference oracles, Adam, clipping."""

import math

import numpy as np
import pytest

from modalmix import numcore as nc


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def test_softmax_symmetry_on_zeros():
    out = nc.softmax(nc.constant([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_sum_to_one():
    x = nc.constant(rng().normal(size=(7, 11)) * 5)
    rows = nc.softmax(x).data.sum(axis=-1)
    assert np.abs(rows - 1.0).max() < 1e-9


def test_layer_norm_constant_vector_is_zero_before_affine():
    gamma = nc.constant(np.ones(6))
    beta = nc.constant(np.zeros(6))
    out = nc.layer_norm(nc.constant(np.full((3, 6), 4.2)), gamma, beta)
    assert np.array_equal(out.data, np.zeros((3, 6)))


def test_layer_norm_affine_bias_passes_through_on_constant_rows():
    gamma = nc.constant(np.ones(4) * 2.0)
    beta = nc.constant(np.arange(4.0))
    out = nc.layer_norm(nc.constant(np.full((2, 4), -1.0)), gamma, beta)
    assert np.array_equal(out.data, np.tile(np.arange(4.0), (2, 1)))


def test_matmul_matches_triple_loop_oracle():
    r = rng(7)
    a, b = r.normal(size=(2, 3)), r.normal(size=(3, 2))
    expect = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expect[i, j] += a[i, k] * b[k, j]
    got = nc.matmul(nc.constant(a), nc.constant(b)).data
    assert np.allclose(got, expect, atol=1e-12)


def test_matmul_shape_error_names_primitive_and_extents():
    with pytest.raises(nc.ShapeError, match="matmul.*\\(2, 3\\)"):
        nc.matmul(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((4, 2))))


def test_cross_entropy_nonnegative_and_zero_iff_onehot():
    logits = nc.constant([[100.0, -100.0, -100.0], [0.0, 1.0, 0.0]])
    out = nc.cross_entropy(logits, [0, 1]).data
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] > 0.0
    assert (out >= 0.0).all()


def test_cross_entropy_uniform_logits_is_log_k():
    out = nc.cross_entropy(nc.constant(np.zeros((5, 40))), np.zeros(5, dtype=int)).data
    assert np.allclose(out, math.log(40), atol=1e-12)


def test_embedding_lookup_and_out_of_range():
    table = nc.constant(np.arange(12.0).reshape(4, 3))
    out = nc.embedding_lookup(table, [2, 0, 2])
    assert np.array_equal(out.data, table.data[[2, 0, 2]])
    with pytest.raises(nc.ShapeError, match="embedding_lookup"):
        nc.embedding_lookup(table, [4])


def test_forward_primitive_dispatch_covers_contract_names():
    for op in ("matmul", "add", "scale", "layer_norm", "softmax", "gelu",
               "embedding_lookup", "concat_lastdim", "cross_entropy"):
        assert op in nc._PRIMITIVES
    out = nc.forward_primitive("add", nc.constant([1.0]), nc.constant([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(nc.ShapeError, match="unknown primitive"):
        nc.forward_primitive("conv2d", nc.constant([1.0]))


def test_non_finite_output_is_rejected():
    with pytest.raises(nc.NonFiniteError):
        nc.scale(nc.constant([1e308]), 1e10)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = nc.parameter("x", rng().normal(size=(3, 4)))
    with nc.Graph() as g:
        loss = nc.sum_all(x)
        grads = nc.backward(g, loss)
    assert np.array_equal(grads["x"].data, np.ones((3, 4)))


def test_backward_half_sum_of_squares_gives_x():
    xv = rng(1).normal(size=(5,))
    x = nc.parameter("x", xv)
    with nc.Graph() as g:
        row = nc.reshape(x, (1, 5))
        loss = nc.scale(nc.sum_all(nc.matmul(row, nc.transpose(row, (1, 0)))), 0.5)
        grads = nc.backward(g, loss)
    assert np.allclose(grads["x"].data, xv, atol=1e-12)


def test_backward_requires_scalar_loss():
    x = nc.parameter("x", np.ones(3))
    with nc.Graph() as g:
        y = nc.scale(x, 2.0)
        with pytest.raises(nc.ShapeError, match="scalar"):
            nc.backward(g, y)


def test_backward_two_layer_composite_matches_finite_differences():
    r = rng(3)
    params = {
        "w1": nc.parameter("w1", r.normal(size=(6, 8)) / math.sqrt(6)),
        "b1": nc.parameter("b1", r.normal(size=8) * 0.1),
        "w2": nc.parameter("w2", r.normal(size=(8, 5)) / math.sqrt(8)),
        "g": nc.parameter("g", np.ones(8)),
        "be": nc.parameter("be", np.zeros(8)),
    }
    x = nc.constant(r.normal(size=(9, 6)))
    t = r.integers(0, 5, size=9)

    def make_loss():
        h = nc.gelu(nc.add(nc.matmul(x, params["w1"]), params["b1"]))
        h = nc.layer_norm(h, params["g"], params["be"])
        return nc.mean_all(nc.cross_entropy(nc.matmul(h, params["w2"]), t))

    err = nc.grad_check(make_loss, params, epsilon=1e-5, min_coords=200)
    assert err < 1e-4


PRIMITIVE_CASES = {
    "matmul": lambda p, x: nc.matmul(nc.transpose(x, (1, 0)), p),
    "add_bias": lambda p, x: nc.add(x, p),
    "scale": lambda p, x: nc.scale(p, 1.7),
    "softmax": lambda p, x: nc.softmax(p),
    "log_softmax": lambda p, x: nc.log_softmax(p),
    "gelu": lambda p, x: nc.gelu(p),
    "concat_lastdim": lambda p, x: nc.concat_lastdim(x, p),
    "row_gather": lambda p, x: nc.row_gather(p, [2, 0, 2, 3]),
    "row_slice": lambda p, x: nc.row_slice(p, 1, 4),
    "replace_rows": lambda p, x: nc.replace_rows(x, p, [0, 3]) if p.data.ndim == 1 else nc.replace_rows(p, nc.constant(np.ones(p.data.shape[1])), [1]),
    "scale_rows": lambda p, x: nc.scale_rows(p, np.array([1.0, 0.0, 2.0, 1.0, 0.5])),
    "transpose": lambda p, x: nc.transpose(p, (1, 0)),
    "reshape": lambda p, x: nc.reshape(p, (20,)),
    "layer_norm": lambda p, x: nc.layer_norm(p, nc.constant(np.full(4, 1.3)), nc.constant(np.full(4, 0.2))),
    "cross_entropy": lambda p, x: nc.cross_entropy(p, [0, 3, 1, 2, 0]),
    "embedding": lambda p, x: nc.embedding_lookup(p, [0, 2, 4, 2]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_every_primitive_agrees_with_finite_differences(name):
    r = rng(hash(name) % 2**32)
    shape = (4,) if name == "replace_rows" else (5, 4)
    p = nc.parameter("p", r.normal(size=shape))
    x = nc.constant(r.normal(size=(5, 4)))
    build = PRIMITIVE_CASES[name]

    def make_loss():
        return nc.mean_all(build(p, x))

    err = nc.grad_check(make_loss, {"p": p}, epsilon=1e-5, min_coords=p.size)
    assert err < 1e-4, f"{name}: {err}"


def test_grad_check_linear_layer_is_tight():
    r = rng(11)
    w = nc.parameter("w", r.normal(size=(6, 3)))
    x = nc.constant(r.normal(size=(4, 6)))

    def make_loss():
        return nc.mean_all(nc.matmul(x, w))

    assert nc.grad_check(make_loss, {"w": w}, min_coords=18) < 1e-6


def test_grad_check_detects_corrupted_backward_rule():
    w = nc.parameter("w", rng(5).normal(size=(4, 4)))

    def bad_square(t):
        # forward t**2 but gradient deliberately claims 3t
        return nc._record("bad_square", (t,), t.data ** 2, lambda g: (3.0 * t.data * g,))

    def make_loss():
        return nc.mean_all(bad_square(w))

    assert nc.grad_check(make_loss, {"w": w}, min_coords=16) > 1e-2


def test_forward_and_backward_are_bitwise_deterministic():
    def run():
        r = rng(21)
        w = nc.parameter("w", r.normal(size=(6, 6)))
        x = nc.constant(r.normal(size=(10, 6)))
        with nc.Graph() as g:
            h = nc.gelu(nc.matmul(x, w))
            loss = nc.mean_all(nc.cross_entropy(h, r.integers(0, 6, size=10)))
            grads = nc.backward(g, loss)
        return loss.item(), grads["w"].data

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# optimizer and clipping
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = {"w": nc.parameter("w", np.array([1.0, -2.0, 3.0]))}
    before = p["w"].data.copy()
    nc.adam_step(p, {"w": nc.Tensor(np.zeros(3))}, nc.AdamState(), lr=0.1)
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_has_bias_corrected_unit_magnitude():
    p = {"w": nc.parameter("w", np.array([0.5]))}
    nc.adam_step(p, {"w": nc.Tensor(np.array([1.0]))}, nc.AdamState(), lr=0.1)
    # first bias-corrected update is lr * g/(|g| + ~eps) ~= lr
    assert p["w"].data[0] == pytest.approx(0.5 - 0.1, abs=1e-6)


def test_adam_optimizes_quadratic():
    p = {"x": nc.parameter("x", np.array([1.0]))}
    state = nc.AdamState()
    for _ in range(100):
        g = 2.0 * p["x"].data  # d/dx x^2
        nc.adam_step(p, {"x": nc.Tensor(g)}, state, lr=0.05)
    assert abs(p["x"].data[0]) < 0.1


def test_adam_rejects_non_finite_gradient_naming_parameter():
    p = {"bad_param": nc.parameter("bad_param", np.ones(2))}
    with pytest.raises(nc.NonFiniteError, match="bad_param"):
        nc.adam_step(p, {"bad_param": nc.Tensor(np.array([np.nan, 1.0]))}, nc.AdamState(), 0.1)


def test_clip_grad_norm_under_limit_is_identity():
    g = {"a": nc.Tensor(np.array([0.3, 0.4]))}  # norm 0.5
    clipped, pre = nc.clip_grad_norm(g, 1.0)
    assert pre == pytest.approx(0.5)
    assert np.array_equal(clipped["a"].data, g["a"].data)


def test_clip_grad_norm_scales_homogeneously():
    g = {"a": nc.Tensor(np.array([4.0, 0.0])), "b": nc.Tensor(np.zeros(2))}
    clipped, pre = nc.clip_grad_norm(g, 1.0)
    assert pre == pytest.approx(4.0)
    assert np.allclose(clipped["a"].data, [1.0, 0.0], atol=1e-15)


def test_clip_grad_norm_random_post_norm_and_idempotence():
    r = rng(9)
    g = {f"p{i}": nc.Tensor(r.normal(size=(5, 3))) for i in range(4)}
    pre = math.sqrt(sum(float((t.data ** 2).sum()) for t in g.values()))
    clipped, reported = nc.clip_grad_norm(g, 1.0)
    post = math.sqrt(sum(float((t.data ** 2).sum()) for t in clipped.values()))
    assert reported == pytest.approx(pre, abs=1e-12)
    assert abs(post - min(pre, 1.0)) < 1e-10
    again, _ = nc.clip_grad_norm(clipped, 1.0)
    for k in g:
        assert np.array_equal(again[k].data, clipped[k].data)


def test_clip_grad_norm_requires_positive_max():
    with pytest.raises(ValueError):
        nc.clip_grad_norm({"a": nc.Tensor(np.ones(2))}, 0.0)

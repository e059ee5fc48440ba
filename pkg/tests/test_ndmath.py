"""Tests for the tensor/tape substrate."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from g2lformer import ndmath as nd
from g2lformer.ndmath import ContractError, SparseCSR, ShapeError, Tensor


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def random_csr(rng, rows, cols, density):
    mask = rng.random((rows, cols)) < density
    vals = rng.standard_normal((rows, cols)) * mask
    ro = np.r_[0, np.cumsum(mask.sum(1))]
    ci = np.concatenate([np.flatnonzero(mask[i]) for i in range(rows)]) if mask.any() else np.empty(0, int)
    return SparseCSR(rows, cols, ro, ci, vals[mask]), vals


def numeric_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


class TestMatmul:
    def test_identity(self):
        m = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(nd.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_case(self):
        out = nd.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        assert out.data.tolist() == [[17.0], [39.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            nd.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


class TestSpmm:
    def test_identity(self):
        m = np.random.default_rng(0).standard_normal((4, 3))
        assert np.array_equal(nd.spmm(SparseCSR.identity(4), Tensor(m)).data, m)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        s, dense = random_csr(rng, 8, 8, 0.3)
        d = rng.standard_normal((8, 4))
        assert np.allclose(s.to_dense(), dense, atol=0)
        assert np.max(np.abs(nd.spmm(s, Tensor(d)).data - dense @ d)) <= 1e-12

    def test_empty_sparse_gives_zero(self):
        s = SparseCSR(3, 3, np.zeros(4, int), np.empty(0, int), np.empty(0))
        out = nd.spmm(s, Tensor(np.ones((3, 2))))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            nd.spmm(SparseCSR.identity(3), Tensor(np.ones((4, 2))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 5), st.floats(0.0, 1.0), st.integers(0, 2**31))
    def test_property_dense_equivalence(self, rows, cols, k, density, seed):
        rng = np.random.default_rng(seed)
        s, dense = random_csr(rng, rows, cols, density)
        d = rng.standard_normal((cols, k))
        assert np.max(np.abs(nd.spmm(s, Tensor(d)).data - dense @ d), initial=0.0) <= 1e-12

    def test_gradient_wrt_dense_operand(self):
        rng = np.random.default_rng(2)
        s, dense = random_csr(rng, 5, 4, 0.5)
        d = leaf(rng.standard_normal((4, 3)))
        with nd.Tape() as tape:
            loss = nd.sum_all(nd.spmm(s, d))
        g = tape.backward(loss)[d]
        assert np.allclose(g, dense.T @ np.ones((5, 3)), atol=1e-12)


class TestFrobenius:
    @pytest.mark.parametrize("arr, expected", [
        ([[3, 4]], 5.0), (np.eye(2), np.sqrt(2.0)), (np.zeros((2, 2)), 0.0)])
    def test_values(self, arr, expected):
        assert nd.frobenius_norm(Tensor(arr)).item() == pytest.approx(expected, abs=1e-15)

    def test_squared_norm_gradient_is_2w(self):
        w = leaf([[3.0, 4.0]])
        with nd.Tape() as tape:
            n = nd.frobenius_norm(w)
            loss = nd.mul(n, n)
        assert np.allclose(tape.backward(loss)[w], [[6.0, 8.0]], atol=1e-12)


class TestActivations:
    def test_sigmoid_midpoint(self):
        assert nd.apply_activation(Tensor([[0.0]]), "sigmoid").item() == 0.5

    def test_leaky_relu(self):
        assert nd.apply_activation(Tensor([[-1.0]]), "leaky_relu", slope=0.01).item() == pytest.approx(-0.01)

    def test_relu(self):
        assert nd.apply_activation(Tensor([[-3.0]]), "relu").item() == 0.0

    def test_gradient_at_zero_is_positive_slope(self):
        x = leaf([[0.0]])
        with nd.Tape() as tape:
            y = nd.sum_all(nd.apply_activation(x, "leaky_relu"))
        assert tape.backward(y)[x].item() == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nd.apply_activation(Tensor([[1.0]]), "tanh")

    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
    def test_sigmoid_open_interval(self, x):
        out = nd.apply_activation(Tensor(x), "sigmoid").data
        assert np.all((out > 0) & (out < 1))


class TestConcatAndBroadcast:
    def test_concat_shape(self):
        assert nd.concat_cols(Tensor(np.ones((5, 3))), Tensor(np.ones((5, 3)))).shape == (5, 6)

    def test_concat_scalars(self):
        assert nd.concat_cols(Tensor([[1.0]]), Tensor([[2.0]])).data.tolist() == [[1.0, 2.0]]

    def test_concat_row_mismatch(self):
        with pytest.raises(ShapeError):
            nd.concat_cols(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))))

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_concat_then_slice_recovers_operands(self, n, ca, cb, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((n, ca)), rng.standard_normal((n, cb))
        c = nd.concat_cols(Tensor(a), Tensor(b))
        assert np.array_equal(nd.slice_cols(c, 0, ca).data, a)
        assert np.array_equal(nd.slice_cols(c, ca, ca + cb).data, b)

    def test_concat_gradient_routes_to_slices(self):
        a, b = leaf(np.ones((2, 1))), leaf(np.ones((2, 2)))
        w = Tensor([[1.0, 2.0, 3.0]])
        with nd.Tape() as tape:
            loss = nd.sum_all(nd.mul_row(nd.concat_cols(a, b), w))
        g = tape.backward(loss)
        assert np.array_equal(g[a], np.ones((2, 1)))
        assert np.array_equal(g[b], np.tile([2.0, 3.0], (2, 1)))

    def test_broadcast_identity(self):
        h = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(nd.hadamard_broadcast(Tensor(h), Tensor(np.ones((3, 1)))).data, h)

    def test_broadcast_halving(self):
        assert nd.hadamard_broadcast(Tensor([[2.0, 4.0]]), Tensor([[0.5]])).data.tolist() == [[1.0, 2.0]]

    def test_broadcast_row_mask(self):
        out = nd.hadamard_broadcast(Tensor(np.ones((2, 3))), Tensor([[1.0], [0.0]]))
        assert out.data.tolist() == [[1, 1, 1], [0, 0, 0]]

    def test_broadcast_needs_column(self):
        with pytest.raises(ShapeError):
            nd.hadamard_broadcast(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        w = leaf(np.random.default_rng(0).standard_normal((2, 2)))
        with nd.Tape() as tape:
            loss = nd.sum_all(w)
        assert np.array_equal(tape.backward(loss)[w], np.ones((2, 2)))

    def test_second_backward_rejected(self):
        w = leaf(np.ones((2, 2)))
        with nd.Tape() as tape:
            loss = nd.sum_all(w)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        w = leaf(np.ones((2, 2)))
        with nd.Tape() as tape:
            out = nd.scale(w, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_unreached_leaf_gets_zeros(self):
        w, u = leaf(np.ones((2, 2))), leaf(np.ones((1, 3)))
        with nd.Tape() as tape:
            loss = nd.sum_all(w)
        assert np.array_equal(tape.backward(loss, wrt=[w, u])[u], np.zeros((1, 3)))

    def test_shared_leaf_accumulates(self):
        w = leaf([[2.0]])
        with nd.Tape() as tape:
            loss = nd.add(nd.mul(w, w), w)
        assert tape.backward(loss)[w].item() == pytest.approx(5.0)


# op name -> (builder over a list of leaves, input shapes)
_UNARY_CASES = {
    "scale": (lambda x: nd.scale(x, -1.7), (3, 4)),
    "add_scalar": (lambda x: nd.add_scalar(x, 0.3), (3, 4)),
    "reciprocal": (lambda x: nd.reciprocal(nd.add_scalar(nd.mul(x, x), 1.0)), (3, 4)),
    "transpose": (lambda x: nd.transpose(x), (3, 4)),
    "sum_rows": (lambda x: nd.sum_rows(x), (3, 4)),
    "mean_rows": (lambda x: nd.mean_rows(x), (3, 4)),
    "mean_all": (lambda x: nd.mean_all(x), (3, 4)),
    "slice_cols": (lambda x: nd.slice_cols(x, 1, 3), (3, 4)),
    "gather_rows": (lambda x: nd.gather_rows(x, np.array([2, 0, 2, 1])), (3, 4)),
    "scatter_add_rows": (lambda x: nd.scatter_add_rows(x, np.array([1, 1, 0]), 4), (3, 4)),
    "select": (lambda x: nd.select(x, np.array([0, 2, 2]), np.array([1, 3, 3])), (3, 4)),
    "log_softmax": (lambda x: nd.log_softmax(x), (3, 4)),
    "sigmoid": (lambda x: nd.apply_activation(x, "sigmoid"), (3, 4)),
    "frobenius": (lambda x: nd.frobenius_norm(x), (3, 4)),
}

_BINARY_CASES = {
    "matmul": (lambda a, b: nd.matmul(a, b), (3, 4), (4, 2)),
    "add": (lambda a, b: nd.add(a, b), (3, 4), (3, 4)),
    "sub": (lambda a, b: nd.sub(a, b), (3, 4), (3, 4)),
    "mul": (lambda a, b: nd.mul(a, b), (3, 4), (3, 4)),
    "div": (lambda a, b: nd.div(a, nd.add_scalar(nd.mul(b, b), 0.5)), (3, 4), (3, 4)),
    "add_row": (lambda a, b: nd.add_row(a, b), (3, 4), (1, 4)),
    "mul_row": (lambda a, b: nd.mul_row(a, b), (3, 4), (1, 4)),
    "hadamard_broadcast": (lambda a, b: nd.hadamard_broadcast(a, b), (3, 4), (3, 1)),
    "div_scalar": (lambda a, b: nd.div_scalar(a, nd.add_scalar(nd.mul(b, b), 0.5)), (3, 4), (1, 1)),
    "concat_cols": (lambda a, b: nd.concat_cols(a, b), (3, 2), (3, 3)),
}


def _check_against_fd(build, arrays_in, weights_seed):
    rng = np.random.default_rng(weights_seed)
    probe_shape = build(*[Tensor(a) for a in arrays_in]).shape
    w = Tensor(rng.uniform(-1, 1, probe_shape))
    leaves = [leaf(a) for a in arrays_in]
    with nd.Tape() as tape:
        loss = nd.sum_all(nd.mul(build(*leaves), w))
    grads = tape.backward(loss, wrt=leaves)
    for i, a in enumerate(arrays_in):
        def f(x, i=i):
            args = [Tensor(x if j == i else arrays_in[j]) for j in range(len(arrays_in))]
            return float(np.sum(build(*args).data * w.data))
        fd = numeric_grad(f, a)
        rel = np.max(np.abs(grads[leaves[i]] - fd) / np.maximum(1.0, np.abs(fd)))
        assert rel <= 1e-5


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(_UNARY_CASES))
    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_unary(self, name, seed):
        build, shape = _UNARY_CASES[name]
        x = np.random.default_rng(seed).uniform(-1, 1, shape)
        _check_against_fd(build, [x], seed + 1)

    @pytest.mark.parametrize("name", sorted(_BINARY_CASES))
    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_binary(self, name, seed):
        build, sa, sb = _BINARY_CASES[name]
        rng = np.random.default_rng(seed)
        _check_against_fd(build, [rng.uniform(-1, 1, sa), rng.uniform(-1, 1, sb)], seed + 1)

    @pytest.mark.parametrize("kind", ["relu", "leaky_relu"])
    def test_piecewise_linear_away_from_kink(self, kind):
        x = np.array([[-0.7, 0.4, 0.9], [0.2, -0.3, -0.05]])
        _check_against_fd(lambda t: nd.apply_activation(t, kind), [x], 3)

    def test_abs_away_from_kink(self):
        _check_against_fd(nd.abs_, [np.array([[-0.7, 0.4], [0.2, -0.3]])], 4)


class TestGradCheck:
    def test_square_matches_analytic(self):
        store = nd.ParamStore(0)
        x = store.add("x", np.array([[3.0]]))
        with nd.Tape() as tape:
            loss = nd.mul(x, x)
        assert tape.backward(loss)[x].item() == pytest.approx(6.0, abs=1e-8)
        rep = nd.grad_check(lambda: nd.mul(x, x), store, tolerance=1e-8)
        assert rep.passed and rep.max_rel_error <= 1e-8

    def test_relu_kink_is_skipped(self):
        store = nd.ParamStore(0)
        x = store.add("x", np.array([[0.0]]))
        rep = nd.grad_check(lambda: nd.sum_all(nd.apply_activation(x, "relu")), store)
        assert rep.skipped_kinks == 1 and rep.checked == 0 and rep.passed

    def test_wrong_gradient_fails(self):
        store = nd.ParamStore(0)
        x = store.add("x", np.array([[1.0, 2.0]]))

        def broken():
            # detaching one factor halves the tape gradient of x*x
            return nd.sum_all(nd.mul(x, Tensor(x.data)))
        rep = nd.grad_check(broken, store)
        assert not rep.passed

    def test_pass_flag_tracks_tolerance(self):
        store = nd.ParamStore(1)
        w = store.glorot("w", 3, 3)
        rep = nd.grad_check(lambda: nd.frobenius_norm(nd.matmul(w, w)), store, tolerance=1e-5)
        assert rep.passed == (rep.max_rel_error <= rep.tolerance)


class TestCounterAndStore:
    def test_matmul_flops(self):
        with nd.count_ops() as c:
            nd.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
        assert c.flops == 2 * 3 * 4 * 5 and c.bytes == 8 * 15

    def test_glorot_bounds_and_determinism(self):
        a, b = nd.ParamStore(5), nd.ParamStore(5)
        wa, wb = a.glorot("w", 6, 10), b.glorot("w", 6, 10)
        assert np.array_equal(wa.data, wb.data)
        assert np.all(np.abs(wa.data) <= np.sqrt(6 / 16))

    def test_duplicate_name_rejected(self):
        s = nd.ParamStore(0)
        s.zeros("a", 1, 1)
        with pytest.raises(Exception):
            s.zeros("a", 1, 1)

    def test_non_finite_output_raises(self):
        with pytest.raises(nd.NumericalError):
            nd.reciprocal(Tensor([[0.0]]))

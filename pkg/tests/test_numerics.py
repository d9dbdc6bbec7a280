import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cliptrack import numerics as nx
from cliptrack.errors import ContractError, DimensionError, FormatError, NumericError
from cliptrack.numerics import ParamStore, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_difference(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def taped_grad(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        out = nx.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        assert out.data.tolist() == [[5.0]]

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   atol=1e-12, rtol=0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_triple_loop_all_small_shapes(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   atol=1e-12, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_batched_gradients(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        ga, gb = taped_grad(lambda x, y: nx.sum_(nx.matmul(x, y)), a, b)
        np.testing.assert_allclose(ga, central_difference(lambda x: (x @ b).sum(), a), rtol=1e-7)
        np.testing.assert_allclose(gb, central_difference(lambda y: (a @ y).sum(), b), rtol=1e-7)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_no_overflow(self):
        out = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(2).standard_normal((2, 3))
        s = nx.softmax_rows(Tensor(x)).data
        assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all((s >= 0) & (s <= 1))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            nx.softmax_rows(Tensor([[np.nan, 0.0]]))


class TestLayerNorm:
    def test_constant_vector_gives_zeros(self):
        out = nx.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_closed_form_pair(self):
        out = nx.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        expect = 1.0 / math.sqrt(1.0 + 1e-5)  # mean 0, variance 1
        np.testing.assert_allclose(out, [expect, -expect], rtol=0, atol=1e-15)
        assert out[0] < 1.0

    def test_zero_gain_returns_bias(self):
        bias = np.array([0.5, -2.0, 1.0])
        out = nx.layer_norm(Tensor(np.random.default_rng(3).standard_normal((4, 3))),
                            Tensor(np.zeros(3)), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.tile(bias, (4, 1)))

    def test_gain_shape_checked(self):
        with pytest.raises(DimensionError):
            nx.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestElementwise:
    def test_add_zero(self):
        x = np.random.default_rng(4).standard_normal((2, 3))
        np.testing.assert_array_equal(nx.elementwise("add", Tensor(x), 0.0).data, x)

    def test_relu(self):
        assert nx.elementwise("relu", Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_scale_backward_matches_finite_difference(self):
        x = np.random.default_rng(5).standard_normal(4)
        up = np.array([1.0, -2.0, 0.5, 3.0])
        (g,) = taped_grad(lambda t: nx.sum_(nx.mul(nx.scale(t, 2.0), up)), x)
        np.testing.assert_allclose(g, central_difference(lambda v: (2 * v * up).sum(), x), rtol=1e-8)
        np.testing.assert_allclose(g, 2 * up)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nx.elementwise("pow", Tensor([1.0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        nx.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_matmul_finite_difference(self):
        rng = np.random.default_rng(6)
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        _, gw = taped_grad(lambda a, b: nx.sum_(nx.matmul(a, b)), x, w)
        fd = central_difference(lambda v: (x @ v).sum(), w)
        assert np.max(np.abs(gw - fd) / np.maximum(np.abs(fd), 1e-12)) < 1e-6

    def test_accumulates_until_zeroed(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = nx.sum_(nx.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * first)
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with nx.no_grad():
            y = nx.scale(x, 3.0)
        assert not y.requires_grad and y._backward is None


OPS = {
    "matmul": (lambda a, b: nx.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: nx.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "softmax": (lambda a: nx.softmax_rows(a), [(3, 5)]),
    "log_softmax": (lambda a: nx.log_softmax(a), [(3, 5)]),
    "layer_norm": (lambda a, g, b: nx.layer_norm(a, g, b), [(4, 6), (6,), (6,)]),
    "add_bias": (lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nx.mul(a, b), [(3, 4), (3, 4)]),
    "relu": (lambda a: nx.relu(a), [(3, 4)]),
    "transpose": (lambda a: nx.transpose(a), [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (4, 3)), [(2, 6)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "take": (lambda a: nx.take(a, (slice(None), [0, 2, 2])), [(2, 4)]),
    "mean_axis": (lambda a: nx.mean(a, axis=0), [(3, 4)]),
    "bce_rows": (lambda a: nx.sigmoid_bce_rows(a, BCE_T), [(3, 5)]),
    "dice_rows": (lambda a: nx.dice_rows(a, BCE_T), [(3, 5)]),
}
BCE_T = (np.random.default_rng(99).random((3, 5)) > 0.5).astype(float)


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_finite_differences(name):
    """At least 100 random probes per op; relative error below 1e-4."""
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    probes = 0
    worst = 0.0
    while probes < 100:
        arrays = [rng.standard_normal(s) for s in shapes]
        weight = None

        def scalar(*ts):
            nonlocal weight
            out = fn(*ts)
            if weight is None:
                weight = rng.standard_normal(out.shape)
            return nx.sum_(nx.mul(out, weight))

        grads = taped_grad(scalar, *arrays)
        for i, a in enumerate(arrays):
            def f(v, i=i):
                args = [Tensor(x) for x in arrays]
                args[i] = Tensor(v)
                return scalar(*args).item()
            fd = central_difference(f, a.copy())
            for idx in np.ndindex(a.shape):
                worst = max(worst, nx.relative_error(grads[i][idx], fd[idx]))
                probes += 1
    assert worst < 1e-4


class TestGradCheck:
    def test_quadratic(self):
        store = ParamStore()
        store.add("theta", np.array(3.0))
        rep = nx.grad_check(lambda: nx.mul(store["theta"], store["theta"]), store, samples=1)
        path, idx, analytic, numeric, _ = rep.probes[0]
        assert analytic == 6.0
        assert numeric == pytest.approx(6.0, abs=1e-7)

    def test_zero_function(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        rep = nx.grad_check(lambda: nx.scale(nx.sum_(store["w"]), 0.0), store, samples=5)
        assert all(a == 0.0 and n == 0.0 for _, _, a, n, _ in rep.probes)
        assert rep.max_rel_error == 0.0


class TestAdam:
    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        t = store.add("x", np.array(1.0))
        t.grad = np.array(1.0)
        nx.adam_step(store, lr=0.1)
        # bias-corrected step 1: lr * g / (|g| + eps)
        assert t.data == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert t.grad == 0.0
        assert "x" in store.moments

    def test_zero_grad_leaves_params(self):
        store = ParamStore()
        t = store.add("w", np.array([1.0, -2.0]))
        store.zero_grad()
        nx.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(t.data, [1.0, -2.0])

    def test_deterministic_across_stores(self):
        a, b = ParamStore(), ParamStore()
        for s in (a, b):
            s.add("w", np.linspace(-1, 1, 5)).grad = np.array([0.3, -0.1, 2.0, 0.0, -5.0])
        nx.adam_step(a, 0.01)
        nx.adam_step(b, 0.01)
        assert nx.parameters_equal(a, b)

    def test_missing_grad_names_path(self):
        store = ParamStore()
        store.add("layer.weight", np.ones(2))
        with pytest.raises(ContractError, match="layer.weight"):
            nx.adam_step(store, 0.1)

    def test_no_moments_before_first_step(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        assert store.moments == {}

    def test_duplicate_path_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(ContractError):
            store.add("w", np.ones(2))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        store = ParamStore(step=12)
        store.add("a.w", rng.standard_normal((3, 4)))
        store.add("a.b", rng.standard_normal(4))
        store.add("s", rng.standard_normal(()))
        path = tmp_path / "m.ckpt"
        nx.save_checkpoint(path, store, {"model": {"dim": 4}})
        back, header = nx.load_checkpoint(path)
        assert nx.parameters_equal(store, back)
        assert header["model"] == {"dim": 4} and back.step == 12
        nx.save_checkpoint(tmp_path / "again.ckpt", back, header)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_future_version_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(2))
        path = tmp_path / "m.ckpt"
        nx.save_checkpoint(path, store)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            nx.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(20))
        path = tmp_path / "m.ckpt"
        nx.save_checkpoint(path, store)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            nx.load_checkpoint(path)


def test_ops_deterministic():
    x = np.random.default_rng(8).standard_normal((4, 6))
    g, b = np.ones(6), np.zeros(6)
    runs = [nx.softmax_rows(nx.layer_norm(Tensor(x), Tensor(g), Tensor(b)) @ Tensor(x.T)).data
            for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()

import numpy as np
import pytest

import lckv.autograd as ag
from lckv.autograd import GradTape, Tensor, backward, detach, finite_diff_check, no_grad
from lckv.errors import ContractError, ShapeError
from lckv.kernels import NO_SELF, WITH_SELF

from oracles import naive_matmul


def grad_of(f, params):
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
    backward(tape, loss, params)
    return [p.grad for p in params]


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[2.0, -1.0], [0.5, 3.0]]))
        eye = Tensor(np.eye(2))
        assert np.array_equal(ag.matmul(eye, a).data, a.data)

    def test_hand_case(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[0.0], [1.0]]))
        assert np.allclose(ag.matmul(a, b).data, [[2.0], [4.0]])

    def test_against_naive_oracle(self, rng):
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)
        got = ag.matmul(Tensor(a), Tensor(b)).data
        want = naive_matmul(a, b)
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_dtype_mismatch(self):
        a = Tensor(np.zeros((2, 2), dtype=np.float32))
        b = Tensor(np.zeros((2, 2), dtype=np.float64))
        with pytest.raises(ShapeError):
            ag.matmul(a, b)

    def test_batched(self, rng):
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((5, 6))
        got = ag.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, a @ b, rtol=1e-6)

    def test_grad_sum_linear_map(self):
        w = ag.parameter(np.ones((3, 2), dtype=np.float64))
        x = Tensor(np.array([[2.0], [5.0]]))
        (dw,) = grad_of(lambda: ag.sum_all(ag.matmul(w, x)), [w])
        # d(sum(Wx))/dW broadcasts x across rows.
        assert np.array_equal(dw, np.tile([[2.0, 5.0]], (3, 1)))


class TestSoftmax:
    def test_uniform(self):
        out = ag.softmax_lastdim(Tensor(np.zeros(3))).data
        assert np.allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_no_overflow(self):
        out = ag.softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-30)

    def test_sums_to_one(self, rng):
        x = Tensor(rng.standard_normal(16).astype(np.float32))
        assert abs(ag.softmax_lastdim(x).data.sum() - 1.0) < 1e-6

    def test_empty_lastdim(self):
        with pytest.raises(ShapeError):
            ag.softmax_lastdim(Tensor(np.zeros((2, 0))))


class TestDetach:
    def test_stop_gradient(self):
        x = ag.parameter(np.array([1.0, 2.0, 3.0]))
        (dx,) = grad_of(lambda: ag.sum_all(detach(x)), [x])
        assert np.array_equal(dx, np.zeros(3))

    def test_live_branch_only(self):
        x = ag.parameter(np.array([1.0, 2.0, 3.0]))
        (dx,) = grad_of(lambda: ag.sum_all(ag.add(x, detach(x))), [x])
        assert np.array_equal(dx, np.ones(3))

    def test_value_bit_identical(self, rng):
        x = Tensor(rng.standard_normal(10).astype(np.float32))
        assert np.array_equal(detach(x).data, x.data)

    def test_truncated_iteration_gradient(self):
        # Iterated map with the first m steps detached must have exactly the
        # gradient of the b-step truncated function, checked by central
        # differences on that truncated function.
        w = ag.parameter(np.array([0.7], dtype=np.float64))
        m, b = 3, 2

        def run_detached():
            s = Tensor(np.array([1.0], dtype=np.float64))
            with no_grad():
                for _ in range(m):
                    s = ag.silu(ag.mul(w, s))
            s = Tensor(s.data)
            for _ in range(b):
                s = ag.silu(ag.mul(w, s))
            return ag.sum_all(s)

        (dw,) = grad_of(run_detached, [w])

        with no_grad():
            s0 = Tensor(np.array([1.0], dtype=np.float64))
            for _ in range(m):
                s0 = ag.silu(ag.mul(w, s0))
        eps = 1e-6

        def truncated(wval):
            s = s0.data.copy()
            for _ in range(b):
                z = wval * s
                s = z / (1.0 + np.exp(-z))
            return s.sum()

        fd = (truncated(w.data + eps) - truncated(w.data - eps)) / (2 * eps)
        assert dw[0] == pytest.approx(fd, rel=1e-6)


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        x = ag.parameter(np.ones(3))
        with GradTape() as tape:
            y = ag.mul(x, x)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_unreachable_param_zero(self):
        x = ag.parameter(np.ones(3))
        other = ag.parameter(np.ones(2))
        with GradTape() as tape:
            loss = ag.sum_all(x)
        backward(tape, loss, [x, other])
        assert np.array_equal(other.grad, np.zeros(2))

    def test_fanout_accumulates(self):
        x = ag.parameter(np.array([3.0]))
        (dx,) = grad_of(lambda: ag.sum_all(ag.add(ag.mul(x, x), x)), [x])
        assert dx[0] == pytest.approx(7.0)

    def test_grad_accumulates_across_calls(self):
        x = ag.parameter(np.array([1.0]))
        for _ in range(2):
            with GradTape() as tape:
                loss = ag.sum_all(x)
            backward(tape, loss)
        assert x.grad[0] == pytest.approx(2.0)

    def test_tape_freed(self):
        x = ag.parameter(np.ones(3))
        with GradTape() as tape:
            loss = ag.sum_all(x)
        backward(tape, loss)
        assert tape.nodes == []


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        x = ag.parameter(np.array([3.0], dtype=np.float64))
        err = finite_diff_check(lambda: ag.sum_all(ag.mul(x, x)), [x], eps=1e-5)
        assert err < 1e-8

    def test_softmax_cross_entropy(self, rng):
        logits = ag.parameter(rng.standard_normal((4, 11)))
        targets = rng.integers(0, 11, size=4)
        err = finite_diff_check(
            lambda: ag.cross_entropy(logits, targets), [logits], eps=1e-6, n_samples=80
        )
        assert err < 1e-6


OPS_CASES = [
    "add_broadcast",
    "mul_broadcast",
    "silu",
    "rmsnorm",
    "rope",
    "attention_with_self",
    "attention_no_self",
    "attention_gqa",
    "attention_extra_mask",
    "softmax",
    "concat",
    "transpose_reshape",
    "embedding",
    "mean",
]


@pytest.mark.parametrize("case", OPS_CASES)
def test_op_gradients_match_finite_differences(case, backend, rng):
    """Every composite op's reverse-mode gradient agrees with central
    differences in float64 on randomized inputs."""
    if case == "add_broadcast":
        a = ag.parameter(rng.standard_normal((4, 5)))
        b = ag.parameter(rng.standard_normal(5))
        f = lambda: ag.mean_all(ag.mul(ag.add(a, b), ag.add(a, b)))
        params = [a, b]
    elif case == "mul_broadcast":
        a = ag.parameter(rng.standard_normal((3, 4)))
        b = ag.parameter(rng.standard_normal((1, 4)))
        f = lambda: ag.sum_all(ag.mul(a, b))
        params = [a, b]
    elif case == "silu":
        a = ag.parameter(rng.standard_normal(20))
        f = lambda: ag.mean_all(ag.mul(ag.silu(a), ag.silu(a)))
        params = [a]
    elif case == "rmsnorm":
        x = ag.parameter(rng.standard_normal((6, 8)))
        g = ag.parameter(rng.standard_normal(8) * 0.1 + 1.0)
        w = Tensor(rng.standard_normal((6, 8)))
        f = lambda: ag.sum_all(ag.mul(ag.rmsnorm(x, g, 1e-5), w))
        params = [x, g]
    elif case == "rope":
        x = ag.parameter(rng.standard_normal((2, 3, 2, 8)))
        angles = np.outer(np.arange(3, dtype=np.float64), 0.3 * np.arange(1, 5))
        cos, sin = np.cos(angles), np.sin(angles)
        w = Tensor(rng.standard_normal((2, 3, 2, 8)))
        f = lambda: ag.sum_all(ag.mul(ag.rope(x, cos, sin), w))
        params = [x]
    elif case.startswith("attention"):
        hq = 4 if case == "attention_gqa" else 2
        hkv = 2
        q = ag.parameter(rng.standard_normal((2, hq, 5, 6)))
        k = ag.parameter(rng.standard_normal((2, hkv, 5, 6)))
        v = ag.parameter(rng.standard_normal((2, hkv, 5, 6)))
        kind = NO_SELF if case == "attention_no_self" else WITH_SELF
        extra = None
        if case == "attention_extra_mask":
            extra = rng.random((5, 5)) < 0.7
        w = Tensor(rng.standard_normal((2, hq, 5, 6)))

        def f():
            out = ag.attention(q, k, v, kind=kind, n_past=0, n_kv_heads=hkv, extra_mask=extra)
            return ag.sum_all(ag.mul(out, w))

        params = [q, k, v]
    elif case == "softmax":
        x = ag.parameter(rng.standard_normal((3, 7)))
        w = Tensor(rng.standard_normal((3, 7)))
        f = lambda: ag.sum_all(ag.mul(ag.softmax_lastdim(x), w))
        params = [x]
    elif case == "concat":
        a = ag.parameter(rng.standard_normal((2, 3)))
        b = ag.parameter(rng.standard_normal((2, 4)))
        w = Tensor(rng.standard_normal((2, 7)))
        f = lambda: ag.sum_all(ag.mul(ag.concat([a, b], axis=1), w))
        params = [a, b]
    elif case == "transpose_reshape":
        a = ag.parameter(rng.standard_normal((2, 3, 4)))
        w = Tensor(rng.standard_normal((12, 2)))
        f = lambda: ag.sum_all(ag.mul(ag.reshape(ag.transpose(a, (1, 2, 0)), (12, 2)), w))
        params = [a]
    elif case == "embedding":
        table = ag.parameter(rng.standard_normal((10, 4)))
        ids = rng.integers(0, 10, size=(2, 5))
        w = Tensor(rng.standard_normal((2, 5, 4)))
        f = lambda: ag.sum_all(ag.mul(ag.embedding_lookup(table, ids), w))
        params = [table]
    elif case == "mean":
        a = ag.parameter(rng.standard_normal((4, 4)))
        f = lambda: ag.mean_all(ag.mul(a, a))
        params = [a]
    err = finite_diff_check(f, params, eps=1e-6, n_samples=60, rng=rng)
    assert err < 1e-5, f"{case}: max rel grad error {err}"


def test_ops_deterministic(backend, rng):
    q = Tensor(rng.standard_normal((2, 4, 6, 8), dtype=np.float32).astype(np.float32))
    k = Tensor(rng.standard_normal((2, 2, 6, 8)).astype(np.float32))
    v = Tensor(rng.standard_normal((2, 2, 6, 8)).astype(np.float32))
    a = ag.attention(q, k, v, kind=WITH_SELF, n_past=0, n_kv_heads=2)
    b = ag.attention(q, k, v, kind=WITH_SELF, n_past=0, n_kv_heads=2)
    assert np.array_equal(a.data, b.data)


def test_no_grad_suppresses_recording():
    x = ag.parameter(np.ones(3))
    with GradTape() as tape:
        with no_grad():
            y = ag.mul(x, x)
        z = ag.sum_all(x)
    assert not y.requires_grad
    assert len(tape.nodes) == 1
    backward(tape, z, [x])
    assert np.array_equal(x.grad, np.ones(3))

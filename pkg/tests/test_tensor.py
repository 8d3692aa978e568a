"""Autodiff core: hand-computed forward values, backward rules, and gradient checks.

The gradient-check suite runs every differentiable primitive on 20 distinct
randomized shapes and compares against central differences (h=1e-5, tol 1e-4).
"""

import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecxr import tensor as T
from densecxr.densenet import ModelConfig, build_model, model_forward
from densecxr.errors import (InvalidArgumentError, InvalidShapeError, NoGraphError,
                             NumericInstabilityError)

STEP = 1e-5
TOL = 1e-4
N_SHAPES = 20


def _pick(candidates, seed, k=N_SHAPES):
    """``k`` distinct configurations drawn deterministically from ``candidates``."""
    candidates = list(candidates)
    idx = np.random.default_rng(seed).choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in sorted(idx)]


def _away_from_zero(rng, shape, low=0.05):
    """Random values with |x| >= low, so kinks stay out of the difference stencil."""
    mag = rng.uniform(low, 2.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _projected(out: T.Tensor, rng) -> T.Tensor:
    """Scalar loss sum(out * R) for a fixed random R, exposing every output element."""
    r = T.Tensor(rng.normal(size=out.shape))
    return r


def _check(build, params, **kw):
    report = T.finite_difference_check(build, params, step=STEP, tolerance=TOL, **kw)
    assert report.passed, f"failing {report.failing}: {report.errors}"
    return report


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

class TestConvForward:
    def test_hand_cross_correlation(self):
        x = T.Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        k = T.Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, k, T.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])

    def test_identity_kernel(self):
        x = T.Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 5)))
        out = T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel(self):
        x = T.Tensor(np.random.default_rng(1).normal(size=(1, 2, 5, 5)))
        out = T.conv2d(x, T.Tensor(np.zeros((3, 2, 3, 3))), padding=1, stride=2)
        assert out.shape == (1, 3, 3, 3)
        assert not out.data.any()

    @pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 0), (5, 3, 2, 1), (7, 2, 3, 0), (4, 4, 1, 2)])
    def test_output_size_formula(self, h, k, s, p):
        out = T.conv2d(T.Tensor(np.zeros((1, 1, h, h))), T.Tensor(np.zeros((1, 1, k, k))),
                       stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n, o, i, j in itertools.product(range(2), range(4), range(out.shape[2]),
                                            range(out.shape[3])):
            ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(InvalidShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_zero_stride(self):
        with pytest.raises(InvalidArgumentError):
            T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))), stride=0)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(InvalidShapeError):
            T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))), padding=1)


class TestPooling:
    def test_gap_values(self):
        x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert T.global_avg_pool(x).data[0, 0] == 2.5

    def test_gap_constant_and_channels(self):
        x = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])[None]
        np.testing.assert_array_equal(T.global_avg_pool(T.Tensor(x)).data, [[0.0, 2.0]])
        c = T.Tensor(np.full((1, 1, 3, 5), 7.25))
        assert T.global_avg_pool(c).data[0, 0] == 7.25

    def test_gap_gradient_is_uniform(self):
        with T.graph_context():
            x = T.Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 4)), requires_grad=True)
            T.backward(T.global_avg_pool(x).sum())
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 12))

    def test_gap_empty(self):
        with pytest.raises(InvalidShapeError):
            T.global_avg_pool(T.Tensor(np.zeros((1, 1, 0, 3))))

    def test_avg_pool_values(self):
        x = T.Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(T.avg_pool2d(x).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avg_pool_odd(self):
        with pytest.raises(InvalidShapeError):
            T.avg_pool2d(T.Tensor(np.zeros((1, 1, 3, 4))))


class TestActivations:
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_sigmoid_strictly_inside(self, xs):
        out = T.sigmoid(T.Tensor(np.array(xs))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_sigmoid_extremes(self):
        out = T.sigmoid(T.Tensor(np.array([-1e308, -800.0, 0.0, 800.0, 1e308]))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)
        assert out[2] == 0.5

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_relu_is_max(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(T.relu(T.Tensor(x)).data, np.maximum(0.0, x))


class TestConcat:
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=30)
    def test_slices_bit_identical(self, c1, c2, hw):
        rng = np.random.default_rng(c1 * 31 + c2 * 7 + hw)
        a, b = rng.normal(size=(2, c1, hw, hw)), rng.normal(size=(2, c2, hw, hw))
        out = T.concat([T.Tensor(a), T.Tensor(b)]).data
        assert out.shape[1] == c1 + c2
        assert np.array_equal(out[:, :c1], a) and np.array_equal(out[:, c1:], b)

    def test_mismatch(self):
        with pytest.raises(InvalidShapeError):
            T.concat([T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 2)))])


class TestDropout:
    def test_eval_identity(self):
        x = T.Tensor(np.random.default_rng(0).normal(size=(4, 5)))
        assert T.dropout(x, 0.5, False, None) is x

    def test_expected_value_preserved(self):
        x = np.linspace(0.5, 2.0, 12)
        rng = np.random.default_rng(3)
        total = np.zeros_like(x)
        for _ in range(10_000):
            total += T.dropout(T.Tensor(x), 0.3, True, rng).data
        np.testing.assert_allclose(total / 10_000, x, rtol=0.02)

    def test_bad_rate(self):
        with pytest.raises(InvalidArgumentError):
            T.dropout(T.Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


class TestBatchNorm:
    def test_training_normalizes(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(3.0, 2.0, size=(6, 3, 4, 4)))
        rm, rv = np.zeros(3), np.ones(3)
        out = T.batch_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), rm, rv, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)

    def test_running_stats_momentum(self):
        x = np.random.default_rng(1).normal(size=(5, 2))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0))

    def test_eval_uses_running_stats(self):
        x = np.array([[1.0], [3.0]])
        out = T.batch_norm(T.Tensor(x), T.Tensor(np.array([2.0])), T.Tensor(np.array([1.0])),
                           np.array([1.0]), np.array([4.0]), False, eps=0.0).data
        np.testing.assert_allclose(out[:, 0], [1.0, 3.0])


# ---------------------------------------------------------------------------
# graph behaviour
# ---------------------------------------------------------------------------

class TestBackward:
    def test_square(self):
        with T.graph_context():
            x = T.Tensor(np.array(3.0), requires_grad=True)
            T.backward(x * x)
        assert x.grad == 6.0

    def test_sum_of_add(self):
        with T.graph_context():
            a = T.Tensor(np.ones((2, 3)), requires_grad=True)
            b = T.Tensor(np.zeros((2, 3)), requires_grad=True)
            T.backward((a + b).sum())
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 3)))

    def test_conv_kernel_gradient_is_window_sum(self):
        with T.graph_context():
            x = T.Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
            k = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
            T.backward(T.conv2d(x, k).sum())
        np.testing.assert_array_equal(k.grad[0, 0], [[12, 16], [24, 28]])

    def test_two_consumers_accumulate(self):
        rng = np.random.default_rng(0)
        xv = rng.normal(size=4)

        def grad_of(fn):
            with T.graph_context():
                x = T.Tensor(xv, requires_grad=True)
                T.backward(fn(x))
            return x.grad

        g1 = grad_of(lambda x: T.sigmoid(x).sum())
        g2 = grad_of(lambda x: (x * x).sum())
        g12 = grad_of(lambda x: T.sigmoid(x).sum() + (x * x).sum())
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-14)

    def test_non_scalar(self):
        with T.graph_context():
            x = T.Tensor(np.ones(3), requires_grad=True)
            with pytest.raises(InvalidArgumentError):
                T.backward(x * 2.0)

    def test_outside_graph(self):
        with T.graph_context():
            x = T.Tensor(np.ones(3), requires_grad=True)
            loss = (x * 2.0).sum()
        with T.graph_context():
            with pytest.raises(NoGraphError):
                T.backward(loss)

    def test_tape_order_is_topological(self):
        with T.graph_context() as tape:
            x = T.Tensor(np.ones(2), requires_grad=True)
            y = T.relu(x * 2.0)
            T.sigmoid(y).sum()
            kinds = [n.kind for n in tape.nodes]
        assert kinds.index("relu") < kinds.index("sigmoid")

    def test_independent_thread_contexts(self):
        results = {}

        def job(i):
            with T.graph_context():
                x = T.Tensor(np.array(float(i)), requires_grad=True)
                T.backward(x * x * x)
                results[i] = float(x.grad)

        threads = [threading.Thread(target=job, args=(i,)) for i in range(1, 6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: 3.0 * i * i for i in range(1, 6)}


# ---------------------------------------------------------------------------
# finite-difference oracle and gradient-check suite
# ---------------------------------------------------------------------------

class TestFiniteDifference:
    def test_linear_exact(self):
        theta = T.Tensor(np.array([0.7]), requires_grad=True)
        report = T.finite_difference_check(lambda: (theta * 3.0).sum(), [theta])
        assert report.worst < 1e-10

    @pytest.mark.filterwarnings("ignore:invalid value encountered in log")
    def test_non_finite_probe(self):
        theta = T.Tensor(np.array([1e-6]), requires_grad=True)
        with pytest.raises(NumericInstabilityError, match="theta"):
            T.finite_difference_check(lambda: T.log(theta).sum(), [theta], step=1e-3,
                                      names=["theta"])

    def test_bad_step(self):
        theta = T.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            T.finite_difference_check(lambda: theta.sum(), [theta], step=0.0)


def _mini_net(seed, fault=None):
    """Two conv layers with ReLU, GAP and a sigmoid head; optionally a planted fault."""
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(2, 1, 6, 6)))
    k1 = T.parameter(rng.normal(0, 0.5, size=(3, 1, 3, 3)), "conv1")
    k2 = T.parameter(rng.normal(0, 0.5, size=(4, 3, 3, 3)), "conv2")
    w = T.parameter(rng.normal(0, 0.5, size=(2, 4)), "head")
    y = (rng.random((2, 2)) < 0.5).astype(float)

    def loss():
        h = T.conv2d(x, k1, padding=1)
        if fault == "conv1":
            h = T.scale_grad(h, 2.0)
        h = T.relu(h)
        h = T.relu(T.conv2d(h, k2, padding=1))
        p = T.sigmoid(T.linear(T.global_avg_pool(h), w))
        return -(T.Tensor(y) * T.log(p) + T.Tensor(1 - y) * T.log(1.0 - p)).mean()

    return loss, [k1, k2, w]


class TestMiniNet:
    def test_passes(self):
        loss, params = _mini_net(0)
        _check(loss, params)

    def test_planted_fault_detected(self):
        loss, params = _mini_net(0, fault="conv1")
        report = T.finite_difference_check(loss, params, step=STEP, tolerance=TOL)
        assert not report.passed
        assert report.failing == ["conv1"]


def _conv_cases(k_choices):
    grid = itertools.product([1, 2], [1, 2, 3], [3, 4, 5, 6], [3, 5], [1, 2], k_choices,
                             [1, 2], [0, 1])
    return [g for g in grid if g[2] + 2 * g[7] >= g[5] and g[3] + 2 * g[7] >= g[5]]


CONV_CASES = _pick(_conv_cases([2, 3]), 11)
CONV1X1_CASES = _pick([c for c in _conv_cases([1]) if c[7] == 0], 12)
POOL_CASES = _pick(itertools.product([1, 2, 3], [1, 2, 3], [2, 4, 6], [2, 4, 6]), 13)
ELEM_CASES = _pick(itertools.product([1, 2, 3], [1, 2, 4], [1, 3, 5]), 14)
LINEAR_CASES = _pick(itertools.product([1, 2, 3, 4], [1, 3, 5, 8], [1, 2, 4]), 15)
CONCAT_CASES = _pick(itertools.product([1, 2], [1, 2, 3], [1, 2, 4], [1, 2, 3]), 16)
BN_CASES = _pick(itertools.product([2, 3, 4], [1, 2, 3], [1, 2, 3]), 17)
DROPOUT_CASES = _pick(itertools.product([1, 2, 3], [1, 2, 4], [2, 3, 5], [0.1, 0.5]), 18)


def test_suite_shapes_are_distinct():
    for cases in (CONV_CASES, CONV1X1_CASES, POOL_CASES, ELEM_CASES, LINEAR_CASES,
                  CONCAT_CASES, BN_CASES, DROPOUT_CASES):
        assert len(set(cases)) >= N_SHAPES


@pytest.mark.parametrize("case", CONV_CASES + CONV1X1_CASES, ids=str)
def test_gradcheck_conv2d(case):
    n, c_in, h, w, c_out, k, stride, pad = case
    rng = np.random.default_rng(hash(case) % 2**32)
    x = T.parameter(rng.normal(size=(n, c_in, h, w)), "x")
    kern = T.parameter(rng.normal(size=(c_out, c_in, k, k)), "kernel")
    bias = T.parameter(rng.normal(size=c_out), "bias")
    r = None

    def loss():
        nonlocal r
        out = T.conv2d(x, kern, bias, stride=stride, padding=pad)
        if r is None:
            r = _projected(out, rng)
        return (out * r).sum()

    _check(loss, [x, kern, bias])


@pytest.mark.parametrize("case", POOL_CASES, ids=str)
def test_gradcheck_avg_pool(case):
    rng = np.random.default_rng(sum(case))
    x = T.parameter(rng.normal(size=case), "x")
    r = T.Tensor(rng.normal(size=(case[0], case[1], case[2] // 2, case[3] // 2)))
    _check(lambda: (T.avg_pool2d(x) * r).sum(), [x])


@pytest.mark.parametrize("case", POOL_CASES, ids=str)
def test_gradcheck_global_avg_pool(case):
    rng = np.random.default_rng(sum(case) + 1)
    x = T.parameter(rng.normal(size=case), "x")
    r = T.Tensor(rng.normal(size=case[:2]))
    _check(lambda: (T.global_avg_pool(x) * r).sum(), [x])


@pytest.mark.parametrize("op", ["relu", "sigmoid", "exp", "log", "mul", "div"])
@pytest.mark.parametrize("case", ELEM_CASES, ids=str)
def test_gradcheck_elementwise(op, case):
    rng = np.random.default_rng(sum(case) * 7 + len(op))
    r = T.Tensor(rng.normal(size=case))
    if op == "log":
        x = T.parameter(rng.uniform(0.2, 3.0, size=case), "x")
        fn = lambda: (T.log(x) * r).sum()  # noqa: E731
        params = [x]
    elif op in ("mul", "div"):
        a = T.parameter(rng.normal(size=case), "a")
        b = T.parameter(_away_from_zero(rng, case, 0.5), "b")
        fn = (lambda: ((a * b) * r).sum()) if op == "mul" else (lambda: ((a / b) * r).sum())
        params = [a, b]
    else:
        x = T.parameter(_away_from_zero(rng, case), "x")
        f = {"relu": T.relu, "sigmoid": T.sigmoid, "exp": T.exp}[op]
        fn = lambda: (f(x) * r).sum()  # noqa: E731
        params = [x]
    _check(fn, params)


@pytest.mark.parametrize("case", ELEM_CASES, ids=str)
def test_gradcheck_reductions(case):
    rng = np.random.default_rng(sum(case) + 99)
    x = T.parameter(rng.normal(size=case), "x")
    r = T.Tensor(rng.normal(size=case[0] * case[1] * case[2]))

    def loss():
        flat = T.reshape(x, (-1,))
        return (flat * r).sum() + T.mean(x * x) + T.tsum(x[0], axis=0).sum() * 0.5

    _check(loss, [x])


@pytest.mark.parametrize("case", LINEAR_CASES, ids=str)
def test_gradcheck_linear(case):
    n, d_in, d_out = case
    rng = np.random.default_rng(n * 100 + d_in * 10 + d_out)
    x = T.parameter(rng.normal(size=(n, d_in)), "x")
    w = T.parameter(rng.normal(size=(d_out, d_in)), "weight")
    b = T.parameter(rng.normal(size=d_out), "bias")
    m = T.parameter(rng.normal(size=(d_in, d_out)), "matrix")
    r = T.Tensor(rng.normal(size=(n, d_out)))
    _check(lambda: (T.linear(x, w, b) * r).sum() + (T.matmul(x, m) * r).sum(), [x, w, b, m])


@pytest.mark.parametrize("case", CONCAT_CASES, ids=str)
def test_gradcheck_concat(case):
    n, c1, c2, hw = case
    rng = np.random.default_rng(sum(case) + 5)
    a = T.parameter(rng.normal(size=(n, c1, hw, hw)), "a")
    b = T.parameter(rng.normal(size=(n, c2, hw, hw)), "b")
    r = T.Tensor(rng.normal(size=(n, c1 + c2, hw, hw)))
    _check(lambda: (T.concat([a, b]) * r).sum(), [a, b])


@pytest.mark.parametrize("case", BN_CASES, ids=str)
def test_gradcheck_batch_norm_training(case):
    n, c, hw = case
    rng = np.random.default_rng(n * 31 + c * 7 + hw)
    shape = (n, c) if hw == 1 else (n, c, hw, hw)
    x = T.parameter(rng.normal(size=shape), "x")
    gamma = T.parameter(rng.uniform(0.5, 1.5, size=c), "gamma")
    beta = T.parameter(rng.normal(size=c), "beta")
    r = T.Tensor(rng.normal(size=shape))

    def loss():
        out = T.batch_norm(x, gamma, beta, np.zeros(c), np.ones(c), training=True)
        return (out * r).sum()

    _check(loss, [x, gamma, beta])


@pytest.mark.parametrize("case", DROPOUT_CASES, ids=str)
def test_gradcheck_dropout_pinned_seed(case):
    n, c, hw, rate = case
    rng = np.random.default_rng(n * 13 + c * 5 + hw)
    x = T.parameter(rng.normal(size=(n, c, hw, hw)), "x")
    r = T.Tensor(rng.normal(size=x.shape))
    seed = int(rng.integers(1 << 30))
    _check(lambda: (T.dropout(x, rate, True, np.random.default_rng(seed)) * r).sum(), [x])


KINK_MARGIN = 1e-4


def _relu_margin(loss) -> float:
    """Smallest |input| over every ReLU evaluated while building ``loss``."""
    with T.graph_context() as tape:
        loss()
        return min(float(np.abs(n.inputs[0].data).min()) for n in tape.nodes if n.kind == "relu")


def _mini_model_instance(index: int):
    """The ``index``-th randomized mini-model instance whose ReLU inputs all clear the kink margin.

    A central difference straddling a ReLU kink measures the kink, not the
    gradient, so instances with a pre-activation within 1e-4 of zero are redrawn.
    """
    cfg = ModelConfig(input_size=(8, 8), initial_channels=4, growth_rate=4, block_layout=(2, 2),
                      num_classes=3, dropout_rate=0.0)
    for attempt in range(100):
        seed = index * 100 + attempt
        model = build_model(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        model.params["head.weight"].data[...] = rng.normal(0, 0.5, size=(3, model.params["head.weight"].shape[1]))
        x = T.Tensor(rng.normal(size=(3, 1, 8, 8)))
        y = T.Tensor((rng.random((3, 3)) < 0.5).astype(float))

        def loss(model=model, x=x, y=y):
            p = model_forward(model, x)
            return -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p)).mean()

        if _relu_margin(loss) >= KINK_MARGIN:
            return model, loss, seed
    raise AssertionError("no kink-free instance found")


@pytest.mark.parametrize("index", range(N_SHAPES))
def test_gradcheck_end_to_end_mini_model(index):
    """Blocks [2, 2], growth 4, 8x8 input, dropout off, BN in training mode."""
    model, loss, seed = _mini_model_instance(index)
    names = list(model.params)
    _check(loss, [model.params[n] for n in names], names=names, max_elements=6, seed=seed)

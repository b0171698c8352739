import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scenegat.errors import DataError, NumericError
from scenegat.numerics import (
    AdamState,
    ParameterStore,
    adam_step,
    check_finite,
    cross_entropy_with_logits,
    finite_difference_check,
    kernels,
    leaky_relu,
    make_rng,
    matmul,
    segment_softmax,
    segment_softmax_backward,
)
from scenegat.numerics import _fallback

try:
    from scenegat.numerics import _ckernels
except ImportError:
    _ckernels = None


def test_matmul():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.array([[5.0], [6.0]])), [[17.0], [39.0]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = np.random.default_rng(0)
    a, b, c = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal((3, 2))
    assert np.allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-12, rtol=0)


def test_check_finite():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]), "x")


def test_leaky_relu():
    assert np.array_equal(leaky_relu(np.array([1.0, -1.0]), 0.2), [1.0, -0.2])
    assert np.array_equal(leaky_relu(np.array([0.0]), 0.7), [0.0])
    assert np.array_equal(leaky_relu(np.array([-5.0, 5.0]), 0.0), [0.0, 5.0])


def test_segment_softmax_examples():
    assert np.allclose(segment_softmax(np.zeros(2), np.array([0, 0])), [0.5, 0.5])
    assert np.array_equal(segment_softmax(np.array([3.7]), np.array([0])), [1.0])
    out = segment_softmax(np.array([math.log(1), math.log(3)]), np.array([0, 0]))
    assert np.allclose(out, [0.25, 0.75], atol=1e-15)


@settings(max_examples=60)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 3), elements=st.floats(-50, 50)),
    arrays(np.int64, n, elements=st.integers(0, 6)))))
def test_segment_softmax_property(args):
    scores, seg = args
    out = segment_softmax(scores, seg, 7)
    assert np.all(out > 0) and np.all(out <= 1)
    for s in np.unique(seg):
        assert np.allclose(out[seg == s].sum(axis=0), 1.0, atol=1e-12, rtol=0)


def test_segment_softmax_backward_matches_fd():
    rng = np.random.default_rng(1)
    x, seg = rng.standard_normal(9), np.array([0, 0, 1, 1, 1, 2, 3, 3, 3])
    w = rng.standard_normal(9)
    a = segment_softmax(x, seg, 4)
    g = segment_softmax_backward(w, a, seg, 4)
    h = 1e-6
    for i in range(9):
        e = np.zeros(9)
        e[i] = h
        fd = (w @ segment_softmax(x + e, seg, 4) - w @ segment_softmax(x - e, seg, 4)) / (2 * h)
        assert abs(fd - g[i]) < 1e-8


def test_cross_entropy_examples():
    loss, _ = cross_entropy_with_logits(np.zeros((1, 8)), np.array([3]))
    assert abs(loss - math.log(8)) < 1e-12
    big = np.zeros((1, 4))
    big[0, 2] = 40.0
    assert cross_entropy_with_logits(big, np.array([2]))[0] < 1e-6
    loss, d = cross_entropy_with_logits(np.array([[1.0, 0.0]]), np.array([0]))
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12
    assert abs(loss - 0.31326) < 1e-5
    with pytest.raises(DataError):
        cross_entropy_with_logits(np.zeros((1, 2)), np.array([2]))


@given(arrays(np.float64, (5, 4), elements=st.floats(-30, 30)), st.lists(st.integers(0, 3), min_size=5, max_size=5))
def test_cross_entropy_grad_rows_sum_to_zero(logits, labels):
    _, d = cross_entropy_with_logits(logits, np.array(labels))
    assert np.allclose(d.sum(axis=1), 0.0, atol=1e-12)


def test_cross_entropy_weighted_grad():
    rng = np.random.default_rng(2)
    x, y, w = rng.standard_normal((6, 3)), np.array([0, 1, 2, 0, 1, 1]), np.array([0.5, 2.0, 1.0])
    _, d = cross_entropy_with_logits(x, y, w)
    h = 1e-6
    for i in range(6):
        for j in range(3):
            e = np.zeros_like(x)
            e[i, j] = h
            fd = (cross_entropy_with_logits(x + e, y, w)[0] - cross_entropy_with_logits(x - e, y, w)[0]) / (2 * h)
            assert abs(fd - d[i, j]) < 1e-8


def _store(**arrays_):
    p = ParameterStore()
    for k, v in arrays_.items():
        p.add(k, np.asarray(v, dtype=float))
    return p


def test_adam_first_step():
    p = _store(theta=[0.0])
    p.grad("theta")[...] = 1.0
    st_ = AdamState(learning_rate=1e-3, weight_decay=0.0)
    adam_step(p, st_)
    assert abs(p["theta"][0] + 1e-3) < 1e-9
    assert st_.t == 1


def test_adam_zero_grad_identity_and_freeze():
    rng = np.random.default_rng(0)
    p = _store(a=rng.standard_normal((3, 2)), b=rng.standard_normal(4))
    before = p.snapshot()
    adam_step(p, AdamState(learning_rate=0.1, weight_decay=0.0))
    assert all(np.array_equal(before[k], p[k]) for k in p)
    p.set_trainable("b", False)
    p.grad("a")[...] = 1.0
    p.grad("b")[...] = 1.0
    s = AdamState(learning_rate=0.1, weight_decay=0.01)
    adam_step(p, s)
    assert p["b"].tobytes() == before["b"].tobytes()
    assert not np.array_equal(p["a"], before["a"])
    assert "b" not in s.m or not np.any(s.m["b"])


def test_adam_coupled_vs_decoupled():
    def run(decoupled):
        p = _store(x=[2.0])
        s = AdamState(learning_rate=0.1, weight_decay=0.5, decoupled=decoupled)
        adam_step(p, s)
        return p["x"][0]
    # coupled: g = 0 + 0.5*2 -> normalized step of -lr; decoupled: no gradient step, only -lr*wd*x
    assert abs(run(False) - 1.9) < 1e-6
    assert abs(run(True) - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12


def test_adam_nan_names_parameter():
    p = _store(w=[1.0])
    p.grad("w")[...] = np.nan
    with pytest.raises(NumericError, match="'?w'?"):
        adam_step(p, AdamState())


def test_parameter_store_contract():
    p = _store(z=[1.0], a=[[1.0, 2.0]])
    assert list(p) == ["z", "a"]
    assert p.grad("a").shape == p["a"].shape
    with pytest.raises((ValueError, KeyError)):
        p.add("z", np.zeros(1))
    with pytest.raises(ValueError):
        p["a"] = np.zeros(3)
    assert p.num_parameters() == 3
    p.set_trainable("z", False)
    assert p.num_parameters(trainable_only=True) == 2


def test_fd_quadratic_and_constant():
    p = _store(theta=[3.0])

    def quad(ps):
        ps.grad("theta")[...] = ps["theta"]
        return 0.5 * float(ps["theta"][0] ** 2)

    assert finite_difference_check(quad, p, probes=1, h=1e-5) < 1e-9
    q = _store(c=np.ones(4))
    assert finite_difference_check(lambda ps: 7.0, q, probes=4) == 0.0


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(5, "init").standard_normal(4)
    assert np.array_equal(a, make_rng(5, "init").standard_normal(4))
    assert not np.array_equal(a, make_rng(5, "dropout").standard_normal(4))
    assert not np.array_equal(make_rng(5, "generator", 1).random(3), make_rng(5, "generator", 2).random(3))
    with pytest.raises(KeyError):
        make_rng(5, "nope")


@pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")
@settings(max_examples=60)
@given(st.integers(1, 60).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 5), elements=st.floats(-1e6, 1e6)),
    arrays(np.int64, n, elements=st.integers(0, 9)))))
def test_compiled_matches_fallback_bitwise(args):
    x, seg = args
    for name in ("segment_sum", "segment_max"):
        a = getattr(_fallback, name)(x, seg, 10)
        b = getattr(_ckernels, name)(x, seg, 10)
        assert a.tobytes() == b.tobytes()


def test_kernels_reject_bad_segments():
    for f in (kernels.segment_sum, kernels.segment_max, _fallback.segment_sum):
        with pytest.raises((ValueError, DataError, IndexError)):
            f(np.ones((2, 2)), np.array([0, 5]), 3)


def test_kernels_deterministic():
    rng = np.random.default_rng(3)
    x, seg = rng.standard_normal((500, 7)), rng.integers(0, 40, 500)
    assert kernels.segment_sum(x, seg, 40).tobytes() == kernels.segment_sum(x.copy(), seg.copy(), 40).tobytes()


def test_pure_python_switch():
    code = "from scenegat.numerics import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={**os.environ, "SCENEGAT_PURE_PYTHON": "1"},
                         capture_output=True, text=True, check=True).stdout.strip()
    assert out == "python"

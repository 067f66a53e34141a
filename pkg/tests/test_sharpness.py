import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatcomp import tensor as T
from flatcomp.models import ModelSpec, build, loss_fn
from flatcomp.params import ParamSet
from flatcomp.sharpness import default_step, lambda_max
from flatcomp.tensor import Tensor, value_and_grad


def quadratic(a, c=1.0):
    """``0.5 * c * w^T A w`` with ``w`` stored as a column."""
    a = np.asarray(a, dtype=float)

    def fn(p, batch=None):
        w = p["w"]
        return T.scale(T.total(T.mul(w, T.matmul(Tensor(a), w))), 0.5 * c)

    return fn


def col(n, seed=0):
    return ParamSet([("w", np.random.default_rng(seed).standard_normal((n, 1)), "weight")])


def test_diag_spectrum():
    rep = lambda_max(quadratic(np.diag([1.0, 5.0, 9.0])), col(3), None)
    assert abs(rep.lambda_max - 9.0) / 9.0 < 0.01
    assert rep.iterations <= 100 and rep.converged


def test_constant_loss_is_flat():
    rep = lambda_max(lambda p, b: T.scale(T.total(p["w"]), 0.0), col(4), None)
    assert rep.lambda_max == 0.0 and rep.converged


def test_random_symmetric_matches_dense_eigensolver():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((6, 6))
    a = (m + m.T) / 2
    eig = np.linalg.eigvalsh(a)
    top = eig[np.argmax(np.abs(eig))]
    rep = lambda_max(quadratic(a), col(6), None, tol=1e-6, max_iters=100)
    assert abs(rep.lambda_max - top) / abs(top) < 0.01


def test_history_invariants():
    a = np.diag([1.0, 2.0, 3.0, 3.5])
    rep = lambda_max(quadratic(a), col(4), None, tol=1e-4)
    assert len(rep.rayleigh_history) == rep.iterations
    assert rep.lambda_max == rep.rayleigh_history[-1]
    if rep.converged:
        last, prev = rep.rayleigh_history[-1], rep.rayleigh_history[-2]
        assert abs(last - prev) / max(abs(last), 1e-12) < 1e-4


def test_max_iters_cap_reports_unconverged():
    a = np.diag([1.0, 0.999, 0.998])
    rep = lambda_max(quadratic(a), col(3), None, tol=1e-14, max_iters=3)
    assert rep.iterations == 3 and not rep.converged


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(3, 12))
def test_rayleigh_nondecreasing_on_psd(seed, n):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    a = m @ m.T + 0.1 * np.eye(n)
    rep = lambda_max(quadratic(a), col(n, seed), None, tol=1e-8, max_iters=30)
    hist = np.array(rep.rayleigh_history)
    assert np.all(np.diff(hist) >= -1e-7 * abs(hist[-1]))


def test_seed_determinism():
    a = np.diag(np.arange(1.0, 8.0))
    r1 = lambda_max(quadratic(a), col(7), None, seed=5)
    r2 = lambda_max(quadratic(a), col(7), None, seed=5)
    assert r1.rayleigh_history == r2.rayleigh_history


def test_scale_covariance():
    rng = np.random.default_rng(8)
    m = rng.standard_normal((5, 5))
    a = m @ m.T
    r1 = lambda_max(quadratic(a), col(5), None, seed=1, tol=1e-8)
    r3 = lambda_max(quadratic(a, c=3.0), col(5), None, seed=1, tol=1e-8)
    assert r3.lambda_max == pytest.approx(3.0 * r1.lambda_max, rel=1e-8)


def test_negative_curvature_keeps_sign():
    rep = lambda_max(quadratic(np.diag([1.0, -6.0, 2.0])), col(3), None, tol=1e-8)
    assert rep.lambda_max == pytest.approx(-6.0, rel=1e-3)


def test_does_not_touch_weights():
    w = col(4)
    before = w.copy()
    lambda_max(quadratic(np.eye(4)), w, None)
    assert w.bit_equal(before)


def test_json_keys():
    rep = lambda_max(quadratic(np.eye(3)), col(3), None, eval_set_id="toy", seed=2)
    d = json.loads(rep.dumps())
    assert set(d) == {"lambda_max", "iterations", "converged", "eval_set_id", "seed"}
    assert d["eval_set_id"] == "toy" and d["seed"] == 2


def test_bad_arguments():
    with pytest.raises(ValueError):
        lambda_max(quadratic(np.eye(2)), col(2), None, tol=0.0)
    with pytest.raises(ValueError):
        lambda_max(quadratic(np.eye(2)), col(2), None, max_iters=0)


def test_default_step_formula():
    w = ParamSet([("w", np.full(4, 2.0), "weight")])
    # ||w|| = 4, sqrt(dim) = 2
    assert default_step(w) == pytest.approx(1e-3 * 3.0)


def test_model_loss_against_fd_hessian():
    """Small MLP: power iteration vs. eigendecomposition of a dense FD Hessian."""
    spec = ModelSpec(kind="mlp", widths=(4,), num_classes=3, input_shape=(1, 1, 3), seed=2)
    rng = np.random.default_rng(2)
    batch = (rng.standard_normal((16, 1, 1, 3)), rng.integers(0, 3, 16))
    fn = loss_fn(spec)
    w = build(spec)
    flat = w.flat()
    h = 1e-5
    hess = np.zeros((flat.size, flat.size))
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        _, gp = value_and_grad(lambda p: fn(p, batch), w.from_flat(flat + e))
        _, gm = value_and_grad(lambda p: fn(p, batch), w.from_flat(flat - e))
        hess[:, i] = (gp.flat() - gm.flat()) / (2 * h)
    eig = np.linalg.eigvalsh((hess + hess.T) / 2)
    top = eig[np.argmax(np.abs(eig))]
    rep = lambda_max(fn, w, batch, tol=1e-7, max_iters=100)
    assert abs(rep.lambda_max - top) / abs(top) < 0.01

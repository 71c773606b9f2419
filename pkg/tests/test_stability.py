import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tropattn.experiments import random_margin_scores
from tropattn.stability import (
    StabilityReport,
    affine_residual,
    certify,
    default_probe,
    gradient_lipschitz_gap,
    hessian_spectral_norm,
    in_stable_region,
    lse_potential,
    margin,
    softmax_gradient,
    stability_bounds,
)


def mp_hessian_norm(s, tau, dps):
    """High-precision oracle: largest eigenvalue of (diag p - p p^T) / tau."""
    with mpmath.workdps(dps):
        tau = mpmath.mpf(tau)
        s = [mpmath.mpf(float(v)) for v in s]
        m = max(s)
        e = [mpmath.exp((v - m) / tau) for v in s]
        z = mpmath.fsum(e)
        p = [v / z for v in e]
        n = len(p)
        mat = mpmath.matrix(n, n)
        for i in range(n):
            for j in range(n):
                mat[i, j] = ((p[i] if i == j else 0) - p[i] * p[j]) / tau
        ev = mpmath.eigsy(mat, eigvals_only=True)
        return float(max(ev))


def test_potential_examples():
    assert lse_potential([2.5], 0.1) == 2.5
    assert lse_potential([0.0, 0.0], 1.0) == pytest.approx(math.log(2))
    assert math.isfinite(lse_potential([1e300, -1e300], 1e-3))
    with pytest.raises(ValueError):
        lse_potential([1.0], 0.0)


def test_gradient_examples():
    assert np.allclose(softmax_gradient([0.0, 0.0], 0.37), [0.5, 0.5])


def test_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(size=int(rng.integers(2, 10)))
        g = softmax_gradient(s, 0.3)
        h = 1e-6
        for k in range(s.size):
            e = np.zeros_like(s)
            e[k] = h
            fd = (lse_potential(s + e, 0.3) - lse_potential(s - e, 0.3)) / (2 * h)
            assert fd == pytest.approx(g[k], abs=1e-6)


def test_gradient_concentration():
    rng = np.random.default_rng(1)
    for _ in range(500):
        s, tau = random_margin_scores(rng)
        i, delta = margin(s)
        p = softmax_gradient(s, tau)
        e = np.zeros_like(p)
        e[i] = 1.0
        assert np.abs(p - e).sum() <= 2 * (s.size - 1) * math.exp(-delta / tau) * (1 + 1e-12)


def test_hessian_examples():
    assert hessian_spectral_norm([3.0], 0.5) == 0.0
    assert hessian_spectral_norm([0.0, 0.0], 1.0) == pytest.approx(0.5, rel=1e-10)


def test_hessian_two_token_closed_form():
    for delta, tau in [(0.1, 1.0), (2.0, 0.1), (5.0, 0.01), (3.0, 0.005)]:
        p = softmax_gradient([delta, 0.0], tau)
        assert hessian_spectral_norm([delta, 0.0], tau) == pytest.approx(2 * p[0] * p[1] / tau, rel=1e-9)


def test_hessian_matches_mpmath():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        tau = float(10 ** rng.uniform(-2, 0))
        s = rng.normal(scale=tau * 5, size=n)
        assert hessian_spectral_norm(s, tau) == pytest.approx(mp_hessian_norm(s, tau, 50), rel=1e-8)


def test_hessian_tiny_eigenvalue_matches_mpmath():
    # entries near 1e-114: the oracle needs far more than 114 digits
    s = np.array([2.0, 0.0, -0.5, 0.1])
    tau = 0.0075
    ref = mp_hessian_norm(s, tau, 400)
    assert 0 < ref < 1e-100
    assert hessian_spectral_norm(s, tau) == pytest.approx(ref, rel=1e-8)


def test_hessian_matrix_free_agrees_with_dense():
    rng = np.random.default_rng(3)
    s = rng.normal(size=700)
    tau = 0.7
    p = softmax_gradient(s, tau)
    dense = np.linalg.eigvalsh((np.diag(p) - np.outer(p, p)) / tau).max()
    assert hessian_spectral_norm(s, tau) == pytest.approx(dense, rel=1e-8)
    with pytest.raises(ValueError):
        hessian_spectral_norm(np.zeros(10_001), 1.0)


def test_hessian_global_bound():
    rng = np.random.default_rng(4)
    for _ in range(300):
        tau = float(10 ** rng.uniform(-2, 1))
        s = rng.normal(size=int(rng.integers(2, 20))) * rng.uniform(0, 2)
        assert hessian_spectral_norm(s, tau) <= 1 / (2 * tau) * (1 + 1e-12)


def test_hessian_quarter_bound_counterexample():
    # max p(1-p) <= 1/4 does not bound the spectral norm: two equal scores give 1/(2 tau)
    assert hessian_spectral_norm([0.0, 0.0], 1.0) > 1 / 4


def test_hessian_decay_bound_with_factor_two():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        s, tau = random_margin_scores(rng)
        _, delta = margin(s)
        b = stability_bounds(s.size, tau, delta)["hess"]
        assert hessian_spectral_norm(s, tau) <= 2 * b * (1 + 1e-12)


def test_hessian_decay_bound_without_factor_two_fails():
    # one dominant runner-up: the norm approaches 2 e^{-delta/tau} / tau, twice the N = 2 bound
    s, tau = np.array([1.0, 0.0]), 0.1
    b = stability_bounds(2, tau, 1.0)["hess"]
    assert hessian_spectral_norm(s, tau) > 1.9 * b


def test_certify_worked_example():
    s = np.zeros(512)
    s[0] = 2.0
    rep = certify(s, 0.125)
    assert rep.in_stable_region
    assert rep.value_bound == pytest.approx(7.18e-6, rel=0.02)
    assert rep.grad_bound == pytest.approx(1.15e-4, rel=0.02)
    assert rep.hess_bound == pytest.approx(4.6e-4, rel=0.02)
    assert rep.value_gap <= rep.value_bound * (1 + 1e-12) and rep.grad_l1_gap <= rep.grad_bound
    # top weight p0, 511 tails of weight q, t = 511 q: the nonzero eigenvalues are q and p0 t + q (1 - t)
    p = softmax_gradient(s, 0.125)
    t = 1 - p[0]
    assert rep.hess_norm == pytest.approx((p[0] * t + p[1] * (1 - t)) / 0.125, rel=1e-9)
    assert rep.hess_norm > rep.hess_bound
    assert rep.violations == ["hess"]


def test_certify_two_tokens_value_exact():
    for delta, tau in [(1.0, 0.5), (3.0, 0.2)]:
        rep = certify([delta, 0.0], tau)
        assert rep.value_gap == pytest.approx(tau * math.log1p(math.exp(-delta / tau)), rel=1e-14)
        assert rep.value_gap == pytest.approx(rep.value_bound, rel=1e-14)


def test_certify_tie():
    rep = certify([1.0, 1.0, 0.0], 0.1)
    assert not rep.in_stable_region
    assert rep.value_bound is None and rep.violations == []


def test_certify_underflow():
    rep = certify([1000.0, 0.0, 0.0], 1e-3)
    assert rep.bound_underflow
    assert rep.value_bound == 0.0 and rep.value_gap == 0.0
    assert rep.holds


def test_value_gap_nonnegative_and_bounded():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        s, tau = random_margin_scores(rng)
        rep = certify(s, tau)
        assert rep.value_gap >= 0
        assert rep.value_gap <= rep.value_bound * (1 + 1e-12)
        assert rep.grad_l1_gap <= rep.grad_bound * (1 + 1e-12)


def test_probe_stays_in_region():
    rng = np.random.default_rng(7)
    for k in range(300):
        s, tau = random_margin_scores(rng)
        i, delta = margin(s)
        sp = default_probe(s, i, delta, seed=k)
        assert np.linalg.norm(sp - s) <= 0.1 + 1e-12
        assert in_stable_region(sp, i, delta)


def test_affine_residual_matches_mpmath():
    rng = np.random.default_rng(8)
    for _ in range(20):
        s, tau = random_margin_scores(rng, max_n=6)
        i, delta = margin(s)
        sp = default_probe(s, i, delta)
        with mpmath.workdps(400):
            def pot(v):
                return mpmath.mpf(tau) * mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(x)) / tau) for x in v))
            z = [mpmath.exp(mpmath.mpf(float(x)) / tau) for x in s]
            p = [v / mpmath.fsum(z) for v in z]
            ref = abs(pot(sp) - pot(s) - mpmath.fsum(a * (mpmath.mpf(float(b)) - mpmath.mpf(float(c)))
                                                     for a, b, c in zip(p, sp, s)))
        assert affine_residual(s, sp, tau) == pytest.approx(float(ref), rel=1e-6, abs=1e-300)


def test_lipschitz_with_corrected_constant():
    rng = np.random.default_rng(9)
    for k in range(1000):
        s, tau = random_margin_scores(rng)
        i, delta = margin(s)
        sp = default_probe(s, i, delta, seed=k)
        b = stability_bounds(s.size, tau, delta)["hess"]
        assert gradient_lipschitz_gap(s, sp, tau) <= 2 * b * np.linalg.norm(sp - s) * (1 + 1e-9) + 1e-300


def test_report_serialization():
    rep = certify([2.0, 0.0, -1.0], 0.25)
    data = json.loads(rep.to_json())
    assert data["N"] == 3 and data["violations"] == rep.violations
    lines = rep.to_csv().splitlines()
    assert lines[0].split(",") == list(StabilityReport.CSV_FIELDS)
    assert len(lines) == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.floats(1e-3, 1.0))
def test_value_and_grad_bounds_property(scores, tau):
    s = np.asarray(scores)
    _, delta = margin(s)
    if delta <= 1e-9:
        return
    rep = certify(s, tau)
    assert rep.in_stable_region
    assert rep.value_gap <= rep.value_bound * (1 + 1e-12)
    assert rep.grad_l1_gap <= rep.grad_bound * (1 + 1e-12)

"""
Finite-temperature stability certificates for the LogSumExp potential.

For a score vector ``s`` with top index ``i`` and margin
``delta = s_i - max_{j != i} s_j``, the smoothed potential
``P(s) = tau * log(sum(exp(s / tau)))`` is compared with ``max(s)`` through
four measured quantities (value gap, gradient L1 gap, Hessian spectral norm,
local affine residual). Each is paired with its exponential-decay bound in
``(N - 1) * exp(-delta / tau)``.

All measurements are computed relative to the dominant index so that
quantities of size ``exp(-delta / tau)`` are not lost to cancellation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 10_000
MATRIX_FREE_ABOVE = 512
MAX_HESSIAN_N = 10_000
MEMBERSHIP_RTOL = 1e-12
BOUND_RTOL = 1e-12  # slack for floating-point rounding when comparing measured vs bound


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    return tau


def _tail(s: np.ndarray, tau: float):
    """Dominant index, shifted exponentials ``exp((s_j - s_i) / tau)`` and their off-top sum."""
    i = int(np.argmax(s))
    e = np.exp((s - s[i]) / tau)
    e[i] = 0.0
    return i, e, float(np.sum(np.sort(e)))


def lse_potential(s, tau: float) -> float:
    """Max-shifted ``tau * log(sum(exp(s / tau)))``; finite for any finite ``s``."""
    tau = _check_tau(tau)
    s = np.asarray(s, dtype=float).reshape(-1)
    i, _, a = _tail(s, tau)
    return float(s[i] + tau * math.log1p(a))


def softmax_gradient(s, tau: float) -> np.ndarray:
    """Gradient of the potential: the softmax distribution ``p``."""
    tau = _check_tau(tau)
    s = np.asarray(s, dtype=float).reshape(-1)
    i, e, a = _tail(s, tau)
    p = e / (1.0 + a)
    p[i] = 1.0 / (1.0 + a)
    return p


def hessian_matvec(p: np.ndarray, x: np.ndarray, tau: float) -> np.ndarray:
    """``(diag(p) - p p^T) x / tau`` without forming the matrix."""
    return (p * x - p * np.dot(p, x)) / tau


def _scaled_matvec(p: np.ndarray, i: int, tail: float, x: np.ndarray) -> np.ndarray:
    """``(diag(p) - p p^T) x / tail`` with the top row written cancellation-free.

    ``tail = 1 - p_i``. Dividing by it keeps entries O(1) when the softmax is
    nearly one-hot, so squares in the iteration do not underflow.
    """
    off = p.copy()
    off[i] = 0.0
    out = off * (x - np.dot(p, x))
    out[i] = p[i] * (tail * x[i] - np.dot(off, x))
    return out / tail


def hessian_spectral_norm(s, tau: float) -> float:
    """Largest eigenvalue of ``(diag(p) - p p^T) / tau`` by power iteration.

    The matrix is PSD, so the dominant eigenvalue is the spectral norm. The
    start vector is fixed so results are reproducible; above
    ``MATRIX_FREE_ABOVE`` scores the matrix is never formed.
    """
    tau = _check_tau(tau)
    s = np.asarray(s, dtype=float).reshape(-1)
    n = s.size
    if n > MAX_HESSIAN_N:
        raise ValueError(f"N > {MAX_HESSIAN_N} not supported")
    if n == 1:
        return 0.0
    p = softmax_gradient(s, tau)
    i = int(np.argmax(s))
    tail = float(np.sum(np.sort(np.delete(p, i))))
    if tail == 0.0:
        return 0.0

    if n <= MATRIX_FREE_ABOVE:
        mat = np.column_stack([_scaled_matvec(p, i, tail, e) for e in np.eye(n)])
        mat = 0.5 * (mat + mat.T)

        def apply(x):
            return mat @ x
    else:
        def apply(x):
            return _scaled_matvec(p, i, tail, x)

    # all-ones spans the null space (rows sum to zero); flip the top coordinate
    v = np.ones(n)
    v[i] = -1.0
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(POWER_ITER_MAX):
        w = apply(v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= POWER_ITER_TOL * abs(lam):
            break
        v = w / norm
    return lam * tail / tau


def margin(s) -> tuple[int, float]:
    """Top index and its gap over the runner-up (0 for a single score: no competitor)."""
    s = np.asarray(s, dtype=float).reshape(-1)
    i = int(np.argmax(s))
    if s.size == 1:
        return i, math.inf
    return i, float(s[i] - np.max(np.delete(s, i)))


def in_stable_region(s, i: int, delta: float) -> bool:
    """Membership in ``{s : s_i >= s_j + delta for all j != i}``, up to rounding."""
    s = np.asarray(s, dtype=float).reshape(-1)
    others = np.delete(s, i)
    slack = MEMBERSHIP_RTOL * max(1.0, float(np.max(np.abs(s))))
    return bool(others.size == 0 or np.all(s[i] - others >= delta - slack))


def _expm1_minus_x(g: np.ndarray) -> np.ndarray:
    """``exp(g) - 1 - g`` without cancellation near 0."""
    g = np.asarray(g, dtype=float)
    small = np.abs(g) < 1e-3
    series = g * g * (0.5 + g * (1 / 6 + g * (1 / 24 + g / 120)))
    return np.where(small, series, np.expm1(g) - g)


def _log1p_minus_x(c: float) -> float:
    """``log(1 + c) - c`` without cancellation near 0."""
    if abs(c) < 1e-3:
        return -c * c * (0.5 - c * (1 / 3 - c * (0.25 - c / 5)))
    return math.log1p(c) - c


def affine_residual(s, s_probe, tau: float) -> float:
    """``|P(s') - P(s) - <grad P(s), s' - s>|`` in a cancellation-free form.

    With ``i`` the top index of ``s``, ``g_j = (d_j - d_i) / tau`` and ``p`` the
    softmax at ``s``, the residual equals
    ``tau * [log1p(c) - c + sum_{j != i} p_j (expm1(g_j) - g_j)]`` where
    ``c = sum_{j != i} p_j expm1(g_j)``. Every term is second order in ``d``,
    so no first-order quantities cancel.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    sp = np.asarray(s_probe, dtype=float).reshape(-1)
    i = int(np.argmax(s))
    d = sp - s
    p = softmax_gradient(s, tau)
    p[i] = 0.0
    g = (d - d[i]) / tau
    c = float(np.sum(p * np.expm1(g)))
    val = tau * (_log1p_minus_x(c) + float(np.sum(p * _expm1_minus_x(g))))
    return abs(val)


@dataclass
class StabilityReport:
    N: int
    tau: float
    delta: float
    value_gap: float
    value_bound: Optional[float]
    grad_l1_gap: float
    grad_bound: Optional[float]
    hess_norm: float
    hess_bound: Optional[float]
    affine_residual: float
    affine_bound: Optional[float]
    in_stable_region: bool
    probe_norm: float = 0.0
    bound_underflow: bool = False
    violations: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    CSV_FIELDS = (
        "N", "tau", "delta", "value_gap", "value_bound", "grad_l1_gap", "grad_bound", "hess_norm",
        "hess_bound", "affine_residual", "affine_bound", "in_stable_region", "bound_underflow", "violations",
    )

    def csv_row(self) -> dict:
        d = self.to_dict()
        row = {k: d[k] for k in self.CSV_FIELDS}
        row["violations"] = ";".join(self.violations)
        return row

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def stability_bounds(n: int, tau: float, delta: float) -> dict:
    """The four bounds for ``N`` scores at temperature ``tau`` and margin ``delta``.

    ``affine`` is the coefficient of ``||s - s'||^2``.
    """
    tau = _check_tau(tau)
    decay = math.exp(-delta / tau)
    leak = (n - 1) * decay
    return {
        "value": tau * math.log1p(leak),
        "grad": 2.0 * leak,
        "hess": leak / tau,
        "affine": leak / (2.0 * tau),
        "underflow": decay == 0.0 and n > 1,
    }


def default_probe(s: np.ndarray, i: int, delta: float, norm: float = 0.1, seed: int = 0) -> np.ndarray:
    """``s`` plus a random step of length at most ``norm`` that stays in the delta-stable region.

    The top coordinate is raised just enough to keep every margin at least
    ``delta``; the step is then shrunk (never grown) back to ``norm``, which
    keeps it inside because the feasible step set is convex and contains 0.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=s.size)
    u *= norm / np.linalg.norm(u)
    slack = s[i] - s - delta
    slack[i] = math.inf
    need = np.max(u - slack)
    u[i] = max(u[i], need)
    length = np.linalg.norm(u)
    if length > norm:
        u *= norm / length
    return s + u


def certify(s, tau: float, probe=None, seed: int = 0) -> StabilityReport:
    """Measure all four gaps for ``s`` at ``tau`` and compare with their bounds.

    The margin is measured from ``s``. With ``probe=None`` an in-region probe
    is generated by ``default_probe``. If the margin is not positive, or the
    probe leaves the delta-stable region, ``in_stable_region`` is False and
    the bounds are reported as None.
    """
    tau = _check_tau(tau)
    s = np.asarray(s, dtype=float).reshape(-1)
    n = s.size
    i, delta = margin(s)
    if probe is None:
        probe = default_probe(s, i, delta, seed=seed) if delta > 0 and n > 1 else s.copy()
    probe = np.asarray(probe, dtype=float).reshape(-1)
    if probe.size != n:
        raise ValueError("probe must have the same length as s")

    _, _, a = _tail(s, tau)
    p = softmax_gradient(s, tau)
    value_gap = tau * math.log1p(a)
    grad_gap = a / (1.0 + a) + float(np.sum(np.delete(p, i)))
    hess = hessian_spectral_norm(s, tau)
    resid = affine_residual(s, probe, tau)
    dist2 = float(np.sum((probe - s) ** 2))

    # the whole segment s -> s' must stay in the region (a convex set)
    stable = delta > 0 and all(in_stable_region(s + t * (probe - s), i, delta) for t in np.linspace(0, 1, 5))
    report = StabilityReport(
        N=n, tau=tau, delta=delta,
        value_gap=value_gap, value_bound=None,
        grad_l1_gap=grad_gap, grad_bound=None,
        hess_norm=hess, hess_bound=None,
        affine_residual=resid, affine_bound=None,
        in_stable_region=stable, probe_norm=math.sqrt(dist2),
    )
    if not stable:
        return report
    b = stability_bounds(n, tau, delta)
    report.value_bound = b["value"]
    report.grad_bound = b["grad"]
    report.hess_bound = b["hess"]
    report.affine_bound = b["affine"] * dist2
    report.bound_underflow = b["underflow"]
    for name, got, bound in (
        ("value", value_gap, report.value_bound),
        ("grad", grad_gap, report.grad_bound),
        ("hess", hess, report.hess_bound),
        ("affine", resid, report.affine_bound),
    ):
        if got > bound * (1 + BOUND_RTOL):
            report.violations.append(name)
    return report


def gradient_lipschitz_gap(s, s_probe, tau: float) -> float:
    """``||grad P(s) - grad P(s')||_2``, computed from the off-top components."""
    s = np.asarray(s, dtype=float).reshape(-1)
    sp = np.asarray(s_probe, dtype=float).reshape(-1)
    i = int(np.argmax(s))
    pa, pb = softmax_gradient(s, tau), softmax_gradient(sp, tau)
    diff = pa - pb
    # top component: (1 - p_i) terms differ without cancellation
    diff[i] = float(np.sum(np.delete(pb, i))) - float(np.sum(np.delete(pa, i)))
    return float(np.linalg.norm(diff))

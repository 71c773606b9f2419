"""
Soft and zero-temperature attention, power-Voronoi routing, log-lifting.

Everything here works in the projected query space ``R^{d_k}``. ``HeadData``
carries an optional query projection, which ``HeadData.project`` applies
explicitly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .trop_core import TIE_TOL, TempLike, TropicalPolynomial, as_temperature, eval_trop_poly

DEFAULT_BOX = (-4.0, 4.0)


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array")
    return m


@dataclass(frozen=True, eq=False)
class HeadData:
    """Keys, values and query projection of one attention head.

    ``q = x @ w_q + q_bias`` maps a model-space input to the key space. When
    ``lifted_values`` is given the head is in log-lifted mode: values must be
    strictly positive and equal ``exp(lifted_values / lift_tau)``.
    """

    keys: np.ndarray
    values: np.ndarray
    w_q: Optional[np.ndarray] = None
    q_bias: Optional[np.ndarray] = None
    lifted_values: Optional[np.ndarray] = None
    lift_tau: float = 1.0

    def __post_init__(self):
        keys = _as_matrix(self.keys, "keys")
        values = _as_matrix(self.values, "values")
        if keys.shape[0] < 1:
            raise ValueError("a head needs at least one key")
        if values.shape[0] != keys.shape[0]:
            raise ValueError("keys and values must have the same token count")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        if self.w_q is not None:
            w_q = _as_matrix(self.w_q, "w_q")
            if w_q.shape[1] != keys.shape[1]:
                raise ValueError("w_q must have shape (d_model, d_k)")
            object.__setattr__(self, "w_q", w_q)
        if self.q_bias is not None:
            b = np.asarray(self.q_bias, dtype=float).reshape(-1)
            if b.size != keys.shape[1]:
                raise ValueError("q_bias must have length d_k")
            object.__setattr__(self, "q_bias", b)
        if self.lifted_values is not None:
            lifted = _as_matrix(self.lifted_values, "lifted_values")
            if lifted.shape != values.shape:
                raise ValueError("lifted_values must match the shape of values")
            if np.any(values <= 0):
                raise ValueError("log-lifting requires strictly positive values")
            if not np.allclose(np.exp(lifted / self.lift_tau), values, rtol=1e-9, atol=0):
                raise ValueError("values are not exp(lifted_values / lift_tau)")
            object.__setattr__(self, "lifted_values", lifted)

    @classmethod
    def lifted(cls, keys, lifted_values, lift_tau: float = 1.0, **kw) -> "HeadData":
        lifted_values = _as_matrix(lifted_values, "lifted_values")
        return cls(keys, np.exp(lifted_values / lift_tau), lifted_values=lifted_values, lift_tau=lift_tau, **kw)

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[0]

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]

    @property
    def d_model(self) -> int:
        return self.d_k if self.w_q is None else self.w_q.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Map model-space inputs (``(d_model,)`` or ``(n, d_model)``) to queries."""
        x = np.asarray(x, dtype=float)
        q = x if self.w_q is None else x @ self.w_q
        if self.q_bias is not None:
            q = q + self.q_bias
        return q

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.project(x) @ self.keys.T

    def to_dict(self) -> dict:
        d = {"keys": self.keys.tolist(), "values": self.values.tolist()}
        if self.w_q is not None:
            d["w_q"] = self.w_q.tolist()
        if self.q_bias is not None:
            d["q_bias"] = self.q_bias.tolist()
        if self.lifted_values is not None:
            d["lifted_values"] = self.lifted_values.tolist()
            d["lift_tau"] = self.lift_tau
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadData":
        if d.get("lifted_values") is not None and "values" not in d:
            return cls.lifted(d["keys"], d["lifted_values"], d.get("lift_tau", 1.0),
                              w_q=d.get("w_q"), q_bias=d.get("q_bias"))
        return cls(
            d["keys"], d["values"], w_q=d.get("w_q"), q_bias=d.get("q_bias"),
            lifted_values=d.get("lifted_values"), lift_tau=d.get("lift_tau", 1.0),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HeadData":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RoutingResult:
    winner: int
    tie_set: frozenset = field(default_factory=frozenset)
    margin: float = 0.0

    @property
    def is_tie(self) -> bool:
        return len(self.tie_set) > 1


def _route_scores(scores: np.ndarray) -> RoutingResult:
    best = int(np.argmax(scores))
    top = scores[best]
    ties = frozenset(int(i) for i in np.flatnonzero(scores >= top - TIE_TOL))
    if len(ties) > 1:
        return RoutingResult(min(ties), ties, 0.0)
    if scores.size == 1:
        return RoutingResult(best, ties, float("inf"))
    second = np.max(np.delete(scores, best))
    return RoutingResult(best, ties, float(top - second))


def route_batch(scores: np.ndarray):
    """Vectorized routing over rows of ``scores``.

    Returns ``(winner, margin, tie)`` arrays; ``margin`` is ``inf`` for a
    single token and ties are flagged when the runner-up is within ``TIE_TOL``.
    """
    scores = np.asarray(scores, dtype=float)
    winner = np.argmax(scores, axis=1)
    if scores.shape[1] == 1:
        n = scores.shape[0]
        return winner, np.full(n, np.inf), np.zeros(n, dtype=bool)
    part = np.partition(scores, -2, axis=1)
    margin = part[:, -1] - part[:, -2]
    return winner, margin, margin <= TIE_TOL


def hard_routing(q, keys) -> RoutingResult:
    """Zero-temperature routing: argmax of ``<q, k_j>`` with the full tie set."""
    keys = _as_matrix(keys, "keys")
    q = np.asarray(q, dtype=float).reshape(-1)
    if keys.shape[0] == 0:
        raise ValueError("empty key list")
    if keys.shape[1] != q.size:
        raise ValueError("dimension mismatch between query and keys")
    return _route_scores(keys @ q)


def power_distance(q, sites, weights) -> np.ndarray:
    sites = _as_matrix(sites, "sites")
    q = np.asarray(q, dtype=float)
    diff = q[..., None, :] - sites
    return np.sum(diff * diff, axis=-1) - np.asarray(weights, dtype=float)


def power_voronoi_membership(q, sites, weights) -> RoutingResult:
    """Cell of ``q`` in the power diagram: argmin of ``||q - c_j||^2 - w_j``."""
    sites = _as_matrix(sites, "sites")
    weights = np.asarray(weights, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    if sites.shape[0] != weights.size:
        raise ValueError("length mismatch between sites and weights")
    if sites.shape[0] == 0:
        raise ValueError("empty site list")
    if sites.shape[1] != q.size:
        raise ValueError("dimension mismatch between query and sites")
    return _route_scores(-power_distance(q, sites, weights))


def key_power_weights(keys) -> np.ndarray:
    """Power weights ``||k_j||^2`` that turn dot-product routing into a power diagram."""
    keys = _as_matrix(keys, "keys")
    return np.sum(keys * keys, axis=1)


def softmax_weights(scores: np.ndarray, tau: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    z = (scores - scores.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_attention(q, head: HeadData, temp: TempLike) -> np.ndarray:
    """Softmax-weighted value average for a query already in key space.

    Raises:
        ValueError: for the zero-temperature marker (use ``hard_routing``).
    """
    temp = as_temperature(temp)
    if temp.is_zero:
        raise ValueError("use hard_routing for τ=0")
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != head.d_k:
        raise ValueError("dimension mismatch between query and keys")
    return softmax_weights(q @ head.keys.T, temp.tau) @ head.values


def _lifted_polys(head: HeadData, channel: int):
    if head.lifted_values is None:
        raise ValueError("head has no lifted_values")
    if not 0 <= channel < head.d_v:
        raise ValueError("channel out of range")
    num = TropicalPolynomial(head.lifted_values[:, channel], head.keys)
    den = TropicalPolynomial(np.zeros(head.n_tokens), head.keys)
    return num, den


def log_lifted_output(q, head: HeadData, channel: int) -> float:
    """Tropical rational output ``P_num,c(q) - P_denom(q)`` of one channel.

    Both polynomials are continuous, so the difference is defined on cell
    boundaries as well; ``log_lifted_candidates`` exposes the per-winner
    values there.

    Raises:
        ValueError: if the head is not in log-lifted mode.
    """
    num, den = _lifted_polys(head, channel)
    return float(eval_trop_poly(num, q)[0] - eval_trop_poly(den, q)[0])


def log_lifted_candidates(q, head: HeadData, channel: int) -> dict[int, float]:
    """Per-winner outputs on the tie locus.

    Maps every index in the routing tie set of ``q`` to ``v~_{j,c}``, the value
    the log-lifted map takes inside that winner's cell. Off the tie locus the
    mapping has a single entry.
    """
    _lifted_polys(head, channel)
    r = hard_routing(q, head.keys)
    return {j: float(head.lifted_values[j, channel]) for j in sorted(r.tie_set)}


def soft_log_output(q, head: HeadData, channel: int, tau: float) -> float:
    """``tau * log z_c`` of soft attention with values ``exp(v~ / tau)``.

    Computed in the log domain, so it stays finite where the direct
    exponentials would overflow.
    """
    _lifted_polys(head, channel)
    q = np.asarray(q, dtype=float).reshape(-1)
    s = head.keys @ q
    num = s + head.lifted_values[:, channel]
    m_n, m_d = num.max(), s.max()
    log_num = m_n + tau * np.log(np.sum(np.exp((num - m_n) / tau)))
    log_den = m_d + tau * np.log(np.sum(np.exp((s - m_d) / tau)))
    return float(log_num - log_den)


def sample_box(rng: np.random.Generator, n: int, dim: int, box=DEFAULT_BOX) -> np.ndarray:
    lo, hi = box_bounds(box, dim)
    return lo + (hi - lo) * rng.random((n, dim))


def box_bounds(box, dim: int):
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        return np.full(dim, arr[0]), np.full(dim, arr[1])
    if arr.shape != (dim, 2):
        raise ValueError("box must be (lo, hi) or one (lo, hi) pair per axis")
    return arr[:, 0], arr[:, 1]


def empty_cell_census(sites, weights, probe_budget: int, seed: int, box=DEFAULT_BOX) -> set[int]:
    """Indices whose power cell contains at least one strict-margin probe.

    Probes are uniform in ``box`` (default ``[-4, 4]^d``); probes within
    ``TIE_TOL`` of a wall are discarded. The result is a lower-bound census of
    the non-empty full-dimensional cells.
    """
    if probe_budget < 1000:
        raise ValueError("probe_budget must be at least 1000")
    sites = _as_matrix(sites, "sites")
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if sites.shape[0] != weights.size:
        raise ValueError("length mismatch between sites and weights")
    rng = np.random.Generator(np.random.Philox(seed))
    found: set[int] = set()
    chunk = 65536
    for start in range(0, probe_budget, chunk):
        q = sample_box(rng, min(chunk, probe_budget - start), sites.shape[1], box)
        neg = -(np.sum((q[:, None, :] - sites[None]) ** 2, axis=2) - weights)
        winner, _, tie = route_batch(neg)
        found.update(int(j) for j in np.unique(winner[~tie]))
    return found


def winner_grid(keys, xs: np.ndarray, ys: np.ndarray):
    """Zero-temperature winner map on the grid ``xs x ys`` (rows follow ``ys``)."""
    keys = _as_matrix(keys, "keys")
    gx, gy = np.meshgrid(xs, ys)
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    winner, margin, tie = route_batch(q @ keys.T)
    shape = gx.shape
    return winner.reshape(shape), margin.reshape(shape), tie.reshape(shape)

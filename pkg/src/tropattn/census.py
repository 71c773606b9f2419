"""
Toy tropical transformer blocks and linear-region censuses.

A layer is ``u = x + W_O [head_1(x); ...; head_H(x)]`` (residual optional)
followed by ``y = W2 relu(W1 u + b1) + b2`` (plus ``u`` when ``ffn_residual``).
At zero temperature each head returns the value of its routing winner. The
signature of an input is the tuple of routing winners and ReLU bits across
all layers; distinct signatures seen on a uniform sample give a lower bound
on the number of linear regions.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import HeadData, box_bounds, route_batch, softmax_weights
from .polytope import (
    construction_region_count,
    region_lower_bound,
    region_upper_bound,
    sawtooth_teeth,
)
from .trop_core import TIE_TOL, TempLike, as_temperature

BATCH_SIZE = 1 << 16
EXACT_COUNT_GUARD = 10**6


@dataclass(frozen=True, eq=False)
class BlockLayer:
    heads: tuple
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_o: Optional[np.ndarray] = None
    residual: bool = True
    ffn_residual: bool = False

    def __post_init__(self):
        heads = tuple(self.heads)
        if not heads:
            raise ValueError("a layer needs at least one head")
        object.__setattr__(self, "heads", heads)
        w1 = np.atleast_2d(np.asarray(self.w1, dtype=float))
        w2 = np.atleast_2d(np.asarray(self.w2, dtype=float))
        b1 = np.asarray(self.b1, dtype=float).reshape(-1)
        b2 = np.asarray(self.b2, dtype=float).reshape(-1)
        d_ff, d = w1.shape
        if b1.size != d_ff or w2.shape != (d, d_ff) or b2.size != d:
            raise ValueError("FFN shapes must be W1 (d_ff, d), b1 (d_ff,), W2 (d, d_ff), b2 (d,)")
        concat = sum(h.d_v for h in heads)
        if self.w_o is None:
            if concat != d:
                raise ValueError("identity W_O needs the concatenated head width to equal d")
            w_o = None
        else:
            w_o = np.atleast_2d(np.asarray(self.w_o, dtype=float))
            if w_o.shape != (concat, d):
                raise ValueError(f"W_O must have shape ({concat}, {d})")
        for h in heads:
            if h.d_model != d:
                raise ValueError("head query projection does not match the model dimension")
        for name, v in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2), ("w_o", w_o)):
            object.__setattr__(self, name, v)
        # units with an all-zero input row have a constant pre-activation, not a wall
        object.__setattr__(self, "_live", np.any(w1 != 0, axis=1))

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[0]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def to_dict(self) -> dict:
        return {
            "heads": [h.to_dict() for h in self.heads],
            "w_o": None if self.w_o is None else self.w_o.tolist(),
            "residual": self.residual,
            "ffn_residual": self.ffn_residual,
            "ffn": {"w1": self.w1.tolist(), "b1": self.b1.tolist(), "w2": self.w2.tolist(), "b2": self.b2.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockLayer":
        ffn = d["ffn"]
        return cls(
            heads=tuple(HeadData.from_dict(h) for h in d["heads"]),
            w1=ffn["w1"], b1=ffn["b1"], w2=ffn["w2"], b2=ffn["b2"],
            w_o=d.get("w_o"), residual=d.get("residual", True), ffn_residual=d.get("ffn_residual", False),
        )


@dataclass(frozen=True, eq=False)
class BlockNetwork:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        d = layers[0].dim
        if any(layer.dim != d for layer in layers):
            raise ValueError("every layer must map R^d to R^d with the same d")
        object.__setattr__(self, "layers", layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "layers": [layer.to_dict() for layer in self.layers]})

    @classmethod
    def from_json(cls, text: str) -> "BlockNetwork":
        data = json.loads(text)
        net = cls(tuple(BlockLayer.from_dict(layer) for layer in data["layers"]))
        if "dim" in data and int(data["dim"]) != net.dim:
            raise ValueError("declared dim does not match layer shapes")
        return net


@dataclass(frozen=True)
class Signature:
    routing: tuple
    bits: tuple
    boundary: bool = False
    dominant: Optional[tuple] = None

    def key(self) -> tuple:
        return (self.routing, self.bits)


@dataclass(frozen=True)
class BatchTrace:
    """Vectorized forward result: outputs plus per-layer discrete choices."""

    y: np.ndarray
    routing: np.ndarray  # (n, L, H) int
    bits: np.ndarray  # (n, L, d_ff) bool, zero-padded to the widest layer
    boundary: np.ndarray  # (n,) bool
    dominant: Optional[np.ndarray] = None  # (n, L, H) bool at finite tau


def _layer_forward(x: np.ndarray, layer: BlockLayer, tau: Optional[float]):
    n = x.shape[0]
    outs, routes, dom = [], [], []
    boundary = np.zeros(n, dtype=bool)
    for head in layer.heads:
        s = head.scores(x)
        winner, _, tie = route_batch(s)
        boundary |= tie
        if tau is None:
            outs.append(head.values[winner])
        else:
            w = softmax_weights(s, tau)
            outs.append(w @ head.values)
            dom.append(w[np.arange(n), winner] > 0.5)
        routes.append(winner)
    attn = np.concatenate(outs, axis=1)
    if layer.w_o is not None:
        attn = attn @ layer.w_o
    u = x + attn if layer.residual else attn
    pre = u @ layer.w1.T + layer.b1
    bits = pre > 0
    boundary |= np.any((np.abs(pre) <= TIE_TOL) & layer._live, axis=1)
    y = np.where(bits, pre, 0.0) @ layer.w2.T + layer.b2
    if layer.ffn_residual:
        y = y + u
    return y, np.stack(routes, axis=1), bits, boundary, (np.stack(dom, axis=1) if dom else None)


def forward_batch(x, net: BlockNetwork, temp: TempLike = 0) -> BatchTrace:
    """Run ``net`` on each row of ``x`` and record the discrete choices."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != net.dim:
        raise ValueError(f"dimension mismatch: network has d={net.dim}, input has {x.shape[1]}")
    temp = as_temperature(temp)
    tau = None if temp.is_zero else temp.tau
    n = x.shape[0]
    max_h = max(layer.n_heads for layer in net.layers)
    max_ff = max(layer.d_ff for layer in net.layers)
    routing = np.zeros((n, net.depth, max_h), dtype=np.int64)
    bits = np.zeros((n, net.depth, max_ff), dtype=bool)
    dominant = None if tau is None else np.zeros((n, net.depth, max_h), dtype=bool)
    boundary = np.zeros(n, dtype=bool)
    for li, layer in enumerate(net.layers):
        x, r, b, bd, dom = _layer_forward(x, layer, tau)
        routing[:, li, : layer.n_heads] = r
        bits[:, li, : layer.d_ff] = b
        boundary |= bd
        if dom is not None:
            dominant[:, li, : layer.n_heads] = dom
    return BatchTrace(x, routing, bits, boundary, dominant)


def forward(x, net: BlockNetwork, temp: TempLike = 0) -> tuple[np.ndarray, Signature]:
    """Single-input forward pass.

    Ties (and ReLU pre-activations within tolerance of zero) set the
    signature's boundary flag rather than raising.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    tr = forward_batch(x[None, :], net, temp)
    routing = tuple(
        tuple(int(v) for v in tr.routing[0, li, : layer.n_heads]) for li, layer in enumerate(net.layers)
    )
    bits = tuple(tuple(bool(v) for v in tr.bits[0, li, : layer.d_ff]) for li, layer in enumerate(net.layers))
    dom = None
    if tr.dominant is not None:
        dom = tuple(
            tuple(bool(v) for v in tr.dominant[0, li, : layer.n_heads]) for li, layer in enumerate(net.layers)
        )
    return tr.y[0], Signature(routing, bits, bool(tr.boundary[0]), dom)


def signature_rows(trace: BatchTrace) -> np.ndarray:
    """Pack each sample's signature into one fixed-width byte string (void dtype)."""
    n = trace.routing.shape[0]
    r = np.ascontiguousarray(trace.routing.reshape(n, -1).astype("<u4")).view(np.uint8).reshape(n, -1)
    b = np.packbits(trace.bits.reshape(n, -1), axis=1)
    packed = np.ascontiguousarray(np.concatenate([r, b], axis=1))
    return packed.view(np.dtype((np.void, packed.shape[1]))).ravel()


# ---------------------------------------------------------------------------
# Monte Carlo census


@dataclass(frozen=True)
class CensusReport:
    n_samples: int
    n_distinct: int
    n_boundary_discarded: int
    seed: int
    box: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_distinct": self.n_distinct,
            "n_boundary_discarded": self.n_boundary_discarded,
            "seed": self.seed,
            "box": [list(b) for b in self.box],
        }


def batch_generator(seed: int, batch: int) -> np.random.Generator:
    """Counter-based stream for batch ``batch``; draws depend only on (seed, batch, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, batch])))


def census_samples(seed: int, batch: int, count: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    rng = batch_generator(seed, batch)
    return lo + (hi - lo) * rng.random((count, lo.size))


def _census_batch(net, seed, b, count, lo, hi):
    x = census_samples(seed, b, count, lo, hi)
    tr = forward_batch(x, net, 0)
    rows = signature_rows(tr)[~tr.boundary]
    return np.unique(rows), int(tr.boundary.sum())


def distinct_signatures(net: BlockNetwork, box, n: int, seed: int, threads: int = 1,
                        batch_size: int = BATCH_SIZE):
    """Sorted unique signature rows and the boundary discard count."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = box_bounds(box, net.dim)
    jobs = [(b, min(batch_size, n - start)) for b, start in enumerate(range(0, n, batch_size))]

    def run(job):
        return _census_batch(net, seed, job[0], job[1], lo, hi)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    uniq = np.unique(np.concatenate([r[0] for r in results])) if results else np.array([])
    return uniq, sum(r[1] for r in results)


def monte_carlo_census(net: BlockNetwork, box, n: int, seed: int, threads: int = 1,
                       batch_size: int = BATCH_SIZE) -> CensusReport:
    """Count distinct zero-temperature signatures over ``n`` uniform samples in ``box``.

    Boundary samples are discarded and counted. The sample stream is split
    into fixed-size batches, each drawn from its own counter-based generator,
    so the report does not depend on ``threads``.
    """
    uniq, n_boundary = distinct_signatures(net, box, n, seed, threads, batch_size)
    lo, hi = box_bounds(box, net.dim)
    return CensusReport(n, int(uniq.size), int(n_boundary), seed, tuple(zip(lo.tolist(), hi.tolist())))


# ---------------------------------------------------------------------------
# constructive lower-bound network


def sawtooth(x, w: int):
    """``2w relu(x) + 4w sum_{m=1}^{2w-1} (-1)^m relu(x - m/2w)``: ``w`` teeth on [0, 1]."""
    if w < 1:
        raise ValueError("w must be a positive integer")
    x = np.asarray(x, dtype=float)
    out = 2 * w * np.maximum(0.0, x)
    for m in range(1, 2 * w):
        out = out + 4 * w * (-1) ** m * np.maximum(0.0, x - m / (2 * w))
    return out if out.ndim else float(out)


def parabolic_keys(n_tokens: int) -> np.ndarray:
    """Keys ``(p_j, -p_j^2 / 2)`` with ``p_j = (j - 0.5) / N``; walls fall at ``j / N``."""
    p = (np.arange(1, n_tokens + 1) - 0.5) / n_tokens
    return np.stack([p, -0.5 * p * p], axis=1)


def build_lower_bound_net(n_tokens: int, dim: int, d_ff: int, depth: int) -> BlockNetwork:
    """Block stack that maps ``[0,1]^d`` onto itself with ``(N * 2w)^d`` affine branches per layer.

    Head ``h`` lifts coordinate ``x_h`` to the query ``(x_h, 1)`` and routes
    it against parabolic keys, returning ``-p_j``; with the residual this
    recenters each Voronoi interval at zero. The FFN rescales by ``N``,
    shifts by 0.5 and applies the ``w``-tooth sawtooth coordinate-wise with
    ``2w`` ReLUs per coordinate, ``w = d_ff // 2d``. Unused units are held
    off by a negative bias.
    """
    if n_tokens < 1 or dim < 1 or depth < 1:
        raise ValueError("N, d, L must be positive")
    w = sawtooth_teeth(dim, d_ff)
    keys = parabolic_keys(n_tokens)
    values = -keys[:, :1]
    heads = []
    for h in range(dim):
        w_q = np.zeros((dim, 2))
        w_q[h, 0] = 1.0
        heads.append(HeadData(keys, values, w_q=w_q, q_bias=[0.0, 1.0]))
    w1 = np.zeros((d_ff, dim))
    b1 = np.full(d_ff, -1.0)
    w2 = np.zeros((dim, d_ff))
    for h in range(dim):
        for m in range(2 * w):
            unit = h * 2 * w + m
            w1[unit, h] = n_tokens
            b1[unit] = 0.5 - m / (2 * w)
            w2[h, unit] = 2 * w if m == 0 else 4 * w * (-1) ** m
    layer = BlockLayer(tuple(heads), w1, b1, w2, np.zeros(dim), w_o=None, residual=True, ffn_residual=False)
    return BlockNetwork((layer,) * depth)


def random_block_network(rng: np.random.Generator, dim: int, n_tokens: int, n_heads: int, d_ff: int,
                         depth: int, max_tokens: Optional[int] = None, key_scale: float = 1.0,
                         residual: bool = True, ffn_residual: bool = True) -> BlockNetwork:
    """Gaussian-initialized network over fixed context keys.

    Keys and values are drawn for ``max_tokens`` tokens and the first
    ``n_tokens`` are used, so networks that differ only in ``N`` share all
    other weights when built from generators in the same state.
    """
    max_tokens = max(n_tokens, max_tokens or n_tokens)
    layers = []
    for _ in range(depth):
        heads = []
        for _ in range(n_heads):
            keys = key_scale * rng.normal(size=(max_tokens, dim))
            values = rng.normal(size=(max_tokens, dim))
            w_q = rng.normal(size=(dim, dim)) / np.sqrt(dim)
            heads.append(HeadData(keys[:n_tokens], values[:n_tokens], w_q=w_q))
        w_o = rng.normal(size=(n_heads * dim, dim)) / np.sqrt(n_heads * dim)
        w1 = rng.normal(size=(d_ff, dim))
        b1 = rng.normal(size=d_ff)
        w2 = rng.normal(size=(dim, d_ff)) / np.sqrt(d_ff)
        b2 = rng.normal(size=dim)
        layers.append(BlockLayer(tuple(heads), w1, b1, w2, b2, w_o=w_o, residual=residual,
                                 ffn_residual=ffn_residual))
    return BlockNetwork(tuple(layers))


# ---------------------------------------------------------------------------
# exact 1-D oracle


def _split_points(slopes: np.ndarray, offsets: np.ndarray, lo: float, hi: float) -> list[float]:
    """Roots of pairwise differences of lines ``slopes * x + offsets`` inside (lo, hi)."""
    pts = []
    k = slopes.size
    for i in range(k):
        for j in range(i + 1, k):
            ds = slopes[i] - slopes[j]
            if ds != 0:
                x = -(offsets[i] - offsets[j]) / ds
                if lo < x < hi:
                    pts.append(float(x))
    return pts


def _refine(lo: float, hi: float, cuts: list[float]) -> list[tuple[float, float]]:
    edges = [lo] + sorted(set(cuts)) + [hi]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b - a > 1e-14]


def exact_pieces_1d(net: BlockNetwork, lo: float = 0.0, hi: float = 1.0):
    """Partition ``[lo, hi]`` into intervals on which every discrete choice is fixed.

    Works layer by layer on affine pieces ``z = a x + b``: routing walls are
    the pairwise crossings of the (affine) head scores, ReLU walls the roots
    of the affine pre-activations. Returns a list of ``(lo, hi, signature)``
    with signatures as nested tuples.
    """
    if net.dim != 1:
        raise ValueError("exact 1-D enumeration needs a network with d = 1")
    pieces = [(lo, hi, 1.0, 0.0, ())]
    for layer in net.layers:
        nxt = []
        for xl, xr, a, b, sig in pieces:
            cuts = []
            for head in layer.heads:
                slopes = head.scores(np.array([[a]]))[0] - head.scores(np.array([[0.0]]))[0]
                offsets = head.scores(np.array([[b]]))[0]
                cuts += _split_points(slopes, offsets, xl, xr)
            for ul, ur in _refine(xl, xr, cuts):
                mid = 0.5 * (ul + ur)
                z = np.array([[a * mid + b]])
                winners = tuple(int(np.argmax(h.scores(z)[0])) for h in layer.heads)
                attn = np.concatenate([h.values[j] for h, j in zip(layer.heads, winners)])
                if layer.w_o is not None:
                    attn = attn @ layer.w_o
                ua, ub = (a, b + attn[0]) if layer.residual else (0.0, attn[0])
                pa = layer.w1[:, 0] * ua
                pb = layer.w1[:, 0] * ub + layer.b1
                roots = [float(-pb[k] / pa[k]) for k in range(pa.size) if pa[k] != 0 and ul < -pb[k] / pa[k] < ur]
                for vl, vr in _refine(ul, ur, roots):
                    m2 = 0.5 * (vl + vr)
                    bits = (pa * m2 + pb) > 0
                    ya = float(layer.w2[0] @ np.where(bits, pa, 0.0))
                    yb = float(layer.w2[0] @ np.where(bits, pb, 0.0) + layer.b2[0])
                    if layer.ffn_residual:
                        ya, yb = ya + ua, yb + ub
                    nxt.append((vl, vr, ya, yb, sig + ((winners, tuple(bool(t) for t in bits)),)))
        pieces = nxt
    return [(p[0], p[1], p[4]) for p in pieces]


def exact_signature_count_1d(net: BlockNetwork, lo: float = 0.0, hi: float = 1.0) -> int:
    return len({p[2] for p in exact_pieces_1d(net, lo, hi)})


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryReport:
    n_tokens: int
    dim: int
    d_ff: int
    depth: int
    n_samples: int
    seed: int
    measured: int
    n_boundary: int
    exact: int
    construction: int
    lower: int
    upper: int


def census_vs_theory(n_tokens: int, dim: int, d_ff: int, depth: int, n_samples: int, seed: int,
                     threads: int = 1) -> TheoryReport:
    """Census of the lower-bound network next to the exact count and both bounds.

    The exact count uses 1-D breakpoint enumeration; for ``d >= 2`` the
    construction is separable, so it is the 1-D count of the same ``N, w, L``
    raised to the power ``d``.

    Raises:
        ValueError: if ``(N * 2w)^(dL)`` exceeds ``EXACT_COUNT_GUARD``.
    """
    expected = construction_region_count(n_tokens, dim, d_ff, depth)
    if expected > EXACT_COUNT_GUARD:
        raise ValueError("exact region count exceeds guard; reduce N, d or L")
    net = build_lower_bound_net(n_tokens, dim, d_ff, depth)
    rep = monte_carlo_census(net, (0.0, 1.0), n_samples, seed, threads)
    w = sawtooth_teeth(dim, d_ff)
    exact_1d = exact_signature_count_1d(build_lower_bound_net(n_tokens, 1, 2 * w, depth))
    return TheoryReport(
        n_tokens, dim, d_ff, depth, n_samples, seed,
        measured=rep.n_distinct,
        n_boundary=rep.n_boundary_discarded,
        exact=exact_1d**dim,
        construction=expected,
        lower=region_lower_bound(n_tokens, dim, d_ff, depth),
        upper=region_upper_bound(n_tokens, dim, dim, d_ff, depth),
    )

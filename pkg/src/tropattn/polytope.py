"""
Convex hulls, Minkowski sums and the combinatorial bound formulas.

Hulls are computed with Qhull (QuickHull) through ``scipy.spatial`` without
joggling, after two preprocessing steps done here: coincident points are
merged under a tolerance relative to the bounding-box diameter, and
affinely degenerate point sets are reduced to their affine hull by SVD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb, prod
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import ConvexHull, cKDTree

MAX_HULL_DIM = 8
COINCIDENCE_TOL = 1e-9
RANK_TOL = 1e-10
MINKOWSKI_GUARD = 10**7


def _lexsorted(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return points
    order = np.lexsort(points.T[::-1])
    return points[order]


@dataclass(frozen=True, eq=False)
class Polytope:
    """Vertex description of a convex polytope.

    ``vertices`` holds extreme points only, sorted lexicographically.
    ``effective_dim`` is the dimension of their affine hull.
    """

    dim: int
    vertices: np.ndarray
    effective_dim: int

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "vertices": self.vertices.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Polytope":
        data = json.loads(text)
        return convex_hull(np.asarray(data["vertices"], dtype=float), int(data["dim"]))

    def translate(self, p) -> "Polytope":
        p = np.asarray(p, dtype=float).reshape(1, -1)
        return Polytope(self.dim, _lexsorted(self.vertices + p), self.effective_dim)


def same_vertex_set(a: Polytope, b: Polytope, tol: float = 1e-7) -> bool:
    """Vertex-set equality under a tolerance relative to the joint diameter."""
    if a.dim != b.dim or a.n_vertices != b.n_vertices:
        return False
    both = np.vstack([a.vertices, b.vertices])
    scale = max(float(np.ptp(both, axis=0).max()), 1.0)
    dist, _ = cKDTree(b.vertices).query(a.vertices)
    dist_back, _ = cKDTree(a.vertices).query(b.vertices)
    return bool(dist.max() <= tol * scale and dist_back.max() <= tol * scale)


def _dedup(points: np.ndarray, tol: float) -> np.ndarray:
    """Indices of one representative per cluster of coincident points."""
    n = len(points)
    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    return np.sort(first)


def affine_frame(points: np.ndarray, rel_tol: float = RANK_TOL):
    """Return ``(center, basis, rank)`` of the affine hull of ``points``.

    ``basis`` has ``rank`` orthonormal rows; singular values below
    ``rel_tol * s_max`` are treated as zero.
    """
    center = points.mean(axis=0)
    centered = points - center
    if len(points) < 2:
        return center, np.zeros((0, points.shape[1])), 0
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return center, np.zeros((0, points.shape[1])), 0
    rank = int(np.sum(s > rel_tol * s[0]))
    return center, vt[:rank], rank


def convex_hull(points, dim: int | None = None) -> Polytope:
    """Extreme points of ``conv(points)``.

    Lower-dimensional inputs are handled inside their affine hull; the
    affine dimension is reported as ``effective_dim``.

    Raises:
        ValueError: on empty input, dimension mismatch, or ``dim > 8``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.shape[0] == 0:
        raise ValueError("convex hull needs at least one point")
    if dim is None:
        dim = pts.shape[1]
    if pts.shape[1] != dim:
        raise ValueError(f"dimension mismatch: points have dim {pts.shape[1]}, expected {dim}")
    if dim > MAX_HULL_DIM:
        raise ValueError("unsupported ambient dimension")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diam = float(np.linalg.norm(hi - lo))
    if diam == 0.0:
        return Polytope(dim, pts[:1].copy(), 0)
    normed = (pts - (lo + hi) / 2) / diam
    keep = _dedup(normed, COINCIDENCE_TOL)
    reps = normed[keep]
    center, basis, rank = affine_frame(reps)

    if rank == 0:
        idx = keep[:1]
    elif rank == 1:
        t = (reps - center) @ basis[0]
        idx = keep[[int(np.argmin(t)), int(np.argmax(t))]]
    elif len(reps) == rank + 1:
        # simplex: every point is extreme
        idx = keep
    else:
        reduced = (reps - center) @ basis.T
        hull = ConvexHull(reduced)
        idx = keep[np.sort(hull.vertices)]
    return Polytope(dim, _lexsorted(pts[idx]), rank)


def minkowski_points(parts: Sequence[Polytope]) -> np.ndarray:
    """All ``prod |V_h|`` vertex sums, in head-major order."""
    if not parts:
        raise ValueError("need at least one polytope")
    acc = parts[0].vertices
    for p in parts[1:]:
        acc = (acc[:, None, :] + p.vertices[None, :, :]).reshape(-1, acc.shape[1])
    return acc


def minkowski_sum(parts: Sequence[Polytope], guard: int = MINKOWSKI_GUARD) -> Polytope:
    """Extreme points of ``P_1 + ... + P_H``.

    Sums are folded left to right, taking the hull after each step; this
    visits every vertex of the full sum since ``vert(A + B)`` is a subset of
    ``vert(A) + vert(B)``.

    Raises:
        ValueError: on dimension mismatch, or if the product of vertex counts
            exceeds ``guard``.
    """
    if not parts:
        raise ValueError("need at least one polytope")
    dim = parts[0].dim
    if any(p.dim != dim for p in parts):
        raise ValueError("all summands must share the ambient dimension")
    if prod(p.n_vertices for p in parts) > guard:
        raise ValueError("sum too large; reduce N or H")
    acc = parts[0]
    for p in parts[1:]:
        pts = (acc.vertices[:, None, :] + p.vertices[None, :, :]).reshape(-1, dim)
        acc = convex_hull(pts, dim)
    return acc


def head_polytope(keys, w_q=None) -> Polytope:
    """Newton polytope of one head: hull of the keys pulled back through ``W_Q``.

    ``w_q`` has shape ``(d_model, d_k)``; the projected exponents are
    ``W_Q k_j`` in ``R^{d_model}``.
    """
    keys = np.asarray(keys, dtype=float)
    pts = keys if w_q is None else keys @ np.asarray(w_q, dtype=float).T
    return convex_hull(pts)


def generic_head_keys(n_tokens: int, n_heads: int, dim: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Best-effort generic-position key sets whose Minkowski sum is large.

    Each head's keys lie on a randomly rotated circle (a convex N-gon, so every
    key is a vertex). This does not guarantee ``N**H`` sum vertices.
    """
    out = []
    for _ in range(n_heads):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        theta = np.sort(rng.uniform(0, 2 * np.pi, size=n_tokens))
        if dim == 1:
            circle = np.cos(theta)[:, None]
        else:
            circle = np.stack([np.cos(theta), np.sin(theta)], axis=1) @ q[:2]
        out.append(circle)
    return out


# ---------------------------------------------------------------------------
# bound formulas (exact integers)


def zaslavsky_regions(n: int, d: int) -> int:
    """Maximum regions cut out by ``n`` affine hyperplanes in ``R^d``."""
    if n < 0 or d < 0:
        raise ValueError("n and d must be nonnegative")
    return sum(comb(n, j) for j in range(d + 1))


def minkowski_vertex_upper_bound(n_tokens: int, n_heads: int, dim: int) -> int:
    if n_tokens < 1 or n_heads < 1 or dim < 1:
        raise ValueError("N, H, d must be positive")
    if n_heads <= dim:
        return n_tokens * (1 + n_tokens) ** (n_heads - 1)
    return sum(comb(n_heads - 1, k) * n_tokens ** (k + 1) for k in range(dim))


@dataclass(frozen=True)
class BoundReport:
    n_tokens: int
    n_heads: int
    dim: int
    regime: str
    bound_value: int


def minkowski_bound_report(n_tokens: int, n_heads: int, dim: int) -> BoundReport:
    regime = "standard" if n_heads <= dim else "saturated"
    return BoundReport(n_tokens, n_heads, dim, regime, minkowski_vertex_upper_bound(n_tokens, n_heads, dim))


def region_upper_bound(n_tokens: int, n_heads: int, dim: int, d_ff: int, depth: int) -> int:
    """Per-layer refinement product ``(V_multi * zaslavsky(d_ff, d)) ** L``."""
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    if depth == 0:
        return 1
    per_layer = minkowski_vertex_upper_bound(n_tokens, n_heads, dim) * zaslavsky_regions(d_ff, dim)
    return per_layer**depth


def sawtooth_teeth(dim: int, d_ff: int) -> int:
    if d_ff < 2 * dim:
        raise ValueError("FFN too narrow for construction")
    return d_ff // (2 * dim)


def region_lower_bound(n_tokens: int, dim: int, d_ff: int, depth: int) -> int:
    """Headline constructive bound ``(N^d * floor(d_ff / 2d)^d) ** L``."""
    w = sawtooth_teeth(dim, d_ff)
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    return (n_tokens**dim * w**dim) ** depth


def construction_region_count(n_tokens: int, dim: int, d_ff: int, depth: int) -> int:
    """Exact region count of the parabolic-lift + sawtooth network, ``(N * 2w) ** (d L)``."""
    w = sawtooth_teeth(dim, d_ff)
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    return (n_tokens * 2 * w) ** (dim * depth)

"""
End-to-end experiment drivers behind the ``tropattn`` CLI.

Every driver is a pure function of its parameters and seed. Data files carry
no timestamps, floats are written with 17 significant digits, and parallel
work is reduced in a fixed order, so reruns are byte-identical at any
thread count.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .attention import softmax_weights, winner_grid
from .census import census_vs_theory, monte_carlo_census, random_block_network
from .polytope import (
    convex_hull,
    minkowski_sum,
    minkowski_vertex_upper_bound,
    region_lower_bound,
    region_upper_bound,
)
from .stability import BOUND_RTOL, certify

SCHEMA = "tropattn/1"
EXPERIMENTS = ("field", "minkowski_scaling", "region_scaling", "stability", "lower_bound_verify")
DEFAULT_SEEDS = {
    "field": 42,
    "minkowski_scaling": 7,
    "region_scaling": 1337,
    "stability": 0,
    "lower_bound_verify": 2024,
}
PALETTE = np.array([
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
])
CENSUS_FIELDS = ("N", "d", "H", "d_ff", "L", "n", "seed", "n_distinct", "n_boundary", "lower", "upper")


def fmt_num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isinf(x) or math.isnan(x):
            return str(x)
        return format(x, ".17g")
    if x is None:
        return ""
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, int) and not isinstance(x, bool) and abs(x) > 2**53:
        return str(x)  # exact big integers survive JSON as strings
    return x


def write_csv(path: Path, name: str, fields: Sequence[str], rows: Iterable[dict]) -> Path:
    """CSV with a ``# schema`` comment line followed by the header row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {SCHEMA}/{name}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([fmt_num(row.get(f)) for f in fields])
    return path


def write_json(path: Path, name: str, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"schema": f"{SCHEMA}/{name}", **_jsonable(payload)}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_table(out_dir: Path, stem: str, fields: Sequence[str], rows: list[dict], fmt: str) -> Path:
    if fmt == "json":
        return write_json(out_dir / f"{stem}.json", stem, {"columns": list(fields), "rows": [
            {f: r.get(f) for f in fields} for r in rows]})
    return write_csv(out_dir / f"{stem}.csv", stem, fields, rows)


def write_ppm(path: Path, rgb: np.ndarray) -> Path:
    """Binary P6 image from floats in [0, 1], shape (rows, cols, 3)."""
    h, w, _ = rgb.shape
    data = np.clip(np.rint(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())
    return path


def write_pgm(path: Path, gray: np.ndarray) -> Path:
    h, w = gray.shape
    data = np.clip(gray, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())
    return path


def sub_seed(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), *[int(k) for k in key]])


def sub_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(sub_seed(master, *key)))


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("THREADS", "1"))
    return max(1, int(threads))


def _pmap(fn: Callable, items: list, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


@dataclass
class ExperimentResult:
    experiment: str
    summary: dict
    files: list = field(default_factory=list)
    ok: bool = True
    messages: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# dequantization field


def field_keys(seed: int, n_keys: int = 5) -> np.ndarray:
    return sub_rng(seed, 0).normal(size=(n_keys, 2))


def field_values(seed: int, n_keys: int) -> np.ndarray:
    if n_keys <= len(PALETTE):
        return PALETTE[:n_keys].copy()
    extra = sub_rng(seed, 1).random((n_keys - len(PALETTE), 3))
    return np.vstack([PALETTE, extra])


def grid_centers(grid: int, box) -> np.ndarray:
    lo, hi = float(box[0]), float(box[1])
    return lo + (np.arange(grid) + 0.5) * (hi - lo) / grid


def _tau_tag(tau: float) -> str:
    return format(float(tau), "g").replace(".", "p")


def field_maps(keys: np.ndarray, values: np.ndarray, taus: Sequence[float], grid: int, box):
    """Soft-attention RGB maps per tau plus the zero-temperature winner map.

    Arrays are indexed ``[row, col]`` with row 0 at the bottom of the box.
    """
    xs = grid_centers(grid, box)
    winner, margin, tie = winner_grid(keys, xs, xs)
    gx, gy = np.meshgrid(xs, xs)
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    scores = q @ keys.T
    maps = {}
    for tau in taus:
        w = softmax_weights(scores, float(tau))
        rgb = (w @ values).reshape(grid, grid, values.shape[1])
        dominant = np.unique(np.argmax(w, axis=1)[np.max(w, axis=1) > 0.5])
        maps[float(tau)] = (rgb, dominant)
    return xs, winner, tie, maps


def run_field(out_dir, seed: int = DEFAULT_SEEDS["field"], keys=None, values=None,
              taus: Sequence[float] = (1.0, 0.5, 0.1, 0.001), grid: int = 256, box=(-4.0, 4.0),
              n_keys: int = 5, fmt: str = "csv", threads: Optional[int] = None) -> ExperimentResult:
    """Soft attention over a query grid at several temperatures.

    Writes per-tau RGB tables and P6 images, the tau = 0 winner map (table
    and P5 image), and a JSON summary with, per tau, the fraction of cells
    within 1e-2 (max-norm) of the winner's value and the set of keys that
    hold more than half the softmax mass somewhere on the grid.
    """
    if grid < 16:
        raise ValueError("grid must be at least 16")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = field_keys(seed, n_keys) if keys is None else np.asarray(keys, dtype=float)
    values = field_values(seed, len(keys)) if values is None else np.asarray(values, dtype=float)
    if keys.ndim != 2 or keys.shape[1] != 2:
        raise ValueError("field keys must be 2-D vectors")
    if values.shape != (len(keys), 3):
        raise ValueError("field values must be one RGB triple per key")
    xs, winner, tie, maps = field_maps(keys, values, taus, grid, box)
    hard = values[winner]

    files = []
    rows_idx = np.repeat(np.arange(grid), grid)
    cols_idx = np.tile(np.arange(grid), grid)
    qx, qy = xs[cols_idx], xs[rows_idx]
    win_rows = [
        {"row": r, "col": c, "qx": a, "qy": b, "winner": int(w), "tie": bool(t)}
        for r, c, a, b, w, t in zip(rows_idx, cols_idx, qx, qy, winner.ravel(), tie.ravel())
    ]
    files.append(write_table(out_dir, "field_winners", ("row", "col", "qx", "qy", "winner", "tie"), win_rows, fmt))
    gray = winner * (255 // max(1, len(keys) - 1))
    files.append(write_pgm(out_dir / "field_winners.pgm", gray[::-1]))

    per_tau = {}
    for tau, (rgb, dominant) in maps.items():
        diff = np.max(np.abs(rgb - hard), axis=2)
        match = float(np.mean(diff <= 1e-2))
        per_tau[format(tau, "g")] = {
            "tau": tau,
            "match_fraction": match,
            "dominant_winners": [int(j) for j in dominant],
            "n_dominant_winners": int(dominant.size),
        }
        flat = rgb.reshape(-1, 3)
        rows = [
            {"row": r, "col": c, "qx": a, "qy": b, "r": v[0], "g": v[1], "b": v[2]}
            for r, c, a, b, v in zip(rows_idx, cols_idx, qx, qy, flat)
        ]
        tag = _tau_tag(tau)
        files.append(write_table(out_dir, f"field_tau_{tag}", ("row", "col", "qx", "qy", "r", "g", "b"), rows, fmt))
        files.append(write_ppm(out_dir / f"field_tau_{tag}.ppm", rgb[::-1]))

    summary = {
        "experiment": "field",
        "seed": seed,
        "grid": grid,
        "box": list(box),
        "keys": keys,
        "values": values,
        "tie_cells": int(tie.sum()),
        "per_tau": per_tau,
        "version": __version__,
    }
    files.append(write_json(out_dir / "field_summary.json", "field_summary", summary))
    return ExperimentResult("field", summary, files)


# ---------------------------------------------------------------------------
# Minkowski vertex scaling


def minkowski_trial(seed: int, n_heads: int, n_tokens: int, trial: int, dim: int) -> int:
    rng = sub_rng(seed, n_heads, n_tokens, trial)
    parts = [convex_hull(rng.normal(size=(n_tokens, dim))) for _ in range(n_heads)]
    return minkowski_sum(parts).n_vertices


def run_minkowski_scaling(out_dir, seed: int = DEFAULT_SEEDS["minkowski_scaling"], dim: int = 4,
                          h_list: Sequence[int] = (1, 2, 3), n_list: Sequence[int] = tuple(range(2, 8)),
                          trials: int = 20, fmt: str = "csv", threads: Optional[int] = None) -> ExperimentResult:
    """Exact vertex counts of Minkowski sums of Gaussian head polytopes.

    Flags a failure if any count exceeds ``N (1 + N)^(H - 1)`` (or the
    saturated-regime sum) or a single head exceeds ``N``.
    """
    threads = resolve_threads(threads)
    out_dir = Path(out_dir)
    jobs = [(h, n, t) for h in sorted(h_list) for n in sorted(n_list) for t in range(trials)]
    counts = _pmap(lambda j: minkowski_trial(seed, j[0], j[1], j[2], dim), jobs, threads)

    rows, by_cell = [], {}
    ok, msgs = True, []
    for (h, n, t), f0 in zip(jobs, counts):
        bound = minkowski_vertex_upper_bound(n, h, dim)
        rows.append({"H": h, "N": n, "d": dim, "trial": t, "f0": f0, "bound": bound})
        by_cell.setdefault((h, n), []).append(f0)
        if f0 > bound or (h == 1 and f0 > n):
            ok = False
            msgs.append(f"H={h} N={n} trial={t}: f0={f0} exceeds bound {bound}")
    cells = []
    for (h, n), vals in sorted(by_cell.items()):
        cells.append({"H": h, "N": n, "d": dim, "trials": len(vals), "mean_f0": float(np.mean(vals)),
                      "max_f0": int(max(vals)), "bound": minkowski_vertex_upper_bound(n, h, dim)})

    files = [
        write_table(out_dir, "minkowski_trials", ("H", "N", "d", "trial", "f0", "bound"), rows, fmt),
        write_table(out_dir, "minkowski_summary", ("H", "N", "d", "trials", "mean_f0", "max_f0", "bound"), cells, fmt),
    ]
    summary = {"experiment": "minkowski_scaling", "seed": seed, "d": dim, "trials": trials,
               "cells": cells, "bounds_hold": ok}
    return ExperimentResult("minkowski_scaling", summary, files, ok, msgs)


# ---------------------------------------------------------------------------
# region-count scaling


def loglog_slope(ns: Sequence[float], counts: Sequence[float]) -> float:
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(counts, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def run_region_scaling(out_dir, seed: int = DEFAULT_SEEDS["region_scaling"], dim: int = 2,
                       l_list: Sequence[int] = (1, 2), n_list: Sequence[int] = tuple(range(2, 6)),
                       n_samples: int = 2_000_000, n_seeds: int = 5, n_heads: int = 2, d_ff: int = 8,
                       box=(-4.0, 4.0), fmt: str = "csv", threads: Optional[int] = None) -> ExperimentResult:
    """Monte Carlo region census of random Gaussian networks over ``box``.

    For a given replicate the network weights come from one stream shared by
    every ``(L, N)``: keys are drawn for ``max(N)`` tokens and truncated, and
    the ``L = 2`` network extends the ``L = 1`` network by one layer. Census
    samples use a separate stream per ``(L, N, replicate)``.
    """
    threads = resolve_threads(threads)
    out_dir = Path(out_dir)
    max_n = max(n_list)
    rows = []
    for L in sorted(l_list):
        for n in sorted(n_list):
            for rep in range(n_seeds):
                net = random_block_network(sub_rng(seed, rep), dim, n, n_heads, d_ff, L, max_tokens=max_n)
                census_seed = int(sub_seed(seed, 1, L, n, rep).generate_state(1)[0])
                r = monte_carlo_census(net, box, n_samples, census_seed, threads)
                rows.append({
                    "N": n, "d": dim, "H": n_heads, "d_ff": d_ff, "L": L, "n": n_samples, "seed": census_seed,
                    "replicate": rep, "n_distinct": r.n_distinct, "n_boundary": r.n_boundary_discarded,
                    "lower": region_lower_bound(n, dim, d_ff, L) if d_ff >= 2 * dim else None,
                    "upper": region_upper_bound(n, n_heads, dim, d_ff, L),
                })
    means = []
    for L in sorted(l_list):
        for n in sorted(n_list):
            vals = [r["n_distinct"] for r in rows if r["L"] == L and r["N"] == n]
            means.append({"L": L, "N": n, "mean_n_distinct": float(np.mean(vals)), "replicates": len(vals)})
    slopes = {}
    for L in sorted(l_list):
        pts = [(m["N"], m["mean_n_distinct"]) for m in means if m["L"] == L]
        if len(pts) >= 2:
            slopes[str(L)] = loglog_slope([p[0] for p in pts], [p[1] for p in pts])
    fields = CENSUS_FIELDS + ("replicate",)
    files = [
        write_table(out_dir, "region_census", fields, rows, fmt),
        write_table(out_dir, "region_summary", ("L", "N", "mean_n_distinct", "replicates"), means, fmt),
    ]
    violations = [r for r in rows if r["n_distinct"] > r["upper"]]
    summary = {"experiment": "region_scaling", "seed": seed, "means": means, "loglog_slope": slopes,
               "n_samples": n_samples}
    return ExperimentResult("region_scaling", summary, files, not violations,
                            [f"census above upper bound: {v}" for v in violations])


# ---------------------------------------------------------------------------
# constructive lower bound


DEFAULT_LB_GRID = ((2, 1, 2, 1), (3, 1, 2, 1), (2, 1, 2, 2), (2, 2, 4, 1))


def run_lower_bound_verify(out_dir, seed: int = DEFAULT_SEEDS["lower_bound_verify"],
                           grid: Sequence[Sequence[int]] = DEFAULT_LB_GRID, n_samples: int = 100_000,
                           fmt: str = "csv", threads: Optional[int] = None) -> ExperimentResult:
    """Census of the constructive network against its exact region count."""
    threads = resolve_threads(threads)
    out_dir = Path(out_dir)
    rows, ok, msgs = [], True, []
    for n, d, d_ff, L in grid:
        rep = census_vs_theory(int(n), int(d), int(d_ff), int(L), n_samples, seed, threads)
        rows.append({
            "N": n, "d": d, "H": d, "d_ff": d_ff, "L": L, "n": n_samples, "seed": seed,
            "n_distinct": rep.measured, "n_boundary": rep.n_boundary, "lower": rep.lower, "upper": rep.upper,
            "exact": rep.exact, "construction": rep.construction,
        })
        if rep.measured < rep.construction or rep.exact != rep.construction or rep.measured > rep.upper:
            ok = False
            msgs.append(f"(N={n}, d={d}, d_ff={d_ff}, L={L}): measured {rep.measured}, "
                        f"exact {rep.exact}, expected {rep.construction}")
    fields = CENSUS_FIELDS + ("exact", "construction")
    files = [write_table(out_dir, "lower_bound_verify", fields, rows, fmt)]
    summary = {"experiment": "lower_bound_verify", "seed": seed, "rows": rows, "all_exact": ok}
    return ExperimentResult("lower_bound_verify", summary, files, ok, msgs)


# ---------------------------------------------------------------------------
# stability certificates


def example_scores(n: int = 512, delta: float = 2.0) -> np.ndarray:
    s = np.zeros(n)
    s[0] = delta
    return s


def random_margin_scores(rng: np.random.Generator, max_n: int = 64):
    """A random score vector with positive margin and a log-uniform tau in [1e-3, 1]."""
    n = int(rng.integers(2, max_n + 1))
    tau = float(10 ** rng.uniform(-3, 0))
    s = rng.normal(scale=rng.uniform(0.1, 3.0), size=n)
    i = int(rng.integers(n))
    delta = tau * float(rng.uniform(0.05, 20.0))
    others = np.delete(s, i)
    s[i] = others.max() + delta
    return s, tau


def run_stability(out_dir, seed: int = DEFAULT_SEEDS["stability"], scores=None, tau: float = 0.125,
                  trials: int = 0, fmt: str = "csv", threads: Optional[int] = None) -> ExperimentResult:
    """Certify a score vector (default: N = 512, delta = 2, tau = 0.125) and optional random trials."""
    out_dir = Path(out_dir)
    cases = [(example_scores() if scores is None else np.asarray(scores, dtype=float), float(tau))]
    rng = sub_rng(seed, 0)
    cases += [random_margin_scores(rng) for _ in range(trials)]
    reports = [certify(s, t, seed=seed) for s, t in cases]
    rows = [r.csv_row() for r in reports]
    fields = reports[0].CSV_FIELDS
    files = [write_table(out_dir, "stability", fields, rows, fmt)]
    violated = [k for k, r in enumerate(reports) if r.violations]
    counts = {name: sum(name in r.violations for r in reports) for name in ("value", "grad", "hess", "affine")}
    summary = {"experiment": "stability", "seed": seed, "n_reports": len(reports), "violations_by_bound": counts,
               "first": reports[0].to_dict(), "bound_rtol": BOUND_RTOL}
    files.append(write_json(out_dir / "stability_summary.json", "stability_summary", summary))
    msgs = [f"case {k}: measured exceeds bound for {', '.join(reports[k].violations)}" for k in violated[:20]]
    return ExperimentResult("stability", summary, files, not violated, msgs)


RUNNERS = {
    "field": run_field,
    "minkowski_scaling": run_minkowski_scaling,
    "region_scaling": run_region_scaling,
    "stability": run_stability,
    "lower_bound_verify": run_lower_bound_verify,
}

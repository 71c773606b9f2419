"""
Tropical (max-plus) arithmetic and its Maslov deformation.

The tropical semiring replaces addition with ``max`` and multiplication with
``+``. The deformed arithmetic at temperature ``tau`` is LogSumExp,
``tau * log(sum(exp(v / tau)))``, which recovers ``max`` as ``tau -> 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

TIE_TOL = 1e-9
DOMINANCE_MASS = 1e-6


class _Bottom:
    """The tropical zero (-inf). Absorbing for ``trop_mul``, neutral for ``trop_add``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "BOTTOM"

    def __float__(self) -> float:
        return -math.inf

    def __reduce__(self):
        return (_Bottom, ())


BOTTOM = _Bottom()

TropScalar = Union[float, _Bottom]


def is_bottom(a) -> bool:
    return a is BOTTOM or (isinstance(a, float) and a == -math.inf)


def trop_add(a: TropScalar, b: TropScalar) -> TropScalar:
    """a ⊕ b = max(a, b)."""
    if is_bottom(a):
        return BOTTOM if is_bottom(b) else b
    if is_bottom(b):
        return a
    return max(a, b)


def trop_mul(a: TropScalar, b: TropScalar) -> TropScalar:
    """a ⊗ b = a + b."""
    if is_bottom(a) or is_bottom(b):
        return BOTTOM
    return a + b


def trop_sum(values: Iterable[TropScalar]) -> TropScalar:
    out: TropScalar = BOTTOM
    for v in values:
        out = trop_add(out, v)
    return out


def trop_prod(values: Iterable[TropScalar]) -> TropScalar:
    out: TropScalar = 0.0
    for v in values:
        out = trop_mul(out, v)
    return out


class ZeroTemperature:
    """Marker for the strict tropical limit tau = 0."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    is_zero = True

    def __repr__(self) -> str:
        return "ZERO_TEMP"

    def __reduce__(self):
        return (ZeroTemperature, ())


ZERO_TEMP = ZeroTemperature()


@dataclass(frozen=True)
class Temperature:
    tau: float

    is_zero = False

    def __post_init__(self):
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"temperature must be a finite positive real, got {self.tau!r}")


TempLike = Union[Temperature, ZeroTemperature, float, int]


def as_temperature(t: TempLike) -> Union[Temperature, ZeroTemperature]:
    """Coerce a float to a Temperature; ``0`` maps to the zero marker."""
    if isinstance(t, (Temperature, ZeroTemperature)):
        return t
    if t == 0:
        return ZERO_TEMP
    return Temperature(float(t))


def lse(values: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    """Max-shifted ``tau * logsumexp(values / tau)`` along ``axis`` (vectorized)."""
    values = np.asarray(values, dtype=float)
    m = np.max(values, axis=axis, keepdims=True)
    out = m + tau * np.log(np.sum(np.exp((values - m) / tau), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def lse_add(values: Sequence[float], temp: TempLike) -> float:
    """Deformed tropical sum of ``values`` at temperature ``temp``.

    Finite temperatures evaluate ``tau * log(sum(exp(v / tau)))`` with the
    maximum factored out, so no finite input overflows. The zero marker
    returns the exact maximum.

    Raises:
        ValueError: if ``values`` is empty.
    """
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("empty operand list")
    temp = as_temperature(temp)
    if temp.is_zero:
        return float(arr.max())
    # sort for permutation invariance of the floating-point sum
    arr = np.sort(arr)
    m = arr[-1]
    with np.errstate(over="ignore"):  # a gap overflowing to -inf contributes exp(-inf) = 0
        shifted = (arr[:-1] - m) / temp.tau
    return float(m + temp.tau * math.log1p(float(np.sum(np.exp(shifted)))))


def _merge_terms(coeffs: np.ndarray, exps: np.ndarray):
    merged: dict[tuple, float] = {}
    order: list[tuple] = []
    for c, a in zip(coeffs, exps):
        key = tuple(float(x) for x in a)
        if key in merged:
            merged[key] = max(merged[key], float(c))
        else:
            merged[key] = float(c)
            order.append(key)
    return (
        np.array([merged[k] for k in order], dtype=float),
        np.array(order, dtype=float).reshape(len(order), exps.shape[1]),
    )


@dataclass(frozen=True, eq=False)
class TropicalPolynomial:
    """``max_j (c_j + <alpha_j, x>)`` with exponent vectors stored row-wise.

    Terms with identical exponent vectors are merged on construction, keeping
    the larger coefficient.
    """

    coeffs: np.ndarray
    exponents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(-1)
        e = np.asarray(self.exponents, dtype=float)
        if e.ndim == 1:
            e = e.reshape(1, -1)
        if c.size == 0:
            raise ValueError("tropical polynomial needs at least one term")
        if e.shape[0] != c.size:
            raise ValueError("coefficient / exponent count mismatch")
        if e.shape[1] < 1:
            raise ValueError("exponent dimension must be positive")
        c, e = _merge_terms(c, e)
        c.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "exponents", e)

    @classmethod
    def from_terms(cls, terms: Iterable[tuple[float, Sequence[float]]]) -> "TropicalPolynomial":
        terms = list(terms)
        if not terms:
            raise ValueError("tropical polynomial needs at least one term")
        return cls([t[0] for t in terms], [list(t[1]) for t in terms])

    @property
    def dim(self) -> int:
        return self.exponents.shape[1]

    def __len__(self) -> int:
        return self.coeffs.size

    def term_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise ValueError(f"dimension mismatch: polynomial has dim {self.dim}, point has {x.size}")
        return self.coeffs + self.exponents @ x

    def __mul__(self, other: "TropicalPolynomial") -> "TropicalPolynomial":
        # tropical product: exponents add, coefficients add
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        c = (self.coeffs[:, None] + other.coeffs[None, :]).reshape(-1)
        e = (self.exponents[:, None, :] + other.exponents[None, :, :]).reshape(-1, self.dim)
        return TropicalPolynomial(c, e)


def eval_trop_poly(p: TropicalPolynomial, x, temp: TempLike = ZERO_TEMP) -> tuple[float, frozenset]:
    """Evaluate ``p`` at ``x``.

    Returns the value and the active index set: at tau = 0 the terms within
    ``TIE_TOL`` of the max, at finite tau the terms whose softmax mass is at
    least ``DOMINANCE_MASS``.
    """
    vals = p.term_values(x)
    temp = as_temperature(temp)
    if temp.is_zero:
        m = float(vals.max())
        return m, frozenset(int(i) for i in np.flatnonzero(vals >= m - TIE_TOL))
    value = lse_add(vals, temp)
    mass = np.exp((vals - value) / temp.tau)
    return value, frozenset(int(i) for i in np.flatnonzero(mass >= DOMINANCE_MASS))

"""Finite-alphabet probability arithmetic.

Everything is in bits.  Objects are immutable: the underlying arrays are
copied on construction and flagged read-only.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ArgumentError, ResourceError, ValidationError

SUM_TOL = 1e-12
MI_CLAMP_TOL = 1e-10
KL_INFINITY = math.inf

MAX_ENTRIES = int(os.environ.get("SECJSCC_MAX_ENTRIES", 10**6))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_size(n_entries: int) -> None:
    if n_entries > MAX_ENTRIES:
        raise ResourceError(
            f"dense tensor with {n_entries} entries exceeds cap {MAX_ENTRIES}",
            required=n_entries, cap=MAX_ENTRIES)


def _check_simplex(arr: np.ndarray, what: str) -> None:
    if arr.size == 0:
        raise ValidationError(f"{what}: empty probability array")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what}: non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(f"{what}: negative entry {arr.min():.3g}")
    total = float(arr.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"{what}: entries sum to {total!r}, not 1")


@dataclass(frozen=True)
class Alphabet:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise ValidationError(f"alphabet size must be a positive integer, got {self.size}")


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability vector over a single finite alphabet."""

    probs: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.probs)
        if arr.ndim != 1:
            raise ValidationError(f"Pmf needs a 1-d array, got shape {arr.shape}")
        _check_simplex(arr, "Pmf")
        object.__setattr__(self, "probs", arr)

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.probs.size)

    @classmethod
    def uniform(cls, size: int) -> "Pmf":
        return cls(np.full(size, 1.0 / size))

    @classmethod
    def point(cls, size: int, symbol: int) -> "Pmf":
        p = np.zeros(size)
        p[symbol] = 1.0
        return cls(p)

    def __len__(self):
        return self.probs.size


@dataclass(frozen=True, eq=False)
class JointPmf:
    """Dense joint probability tensor, one axis per random variable."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=float)
        if arr.ndim == 0:
            raise ValidationError("JointPmf needs at least one axis")
        _check_size(arr.size)
        arr = _frozen(arr)
        _check_simplex(arr, "JointPmf")
        object.__setattr__(self, "probs", arr)

    @property
    def axes(self) -> tuple:
        return tuple(Alphabet(s) for s in self.probs.shape)

    @property
    def shape(self) -> tuple:
        return self.probs.shape

    @property
    def ndim(self) -> int:
        return self.probs.ndim

    @classmethod
    def product(cls, *factors: Union[Pmf, "JointPmf"]) -> "JointPmf":
        """Joint law of independent components, axes concatenated in order."""
        out = np.array(1.0)
        for f in factors:
            out = np.multiply.outer(out, f.probs)
        return cls(out)

    def to_pmf(self) -> Pmf:
        return Pmf(self.probs.reshape(-1))


@dataclass(frozen=True, eq=False)
class ConditionalPmf:
    """Row-stochastic tensor p(out | given).

    ``rows`` has shape ``given_shape + out_shape``; every slice over the
    trailing ``len(out_shape)`` axes is a Pmf.
    """

    rows: np.ndarray
    n_given: int = 1

    def __post_init__(self):
        arr = np.asarray(self.rows, dtype=float)
        if not 0 <= self.n_given < arr.ndim:
            raise ValidationError("ConditionalPmf needs at least one output axis")
        _check_size(arr.size)
        arr = _frozen(arr)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("ConditionalPmf has negative or non-finite entries")
        out_axes = tuple(range(self.n_given, arr.ndim))
        sums = arr.sum(axis=out_axes)
        bad = np.abs(sums - 1.0) > SUM_TOL
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"ConditionalPmf row {idx} sums to {sums[idx]!r}")
        object.__setattr__(self, "rows", arr)

    @property
    def given_axes(self) -> tuple:
        return tuple(Alphabet(s) for s in self.rows.shape[: self.n_given])

    @property
    def out_axes(self) -> tuple:
        return tuple(Alphabet(s) for s in self.rows.shape[self.n_given:])

    def joint_with(self, given: Union[Pmf, JointPmf]) -> JointPmf:
        """Joint law p(given) p(out | given) with the given axes first."""
        g = given.probs
        if g.shape != self.rows.shape[: self.n_given]:
            raise ArgumentError(
                f"input shape {g.shape} does not match conditional {self.rows.shape[: self.n_given]}")
        extra = (1,) * (self.rows.ndim - self.n_given)
        return JointPmf(g.reshape(g.shape + extra) * self.rows)

    def then(self, other: "ConditionalPmf") -> "ConditionalPmf":
        """Compose with ``other`` whose given axes are this channel's outputs."""
        n_out = self.rows.ndim - self.n_given
        if other.n_given != n_out or other.rows.shape[:n_out] != self.rows.shape[self.n_given:]:
            raise ArgumentError("conditional shapes do not chain")
        a = self.rows.reshape(self.rows.shape[: self.n_given] + (-1,))
        b = other.rows.reshape((-1,) + other.rows.shape[other.n_given:])
        prod = np.tensordot(a, b, axes=([-1], [0]))
        return ConditionalPmf(_renormalize_rows(prod, self.n_given), n_given=self.n_given)


def _renormalize_rows(arr: np.ndarray, n_given: int) -> np.ndarray:
    # Only used to remove float drift from compositions of exact conditionals.
    axes = tuple(range(n_given, arr.ndim))
    return arr / arr.sum(axis=axes, keepdims=True)


def _probs(p) -> np.ndarray:
    if isinstance(p, (Pmf, JointPmf)):
        return p.probs
    arr = np.asarray(p, dtype=float)
    _check_simplex(arr, "probability array")
    return arr


def entropy_array(p: np.ndarray) -> float:
    """-sum p log2 p over all entries, no validation (hot loops)."""
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def entropy(p) -> float:
    """Shannon entropy in bits of a Pmf or JointPmf (0 log 0 = 0)."""
    h = entropy_array(_probs(p))
    return max(h, 0.0)


def _axis_set(axes, ndim: int, name: str) -> tuple:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(sorted(set(int(a) for a in axes)))
    if not axes:
        raise ArgumentError(f"{name}: empty axis set")
    for a in axes:
        if not 0 <= a < ndim:
            raise ArgumentError(f"{name}: axis {a} out of range for {ndim} axes")
    return axes


def marginal_array(probs: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Sum out every axis not in ``keep``; kept axes stay in increasing order."""
    keep = tuple(sorted(keep))
    drop = tuple(a for a in range(probs.ndim) if a not in keep)
    return probs.sum(axis=drop) if drop else probs


def marginalize(j: JointPmf, keep: Iterable[int]) -> JointPmf:
    keep = _axis_set(keep, j.ndim, "marginalize")
    if len(keep) == j.ndim:
        return j
    out = marginal_array(j.probs, keep)
    return JointPmf(out / out.sum())


def mutual_information_array(probs: np.ndarray, axes_a, axes_b) -> float:
    """I(A;B) from a raw joint tensor, unclamped."""
    a = tuple(sorted(axes_a))
    b = tuple(sorted(axes_b))
    return (entropy_array(marginal_array(probs, a)) + entropy_array(marginal_array(probs, b))
            - entropy_array(marginal_array(probs, a + b)))


def mutual_information(j: JointPmf, axes_a, axes_b) -> float:
    """I(A;B) in bits between two disjoint groups of axes of ``j``."""
    a = _axis_set(axes_a, j.ndim, "axes_a")
    b = _axis_set(axes_b, j.ndim, "axes_b")
    if set(a) & set(b):
        raise ArgumentError(f"axis sets overlap: {a} and {b}")
    mi = mutual_information_array(j.probs, a, b)
    if mi < -MI_CLAMP_TOL:
        raise ArithmeticError(f"mutual information {mi} below tolerance")
    return max(mi, 0.0)


def conditional_mutual_information(j: JointPmf, axes_a, axes_b, axes_c) -> float:
    """I(A;B|C) = H(A,C) + H(B,C) - H(A,B,C) - H(C)."""
    a = _axis_set(axes_a, j.ndim, "axes_a")
    b = _axis_set(axes_b, j.ndim, "axes_b")
    c = tuple(sorted(set(axes_c)))
    if not c:
        return mutual_information(j, a, b)
    c = _axis_set(c, j.ndim, "axes_c")
    if set(a) & set(b) or set(a) & set(c) or set(b) & set(c):
        raise ArgumentError("axis sets must be pairwise disjoint")
    p = j.probs
    cmi = (entropy_array(marginal_array(p, a + c)) + entropy_array(marginal_array(p, b + c))
           - entropy_array(marginal_array(p, a + b + c)) - entropy_array(marginal_array(p, c)))
    return max(cmi, 0.0) if cmi > -MI_CLAMP_TOL else cmi


def conditional_entropy(j: JointPmf, axes_a, axes_given) -> float:
    """H(A | B) in bits; an empty conditioning set gives H(A)."""
    a = _axis_set(axes_a, j.ndim, "axes_a")
    given = tuple(sorted(set(axes_given)))
    if not given:
        return entropy_array(marginal_array(j.probs, a))
    g = _axis_set(given, j.ndim, "axes_given")
    if set(a) & set(g):
        raise ArgumentError("axis sets overlap")
    h = (entropy_array(marginal_array(j.probs, tuple(sorted(a + g))))
         - entropy_array(marginal_array(j.probs, g)))
    return max(h, 0.0)


def _pair(p, q) -> tuple:
    pa, qa = _probs(p).ravel(), _probs(q).ravel()
    if pa.shape != qa.shape:
        raise ArgumentError(f"alphabet mismatch: {pa.size} vs {qa.size}")
    return pa, qa


def tv_distance(p, q) -> float:
    pa, qa = _pair(p, q)
    return float(min(max(0.5 * np.abs(pa - qa).sum(), 0.0), 1.0))


def kl_divergence(p, q) -> float:
    """D(p||q) in bits; +inf when p puts mass outside the support of q."""
    pa, qa = _pair(p, q)
    mask = pa > 0
    if np.any(qa[mask] <= 0):
        return KL_INFINITY
    return max(float(np.sum(pa[mask] * np.log2(pa[mask] / qa[mask]))), 0.0)

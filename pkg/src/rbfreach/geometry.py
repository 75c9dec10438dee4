"""Quadratic sets: intersections of homogenized quadratic inequalities.

A set over R^d is stored as a list of symmetric (d+1)x(d+1) matrices ``A_j``;
a point ``x`` belongs to the set iff ``[x; 1]^T A_j [x; 1] >= 0`` for every j.
Ellipsoids, ellipsoid complements, halfspaces and their products all fit this
shape, which keeps the S-procedure assembly uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SYM_RTOL = 1e-12


class DimensionError(ValueError):
    pass


def _check_symmetric(M: np.ndarray, what: str) -> None:
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_RTOL * scale:
        raise ValueError(f"{what} is not symmetric")


@dataclass(frozen=True)
class QuadraticForm:
    """One inequality ``[x;1]^T matrix [x;1] >= 0`` over R^dim."""

    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if self.dim < 1:
            raise DimensionError("dim must be positive")
        if M.shape != (self.dim + 1, self.dim + 1):
            raise DimensionError(
                f"form matrix has shape {M.shape}, expected {(self.dim + 1,) * 2}")
        _check_symmetric(M, "quadratic form")
        M = 0.5 * (M + M.T)
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    def value(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the form at a batch of points of shape (..., dim)."""
        P = np.asarray(points, dtype=float)
        H = self.matrix[:-1, :-1]
        g = self.matrix[:-1, -1]
        c = self.matrix[-1, -1]
        return np.einsum("...i,ij,...j->...", P, H, P) + 2.0 * P @ g + c

    @property
    def quadratic_part(self) -> np.ndarray:
        return self.matrix[:-1, :-1]


@dataclass(frozen=True)
class QuadraticSet:
    dim: int
    forms: tuple

    def __post_init__(self):
        forms = tuple(self.forms)
        if not forms:
            raise ValueError("a quadratic set needs at least one form")
        for f in forms:
            if not isinstance(f, QuadraticForm):
                raise TypeError("forms must be QuadraticForm instances")
            if f.dim != self.dim:
                raise DimensionError("all forms must share the set dimension")
        object.__setattr__(self, "forms", forms)

    @property
    def n_forms(self) -> int:
        return len(self.forms)

    @property
    def matrices(self) -> list[np.ndarray]:
        return [f.matrix for f in self.forms]

    def margins(self, points: np.ndarray) -> np.ndarray:
        """Form values, shape (..., n_forms)."""
        P = np.asarray(points, dtype=float)
        if P.shape[-1] != self.dim:
            raise DimensionError(
                f"point dimension {P.shape[-1]} does not match set dimension {self.dim}")
        return np.stack([f.value(P) for f in self.forms], axis=-1)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray | bool:
        """Membership test; accepts a single point or a batch (..., dim)."""
        P = np.asarray(points, dtype=float)
        inside = np.all(self.margins(P) >= -tol, axis=-1)
        if P.ndim == 1:
            return bool(inside)
        return inside

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box containing the set, derived from its ellipsoidal forms.

        A form bounds the coordinates it involves when its quadratic part,
        restricted to those coordinates, is negative definite. Zero-padded forms
        of product sets therefore bound their own block of coordinates. The box
        is the intersection of all such bounds.
        """
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        for f in self.forms:
            Hfull = -f.quadratic_part
            gfull = f.matrix[:-1, -1]
            sup = np.flatnonzero(np.any(Hfull != 0, axis=1))
            if sup.size == 0 or np.any(np.delete(gfull, sup) != 0):
                continue
            H = Hfull[np.ix_(sup, sup)]
            try:
                L = np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                continue
            g = gfull[sup]
            c = f.matrix[-1, -1]
            # x^T H x - 2 g^T x <= c  <=>  (x - h)^T H (x - h) <= c + h^T H h, h = H^{-1} g
            center = np.linalg.solve(H, g)
            r2 = c + center @ H @ center
            if r2 < 0:
                raise ValueError("set is empty: an ellipsoidal form has negative radius")
            Linv = np.linalg.inv(L)
            half = np.sqrt(r2 * np.sum(Linv**2, axis=0))
            lo[sup] = np.maximum(lo[sup], center - half)
            hi[sup] = np.minimum(hi[sup], center + half)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("set has no bounding ellipsoidal form")
        return lo, hi

    def sample(self, count: int, rng: np.random.Generator, *,
               max_attempts: int = 1000, tol: float = 0.0) -> np.ndarray:
        """Uniform samples by rejection from the bounding box.

        Raises:
            RuntimeError: if fewer than ``count`` points are accepted after
                ``max_attempts`` batches (the set may have negligible volume).
        """
        lo, hi = self.bounding_box()
        out = np.empty((0, self.dim))
        if count <= 0:
            return out
        batch = max(64, 2 * count)
        for _ in range(max_attempts):
            cand = lo + (hi - lo) * rng.random((batch, self.dim))
            keep = cand[self.contains(cand, tol=tol)]
            out = np.vstack([out, keep])
            if len(out) >= count:
                return out[:count]
        raise RuntimeError(
            f"rejection sampling accepted {len(out)} of {count} points; "
            "the set may have empty interior")


def ellipsoid(Q: np.ndarray, rho: float, center: np.ndarray | None = None) -> QuadraticSet:
    """``{x : (x-c)^T Q (x-c) <= rho^2}`` as the single form ``[[-Q, Qc], [c^T Q, rho^2 - c^T Q c]]``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] != Q.shape[1]:
        raise DimensionError("Q must be square")
    _check_symmetric(Q, "Q")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    d = Q.shape[0]
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    M = np.zeros((d + 1, d + 1))
    M[:d, :d] = -Q
    M[:d, d] = Q @ c
    M[d, :d] = Q @ c
    M[d, d] = rho**2 - c @ Q @ c
    return QuadraticSet(d, (QuadraticForm(d, M),))


def halfspace(a: np.ndarray, b: float) -> QuadraticSet:
    """``{x : a^T x <= b}`` as a degenerate form with zero quadratic part."""
    a = np.asarray(a, dtype=float).ravel()
    d = a.size
    M = np.zeros((d + 1, d + 1))
    M[:d, d] = -0.5 * a
    M[d, :d] = -0.5 * a
    M[d, d] = b
    return QuadraticSet(d, (QuadraticForm(d, M),))


def complement_interior(ell: QuadraticSet) -> QuadraticSet:
    """Closure of the complement of a single-form set (negated form)."""
    if ell.n_forms != 1:
        raise ValueError("expected a single-form set")
    f = ell.forms[0]
    return QuadraticSet(ell.dim, (QuadraticForm(ell.dim, -f.matrix),))


def intersect(*sets: QuadraticSet) -> QuadraticSet:
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise DimensionError("cannot intersect sets of different dimension")
    return QuadraticSet(dims.pop(), tuple(f for s in sets for f in s.forms))


def ring(safe: QuadraticSet, target: QuadraticSet) -> QuadraticSet:
    """Safe set minus the open interior of the target (both single ellipsoids)."""
    if safe.dim != target.dim:
        raise DimensionError("safe and target sets must share a dimension")
    if safe.n_forms != 1 or target.n_forms != 1:
        raise ValueError("ring expects single-form ellipsoids")
    return intersect(safe, complement_interior(target))


def _embed(form: QuadraticForm, total: int, offset: int) -> QuadraticForm:
    d = form.dim
    M = np.zeros((total + 1, total + 1))
    idx = np.r_[offset:offset + d, total]
    M[np.ix_(idx, idx)] = form.matrix
    return QuadraticForm(total, M)


def product(state_set: QuadraticSet, control_set: QuadraticSet) -> QuadraticSet:
    """Cartesian product acting on ``[x; u; 1]``."""
    n, m = state_set.dim, control_set.dim
    forms = [_embed(f, n + m, 0) for f in state_set.forms]
    forms += [_embed(f, n + m, n) for f in control_set.forms]
    return QuadraticSet(n + m, tuple(forms))


def as_ellipsoid(s: QuadraticSet) -> tuple[np.ndarray, float]:
    """Recover ``(Q, rho)`` from a centered single-form ellipsoid."""
    if s.n_forms != 1:
        raise ValueError("not a single-form set")
    M = s.forms[0].matrix
    Q = -M[:-1, :-1]
    if np.any(np.abs(M[:-1, -1]) > 0) or M[-1, -1] <= 0:
        raise ValueError("not a centered ellipsoid")
    return Q, float(np.sqrt(M[-1, -1]))

"""B-spline bases over log-volume and the second-difference roughness penalty.

The basis uses a clamped knot vector with interior knots at equally spaced
quantiles of the input values, so each basis function covers a comparable
amount of data under skewed volume distributions.  The penalty is the usual
P-spline construction: the Gram matrix of the second-difference operator,
plus a small ridge so its inverse exists as a prior covariance.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["PenaltyMatrix", "SplineBasis", "build_basis", "build_penalty",
           "default_ridge", "second_difference"]


@dataclass(frozen=True)
class SplineBasis:
    """Descriptor of a B-spline basis: degree, interior knots, boundary."""

    degree: int
    interior_knots: tuple
    boundary: tuple

    @property
    def k(self) -> int:
        """Basis dimension: (degree + 1) + number of interior knots."""
        return self.degree + 1 + len(self.interior_knots)

    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        d = self.degree
        return np.concatenate([
            np.full(d + 1, lo), np.asarray(self.interior_knots, dtype=np.float64),
            np.full(d + 1, hi),
        ])

    def evaluate(self, x) -> np.ndarray:
        """Rows of basis values at ``x`` via the Cox-de Boor recursion."""
        x = np.asarray(x, dtype=np.float64)
        t = self.knot_vector()
        lo, hi = self.boundary
        if np.any(x < lo) or np.any(x > hi):
            raise ValueError("evaluation points outside the boundary knots")

        # degree-0 indicators on half-open intervals, closed at the top end
        b = ((x[:, None] >= t[None, :-1]) & (x[:, None] < t[None, 1:])).astype(np.float64)
        spans = np.flatnonzero(np.diff(t) > 0)
        b[x == hi, spans[-1]] = 1.0

        for d in range(1, self.degree + 1):
            nb = len(t) - d - 1
            nxt = np.zeros((len(x), nb))
            for i in range(nb):
                den1 = t[i + d] - t[i]
                den2 = t[i + d + 1] - t[i + 1]
                term = 0.0
                if den1 > 0:
                    term = (x - t[i]) / den1 * b[:, i]
                if den2 > 0:
                    term = term + (t[i + d + 1] - x) / den2 * b[:, i + 1]
                nxt[:, i] = term
            b = nxt
        return b


@dataclass(frozen=True)
class PenaltyMatrix:
    """Second-difference penalty P = D'D + ridge * I (symmetric, PSD)."""

    dim: int
    ridge: float
    matrix: np.ndarray


def second_difference(k: int) -> np.ndarray:
    """The (k-2) x k second-difference operator."""
    return np.diff(np.eye(k), n=2, axis=0)


def default_ridge(k: int) -> float:
    # trace(D'D) = 6(k - 2) for the second-difference Gram matrix
    p = second_difference(k)
    return 1e-6 * np.trace(p.T @ p) / k


def build_penalty(k: int, ridge: float | None = None) -> PenaltyMatrix:
    """Build the roughness penalty for ``k`` spline coefficients.

    The pre-ridge matrix annihilates any linear coefficient sequence, so a
    vanishing roughness weight recovers a plain linear trend.  The ridge
    (default ``1e-6 * trace / k``) makes the matrix invertible so it can act
    as a prior precision.
    """
    if k < 3:
        raise ValueError("penalty needs at least 3 coefficients")
    if ridge is not None and ridge < 0:
        raise ValueError("ridge must be nonnegative")
    d = second_difference(k)
    p = d.T @ d
    if ridge is None:
        ridge = 1e-6 * np.trace(p) / k
    return PenaltyMatrix(dim=k, ridge=float(ridge), matrix=p + ridge * np.eye(k))


def _quantile_knots(v: np.ndarray, kappa: int) -> np.ndarray:
    probs = np.arange(1, kappa + 1) / (kappa + 1)
    knots = np.quantile(v, probs)
    lo, hi = float(v.min()), float(v.max())
    eps = 1e-9 * (hi - lo)
    knots = np.clip(knots, lo + eps, hi - eps)
    # collapse ties from heavily repeated values with a deterministic jitter
    for i in range(1, kappa):
        if knots[i] <= knots[i - 1]:
            knots[i] = knots[i - 1] + eps
    if knots[-1] >= hi:
        raise ValueError("knot ties too heavy near the upper boundary")
    return knots


def build_basis(v, degree: int = 3, kappa: int = 17):
    """Basis over the values ``v`` (one row per entry).

    Returns ``(SplineBasis, matrix)`` where ``matrix`` is ``len(v) x k`` with
    ``k = degree + 1 + kappa``.  Interior knots sit at equally spaced
    quantiles of ``v``; boundary knots at the extremes.  Rows are a partition
    of unity, and each row has at most ``degree + 1`` nonzero entries.
    """
    v = np.asarray(v, dtype=np.float64)
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if kappa < 0:
        raise ValueError("knot count must be nonnegative")
    k = degree + 1 + kappa
    if len(v) < k:
        raise ValueError(f"need at least k={k} values, got {len(v)}")
    if len(np.unique(v)) < kappa + 2:
        raise ValueError("too few distinct values for the requested knots")

    lo, hi = float(v.min()), float(v.max())
    interior = _quantile_knots(v, kappa) if kappa > 0 else np.empty(0)
    basis = SplineBasis(degree=degree, interior_knots=tuple(interior), boundary=(lo, hi))
    return basis, basis.evaluate(v)

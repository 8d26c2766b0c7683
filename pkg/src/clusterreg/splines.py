"""B-spline bases, difference penalties and monotone warps.

The same machinery serves the shape functions (evaluated at warped times)
and the time transformations themselves.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open (clamped) knot vector on ``domain`` with the given interior knots.

    Attributes
    ----------
    degree : int
        Polynomial degree, 3 for cubic splines.
    interior : ndarray
        Nondecreasing interior knots, strictly inside the domain.
    domain : tuple of float
        ``(lo, hi)`` interval on which the basis is defined.
    """

    degree: int
    interior: np.ndarray
    domain: tuple

    @property
    def lo(self):
        return self.domain[0]

    @property
    def hi(self):
        return self.domain[1]

    @property
    def full(self):
        d = self.degree + 1
        return np.concatenate([np.full(d, float(self.lo)), self.interior,
                               np.full(d, float(self.hi))])

    @property
    def n_basis(self):
        return len(self.interior) + self.degree + 1

    def to_dict(self):
        return {"degree": self.degree, "interior": self.interior.tolist(),
                "domain": [float(self.lo), float(self.hi)]}

    @classmethod
    def from_dict(cls, d):
        return make_knots(d["domain"], d["interior"], d["degree"])

    def __eq__(self, other):
        if not isinstance(other, KnotVector):
            return NotImplemented
        return (self.degree == other.degree and tuple(self.domain) == tuple(other.domain)
                and np.array_equal(self.interior, other.interior))

    def __hash__(self):
        return hash((self.degree, tuple(self.domain), self.interior.tobytes()))


def make_knots(domain, interior, degree=3, span=None):
    """Build a clamped knot vector.

    Parameters
    ----------
    domain : (float, float)
        Interval ``(lo, hi)`` with ``lo < hi``.
    interior : int or sequence of float
        Either explicit interior knot positions, or a count of equidistant
        knots. A count is placed strictly inside ``domain`` unless ``span``
        is given, in which case it runs from ``span[0]`` to ``span[1]``
        inclusive.
    degree : int
        Spline degree.
    span : (float, float), optional
        End points for equidistant placement.

    Examples
    --------
    >>> kv = make_knots((2, 18), [5.2, 8.2, 11.6, 14.8])
    >>> kv.n_basis
    8
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not lo < hi:
        raise ValueError(f"domain must satisfy lo < hi, got {domain}")
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if np.isscalar(interior):
        count = int(interior)
        if count < 0:
            raise ValueError("interior knot count must be nonnegative")
        if span is None:
            knots = np.linspace(lo, hi, count + 2)[1:-1]
        else:
            knots = np.linspace(span[0], span[1], count)
    else:
        knots = np.asarray(interior, dtype=float).ravel()
    if knots.size and np.any(np.diff(knots) < 0):
        raise ValueError("interior knots must be nondecreasing")
    if knots.size and (knots[0] <= lo or knots[-1] >= hi):
        raise ValueError(f"interior knots must lie strictly inside ({lo}, {hi})")
    knots = knots.copy()
    knots.setflags(write=False)
    return KnotVector(int(degree), knots, (lo, hi))


def eval_basis(kv, points, clamp=False):
    """Dense basis matrix, one row per point and one column per basis function.

    Points outside the domain raise unless ``clamp`` is set, in which case
    they are moved to the nearest end point.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if clamp:
        x = np.clip(x, kv.lo, kv.hi)
    elif x.size and (x.min() < kv.lo or x.max() > kv.hi):
        bad = x[(x < kv.lo) | (x > kv.hi)][0]
        raise ValueError(f"point {bad} outside spline domain [{kv.lo}, {kv.hi}]")
    return _kernels.design_dense(x, kv.full, kv.degree, kv.n_basis)


def spline_eval(kv, coef, points, clamp=False):
    """Evaluate the spline ``B(x)^T coef`` without forming the basis matrix."""
    x = np.atleast_1d(np.asarray(points, dtype=float))
    coef = np.ascontiguousarray(coef, dtype=float)
    if coef.shape != (kv.n_basis,):
        raise ValueError(f"expected {kv.n_basis} coefficients, got {coef.shape}")
    if clamp:
        x = np.clip(x, kv.lo, kv.hi)
    elif x.size and (x.min() < kv.lo or x.max() > kv.hi):
        raise ValueError(f"points outside spline domain [{kv.lo}, {kv.hi}]")
    return _kernels.spline_values(x, kv.full, kv.degree, coef)


def difference_matrix(dim, order):
    """Square difference operator with zero initial conditions.

    Row p maps coefficients to the p-th increment, treating the coefficients
    before index 0 as zero, so the matrix is unit lower triangular.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    weights = [1.0, -1.0] if order == 1 else [1.0, -2.0, 1.0]
    d = np.zeros((dim, dim))
    for lag, w in enumerate(weights):
        d += w * np.eye(dim, k=-lag)
    return d


def difference_penalty(dim, order):
    """Precision matrix ``D^T D`` of a first or second order random walk.

    Order 2 is the shrinkage prior on shape coefficients; order 1 applied to
    deviations from the identity warp is the prior on warp coefficients.
    Both are positive definite because the walk starts from zero.
    """
    d = difference_matrix(dim, order)
    return d.T @ d


def identity_phi(kv):
    """Warp coefficients reproducing the identity map (Greville abscissae)."""
    if kv.degree < 1:
        raise ValueError("identity warp needs degree >= 1")
    t = kv.full
    p = kv.degree
    return np.array([t[j + 1:j + p + 1].mean() for j in range(kv.n_basis)])


def check_phi(phi, bounds=None):
    """Raise if ``phi`` violates the ordering / range constraint."""
    phi = np.asarray(phi, dtype=float)
    if np.any(np.diff(phi) <= 0):
        raise ValueError("warp coefficients must be strictly increasing")
    if bounds is not None:
        lo, hi = bounds
        if phi[0] < lo or phi[-1] > hi:
            raise ValueError(f"warp coefficients must lie in [{lo}, {hi}]")


def warp_eval(kv, phi, t, bounds=None):
    """Evaluate the monotone time transformation ``B_mu(t)^T phi``.

    Parameters
    ----------
    kv : KnotVector
        Warp basis on the sampling window.
    phi : array_like
        Strictly increasing coefficients.
    t : array_like
        Times inside the sampling window.
    bounds : (float, float), optional
        Image interval ``[t_1 - delta, t_n + delta]`` that ``phi`` must
        respect. Only ordering is checked when omitted.
    """
    check_phi(phi, bounds)
    return spline_eval(kv, phi, t)


"""Model state, priors and the conjugate normal-gamma algebra.

Observation model for curve i in cluster k::

    y_i(t) = c_i + a_i * B_m(mu_i(t))^T theta_k + eps,   eps ~ N(0, 1/tau_k)
    mu_i(t) = B_mu(t)^T phi_i

with ``theta_k | tau_k ~ N(0, (tau_theta tau_k Sigma)^-1)`` and
``tau_k ~ Ga(a, b)`` as the Dirichlet process base measure.
"""

import hashlib
import math
from dataclasses import dataclass, field, fields, asdict
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from . import _kernels
from .splines import KnotVector, difference_penalty, eval_basis, identity_phi, spline_eval

MODES = ("joint", "clustering-only", "registration-only")

_LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """A factorization or probability computation broke down."""


@dataclass(eq=False)
class Curve:
    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.id = str(self.id)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError(f"curve {self.id}: times and values must be 1-d of equal length")
        if self.times.size == 0:
            raise ValueError(f"curve {self.id}: no observations")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"curve {self.id}: times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"curve {self.id}: values must be finite")

    def __len__(self):
        return self.times.size


class Dataset:
    """An ordered collection of curves on a common sampling window."""

    def __init__(self, curves):
        self.curves = list(curves)
        if not self.curves:
            raise ValueError("dataset is empty")
        ids = [c.id for c in self.curves]
        if len(set(ids)) != len(ids):
            raise ValueError("curve ids must be unique")

    @classmethod
    def from_matrix(cls, times, values, ids=None):
        values = np.atleast_2d(values)
        if ids is None:
            ids = [str(i) for i in range(values.shape[0])]
        return cls(Curve(i, times, v) for i, v in zip(ids, values))

    def __len__(self):
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, i):
        return self.curves[i]

    @property
    def ids(self):
        return [c.id for c in self.curves]

    def index(self, curve_id):
        try:
            return self.ids.index(str(curve_id))
        except ValueError:
            raise KeyError(f"unknown curve id {curve_id!r}") from None

    @property
    def window(self):
        return (min(c.times[0] for c in self.curves), max(c.times[-1] for c in self.curves))

    def to_csv_text(self):
        lines = ["curve_id,time,value"]
        for c in self.curves:
            lines.extend(f"{c.id},{t!r},{v!r}" for t, v in zip(c.times.tolist(), c.values.tolist()))
        return "\n".join(lines) + "\n"

    def content_hash(self):
        """Git blob hash of the canonical long-format CSV."""
        body = self.to_csv_text().encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class ShapeAtom:
    theta: np.ndarray
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("atom precision must be positive")


@dataclass
class CurveParams:
    phi: np.ndarray
    c: float = 0.0
    a: float = 1.0
    label: int = 0


@dataclass
class Priors:
    """Fixed prior constants. Gamma priors are parameterised by shape and rate."""

    a: float = 0.01
    b: float = 0.01
    a_c: float = 0.01
    b_c: float = 0.01
    a_a: float = 0.01
    b_a: float = 0.01
    a_theta: float = 0.01
    b_theta: float = 0.01
    a_phi: float = 0.01
    b_phi: float = 0.01
    a_alpha: float = 0.01
    b_alpha: float = 0.01
    tau_c0: float = 0.01
    tau_a0: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"prior constant {f.name} must be positive")


@dataclass
class Hyperparams:
    alpha: float = 1.0
    c0: float = 0.0
    a0: float = 1.0
    tau_c: float = 1.0
    tau_a: float = 1.0
    tau_theta: float = 1.0
    tau_phi: float = 1.0

    NAMES = ("alpha", "c0", "a0", "tau_c", "tau_a", "tau_theta", "tau_phi")

    def as_array(self):
        return np.array([getattr(self, n) for n in self.NAMES])

    @classmethod
    def from_array(cls, arr):
        return cls(*map(float, arr))


@dataclass(eq=False)
class ModelConfig:
    """Bases, warp range and model variant.

    ``delta`` widens the image of the warps to ``[t_1 - delta, t_n + delta]``
    where ``[t_1, t_n]`` is the warp knot domain; the shape basis must cover
    that interval. ``likelihood=False`` switches the data term off, which
    leaves the sampler exploring the prior (used for sampler checks).
    """

    shape_knots: KnotVector
    warp_knots: KnotVector
    delta: float = 0.0
    positive_amplitude: bool = True
    mode: str = "joint"
    priors: Priors = field(default_factory=Priors)
    likelihood: bool = True

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        lo, hi = self.bounds
        if self.shape_knots.lo > lo or self.shape_knots.hi < hi:
            raise ValueError("shape basis must cover the warp image "
                             f"[{lo}, {hi}], got {self.shape_knots.domain}")
        if self.warp_knots.n_basis < 2:
            raise ValueError("warp basis needs at least 2 functions")

    @property
    def window(self):
        return self.warp_knots.domain

    @property
    def bounds(self):
        return (self.warp_knots.lo - self.delta, self.warp_knots.hi + self.delta)

    @property
    def P(self):
        return self.shape_knots.n_basis

    @property
    def Q(self):
        return self.warp_knots.n_basis

    @cached_property
    def Sigma(self):
        return difference_penalty(self.P, 2)

    @cached_property
    def logdet_Sigma(self):
        return float(np.linalg.slogdet(self.Sigma)[1])

    @cached_property
    def Omega(self):
        return difference_penalty(self.Q, 1)

    @cached_property
    def phi0(self):
        return identity_phi(self.warp_knots)

    @property
    def warps_fixed(self):
        return self.mode == "clustering-only"

    @property
    def partition_fixed(self):
        return self.mode == "registration-only"

    def to_dict(self):
        return {"shape_knots": self.shape_knots.to_dict(), "warp_knots": self.warp_knots.to_dict(),
                "delta": self.delta, "positive_amplitude": self.positive_amplitude,
                "mode": self.mode, "priors": asdict(self.priors), "likelihood": self.likelihood}

    @classmethod
    def from_dict(cls, d):
        return cls(KnotVector.from_dict(d["shape_knots"]), KnotVector.from_dict(d["warp_knots"]),
                   d["delta"], d["positive_amplitude"], d["mode"], Priors(**d["priors"]),
                   d.get("likelihood", True))


@dataclass
class ChainState:
    """Complete sampler state.

    Atoms are stored as rows of ``theta``/``tau``; ``labels`` index those
    rows. ``copies[i, k]`` is curve i's warp registered to cluster k.
    """

    labels: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    phi: np.ndarray
    copies: np.ndarray
    c: np.ndarray
    a: np.ndarray
    hyper: Hyperparams

    @property
    def K(self):
        return self.theta.shape[0]

    @property
    def N(self):
        return self.labels.shape[0]

    @property
    def sizes(self):
        return np.bincount(self.labels, minlength=self.K)

    def atom(self, k):
        return ShapeAtom(self.theta[k].copy(), float(self.tau[k]))

    def curve_params(self, i):
        return CurveParams(self.phi[i].copy(), float(self.c[i]), float(self.a[i]), int(self.labels[i]))

    def copy(self):
        return ChainState(self.labels.copy(), self.theta.copy(), self.tau.copy(), self.phi.copy(),
                          self.copies.copy(), self.c.copy(), self.a.copy(),
                          Hyperparams(**asdict(self.hyper)))

    def check(self, config=None):
        """Raise AssertionError if the bookkeeping is inconsistent."""
        K, N = self.K, self.N
        assert self.tau.shape == (K,) and np.all(self.tau > 0), "bad atom precisions"
        assert self.labels.min() >= 0 and self.labels.max() < K, "label out of range"
        assert np.all(self.sizes > 0), "empty cluster present"
        assert self.sizes.sum() == N
        assert self.copies.shape[:2] == (N, K)
        assert np.all(np.diff(self.phi, axis=1) > 0), "warp ordering violated"
        assert np.all(np.diff(self.copies, axis=2) > 0), "warp copy ordering violated"
        if config is not None:
            lo, hi = config.bounds
            assert self.phi[:, 0].min() >= lo and self.phi[:, -1].max() <= hi
            assert self.copies[..., 0].min() >= lo and self.copies[..., -1].max() <= hi
            if config.positive_amplitude:
                assert np.all(self.a > 0)
        assert np.array_equal(self.copies[np.arange(N), self.labels], self.phi), \
            "own-cluster copy differs from warp"


# ---------------------------------------------------------------------------
# per-curve quantities


def warped_times(curve, phi, config):
    return spline_eval(config.warp_knots, phi, curve.times)


def design_matrix(curve, phi, config):
    """Shape basis evaluated at the warped sampling times of ``curve``."""
    w = warped_times(curve, phi, config)
    lo, hi = config.shape_knots.domain
    if w.min() < lo - 1e-9 or w.max() > hi + 1e-9:
        raise NumericalError("warped time left the shape domain; warp constraint broken")
    return eval_basis(config.shape_knots, w, clamp=True)


def log_likelihood(curve, params, atom, config):
    """Gaussian log-likelihood of one curve under a given atom."""
    if not atom.tau > 0:
        raise ValueError("atom precision must be positive")
    B = design_matrix(curve, params.phi, config)
    resid = curve.values - params.c - params.a * (B @ atom.theta)
    n = curve.values.size
    return 0.5 * n * (math.log(atom.tau) - _LOG_2PI) - 0.5 * atom.tau * float(resid @ resid)


@dataclass
class Conjugate:
    """Normal-gamma posterior for (theta, tau) given a set of curves.

    ``theta | tau ~ N(mean, (tau E)^-1)`` and ``tau ~ Ga(shape, rate)``.
    """

    E: np.ndarray
    mu: np.ndarray
    shape: float
    rate: float
    chol: np.ndarray
    mean: np.ndarray
    logdet_E: float


def _cholesky(E):
    try:
        return linalg.cholesky(E, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(E) / E.shape[0]
    try:
        return linalg.cholesky(E + jitter * np.eye(E.shape[0]), lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("posterior precision matrix is singular") from None


def conjugate_from_gram(gram, mu, rr, n, tau_theta, Sigma, a, b):
    """Normal-gamma posterior from pooled sufficient statistics.

    ``gram`` is sum a_i^2 B_i^T B_i, ``mu`` is sum a_i B_i^T (y_i - c_i),
    ``rr`` the summed squared residuals y_i - c_i and ``n`` their count.
    """
    E = tau_theta * Sigma + gram
    L = _cholesky(E)
    half = linalg.solve_triangular(L, mu, lower=True, check_finite=False)
    mean = linalg.solve_triangular(L.T, half, lower=False, check_finite=False)
    rate = 0.5 * max(rr - float(half @ half), 0.0) + b
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    return Conjugate(E, np.asarray(mu, dtype=float), 0.5 * n + a, rate, L, mean, logdet)


def conjugate_from_blocks(designs, resids, amps, tau_theta, Sigma, a, b):
    """Pool curves with design matrices ``designs`` and residuals ``y - c``."""
    P = Sigma.shape[0]
    gram = np.zeros((P, P))
    mu = np.zeros(P)
    rr = 0.0
    n = 0
    for B, r, amp in zip(designs, resids, amps):
        gram += (amp * amp) * (B.T @ B)
        mu += amp * (B.T @ r)
        rr += float(r @ r)
        n += r.size
    return conjugate_from_gram(gram, mu, rr, n, tau_theta, Sigma, a, b)


def conjugate_summaries(curve, params, config, hyper):
    """Single-curve posterior summaries (E_i, mu_i, a'_i, b'_i)."""
    B = design_matrix(curve, params.phi, config)
    pr = config.priors
    return conjugate_from_blocks([B], [curve.values - params.c], [params.a],
                                 hyper.tau_theta, config.Sigma, pr.a, pr.b)


def cluster_summaries(curves, params, config, hyper):
    """Pooled posterior summaries (E_k, mu_k, shape', rate') over one cluster."""
    if not curves:
        raise ValueError("cluster is empty")
    designs = [design_matrix(c, p.phi, config) for c, p in zip(curves, params)]
    pr = config.priors
    return conjugate_from_blocks(designs, [c.values - p.c for c, p in zip(curves, params)],
                                 [p.a for p in params], hyper.tau_theta, config.Sigma, pr.a, pr.b)


def draw_from_conjugate(conj, rng, std_gamma=None, std_normal=None):
    """Draw (theta, tau) from a normal-gamma posterior.

    Standard gamma/normal variates may be supplied to keep the caller's
    random stream layout fixed.
    """
    g = rng.standard_gamma(conj.shape) if std_gamma is None else std_gamma
    z = rng.standard_normal(conj.mean.size) if std_normal is None else std_normal
    tau = g / conj.rate
    if not tau > 0:
        tau = np.finfo(float).tiny
    theta = conj.mean + linalg.solve_triangular(conj.chol.T, z, lower=False,
                                                check_finite=False) / math.sqrt(tau)
    return ShapeAtom(theta, float(tau))


def draw_eta_conditional(curve, params, config, hyper, rng):
    """Fresh atom from the single-curve posterior G_i(eta | phi_i, y_i)."""
    return draw_from_conjugate(conjugate_summaries(curve, params, config, hyper), rng)


def log_marginal(conj, n, tau_theta, config):
    """log of the marginal density of the pooled data under the base measure."""
    pr = config.priors
    return (-0.5 * n * _LOG_2PI + 0.5 * config.P * math.log(tau_theta) + 0.5 * config.logdet_Sigma
            - 0.5 * conj.logdet_E + pr.a * math.log(pr.b) - gammaln(pr.a)
            + gammaln(conj.shape) - conj.shape * math.log(conj.rate))


def log_marginal_q0(curve, params, config, hyper):
    """log q_i0: log alpha plus the log marginal likelihood of a new cluster."""
    conj = conjugate_summaries(curve, params, config, hyper)
    return math.log(hyper.alpha) + log_marginal(conj, len(curve), hyper.tau_theta, config)


def cluster_log_marginal(curves, params, config, hyper):
    conj = cluster_summaries(curves, params, config, hyper)
    return log_marginal(conj, sum(len(c) for c in curves), hyper.tau_theta, config)


def curve_fit_values(times, phi, theta, c, a, config):
    """Curve profile c + a * B_m(B_mu(t)^T phi)^T theta on ``times``."""
    w = spline_eval(config.warp_knots, phi, times)
    return c + a * spline_eval(config.shape_knots, theta, w, clamp=True)


def packed_curves(dataset):
    """Concatenated values and offsets, the layout used by compiled kernels."""
    lengths = np.array([len(c) for c in dataset])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ys = np.concatenate([c.values for c in dataset])
    return ys, offsets


def all_logliks(dataset, state, config, warp_bases=None):
    """Per-curve log-likelihood under each curve's current cluster atom."""
    ys, offsets = packed_curves(dataset)
    if warp_bases is None:
        warp_bases = [eval_basis(config.warp_knots, c.times) for c in dataset]
    ws = np.concatenate([B @ p for B, p in zip(warp_bases, state.phi)])
    return _kernels.curve_logliks(ys, offsets, ws, state.c, state.a, state.theta, state.tau,
                                  state.labels, config.shape_knots.full, config.shape_knots.degree)

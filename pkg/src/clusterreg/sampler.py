"""Metropolis-within-Gibbs sampler for the DP mixture of warped shapes.

One iteration runs, in order: joint label/atom/warp updates per curve,
atom refresh given labels, curve levels and amplitudes, hyperparameters,
and the DP concentration.
"""

import json
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from . import _kernels
from .model import (
    ChainState,
    Hyperparams,
    ModelConfig,
    NumericalError,
    conjugate_from_gram,
    draw_from_conjugate,
    packed_curves,
)
from .splines import eval_basis

logger = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = "1.0.0"
HYPER_NAMES = Hyperparams.NAMES


@dataclass
class McmcConfig:
    """Run length, proposal scales and reproducibility settings.

    ``step`` is the initial scale of the truncated-normal warp proposals;
    by default half the mean gap between warp knots. During burn-in the
    per-coordinate scales adapt towards 25-45% acceptance when ``adapt`` is
    on. ``fixed`` names hyperparameters held at their starting values.
    """

    iterations: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    seed: int = 0
    step: float | None = None
    adapt: bool = True
    adapt_every: int = 50
    parallel_copies: bool = False
    fixed: tuple = ()
    debug: bool = False

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.step is not None and self.step < 0:
            raise ValueError("step must be nonnegative")
        unknown = set(self.fixed) - set(HYPER_NAMES)
        if unknown:
            raise ValueError(f"unknown fixed hyperparameters {sorted(unknown)}")
        self.fixed = tuple(self.fixed)

    @property
    def n_draws(self):
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self):
        d = asdict(self)
        d["fixed"] = list(self.fixed)
        return d


class Workspace:
    """Per-dataset constants reused every iteration."""

    def __init__(self, data, config):
        self.data = data
        self.config = config
        self.ys = [np.ascontiguousarray(c.values) for c in data]
        self.n = np.array([len(c) for c in data])
        self.warp_bases = [np.ascontiguousarray(eval_basis(config.warp_knots, c.times)) for c in data]
        self.packed_y, self.offsets = packed_curves(data)
        self.packed_warp_basis = np.ascontiguousarray(np.vstack(self.warp_bases))
        self.shape_full = config.shape_knots.full
        self.degree = config.shape_knots.degree
        self.P = config.P
        lo, hi = config.window
        for c in data:
            if c.times[0] < lo or c.times[-1] > hi:
                raise ValueError(f"curve {c.id} has times outside the warp domain [{lo}, {hi}]")

    def warped(self, i, phi):
        return self.warp_bases[i] @ phi

    def design(self, i, phi):
        return _kernels.design_dense(self.warped(i, phi), self.shape_full, self.degree, self.P)

    def fit(self, i, phi, theta):
        return _kernels.spline_values(self.warped(i, phi), self.shape_full, self.degree, theta)


def default_step(config):
    kv = config.warp_knots
    gaps = np.diff(np.unique(np.concatenate([[kv.lo], kv.interior, [kv.hi]])))
    return 0.5 * float(gaps.mean())


def initial_state(data, config, rng, ws=None):
    """One cluster, identity warps, c_i = mean(y_i), a_i = 1.

    The single atom is drawn from its conditional given that state.
    """
    ws = ws or Workspace(data, config)
    N = len(data)
    phi = np.tile(config.phi0, (N, 1))
    c = np.array([y.mean() for y in ws.ys])
    a = np.ones(N)
    hyper = Hyperparams()
    state = ChainState(np.zeros(N, dtype=np.int64), np.zeros((1, config.P)), np.ones(1), phi,
                       phi[:, None, :].copy(), c, a, hyper)
    _refresh_atom(state, 0, ws, rng)
    return state


# ---------------------------------------------------------------------------
# warps


def mh_update_warp(curve, phi, atom, params, config, rng, step, tau_phi=1.0):
    """One single-coordinate sweep of truncated-normal Metropolis updates.

    Targets the curve likelihood under ``atom`` times the random-walk prior
    on ``phi - phi0`` with precision ``tau_phi``, restricted to ordered
    coefficients inside the warp bounds. Returns the new coefficients and
    a per-coordinate acceptance indicator.
    """
    phi = np.array(phi, dtype=float)
    Q = phi.size
    steps = np.broadcast_to(np.asarray(step, dtype=float), (Q,)).copy()
    copies = phi[None, :].copy()
    accepted = np.zeros((1, Q), dtype=np.int64)
    loglik = np.zeros(1)
    tau = atom.tau if config.likelihood else 0.0
    wb = np.ascontiguousarray(eval_basis(config.warp_knots, curve.times))
    lo, hi = config.bounds
    _kernels.sweep_copies(curve.values, wb, params.c, params.a, copies, atom.theta[None, :],
                          np.array([tau]), config.phi0, config.Omega, tau_phi, lo, hi,
                          config.shape_knots.full, config.shape_knots.degree, steps,
                          rng.random((1, Q, 2)), accepted, loglik)
    return copies[0], accepted[0].astype(bool)


def _sweep(ws, i, state, copies, steps, rng, parallel, accept_counts):
    """Run the copy sweeps for curve i; returns log-likelihood per copy."""
    config = ws.config
    K = copies.shape[0]
    taus = state.tau if config.likelihood else np.zeros(K)
    unif = rng.random((K, config.Q, 2))
    accepted = np.zeros((K, config.Q), dtype=np.int64)
    loglik = np.empty(K)
    lo, hi = config.bounds
    kernel = _kernels.sweep_copies_parallel if parallel else _kernels.sweep_copies
    kernel(ws.ys[i], ws.warp_bases[i], state.c[i], state.a[i], copies, state.theta, taus,
           config.phi0, config.Omega, state.hyper.tau_phi, lo, hi, ws.shape_full, ws.degree,
           steps, unif, accepted, loglik)
    if accept_counts is not None:
        accept_counts[0] += accepted.sum(axis=0)
        accept_counts[1] += K * (steps > 0)
    return loglik


# ---------------------------------------------------------------------------
# step (i): labels, new atoms and warps


@dataclass
class LabelDraws:
    """Random inputs consumed by one pass of the label update.

    ``unif[i, k]`` drives the warp-copy sweep of curve i against cluster
    slot k, ``u_label[i]`` its cluster choice, and ``std_gamma[i]`` and
    ``std_normal[i]`` the atom of a cluster it opens.
    """

    unif: np.ndarray
    u_label: np.ndarray
    std_gamma: np.ndarray
    std_normal: np.ndarray

    @classmethod
    def draw(cls, rng, ws):
        config = ws.config
        N = len(ws.ys)
        pr = config.priors
        shapes = 0.5 * ws.n + pr.a if config.likelihood else np.full(N, pr.a)
        return cls(rng.random((N, N, config.Q, 2)), rng.random(N), rng.standard_gamma(shapes),
                   rng.standard_normal((N, config.P)))


def step_labels(state, ws, rng, steps, parallel=False, accept_counts=None, draws=None):
    """Update (phi_i, eta_i, s_i) for every curve in turn, in place.

    For each curve the warp copies registered to the other clusters are
    advanced by one Metropolis sweep, the cluster weights use those copies,
    and the new-cluster weight uses the curve's warp from the previous
    iteration. The chosen cluster's copy becomes the curve's warp; a new
    cluster gets an atom from the single-curve conditional.
    """
    config = ws.config
    steps = np.zeros(config.Q) if config.warps_fixed else np.asarray(steps, dtype=float)
    if config.partition_fixed:
        for i in range(state.N):
            _sweep(ws, i, state, state.copies[i], steps, rng, parallel, accept_counts)
            state.phi[i] = state.copies[i, 0]
        return state

    draws = draws or LabelDraws.draw(rng, ws)
    N, K, P, Q = state.N, state.K, config.P, config.Q
    theta = np.zeros((N, P))
    tau = np.ones(N)
    copies = np.zeros((N, N, Q))
    theta[:K], tau[:K], copies[:, :K] = state.theta, state.tau, state.copies
    labels = state.labels.astype(np.int64)
    phi = np.array(state.phi)
    accepted = np.zeros(Q, dtype=np.int64)
    trials = np.zeros(Q, dtype=np.int64)
    h = state.hyper
    lo, hi = config.bounds
    kernel = _kernels.label_sweep_parallel if parallel else _kernels.label_sweep
    K, status, bad = kernel(
        ws.packed_y, ws.offsets, ws.packed_warp_basis, state.c, state.a, labels, K, theta, tau,
        copies, phi, h.alpha, h.tau_theta, h.tau_phi, config.phi0, config.Omega, config.Sigma,
        config.logdet_Sigma, lo, hi, ws.shape_full, ws.degree, config.priors.a, config.priors.b,
        steps, config.likelihood, draws.unif, draws.u_label, draws.std_gamma, draws.std_normal,
        accepted, trials)
    if status == 1:
        raise NumericalError(f"new-cluster marginal failed for curve {ws.data[bad].id}")
    if status == 2:
        raise NumericalError(f"all cluster weights non-finite for curve {ws.data[bad].id}")
    state.labels = labels
    state.theta = theta[:K].copy()
    state.tau = tau[:K].copy()
    state.copies = copies[:, :K].copy()
    state.phi = phi
    if accept_counts is not None:
        accept_counts[0] += accepted
        accept_counts[1] += trials
    return state


# ---------------------------------------------------------------------------
# step (ii): atoms given labels


def _packed_warps(state, ws):
    return np.concatenate([ws.warped(i, state.phi[i]) for i in range(state.N)])


def _cluster_conjugate(state, k, ws, packed_w=None):
    config = ws.config
    pr = config.priors
    members = np.flatnonzero(state.labels == k)
    if not config.likelihood:
        members = members[:0]
    if packed_w is None:
        packed_w = _packed_warps(state, ws)
    gram, mu, rr, n = _kernels.pooled_gram(ws.packed_y, ws.offsets, packed_w, state.c, state.a,
                                           members, ws.shape_full, ws.degree, ws.P)
    return conjugate_from_gram(gram, mu, rr, n, state.hyper.tau_theta, config.Sigma, pr.a, pr.b)


def _refresh_atom(state, k, ws, rng, packed_w=None):
    atom = draw_from_conjugate(_cluster_conjugate(state, k, ws, packed_w), rng)
    state.theta[k] = atom.theta
    state.tau[k] = atom.tau


def resample_atoms(state, ws, rng):
    """Redraw every (theta*_k, tau*_k) from its pooled conditional, in place."""
    packed_w = _packed_warps(state, ws)
    for k in range(state.K):
        _refresh_atom(state, k, ws, rng, packed_w)
    return state


# ---------------------------------------------------------------------------
# step (iii): remaining conditionals


def truncated_normal_positive(mean, sd, rng):
    """Draw N(mean, sd^2) restricted to (0, inf) by inverse CDF on the upper tail."""
    mean = np.asarray(mean, dtype=float)
    v = rng.random(mean.shape)
    z = -ndtri_exp(np.log(v) + log_ndtr(mean / sd))
    return np.maximum(mean + sd * z, np.finfo(float).tiny)


def update_scalars(state, ws, rng):
    """Gibbs updates of curve levels c_i, then amplitudes a_i, in place."""
    config = ws.config
    h = state.hyper
    N = state.N
    packed_f = _kernels.curve_fits(_packed_warps(state, ws), ws.offsets, state.theta,
                                   state.labels, ws.shape_full, ws.degree)
    tau_i = state.tau[state.labels] if config.likelihood else np.zeros(N)
    seg = ws.offsets[:-1]
    resid = ws.packed_y - np.repeat(state.a, ws.n) * packed_f
    prec = h.tau_c + ws.n * tau_i
    mean = (h.tau_c * h.c0 + tau_i * np.add.reduceat(resid, seg)) / prec
    state.c = mean + rng.standard_normal(N) / np.sqrt(prec)

    cross = np.add.reduceat(packed_f * (ws.packed_y - np.repeat(state.c, ws.n)), seg)
    ff = np.add.reduceat(packed_f * packed_f, seg)
    prec = h.tau_a + tau_i * ff
    mean = (h.tau_a * h.a0 + tau_i * cross) / prec
    sd = 1.0 / np.sqrt(prec)
    if config.positive_amplitude:
        state.a = truncated_normal_positive(mean, sd, rng)
    else:
        state.a = mean + sd * rng.standard_normal(N)
    return state


def _gamma(rng, shape, rate):
    return rng.standard_gamma(shape) / rate


def update_hypers(state, ws, rng, fixed=()):
    """Conjugate updates of c0, a0, tau_c, tau_a, tau_theta, tau_phi, in place."""
    config = ws.config
    pr = config.priors
    h = state.hyper
    N = state.N
    if "c0" not in fixed:
        prec = pr.tau_c0 + N * h.tau_c
        h.c0 = float(h.tau_c * state.c.sum() / prec + rng.standard_normal() / math.sqrt(prec))
    if "a0" not in fixed:
        prec = pr.tau_a0 + N * h.tau_a
        h.a0 = float((pr.tau_a0 + h.tau_a * state.a.sum()) / prec
                     + rng.standard_normal() / math.sqrt(prec))
    if "tau_c" not in fixed:
        h.tau_c = float(_gamma(rng, pr.a_c + 0.5 * N, pr.b_c + 0.5 * np.sum((state.c - h.c0) ** 2)))
    if "tau_a" not in fixed:
        h.tau_a = float(_gamma(rng, pr.a_a + 0.5 * N, pr.b_a + 0.5 * np.sum((state.a - h.a0) ** 2)))
    if "tau_theta" not in fixed:
        quad = np.einsum("kp,pq,kq->k", state.theta, config.Sigma, state.theta)
        h.tau_theta = float(_gamma(rng, pr.a_theta + 0.5 * state.K * config.P,
                                   pr.b_theta + 0.5 * np.sum(state.tau * quad)))
    if "tau_phi" not in fixed:
        d = state.phi - config.phi0
        quad = np.einsum("iq,qr,ir->", d, config.Omega, d)
        h.tau_phi = float(_gamma(rng, pr.a_phi + 0.5 * N * config.Q, pr.b_phi + 0.5 * quad))
    return state


def alpha_mixture(alpha, K, N, a_alpha, b_alpha, x):
    """Mixing weight and gamma parameters of alpha | x, K."""
    rate = b_alpha - math.log(x)
    odds = (a_alpha + K - 1) / (N * rate)
    pi_x = odds / (1.0 + odds)
    return pi_x, (a_alpha + K, rate), (a_alpha + K - 1, rate)


def update_alpha(state, rng, priors):
    """Auxiliary-variable Gibbs update of the DP concentration, in place."""
    h = state.hyper
    N, K = state.N, state.K
    x = rng.beta(h.alpha + 1.0, N)
    x = max(x, np.finfo(float).tiny)
    pi_x, first, second = alpha_mixture(h.alpha, K, N, priors.a_alpha, priors.b_alpha, x)
    shape, rate = first if rng.random() < pi_x else second
    h.alpha = float(max(_gamma(rng, shape, rate), np.finfo(float).tiny))
    return state


# ---------------------------------------------------------------------------
# chain driver


@dataclass
class Trace:
    """Thinned posterior draws.

    Atoms are ragged across draws: draw d owns rows
    ``atom_offsets[d]:atom_offsets[d+1]`` of ``theta``/``tau``.
    """

    labels: np.ndarray
    phi: np.ndarray
    c: np.ndarray
    a: np.ndarray
    hyper: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    atom_offsets: np.ndarray
    loglik: np.ndarray
    meta: dict = field(default_factory=dict)

    BLOCKS = ("labels", "phi", "c", "a", "hyper", "theta", "tau", "atom_offsets", "loglik")

    @property
    def n_draws(self):
        return self.labels.shape[0]

    @property
    def K(self):
        return np.diff(self.atom_offsets)

    def atoms(self, d):
        s, e = self.atom_offsets[d], self.atom_offsets[d + 1]
        return self.theta[s:e], self.tau[s:e]

    def hyper_column(self, name):
        return self.hyper[:, HYPER_NAMES.index(name)]

    def model_config(self):
        return ModelConfig.from_dict(self.meta["model_config"])

    def subset(self, draws):
        """Trace restricted to the given draw indices (order preserved)."""
        draws = np.asarray(draws)
        thetas, taus, offs = [], [], [0]
        for d in draws:
            th, ta = self.atoms(d)
            thetas.append(th)
            taus.append(ta)
            offs.append(offs[-1] + len(ta))
        return Trace(self.labels[draws], self.phi[draws], self.c[draws], self.a[draws],
                     self.hyper[draws], np.vstack(thetas), np.concatenate(taus), np.array(offs),
                     self.loglik[draws], dict(self.meta))

    def block_hashes(self):
        return {b: hashlib.sha1(np.ascontiguousarray(getattr(self, b)).tobytes()).hexdigest()
                for b in self.BLOCKS}

    def save(self, directory):
        """Write one ``.npy`` per block plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for b in self.BLOCKS:
            np.save(directory / f"{b}.npy", getattr(self, b), allow_pickle=False)
        manifest = dict(self.meta)
        manifest["format_version"] = TRACE_FORMAT_VERSION
        manifest["n_draws"] = int(self.n_draws)
        manifest["blocks"] = {b: {"file": f"{b}.npy", "sha1": h}
                              for b, h in self.block_hashes().items()}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no trace manifest in {directory}")
        manifest = json.loads(manifest_path.read_text())
        blocks = {}
        for b in cls.BLOCKS:
            info = manifest.get("blocks", {}).get(b)
            path = directory / f"{b}.npy"
            if info is None or not path.exists():
                raise ValueError(f"trace block {b!r} missing from {directory}")
            try:
                arr = np.load(path, allow_pickle=False)
            except (ValueError, OSError, EOFError) as exc:
                raise ValueError(f"trace block {b!r} is truncated or corrupt: {exc}") from None
            if hashlib.sha1(np.ascontiguousarray(arr).tobytes()).hexdigest() != info["sha1"]:
                raise ValueError(f"trace block {b!r} is truncated or corrupt")
            blocks[b] = arr
        if blocks["labels"].shape[0] != manifest["n_draws"]:
            raise ValueError("trace draw count does not match manifest")
        meta = {k: v for k, v in manifest.items() if k not in ("blocks", "n_draws", "format_version")}
        return cls(**blocks, meta=meta)


class _Recorder:
    def __init__(self, n_draws, N, Q):
        self.labels = np.empty((n_draws, N), dtype=np.int64)
        self.phi = np.empty((n_draws, N, Q))
        self.c = np.empty((n_draws, N))
        self.a = np.empty((n_draws, N))
        self.hyper = np.empty((n_draws, len(HYPER_NAMES)))
        self.loglik = np.empty((n_draws, N))
        self.thetas = []
        self.taus = []
        self.d = 0

    def record(self, state, loglik):
        d = self.d
        self.labels[d] = state.labels
        self.phi[d] = state.phi
        self.c[d] = state.c
        self.a[d] = state.a
        self.hyper[d] = state.hyper.as_array()
        self.loglik[d] = loglik
        self.thetas.append(state.theta.copy())
        self.taus.append(state.tau.copy())
        self.d += 1

    def finish(self, meta):
        offsets = np.concatenate([[0], np.cumsum([len(t) for t in self.taus])]).astype(np.int64)
        return Trace(self.labels, self.phi, self.c, self.a, self.hyper, np.vstack(self.thetas),
                     np.concatenate(self.taus), offsets, self.loglik, meta)


def make_rng(seed):
    """The chain's single random stream: Philox keyed by the seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) % 2 ** 64))


def _adapt(steps, counts, lo=0.25, hi=0.45):
    rate = counts[0] / np.maximum(counts[1], 1)
    active = counts[1] > 0
    steps[active & (rate < lo)] *= 0.8
    steps[active & (rate > hi)] *= 1.25


def transition(state, ws, rng, steps, mcmc, accept_counts=None):
    """One full sweep of the sampler, in the fixed update order."""
    config = ws.config
    step_labels(state, ws, rng, steps, mcmc.parallel_copies, accept_counts)
    if mcmc.debug:
        state.check(config)
    resample_atoms(state, ws, rng)
    update_scalars(state, ws, rng)
    update_hypers(state, ws, rng, mcmc.fixed)
    if not config.partition_fixed and "alpha" not in mcmc.fixed:
        update_alpha(state, rng, config.priors)
    if mcmc.debug:
        state.check(config)
    return state


def current_logliks(state, ws):
    ws_all = _packed_warps(state, ws)
    return _kernels.curve_logliks(ws.packed_y, ws.offsets, ws_all, state.c, state.a, state.theta,
                                  state.tau, state.labels, ws.shape_full, ws.degree)


def run_chain(data, config, mcmc, init=None, progress=None):
    """Run one chain and return its thinned trace.

    Deterministic given ``mcmc.seed``. ``init`` overrides the default
    starting state; ``progress`` is called as ``progress(iteration, state)``.
    """
    ws = Workspace(data, config)
    rng = make_rng(mcmc.seed)
    state = init.copy() if init is not None else initial_state(data, config, rng, ws)
    steps = np.full(config.Q, default_step(config) if mcmc.step is None else mcmc.step)
    recorder = _Recorder(mcmc.n_draws, state.N, config.Q)
    window = [np.zeros(config.Q), np.zeros(config.Q)]
    kept = [np.zeros(config.Q), np.zeros(config.Q)]
    for it in range(mcmc.iterations):
        counts = window if it < mcmc.burn_in else kept
        try:
            transition(state, ws, rng, steps, mcmc, counts)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        if it < mcmc.burn_in and mcmc.adapt and (it + 1) % mcmc.adapt_every == 0:
            _adapt(steps, window)
            window = [np.zeros(config.Q), np.zeros(config.Q)]
        if it >= mcmc.burn_in and (it - mcmc.burn_in + 1) % mcmc.thin == 0 \
                and recorder.d < mcmc.n_draws:
            recorder.record(state, current_logliks(state, ws))
        if progress is not None:
            progress(it, state)
    meta = {
        "seed": int(mcmc.seed),
        "model_config": config.to_dict(),
        "mcmc_config": mcmc.to_dict(),
        "dataset_hash": data.content_hash(),
        "curve_ids": data.ids,
        "final_steps": steps.tolist(),
        "acceptance": (kept[0] / np.maximum(kept[1], 1)).tolist(),
    }
    return recorder.finish(meta)

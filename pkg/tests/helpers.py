"""Shared configurations and independent oracles for the test suite."""

import math

import numpy as np
from scipy.special import gammaln, ndtr, ndtri

from clusterreg.model import (
    ChainState,
    Curve,
    CurveParams,
    Dataset,
    Hyperparams,
    ModelConfig,
    Priors,
    ShapeAtom,
    conjugate_from_blocks,
    conjugate_summaries,
    draw_from_conjugate,
    log_likelihood,
    log_marginal,
)
from clusterreg.splines import make_knots, spline_eval


def study_config(**kw):
    """Engineered-data study: 31 shape knots on [-5, 25], warp knots 5, 10, 15."""
    shape = make_knots((-5, 25), 31)
    warp = make_knots((0, 20), [5, 10, 15])
    return ModelConfig(shape, warp, delta=5.0, **kw)


def toy_config(P, n_warp_interior=0, priors=None):
    """Shape basis with P functions on [0, 1] and a linear warp basis."""
    degree = min(P - 1, 3)
    shape = make_knots((0, 1), P - degree - 1, degree=degree)
    warp = make_knots((0, 1), n_warp_interior, degree=1)
    return ModelConfig(shape, warp, delta=0.0, priors=priors or Priors())


GEWEKE_PRIORS = Priors(a=20.0, b=5.0, a_c=20.0, b_c=20.0, a_a=50.0, b_a=0.5,
                       a_theta=20.0, b_theta=20.0, a_phi=100.0, b_phi=5.0,
                       a_alpha=2.0, b_alpha=2.0, tau_c0=1.0, tau_a0=100.0)


def small_config(priors=None, mode="joint", likelihood=True):
    """Five sampling times on [0, 4], cubic warps without interior knots."""
    shape = make_knots((-3, 7), 1)
    warp = make_knots((0, 4), 0)
    return ModelConfig(shape, warp, delta=3.0, priors=priors or GEWEKE_PRIORS, mode=mode,
                       likelihood=likelihood)


# ---------------------------------------------------------------------------
# partitions


def set_partitions(n):
    """All partitions of range(n) as canonical label tuples (first-occurrence order)."""
    out = []

    def rec(prefix, k):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for lab in range(k + 1):
            rec(prefix + [lab], max(k, lab + 1))

    rec([], 0)
    return out


def canonical(labels):
    seen = {}
    return tuple(seen.setdefault(int(v), len(seen)) for v in labels)


def ewens_logprob(labels, alpha):
    sizes = np.bincount(canonical(labels))
    n = sizes.sum()
    return (len(sizes) * math.log(alpha) + gammaln(sizes).sum()
            + gammaln(alpha) - gammaln(alpha + n))


# ---------------------------------------------------------------------------
# forward simulation from the prior


def _positive_normal(rng, mean, sd):
    while True:
        v = rng.normal(mean, sd)
        if v > 0:
            return v


def _ordered_warp(rng, config, tau_phi):
    cov = np.linalg.inv(tau_phi * config.Omega)
    lo, hi = config.bounds
    for _ in range(100_000):
        phi = rng.multivariate_normal(config.phi0, cov)
        if np.all(np.diff(phi) > 0) and phi[0] >= lo and phi[-1] <= hi:
            return phi
    raise RuntimeError("warp prior rejection sampler failed")


def simulate_prior_state(config, N, rng):
    """Draw the full parameter state from the prior (copies equal the warp)."""
    pr = config.priors
    g = lambda shape, rate: rng.gamma(shape, 1.0 / rate)
    hyper = Hyperparams(alpha=g(pr.a_alpha, pr.b_alpha),
                        c0=rng.normal(0.0, 1 / math.sqrt(pr.tau_c0)),
                        a0=rng.normal(1.0, 1 / math.sqrt(pr.tau_a0)),
                        tau_c=g(pr.a_c, pr.b_c), tau_a=g(pr.a_a, pr.b_a),
                        tau_theta=g(pr.a_theta, pr.b_theta), tau_phi=g(pr.a_phi, pr.b_phi))
    labels = [0]
    for i in range(1, N):
        sizes = np.bincount(labels)
        p = np.append(sizes, hyper.alpha) / (i + hyper.alpha)
        labels.append(int(rng.choice(len(p), p=p)))
    labels = np.array(labels)
    K = labels.max() + 1
    tau = np.array([g(pr.a, pr.b) for _ in range(K)])
    theta = np.array([rng.multivariate_normal(np.zeros(config.P),
                                              np.linalg.inv(hyper.tau_theta * t * config.Sigma))
                      for t in tau])
    c = rng.normal(hyper.c0, 1 / math.sqrt(hyper.tau_c), N)
    if config.positive_amplitude:
        a = np.array([_positive_normal(rng, hyper.a0, 1 / math.sqrt(hyper.tau_a)) for _ in range(N)])
    else:
        a = rng.normal(hyper.a0, 1 / math.sqrt(hyper.tau_a), N)
    phi = np.array([_ordered_warp(rng, config, hyper.tau_phi) for _ in range(N)])
    copies = np.repeat(phi[:, None, :], K, axis=1)
    return ChainState(labels, theta, tau, phi, copies, c, a, hyper)


def simulate_data(state, config, times, rng, ids=None):
    """Curves drawn from the likelihood given a parameter state."""
    curves = []
    for i in range(state.N):
        k = state.labels[i]
        w = spline_eval(config.warp_knots, state.phi[i], times)
        mean = state.c[i] + state.a[i] * spline_eval(config.shape_knots, state.theta[k], w, clamp=True)
        y = mean + rng.standard_normal(times.size) / math.sqrt(state.tau[k])
        curves.append(Curve(ids[i] if ids else str(i), times, y))
    return Dataset(curves)


# ---------------------------------------------------------------------------
# reference implementations of the label update


def reference_sweep(curve, phi, atom, c, a, config, tau_phi, steps, unif):
    """Plain-Python single-coordinate truncated-normal Metropolis sweep."""
    phi = np.array(phi, dtype=float)
    lo_b, hi_b = config.bounds
    Q = phi.size

    def log_target(p):
        d = p - config.phi0
        prior = -0.5 * tau_phi * d @ config.Omega @ d
        if not config.likelihood:
            return prior
        return prior + log_likelihood(curve, CurveParams(p, c, a), atom, config)

    current = log_target(phi)
    for q in range(Q):
        s = steps[q]
        if s <= 0:
            continue
        x = phi[q]
        lo = phi[q - 1] if q > 0 else lo_b
        hi = phi[q + 1] if q < Q - 1 else hi_b
        z_old = ndtr((hi - x) / s) - ndtr((lo - x) / s)
        prop = x + s * ndtri(ndtr((lo - x) / s) + unif[q, 0] * z_old)
        inside = (prop > lo if q > 0 else prop >= lo) and (prop < hi if q < Q - 1 else prop <= hi)
        if not inside:
            continue
        z_new = ndtr((hi - prop) / s) - ndtr((lo - prop) / s)
        new = phi.copy()
        new[q] = prop
        cand = log_target(new)
        if math.log(unif[q, 1]) < cand - current + math.log(z_old) - math.log(z_new):
            phi, current = new, cand
    ll = log_likelihood(curve, CurveParams(phi, c, a), atom, config) if config.likelihood else 0.0
    return phi, ll


def reference_step_labels(state, data, config, steps, draws):
    """Sequential label update written directly from the model definitions."""
    st = state.copy()
    labels = list(st.labels)
    theta = list(st.theta)
    tau = list(st.tau)
    copies = [list(row) for row in st.copies]
    phi = st.phi.copy()
    h = st.hyper
    for i, curve in enumerate(data):
        k_old = labels[i]
        labels[i] = -1
        if k_old not in labels:
            del theta[k_old], tau[k_old]
            for row in copies:
                del row[k_old]
            labels = [v - 1 if v > k_old else v for v in labels]
        K = len(theta)
        sizes = [labels.count(k) for k in range(K)]
        logw = []
        for k in range(K):
            atom = ShapeAtom(theta[k], tau[k])
            copies[i][k], ll = reference_sweep(curve, copies[i][k], atom, st.c[i], st.a[i], config,
                                               h.tau_phi, steps, draws.unif[i, k])
            logw.append(math.log(sizes[k]) + ll)
        params = CurveParams(phi[i], st.c[i], st.a[i])
        if config.likelihood:
            conj = conjugate_summaries(curve, params, config, h)
            log_q0 = math.log(h.alpha) + log_marginal(conj, len(curve), h.tau_theta, config)
        else:
            conj = conjugate_from_blocks([], [], [], h.tau_theta, config.Sigma,
                                         config.priors.a, config.priors.b)
            log_q0 = math.log(h.alpha)
        logw = np.array([log_q0] + logw)
        p = np.exp(logw - logw.max())
        target = draws.u_label[i] * (1 - 1e-15) * p.sum()
        choice = int(np.argmax(np.cumsum(p) > target))
        if choice == 0:
            atom = draw_from_conjugate(conj, None, std_gamma=draws.std_gamma[i],
                                       std_normal=draws.std_normal[i])
            theta.append(atom.theta)
            tau.append(atom.tau)
            for j, row in enumerate(copies):
                row.append(phi[j].copy())
            labels[i] = K
        else:
            phi[i] = copies[i][choice - 1]
            labels[i] = choice - 1
    st.labels = np.array(labels)
    st.theta = np.array(theta)
    st.tau = np.array(tau)
    st.copies = np.array(copies)
    st.phi = phi
    return st


# ---------------------------------------------------------------------------
# joint-distribution (Geweke) check


GEWEKE_STATS = ("alpha", "tau_theta", "tau_phi", "c0", "a0")


def geweke_samples(n_iter, seed, N=4, config=None):
    """Prior draws and successive-conditional draws of the hyperparameters.

    The successive-conditional chain alternates one sampler transition with
    a fresh draw of the data from the likelihood; its stationary law is the
    prior, so both sample sets estimate the same moments.
    """
    from clusterreg.sampler import McmcConfig, Workspace, make_rng, transition

    config = config or small_config()
    times = np.linspace(0.0, 4.0, 5)
    rng = np.random.default_rng(seed)
    cols = [Hyperparams.NAMES.index(n) for n in GEWEKE_STATS]
    forward = np.array([simulate_prior_state(config, N, rng).hyper.as_array()[cols]
                        for _ in range(n_iter)])
    mrng = make_rng(seed)
    state = simulate_prior_state(config, N, rng)
    mcmc = McmcConfig(iterations=2, burn_in=1)
    steps = np.full(config.Q, 0.5)
    chain = np.empty((n_iter, len(cols)))
    for it in range(n_iter):
        data = simulate_data(state, config, times, rng)
        transition(state, Workspace(data, config), mrng, steps, mcmc)
        chain[it] = state.hyper.as_array()[cols]
    return forward, chain

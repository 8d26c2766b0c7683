"""Posterior summaries computed from a stored trace.

Partition point estimates (collapsed-score MAP and least-squares), pairwise
co-clustering probabilities, warp, shape and curve summaries with
pointwise or simultaneous bands, CPO/LPML and the adjusted Rand index.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _kernels
from .model import conjugate_from_gram, log_marginal, packed_curves
from .splines import eval_basis, spline_eval

BAND_TYPES = ("pointwise", "simultaneous")


@dataclass
class PartitionEstimate:
    labels: np.ndarray
    criterion: float
    method: str
    draw: int

    @property
    def K(self):
        return int(np.unique(self.labels).size)


@dataclass
class FunctionalSummary:
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    band: str
    level: float
    n_draws: int

    def covers(self, values, atol=0.0):
        """True if ``values`` lie inside the band at every grid point."""
        values = np.asarray(values)
        return bool(np.all(values >= self.lower - atol) and np.all(values <= self.upper + atol))

    def to_rows(self):
        return [(float(g), float(m), float(lo), float(hi))
                for g, m, lo, hi in zip(self.grid, self.mean, self.lower, self.upper)]


def relabel(labels):
    """Canonical labels numbered by first occurrence."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse]


# ---------------------------------------------------------------------------
# partitions


def pairwise_prob_matrix(trace):
    """Fraction of draws in which each pair of curves shares a cluster."""
    labels = np.asarray(trace.labels)
    counts = np.zeros((labels.shape[1], labels.shape[1]), dtype=np.int64)
    for row in labels:
        counts += row[:, None] == row[None, :]
    return counts / labels.shape[0]


def dahl_partition(trace):
    """Sampled partition closest in squared distance to the pairwise probabilities."""
    P = pairwise_prob_matrix(trace)
    scores = np.array([np.sum(((row[:, None] == row[None, :]) - P) ** 2) for row in trace.labels])
    d = int(np.argmin(scores))
    return PartitionEstimate(relabel(trace.labels[d]), float(scores[d]), "dahl", d)


def ewens_log_prior(labels, alpha):
    """Log probability of a partition under the Chinese restaurant process."""
    sizes = np.bincount(relabel(labels))
    n = sizes.sum()
    return float(sizes.size * math.log(alpha) + gammaln(sizes).sum()
                 + gammaln(alpha) - gammaln(alpha + n))


def partition_log_scores(trace, data, config):
    """Collapsed score of every draw: CRP prior plus cluster marginal likelihoods."""
    ys, offsets = packed_curves(data)
    warp_bases = [eval_basis(config.warp_knots, c.times) for c in data]
    kv = config.shape_knots
    pr = config.priors
    alpha = trace.hyper_column("alpha")
    tau_theta = trace.hyper_column("tau_theta")
    n = np.diff(offsets)
    scores = np.empty(trace.n_draws)
    for d in range(trace.n_draws):
        labels = trace.labels[d]
        w = np.concatenate([B @ p for B, p in zip(warp_bases, trace.phi[d])])
        score = ewens_log_prior(labels, alpha[d])
        for k in np.unique(labels):
            members = np.flatnonzero(labels == k)
            gram, mu, rr, count = _kernels.pooled_gram(ys, offsets, w, trace.c[d], trace.a[d],
                                                       members, kv.full, kv.degree, kv.n_basis)
            conj = conjugate_from_gram(gram, mu, rr, count, tau_theta[d], config.Sigma, pr.a, pr.b)
            score += log_marginal(conj, int(n[members].sum()), tau_theta[d], config)
        scores[d] = score
    return scores


def map_partition(trace, data, config):
    """Sampled partition with the highest collapsed posterior score."""
    scores = partition_log_scores(trace, data, config)
    d = int(np.argmax(scores))
    return PartitionEstimate(relabel(trace.labels[d]), float(scores[d]), "map", d)


def adjusted_rand(labels_a, labels_b):
    """Adjusted Rand index of two partitions of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-d and of equal length")
    if a.size < 2:
        raise ValueError("need at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    comb = lambda x: x * (x - 1) / 2.0
    index = comb(table).sum()
    rows = comb(table.sum(axis=1)).sum()
    cols = comb(table.sum(axis=0)).sum()
    total = comb(a.size)
    expected = rows * cols / total
    best = 0.5 * (rows + cols)
    if best == expected:
        return 1.0
    return float((index - expected) / (best - expected))


def k_histogram(trace):
    values, counts = np.unique(trace.K, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def posterior_mode_k(trace):
    hist = k_histogram(trace)
    return max(hist, key=lambda k: (hist[k], -k))


# ---------------------------------------------------------------------------
# functional summaries


def credible_band(draws, level=0.95, band="simultaneous", grid=None):
    """Band from function draws (one row per draw) on a common grid.

    Pointwise bands use per-point empirical quantiles. Simultaneous bands
    are ``m(t) +- q s(t)`` with q the ``level`` quantile of
    ``max_t |f(t) - m(t)| / s(t)`` over draws; points with ``s(t) = 0`` are
    left out of the maximum and get a zero-width band. Quantiles are taken
    conservatively (never interpolated inward).
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 2:
        raise ValueError("need at least two draws on a common grid")
    if band not in BAND_TYPES:
        raise ValueError(f"band must be one of {BAND_TYPES}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    grid = np.arange(draws.shape[1], dtype=float) if grid is None else np.asarray(grid, dtype=float)
    flat = np.ptp(draws, axis=0) == 0
    mean = np.where(flat, draws[0], draws.mean(axis=0))
    if band == "pointwise":
        tail = 0.5 * (1 - level)
        lower = np.quantile(draws, tail, axis=0, method="lower")
        upper = np.quantile(draws, 1 - tail, axis=0, method="higher")
        lower = np.minimum(lower, mean)
        upper = np.maximum(upper, mean)
    else:
        sd = np.where(flat, 0.0, draws.std(axis=0))
        live = sd > 0
        if not np.any(live):
            lower = upper = mean.copy()
        else:
            ratio = np.abs(draws[:, live] - mean[live]) / sd[live]
            q = np.quantile(ratio.max(axis=1), level, method="higher")
            lower = mean - q * sd
            upper = mean + q * sd
    return FunctionalSummary(grid, mean, lower, upper, band, level, draws.shape[0])


def _check_grid(grid, window):
    grid = np.asarray(grid, dtype=float)
    lo, hi = window
    if grid.ndim != 1 or grid.size == 0 or grid.min() < lo or grid.max() > hi:
        raise ValueError(f"grid must be a nonempty 1-d array inside [{lo}, {hi}]")
    return grid


def _curve_index(trace, curve_id):
    ids = trace.meta.get("curve_ids")
    if ids is None:
        raise ValueError("trace carries no curve ids")
    try:
        return ids.index(str(curve_id))
    except ValueError:
        raise KeyError(f"unknown curve id {curve_id!r}") from None


def _summarize(draws, grid, level, band):
    if draws.shape[0] == 1:
        return FunctionalSummary(grid, draws[0], draws[0].copy(), draws[0].copy(), band, level, 1)
    return credible_band(draws, level, band, grid)


def warp_draws(trace, curve_id, grid, config=None):
    config = config or trace.model_config()
    grid = _check_grid(grid, config.window)
    i = _curve_index(trace, curve_id)
    B = eval_basis(config.warp_knots, grid)
    return trace.phi[:, i, :] @ B.T


def warp_mean(trace, curve_id, grid, level=0.95, band="simultaneous", config=None):
    """Posterior mean time transformation of one curve on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    return _summarize(warp_draws(trace, curve_id, grid, config), grid, level, band)


def curve_fit_draws(trace, curve_id, grid, config=None):
    config = config or trace.model_config()
    grid = _check_grid(grid, config.window)
    i = _curve_index(trace, curve_id)
    kv = config.shape_knots
    out = np.empty((trace.n_draws, grid.size))
    for d in range(trace.n_draws):
        theta, _ = trace.atoms(d)
        w = spline_eval(config.warp_knots, trace.phi[d, i], grid)
        out[d] = trace.c[d, i] + trace.a[d, i] * spline_eval(kv, theta[trace.labels[d, i]], w,
                                                             clamp=True)
    return out


def curve_fit(trace, curve_id, grid, level=0.95, band="simultaneous", config=None):
    """Posterior summary of one curve's profile c_i + a_i m(mu_i(t))."""
    grid = np.asarray(grid, dtype=float)
    return _summarize(curve_fit_draws(trace, curve_id, grid, config), grid, level, band)


def match_cluster(draw_labels, members):
    """Draw cluster sharing most curves with ``members`` and the overlap size."""
    labs, counts = np.unique(draw_labels[members], return_counts=True)
    j = int(np.argmax(counts))
    return int(labs[j]), int(counts[j])


def cluster_shape_draws(trace, reference, k, grid, config=None, min_overlap=0.5):
    """Shape draws c0 + a0 m_k(t) for reference cluster ``k``.

    In each draw the cluster sharing the most members with the reference
    cluster stands in for it; draws where that overlap is below
    ``min_overlap`` of the reference cluster size are skipped.
    """
    config = config or trace.model_config()
    grid = np.asarray(grid, dtype=float)
    lo, hi = config.shape_knots.domain
    if grid.ndim != 1 or grid.min() < lo or grid.max() > hi:
        raise ValueError(f"grid must lie inside the shape domain [{lo}, {hi}]")
    reference = np.asarray(reference)
    members = np.flatnonzero(reference == k)
    if members.size == 0:
        raise ValueError(f"reference partition has no cluster {k}")
    B = eval_basis(config.shape_knots, grid)
    c0 = trace.hyper_column("c0")
    a0 = trace.hyper_column("a0")
    rows = []
    for d in range(trace.n_draws):
        lab, overlap = match_cluster(trace.labels[d], members)
        if overlap < min_overlap * members.size:
            continue
        theta, _ = trace.atoms(d)
        rows.append(c0[d] + a0[d] * (B @ theta[lab]))
    return np.array(rows).reshape(-1, grid.size)


def cluster_shape(trace, reference, k, grid, level=0.95, band="simultaneous", config=None):
    """Posterior summary of the shape function of reference cluster ``k``.

    ``n_draws`` of the result counts the draws in which the cluster was
    matched.
    """
    grid = np.asarray(grid, dtype=float)
    draws = cluster_shape_draws(trace, reference, k, grid, config)
    if draws.shape[0] == 0:
        raise ValueError(f"cluster {k} was not matched in any draw")
    return _summarize(draws, grid, level, band)


# ---------------------------------------------------------------------------
# model fit


def cpo_lpml(trace):
    """Per-curve log CPO (harmonic-mean estimate) and their sum, the LPML."""
    ll = np.asarray(trace.loglik, dtype=float)
    if np.any(np.isnan(ll)):
        raise ValueError("trace contains undefined log-likelihoods")
    log_cpo = math.log(ll.shape[0]) - logsumexp(-ll, axis=0)
    bad = ~np.isfinite(log_cpo)
    if np.any(bad):
        raise ValueError(f"zero likelihood in some draw for curves {np.flatnonzero(bad).tolist()}")
    return log_cpo, float(log_cpo.sum())


def mse_vs_truth(trace, truth_curves, grid, config=None):
    """Per-curve mean squared error of the posterior-mean fit against the truth."""
    grid = np.asarray(grid, dtype=float)
    truth_curves = np.asarray(truth_curves, dtype=float)
    ids = trace.meta["curve_ids"]
    if truth_curves.shape != (len(ids), grid.size):
        raise ValueError(f"truth must have shape {(len(ids), grid.size)}, got {truth_curves.shape}")
    fits = np.array([curve_fit_draws(trace, cid, grid, config).mean(axis=0) for cid in ids])
    return np.mean((fits - truth_curves) ** 2, axis=1)


# ---------------------------------------------------------------------------
# file output


def summary_csv(summaries):
    """Long CSV text for named functional summaries: name,grid,mean,lower,upper."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "grid", "mean", "lower", "upper"])
    for name, s in summaries.items():
        for row in s.to_rows():
            writer.writerow([name, *(repr(v) for v in row)])
    return buf.getvalue()


def partition_csv(ids, labels):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["curve_id", "label"])
    for cid, lab in zip(ids, labels):
        writer.writerow([cid, int(lab)])
    return buf.getvalue()


def read_partition_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["curve_id", "label"]:
        raise ValueError("partition file needs header curve_id,label")
    return [r[0] for r in rows[1:]], np.array([int(r[1]) for r in rows[1:]])


def diagnostics(trace, data, config, truth_labels=None):
    """Fit report: LPML, per-curve CPO, K histogram and partition estimates."""
    log_cpo, lpml = cpo_lpml(trace)
    map_est = map_partition(trace, data, config)
    dahl_est = dahl_partition(trace)
    report = {
        "n_draws": int(trace.n_draws),
        "lpml": lpml,
        "log_cpo": dict(zip(data.ids, log_cpo.tolist())),
        "k_histogram": k_histogram(trace),
        "k_mode": posterior_mode_k(trace),
        "map": {"K": map_est.K, "criterion": map_est.criterion, "draw": map_est.draw},
        "dahl": {"K": dahl_est.K, "criterion": dahl_est.criterion, "draw": dahl_est.draw},
        "acceptance": trace.meta.get("acceptance"),
    }
    if truth_labels is not None:
        report["ari_map"] = adjusted_rand(truth_labels, map_est.labels)
        report["ari_dahl"] = adjusted_rand(truth_labels, dahl_est.labels)
    return report, map_est, dahl_est

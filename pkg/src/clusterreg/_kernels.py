"""Compiled inner loops: B-spline evaluation and the warp-copy Metropolis sweep.

Everything here works on plain float arrays so it can be called from the
sampler without allocation-heavy Python in the hot path.
"""

import ctypes
import math

import numba
import numpy as np
from numba.extending import get_cython_function_address

_ndtri_addr = get_cython_function_address("scipy.special.cython_special", "ndtri")
_ndtri = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)(_ndtri_addr)

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


@numba.njit(cache=True)
def _ndtr(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@numba.njit(cache=True, inline="always")
def find_span(knots, degree, n_basis, x):
    """Index s with knots[s] <= x < knots[s+1], restricted to [degree, n_basis-1]."""
    if x >= knots[n_basis]:
        return n_basis - 1
    if x <= knots[degree]:
        return degree
    low = degree
    high = n_basis
    mid = (low + high) // 2
    while x < knots[mid] or x >= knots[mid + 1]:
        if x < knots[mid]:
            high = mid
        else:
            low = mid
        mid = (low + high) // 2
    return mid


@numba.njit(cache=True, inline="always")
def basis_funs(span, x, degree, knots, out, left, right):
    # Nonzero basis values at x, for indices span-degree .. span.
    out[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            temp = out[r] / (right[r + 1] + left[j - r])
            out[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        out[j] = saved


@numba.njit(cache=True)
def design_dense(x, knots, degree, n_basis):
    n = x.shape[0]
    mat = np.zeros((n, n_basis))
    vals = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    for i in range(n):
        span = find_span(knots, degree, n_basis, x[i])
        basis_funs(span, x[i], degree, knots, vals, left, right)
        for j in range(degree + 1):
            mat[i, span - degree + j] = vals[j]
    return mat


@numba.njit(cache=True)
def spline_values(x, knots, degree, coef):
    n_basis = coef.shape[0]
    out = np.empty(x.shape[0])
    vals = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    for i in range(x.shape[0]):
        span = find_span(knots, degree, n_basis, x[i])
        basis_funs(span, x[i], degree, knots, vals, left, right)
        acc = 0.0
        for j in range(degree + 1):
            acc += vals[j] * coef[span - degree + j]
        out[i] = acc
    return out


@numba.njit(cache=True, inline="always")
def _fit_at(x, theta, knots, degree, lo, hi, vals, left, right):
    x = min(max(x, lo), hi)
    span = find_span(knots, degree, theta.shape[0], x)
    basis_funs(span, x, degree, knots, vals, left, right)
    fit = 0.0
    for r in range(degree + 1):
        fit += vals[r] * theta[span - degree + r]
    return fit


@numba.njit(cache=True)
def _gauss_loglik(y, w, c, a, theta, tau, knots, degree, lo, hi, vals, left, right):
    if tau <= 0.0:  # data term switched off
        return 0.0
    ss = 0.0
    for j in range(y.shape[0]):
        resid = y[j] - c - a * _fit_at(w[j], theta, knots, degree, lo, hi, vals, left, right)
        ss += resid * resid
    n = y.shape[0]
    return 0.5 * n * (math.log(tau) - _LOG_2PI) - 0.5 * tau * ss


def _sweep_copies_impl(y, warp_basis, c, a, copies, thetas, taus, phi0, omega,
                       tau_phi, lower, upper, knots, degree, steps, unif,
                       accepted, loglik):
    n_copies, n_coef = copies.shape
    n = y.shape[0]
    lo_dom = knots[0]
    hi_dom = knots[knots.shape[0] - 1]
    for k in numba.prange(n_copies):
        vals = np.empty(degree + 1)
        left = np.empty(degree + 1)
        right = np.empty(degree + 1)
        phi = copies[k]
        theta = thetas[k]
        tau = taus[k]
        use_data = tau > 0.0
        w = np.zeros(n)
        for j in range(n):
            for r in range(n_coef):
                w[j] += warp_basis[j, r] * phi[r]
        res2 = np.zeros(n)
        new2 = np.zeros(n)
        w_new = np.empty(n)
        ss = 0.0
        if use_data:
            for j in range(n):
                r = y[j] - c - a * _fit_at(w[j], theta, knots, degree, lo_dom, hi_dom,
                                           vals, left, right)
                res2[j] = r * r
                ss += res2[j]
        dev = np.zeros(n_coef)
        for u in range(n_coef):
            for r in range(n_coef):
                dev[u] += omega[u, r] * (phi[r] - phi0[r])
        for q in range(n_coef):
            step = steps[q]
            if step <= 0.0:
                continue
            x = phi[q]
            lo = phi[q - 1] if q > 0 else lower
            hi = phi[q + 1] if q < n_coef - 1 else upper
            p_lo = _ndtr((lo - x) / step)
            p_hi = _ndtr((hi - x) / step)
            z_old = p_hi - p_lo
            if z_old <= 0.0:
                continue
            prop = x + step * _ndtri(p_lo + unif[k, q, 0] * z_old)
            ok_lo = prop > lo if q > 0 else prop >= lo
            ok_hi = prop < hi if q < n_coef - 1 else prop <= hi
            if not (ok_lo and ok_hi):
                continue
            z_new = _ndtr((hi - prop) / step) - _ndtr((lo - prop) / step)
            if z_new <= 0.0:
                continue
            delta = prop - x
            d_ss = 0.0
            if use_data:
                # only points inside the support of warp basis q move
                for j in range(n):
                    b = warp_basis[j, q]
                    if b != 0.0:
                        w_new[j] = w[j] + b * delta
                        r = y[j] - c - a * _fit_at(w_new[j], theta, knots, degree, lo_dom,
                                                   hi_dom, vals, left, right)
                        new2[j] = r * r
                        d_ss += new2[j] - res2[j]
            d_prior = -0.5 * tau_phi * (2.0 * delta * dev[q] + delta * delta * omega[q, q])
            log_ratio = -0.5 * tau * d_ss + d_prior + math.log(z_old) - math.log(z_new)
            if math.log(unif[k, q, 1]) < log_ratio:
                phi[q] = prop
                for j in range(n):
                    if warp_basis[j, q] != 0.0:
                        w[j] = w_new[j]
                        res2[j] = new2[j]
                ss += d_ss
                for r in range(n_coef):
                    dev[r] += omega[r, q] * delta
                accepted[k, q] += 1
        if use_data:
            loglik[k] = 0.5 * n * (math.log(tau) - _LOG_2PI) - 0.5 * tau * ss
        else:
            loglik[k] = 0.0


sweep_copies = numba.njit(cache=False)(_sweep_copies_impl)
sweep_copies_parallel = numba.njit(parallel=True, cache=False)(_sweep_copies_impl)


@numba.njit(cache=True)
def curve_logliks(ys, offsets, ws, c, a, thetas, taus, labels, knots, degree):
    """Gaussian log-likelihood of every curve under its own cluster atom."""
    n_curves = c.shape[0]
    out = np.empty(n_curves)
    vals = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    lo = knots[0]
    hi = knots[knots.shape[0] - 1]
    for i in range(n_curves):
        s, e = offsets[i], offsets[i + 1]
        k = labels[i]
        out[i] = _gauss_loglik(ys[s:e], ws[s:e], c[i], a[i], thetas[k], taus[k],
                               knots, degree, lo, hi, vals, left, right)
    return out


@numba.njit(cache=True)
def _cholesky_inplace(E):
    # Lower Cholesky factor written into E; False if not positive definite.
    n = E.shape[0]
    for j in range(n):
        s = E[j, j]
        for k in range(j):
            s -= E[j, k] * E[j, k]
        if s <= 0.0 or not math.isfinite(s):
            return False
        d = math.sqrt(s)
        E[j, j] = d
        for i in range(j + 1, n):
            s = E[i, j]
            for k in range(j):
                s -= E[i, k] * E[j, k]
            E[i, j] = s / d
    return True


@numba.njit(cache=True)
def _single_conjugate(y, w, c, a, tau_theta, sigma, knots, degree, use_data):
    # Cholesky factor of E, L^-1 mu, residual sum of squares; ok flag last.
    P = sigma.shape[0]
    E = tau_theta * sigma
    mu = np.zeros(P)
    rr = 0.0
    if use_data:
        vals = np.empty(degree + 1)
        left = np.empty(degree + 1)
        right = np.empty(degree + 1)
        lo = knots[0]
        hi = knots[knots.shape[0] - 1]
        a2 = a * a
        for j in range(y.shape[0]):
            x = min(max(w[j], lo), hi)
            span = find_span(knots, degree, P, x)
            basis_funs(span, x, degree, knots, vals, left, right)
            r = y[j] - c
            rr += r * r
            base = span - degree
            for u in range(degree + 1):
                mu[base + u] += a * vals[u] * r
                for v in range(degree + 1):
                    E[base + u, base + v] += a2 * vals[u] * vals[v]
    L = E.copy()
    if not _cholesky_inplace(L):
        jitter = 0.0
        for j in range(P):
            jitter += E[j, j]
        jitter *= 1e-10 / P
        L = E.copy()
        for j in range(P):
            L[j, j] += jitter
        if not _cholesky_inplace(L):
            return L, mu, rr, False
    half = np.empty(P)
    for i in range(P):
        s = mu[i]
        for k in range(i):
            s -= L[i, k] * half[k]
        half[i] = s / L[i, i]
    return L, half, rr, True


@numba.njit(cache=True)
def _log_marginal_terms(L, half, rr, n, tau_theta, logdet_sigma, prior_a, prior_b):
    P = L.shape[0]
    hh = 0.0
    logdet = 0.0
    for i in range(P):
        hh += half[i] * half[i]
        logdet += 2.0 * math.log(L[i, i])
    shape = 0.5 * n + prior_a
    rate = 0.5 * max(rr - hh, 0.0) + prior_b
    return (-0.5 * n * _LOG_2PI + 0.5 * P * math.log(tau_theta) + 0.5 * logdet_sigma
            - 0.5 * logdet + prior_a * math.log(prior_b) - math.lgamma(prior_a)
            + math.lgamma(shape) - shape * math.log(rate)), rate


@numba.njit(cache=True)
def curve_log_marginal(y, w, c, a, tau_theta, sigma, logdet_sigma, knots, degree,
                       prior_a, prior_b):
    """Log marginal density of one curve under the normal-gamma base measure.

    Returns nan when the posterior precision cannot be factorized even
    after a small diagonal jitter.
    """
    L, half, rr, ok = _single_conjugate(y, w, c, a, tau_theta, sigma, knots, degree, True)
    if not ok:
        return np.nan
    return _log_marginal_terms(L, half, rr, y.shape[0], tau_theta, logdet_sigma,
                               prior_a, prior_b)[0]


def _label_sweep_impl(ys, offsets, warp_bases, c, a, labels, n_clusters, theta, tau,
                      copies, phi, alpha, tau_theta, tau_phi, phi0, omega, sigma,
                      logdet_sigma, lower, upper, knots, degree, prior_a, prior_b,
                      steps, use_data, unif, u_label, std_gamma, std_normal,
                      accepted, trials):
    """Sequential label/atom/warp update of every curve.

    ``theta``, ``tau`` and the cluster axis of ``copies`` have capacity N;
    the first ``n_clusters`` rows are live. Returns the new cluster count,
    a status code (0 ok, 1 factorization failure, 2 no finite weight) and
    the offending curve index.
    """
    N = labels.shape[0]
    P = sigma.shape[0]
    Q = phi.shape[1]
    K = n_clusters
    sizes = np.zeros(N, dtype=np.int64)
    for i in range(N):
        sizes[labels[i]] += 1
    zero_tau = np.zeros(N)
    logw = np.empty(N + 1)
    loglik = np.empty(N)
    acc = np.zeros((N, Q), dtype=np.int64)
    for i in range(N):
        s, e = offsets[i], offsets[i + 1]
        y = ys[s:e]
        wb = warp_bases[s:e]
        k_old = labels[i]
        sizes[k_old] -= 1
        labels[i] = -1
        if sizes[k_old] == 0:
            for k in range(k_old, K - 1):
                theta[k] = theta[k + 1]
                tau[k] = tau[k + 1]
                sizes[k] = sizes[k + 1]
                for j in range(N):
                    copies[j, k] = copies[j, k + 1]
            K -= 1
            sizes[K] = 0
            for j in range(N):
                if labels[j] > k_old:
                    labels[j] -= 1
        if K > 0:
            taus = tau[:K] if use_data else zero_tau[:K]
            acc[:K] = 0
            sweep_copies(y, wb, c[i], a[i], copies[i, :K], theta[:K], taus, phi0, omega,
                         tau_phi, lower, upper, knots, degree, steps, unif[i, :K], acc[:K],
                         loglik[:K])
            for q in range(Q):
                if steps[q] > 0.0:
                    trials[q] += K
                for k in range(K):
                    accepted[q] += acc[k, q]
        w = np.zeros(e - s)
        for j in range(e - s):
            for r in range(Q):
                w[j] += wb[j, r] * phi[i, r]
        L, half, rr, ok = _single_conjugate(y, w, c[i], a[i], tau_theta, sigma, knots,
                                            degree, use_data)
        if not ok:
            return K, 1, i
        if use_data:
            lm, rate = _log_marginal_terms(L, half, rr, e - s, tau_theta, logdet_sigma,
                                           prior_a, prior_b)
        else:
            lm, rate = 0.0, prior_b
        logw[0] = math.log(alpha) + lm
        top = logw[0]
        for k in range(K):
            logw[k + 1] = math.log(sizes[k]) + loglik[k]
            top = max(top, logw[k + 1])
        if not math.isfinite(top):
            return K, 2, i
        total = 0.0
        for k in range(K + 1):
            logw[k] = math.exp(logw[k] - top)
            total += logw[k]
        target = u_label[i] * (1.0 - 1e-15) * total
        choice = K
        acc_w = 0.0
        for k in range(K + 1):
            acc_w += logw[k]
            if acc_w > target:
                choice = k
                break
        if choice == 0:
            t = std_gamma[i] / rate
            if not t > 0.0:
                t = 2.2250738585072014e-308
            z = half + std_normal[i] / math.sqrt(t)
            for r in range(P - 1, -1, -1):
                v = z[r]
                for m in range(r + 1, P):
                    v -= L[m, r] * theta[K, m]
                theta[K, r] = v / L[r, r]
            tau[K] = t
            for j in range(N):
                copies[j, K] = phi[j]
            labels[i] = K
            sizes[K] = 1
            K += 1
        else:
            k = choice - 1
            phi[i] = copies[i, k]
            labels[i] = k
            sizes[k] += 1
    return K, 0, -1


@numba.njit(cache=True)
def curve_fits(ws, offsets, thetas, labels, knots, degree):
    """Unscaled shape fit B_m(w)^T theta for every curve, packed like ``ws``."""
    out = np.empty(ws.shape[0])
    vals = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    lo = knots[0]
    hi = knots[knots.shape[0] - 1]
    for i in range(labels.shape[0]):
        theta = thetas[labels[i]]
        for j in range(offsets[i], offsets[i + 1]):
            out[j] = _fit_at(ws[j], theta, knots, degree, lo, hi, vals, left, right)
    return out


@numba.njit(cache=True)
def pooled_gram(ys, offsets, ws, c, a, members, knots, degree, n_basis):
    """Sum of a_i^2 B_i^T B_i, sum of a_i B_i^T (y_i - c_i), residual sum of squares, count."""
    G = np.zeros((n_basis, n_basis))
    mu = np.zeros(n_basis)
    vals = np.empty(degree + 1)
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    lo = knots[0]
    hi = knots[knots.shape[0] - 1]
    rr = 0.0
    count = 0
    for m in range(members.shape[0]):
        i = members[m]
        ai = a[i]
        for j in range(offsets[i], offsets[i + 1]):
            x = min(max(ws[j], lo), hi)
            span = find_span(knots, degree, n_basis, x)
            basis_funs(span, x, degree, knots, vals, left, right)
            r = ys[j] - c[i]
            rr += r * r
            count += 1
            base = span - degree
            for u in range(degree + 1):
                mu[base + u] += ai * vals[u] * r
                for v in range(degree + 1):
                    G[base + u, base + v] += ai * ai * vals[u] * vals[v]
    return G, mu, rr, count


label_sweep = numba.njit(cache=False)(_label_sweep_impl)


def _make_parallel_label_sweep():
    # Same loop with the copy sweep replaced by its threaded variant.
    glb = dict(globals())
    glb["sweep_copies"] = sweep_copies_parallel
    fn = type(_label_sweep_impl)(_label_sweep_impl.__code__, glb, "label_sweep_parallel")
    return numba.njit(cache=False)(fn)


_parallel_label_sweep = None


def label_sweep_parallel(*args):
    global _parallel_label_sweep
    if _parallel_label_sweep is None:
        _parallel_label_sweep = _make_parallel_label_sweep()
    return _parallel_label_sweep(*args)

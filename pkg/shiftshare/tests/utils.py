"""Utility functions and brute-force oracles for tests."""

import numpy as np
import scipy.stats

from shiftshare import SharesMatrix


def random_shares(rng, n_regions, n_sectors, concentration=1.0):
    regions = tuple(f'r{i + 1}' for i in range(n_regions))
    sectors = tuple(f's{s + 1}' for s in range(n_sectors))
    w = rng.dirichlet(np.full(n_sectors, concentration), size=n_regions)
    return SharesMatrix(regions, sectors, w)


def random_concentrated_shares(rng, n_regions, n_sectors):
    """Every region in exactly one sector, every sector non-empty."""
    assignment = np.concatenate([
        np.arange(n_sectors),
        rng.integers(n_sectors, size=n_regions - n_sectors)])
    rng.shuffle(assignment)
    w = np.zeros((n_regions, n_sectors))
    w[np.arange(n_regions), assignment] = 1.0
    regions = tuple(f'r{i + 1}' for i in range(n_regions))
    sectors = tuple(f's{s + 1}' for s in range(n_sectors))
    return SharesMatrix(regions, sectors, w), assignment


def residualize(z, v, weight):
    """Weighted least-squares residual of v on z via numpy lstsq."""
    if z.shape[1] == 0:
        return np.array(v, dtype=float)
    root = np.sqrt(weight)
    coef = np.linalg.lstsq(root[:, None] * z, root * v, rcond=None)[0]
    return v - z @ coef


def t_n_double_loop(w):
    """sum_{s != t} (sum_i w_is w_it)^2 / sum_s n_s^2, by explicit loops."""
    n_regions, n_sectors = w.shape
    total = 0.0
    for s in range(n_sectors):
        for t in range(n_sectors):
            if s == t:
                continue
            inner = sum(w[i, s] * w[i, t] for i in range(n_regions))
            total += inner ** 2
    n = w.sum(axis=0)
    return total / np.sum(n ** 2)


def loo_cross_terms_quadruple_loop(w, agg, psi, resid, weight):
    """S_ij = sum_s 1{i != j} w_is aw_js psi_js weight_i resid_i / n_{s,-i}.

    n_{s,-i} = sum_{k != i} aw_ks is summed inside the loop.
    """
    n_regions, n_sectors = w.shape
    cross = np.zeros((n_regions, n_regions))
    for i in range(n_regions):
        for j in range(n_regions):
            if i == j:
                continue
            for s in range(n_sectors):
                if w[i, s] == 0:
                    continue
                n_loo = 0.0
                for k in range(n_regions):
                    if k != i:
                        n_loo += agg[k, s]
                cross[i, j] += (w[i, s] * agg[j, s] * psi[j, s]
                                * weight[i] * resid[i] / n_loo)
    return cross


def akm0_grid_accepts(fit, shares, thetas, level=0.95):
    """Brute-force inversion of the null-imposed shift-share test.

    For each candidate theta the residual is recomputed from
    y1 - theta * v (v = x in OLS, y2 in IV) and the test statistic is
    compared to the normal critical value.
    """
    design = fit.design
    weight = design.weights
    z = design.z
    w = shares.w
    v = fit.x if fit.mode == 'ols' else design.y2
    x_dd = residualize(z, fit.x, weight)
    root = np.sqrt(weight)
    x_hat = np.linalg.lstsq(root[:, None] * w, root * x_dd, rcond=None)[0]
    e0 = residualize(z, design.y1, weight)
    e1 = residualize(z, v, weight)
    n_regions, n_sectors = w.shape
    r0 = np.zeros(n_sectors)
    r1 = np.zeros(n_sectors)
    for s in range(n_sectors):
        for i in range(n_regions):
            r0[s] += w[i, s] * weight[i] * e0[i]
            r1[s] += w[i, s] * weight[i] * e1[i]
    num0 = np.sum(weight * x_dd * e0)
    num1 = np.sum(weight * x_dd * e1)
    thetas = np.asarray(thetas, dtype=float)
    numerator = num0 - thetas * num1
    scores = r0[None, :] - thetas[:, None] * r1[None, :]
    meat = np.sum((x_hat[None, :] * scores) ** 2, axis=1)
    z_crit = scipy.stats.norm.ppf((1 + level) / 2)
    return numerator ** 2 <= z_crit ** 2 * meat

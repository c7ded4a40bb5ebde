# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""
Standard errors and confidence sets for shift-share regressions.

Conventional methods
====================

``robust`` is the Eicker-Huber-White (HC0) sandwich and ``cluster`` the
cluster-robust sandwich over region clusters. ``small_sample=True``
applies the HC1 or the usual cluster degrees-of-freedom factor.

Shift-share methods
===================

``akm`` regresses the partialled-out regressor on the shares to obtain
sector-level regressors, then sums squared sector scores
(optionally clustered across sectors). ``akm0`` inverts the same test
with residuals recomputed under each null value; the acceptance region
solves a scalar quadratic inequality and can be an interval, the union of
two rays or the whole line. ``akm_loo`` adds the variance term for an
instrument built from estimated shifters.

With observation weights the sector scores are R_s = sum_i w_is weight_i
resid_i and the sector projection is weighted least squares.
"""

from dataclasses import dataclass, field
import logging
import math
import warnings

import numpy as np
import scipy.stats

from . import (
    AkmInfeasible,
    ClusterError,
    DataError,
    IncompleteSharesWarning,
    ShiftShareValueError,
    SmallClusterWarning,
)
from ._utils import cluster_codes, cluster_sums, pivoted_qr, solve_pivoted
from .data import shares_controlled

logger = logging.getLogger(__name__)

METHODS = ('robust', 'cluster', 'akm', 'akm0', 'akm_clustered',
           'akm0_clustered', 'akm_loo')

# Conventional cluster sandwiches with fewer clusters than this warn
SMALL_CLUSTER_COUNT = 10

# Relative size of a quadratic coefficient treated as zero
QUADRATIC_RTOL = 1e-12


def critical_value(level):
    """Two-sided standard normal critical value for a confidence level."""
    if not 0 < level < 1:
        raise ShiftShareValueError(
            f'Confidence level must lie in (0, 1), got {level}')
    return float(scipy.stats.norm.ppf((1 + level) / 2))


def _warn_incomplete_shares(shares, design):
    if not shares_controlled(shares, design):
        warnings.warn(
            'Shares do not sum to one in every region and their sum is not '
            'among the controls; consider adding sum_s w_is as a control.',
            IncompleteSharesWarning,
            stacklevel=3,
        )


@dataclass(frozen=True)
class ConfidenceSet:
    """A subset of the real line.

    The null-imposed AKM0 set is one of:

    * ``interval``: [lo, hi]. When the quadratic degenerates to a line one
      endpoint is infinite and the set is a half-line, (-inf, hi] or
      [lo, inf).
    * ``union_of_two_rays``: (-inf, lo] U [hi, inf).
    * ``full_line``: every value; lo and hi are -inf and inf.
    * ``empty``: no value at all, which only a constant positive quadratic
      produces. lo, hi and ``effective_se`` are nan.

    Unbounded shapes have infinite ``length`` and ``effective_se``.
    """

    shape: str
    lo: float
    hi: float
    level: float

    @classmethod
    def interval(cls, center, se, level):
        half = critical_value(level) * se
        return cls('interval', center - half, center + half, level)

    @classmethod
    def full_line(cls, level):
        return cls('full_line', -math.inf, math.inf, level)

    @classmethod
    def empty(cls, level):
        return cls('empty', math.nan, math.nan, level)

    @property
    def length(self):
        if self.shape == 'interval':
            return self.hi - self.lo
        if self.shape == 'empty':
            return 0.0
        return math.inf

    @property
    def effective_se(self):
        """Length over twice the critical value; infinite for unbounded sets."""
        if self.shape == 'empty':
            return math.nan
        return self.length / (2 * critical_value(self.level))

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.shape == 'interval':
            return (theta >= self.lo) & (theta <= self.hi)
        if self.shape == 'union_of_two_rays':
            return (theta <= self.lo) | (theta >= self.hi)
        if self.shape == 'full_line':
            return np.ones(theta.shape, dtype=bool)
        return np.zeros(theta.shape, dtype=bool)

    def to_dict(self):
        return {'shape': self.shape, 'lo': self.lo, 'hi': self.hi}


@dataclass(frozen=True)
class InferenceResult:
    method: str
    estimate: float
    se: float
    confset: ConfidenceSet
    sector_terms: np.ndarray = None
    x_hat_sector: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def effective_se(self):
        return self.confset.effective_se

    @property
    def level(self):
        return self.confset.level

    def rejects(self, null_value):
        return not bool(self.confset.contains(null_value))

    def to_dict(self):
        record = {
            'method': self.method,
            'estimate': self.estimate,
            'se': self.se,
            'ci': self.confset.to_dict(),
            'effective_se': self.effective_se,
            'level': self.level,
        }
        record.update(self.extra)
        return record


@dataclass(frozen=True)
class SharesFactorization:
    """Pivoted QR factorization of the (weighted) share matrix."""

    q: np.ndarray
    r: np.ndarray
    piv: np.ndarray
    root_weight: np.ndarray


@dataclass(frozen=True)
class SectorProjection:
    x_hat_sector: np.ndarray


def factorize_shares(shares, obs_weight=None):
    """Factorize the shares for repeated sector projections.

    Raises ``AkmInfeasible`` when there are fewer regions than sectors or
    the weighted share matrix is rank deficient.
    """
    n, s = shares.w.shape
    if n < s:
        raise AkmInfeasible(reason='N < S')
    root = np.ones(n) if obs_weight is None else np.sqrt(obs_weight)
    q, r, piv, rank = pivoted_qr(root[:, np.newaxis] * shares.w)
    if rank < s:
        raise AkmInfeasible(reason='W is rank deficient')
    return SharesFactorization(q, r, piv, root)


def sector_project(shares, x_dotdot, obs_weight=None, factorization=None):
    """Least-squares coefficients of X'' on the shares."""
    if factorization is None:
        factorization = factorize_shares(shares, obs_weight)
    f = factorization
    coef = solve_pivoted(f.q, f.r, f.piv, f.root_weight * x_dotdot)
    return SectorProjection(coef)


def _projection(fit, shares, projection):
    if projection is None:
        projection = sector_project(shares, fit.x_dotdot,
                                    fit.design.obs_weight)
    return projection


def sector_scores(shares, fit, residuals):
    """R_s = sum_i w_is weight_i resid_i."""
    return shares.w.T @ (fit.weights * residuals)


def _sector_codes(shares, sector_cluster):
    return cluster_codes(sector_cluster, shares.n_sectors, 'sectors')


def se_conventional(fit, cluster=None, level=0.95, small_sample=False,
                    warn=True):
    """Heteroskedasticity or cluster robust sandwich standard error.

    ``cluster`` holds one label per region; ``None`` gives the robust
    (HC0) standard error.
    """
    n = fit.n_regions
    codes, n_clusters = cluster_codes(cluster, n, 'regions')
    if cluster is not None:
        if n_clusters < 2:
            raise ClusterError(
                f'A clustered variance needs at least two clusters, '
                f'got {n_clusters}')
        if warn and n_clusters < SMALL_CLUSTER_COUNT:
            warnings.warn(
                f'Only {n_clusters} clusters; cluster-robust standard '
                'errors may be unreliable.',
                SmallClusterWarning,
                stacklevel=2,
            )
    scores = fit.weights * fit.x_dotdot * fit.residuals
    meat = float(np.sum(cluster_sums(scores, codes, n_clusters) ** 2))
    if small_sample:
        k = fit.design.n_controls + 1
        if cluster is None:
            meat *= n / (n - k)
        else:
            meat *= n_clusters / (n_clusters - 1) * (n - 1) / (n - k)
    se = math.sqrt(meat) / abs(fit.denominator)
    method = 'robust' if cluster is None else 'cluster'
    return InferenceResult(method, fit.estimate, se,
                           ConfidenceSet.interval(fit.estimate, se, level))


def _akm_meat(fit, shares, projection, sector_cluster):
    scores = sector_scores(shares, fit, fit.residuals)
    codes, n_clusters = _sector_codes(shares, sector_cluster)
    terms = projection.x_hat_sector * scores
    meat = float(np.sum(cluster_sums(terms, codes, n_clusters) ** 2))
    return meat, scores


def se_akm(fit, shares, projection=None, sector_cluster=None, level=0.95,
           check_shares=True, method='akm'):
    """Shift-share standard error.

    meat = sum_c (sum_{s in c} xhat_s R_s)^2 with singleton clusters
    unless ``sector_cluster`` labels are given; se = sqrt(meat) / |D| with
    D = X''X'' (OLS) or X''Y2 (IV).
    """
    if check_shares:
        _warn_incomplete_shares(shares, fit.design)
    projection = _projection(fit, shares, projection)
    meat, scores = _akm_meat(fit, shares, projection, sector_cluster)
    se = math.sqrt(meat) / abs(fit.denominator)
    return InferenceResult(method, fit.estimate, se,
                           ConfidenceSet.interval(fit.estimate, se, level),
                           sector_terms=scores,
                           x_hat_sector=projection.x_hat_sector)


def _quadratic_roots(a, b, c):
    disc = max(b * b - 4 * a * c, 0.0)
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    if q == 0:
        return 0.0, 0.0
    r1, r2 = q / a, c / q
    return min(r1, r2), max(r1, r2)


def solve_acceptance_region(a, b, c, level, scale_a, scale_b):
    """Set of theta with a theta^2 + b theta + c <= 0."""
    if abs(a) <= QUADRATIC_RTOL * scale_a:
        if abs(b) <= QUADRATIC_RTOL * scale_b:
            if c <= 0:
                return ConfidenceSet.full_line(level)
            return ConfidenceSet.empty(level)
        root = -c / b
        if b > 0:
            return ConfidenceSet('interval', -math.inf, root, level)
        return ConfidenceSet('interval', root, math.inf, level)
    disc = b * b - 4 * a * c
    if a > 0:
        lo, hi = _quadratic_roots(a, b, c)
        return ConfidenceSet('interval', lo, hi, level)
    if disc > 0:
        lo, hi = _quadratic_roots(a, b, c)
        return ConfidenceSet('union_of_two_rays', lo, hi, level)
    return ConfidenceSet.full_line(level)


def akm0_coefficients(fit, shares, projection, sector_cluster, z):
    """Coefficients of the quadratic whose negative part is the AKM0 set."""
    x_hat = projection.x_hat_sector
    codes, n_clusters = _sector_codes(shares, sector_cluster)
    weight = fit.weights
    e0 = fit.y_dotdot
    e1 = fit.null_direction
    p = float(np.sum(weight * fit.x_dotdot * e0))
    d = fit.denominator
    g0 = cluster_sums(x_hat * sector_scores(shares, fit, e0), codes,
                      n_clusters)
    g1 = cluster_sums(x_hat * sector_scores(shares, fit, e1), codes,
                      n_clusters)
    z2 = z * z
    s00, s01, s11 = (float(np.dot(g0, g0)), float(np.dot(g0, g1)),
                     float(np.dot(g1, g1)))
    a = d * d - z2 * s11
    b = -2 * p * d + 2 * z2 * s01
    c = p * p - z2 * s00
    scale_a = d * d + z2 * s11
    scale_b = 2 * (abs(p * d) + z2 * abs(s01))
    return a, b, c, scale_a, scale_b


def ci_akm0(fit, shares, projection=None, level=0.95, sector_cluster=None,
            check_shares=True, method='akm0'):
    """Null-imposed shift-share confidence set.

    The set is {theta : (estimate - theta)^2 D^2 <= z^2 meat(theta)} with
    meat evaluated at residuals recomputed under theta. Works for a weak
    IV fit carried by ``WeakInstrumentDegenerate.fit``.
    """
    if check_shares:
        _warn_incomplete_shares(shares, fit.design)
    projection = _projection(fit, shares, projection)
    z = critical_value(level)
    a, b, c, scale_a, scale_b = akm0_coefficients(
        fit, shares, projection, sector_cluster, z)
    confset = solve_acceptance_region(a, b, c, level, scale_a, scale_b)
    logger.debug('AKM0 quadratic a=%.6g b=%.6g c=%.6g -> %s',
                 a, b, c, confset.shape)
    return InferenceResult(method, fit.estimate, None, confset,
                           x_hat_sector=projection.x_hat_sector)


def loo_cross_terms(fit, shares, loo):
    """Matrix S_ij = 1{i != j} weight_i resid_i sum_s A_is B_js.

    A_is = w_is / n_{s,-i} and B_js = aw_js psi_js.
    """
    w = shares.w
    a = np.zeros(w.shape)
    needed = w > 0
    a[needed] = w[needed] / loo.n_loo[needed]
    b = loo.agg_weights * loo.psi_hat
    cross = (fit.weights * fit.residuals)[:, np.newaxis] * (a @ b.T)
    np.fill_diagonal(cross, 0.0)
    return cross


def se_akm_loo(fit, shares, loo, projection=None, level=0.95,
               check_shares=True):
    """Shift-share IV standard error with an estimated-shifter correction.

    The corrected variance adds sum_j (sum_i S_ij)^2 + sum_ij S_ij S_ji to
    the AKM meat. The uncorrected standard error is kept in ``extra``.
    """
    if check_shares:
        _warn_incomplete_shares(shares, fit.design)
    projection = _projection(fit, shares, projection)
    meat, scores = _akm_meat(fit, shares, projection, None)
    cross = loo_cross_terms(fit, shares, loo)
    correction = float(np.sum(cross.sum(axis=0) ** 2)
                       + np.sum(cross * cross.T))
    denominator = abs(fit.denominator)
    se = math.sqrt(max(meat + correction, 0.0)) / denominator
    return InferenceResult(
        'akm_loo', fit.estimate, se,
        ConfidenceSet.interval(fit.estimate, se, level),
        sector_terms=scores,
        x_hat_sector=projection.x_hat_sector,
        extra={'se_uncorrected': math.sqrt(meat) / denominator,
               'variance_correction': correction
               / float(np.sum(shares.n_s ** 2))},
    )


def infer(fit, shares, methods=('robust', 'akm', 'akm0'), level=0.95,
          cluster_shifters=False, loo=None, small_sample=False,
          check_shares=True, factorization=None, warn=True):
    """Run several inference methods on one fit, in the given order.

    ``cluster`` clusters on ``fit.design.region_cluster``; the ``akm``
    variants cluster on ``shares.sector_cluster`` when ``cluster_shifters``
    is set, and ``akm_clustered``/``akm0_clustered`` always do.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ShiftShareValueError(
            f'Unknown inference method(s) {", ".join(unknown)}; valid '
            f'options are {", ".join(METHODS)}')
    if check_shares and any(m.startswith('akm') for m in methods):
        _warn_incomplete_shares(shares, fit.design)

    projection = None
    if any(m.startswith('akm') for m in methods):
        if factorization is None:
            factorization = factorize_shares(shares, fit.design.obs_weight)
        projection = sector_project(shares, fit.x_dotdot,
                                    factorization=factorization)

    def sector_cluster_for(method):
        clustered = method.endswith('_clustered') or cluster_shifters
        if not clustered:
            return None
        if shares.sector_cluster is None:
            raise DataError(f'{method} requires sector cluster labels')
        return shares.sector_cluster

    results = []
    for method in methods:
        if method == 'robust':
            result = se_conventional(fit, None, level, small_sample)
        elif method == 'cluster':
            if fit.design.region_cluster is None:
                raise DataError('cluster requires region cluster labels')
            result = se_conventional(fit, fit.design.region_cluster, level,
                                     small_sample, warn=warn)
        elif method in ('akm', 'akm_clustered'):
            result = se_akm(fit, shares, projection,
                            sector_cluster_for(method), level,
                            check_shares=False, method=method)
        elif method in ('akm0', 'akm0_clustered'):
            result = ci_akm0(fit, shares, projection, level,
                             sector_cluster_for(method), check_shares=False,
                             method=method)
        else:
            if loo is None:
                raise DataError(
                    'akm_loo requires aggregation weights and local shocks')
            result = se_akm_loo(fit, shares, loo, projection, level,
                                check_shares=False)
        results.append(result)
    return results

# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""
Monte Carlo placebo engine.

Each replication draws sector shifters (and any outcome shocks) from its
own counter-based stream keyed by ``(seed, replication index)``, fits the
regression and records, for every inference method, whether the null
value lies outside the confidence set. Replications run on a thread pool;
results are collected in index order so a report is a pure function of
the configuration and the seed, whatever the number of workers.

Shares, base outcomes and alternative shares are drawn once per run from
a separate setup stream.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path

from joblib import Parallel, delayed
import numpy as np
import pandas as pd
import scipy.linalg

from . import (
    DEFAULT_WORKERS,
    DataError,
    DgpError,
    ReplicationError,
    ShiftShareError,
)
from ._utils import cluster_codes, config_hash, to_jsonable
from .data import (
    Design,
    SharesMatrix,
    Shifters,
    akm_feasibility,
    long_to_matrix,
    read_regions_csv,
    read_shares_csv,
    shares_controlled,
)
from .estimate import (
    build_loo_instrument,
    build_shift_share,
    fit_iv,
    fit_ols,
    partial_out,
)
from .infer import METHODS, factorize_shares, infer

logger = logging.getLogger(__name__)

SHIFTER_KINDS = ('iid_normal', 'lognormal_recentered', 'heteroskedastic',
                 'cluster_mvn', 'factor')
DESIGN_KINDS = ('ols', 'mismeasured_iv', 'confounded')
CONTROLS_SPECS = ('none', 'intercept', 'intercept_residual_share')

# Variances of heteroskedastic shifters below this are an error, not noise
NEGATIVE_VARIANCE_TOL = 1e-6
VARIANCE_FLOOR = 1e-8

# Redraws allowed when a full-rank synthetic share matrix is requested
MAX_SHARE_DRAWS = 100


def replication_rng(seed, index):
    """Random generator for replication ``index``."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 0, index])))


def setup_rng(seed):
    """Random generator for draws shared by all replications."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 1])))


def _check_keys(record, allowed, what):
    unknown = sorted(set(record) - set(allowed))
    if unknown:
        raise DgpError(f'Unknown {what} option(s): {", ".join(unknown)}')


def _nonnegative(value, name):
    if value < 0:
        raise DgpError(f'{name} must be nonnegative, got {value}')
    return value


# ---- Shifters

def cluster_normal(variance, rho, codes, n_clusters, rng):
    """Normal draws correlated ``rho`` within the clusters in ``codes``."""
    own = rng.standard_normal(len(codes))
    common = rng.standard_normal(n_clusters)
    return (math.sqrt((1 - rho) * variance) * own
            + math.sqrt(rho * variance) * common[codes])


@dataclass(frozen=True)
class ShifterDgp:
    """Distribution of sector shifters.

    ``variance`` is the shifter variance of every kind except
    ``heteroskedastic`` (variance ``base + lam * (n_s - S / N)``) and
    ``factor`` (``kappa * eta_s * dxbar`` plus normal noise of variance
    ``u_variance``). ``cluster_mvn`` correlates shifters within sector
    clusters with correlation ``rho``.
    """

    kind: str = 'iid_normal'
    variance: float = 5.0
    mean: float = 0.0
    base: float = 5.0
    lam: float = 0.0
    rho: float = 0.0
    kappa: float = 1.0
    eta: tuple = None
    dxbar: float = 1.0
    u_variance: float = 0.0
    clusters: tuple = None

    def __post_init__(self):
        if self.kind not in SHIFTER_KINDS:
            raise DgpError(f'Unknown shifter distribution {self.kind!r}')
        _nonnegative(self.variance, 'Shifter variance')
        _nonnegative(self.u_variance, 'Factor noise variance')
        if self.kind == 'cluster_mvn' and not 0 <= self.rho <= 1:
            raise DgpError(
                f'Within-cluster correlation {self.rho} outside [0, 1]: the '
                'shifter covariance is not positive semidefinite')
        if self.kind == 'factor' and self.eta is None:
            raise DgpError('Factor shifters need factor loadings eta')
        if self.eta is not None:
            object.__setattr__(self, 'eta', tuple(float(v) for v in self.eta))
        if self.clusters is not None:
            object.__setattr__(self, 'clusters', tuple(self.clusters))

    @classmethod
    def from_dict(cls, record):
        _check_keys(record, cls.__dataclass_fields__, 'shifter_dgp')
        try:
            return cls(**record)
        except TypeError as error:
            raise DgpError(f'Invalid shifter_dgp: {error}') from None

    def to_dict(self):
        record = {'kind': self.kind}
        relevant = {
            'iid_normal': ('variance', 'mean'),
            'lognormal_recentered': ('variance',),
            'heteroskedastic': ('base', 'lam'),
            'cluster_mvn': ('variance', 'rho', 'clusters'),
            'factor': ('kappa', 'eta', 'dxbar', 'u_variance'),
        }[self.kind]
        for name in relevant:
            value = getattr(self, name)
            if value is not None:
                record[name] = list(value) if isinstance(value, tuple) else value
        return record


def draw_shifters(dgp, n_sectors, rng, shares=None):
    """Draw ``n_sectors`` shifters.

    ``shares`` supplies the sector sizes of the heteroskedastic kind and
    the sector clusters of ``cluster_mvn`` when ``dgp.clusters`` is unset.
    """
    sectors = shares.sectors if shares is not None else None
    if dgp.kind == 'iid_normal':
        values = dgp.mean + math.sqrt(dgp.variance) * rng.standard_normal(
            n_sectors)
    elif dgp.kind == 'lognormal_recentered':
        draws = np.exp(rng.standard_normal(n_sectors))
        values = ((draws - math.exp(0.5)) / math.sqrt((math.e - 1) * math.e)
                  * math.sqrt(dgp.variance))
    elif dgp.kind == 'heteroskedastic':
        if shares is None:
            raise DgpError('Heteroskedastic shifters need the share matrix')
        variance = dgp.base + dgp.lam * (shares.n_s
                                         - n_sectors / shares.n_regions)
        if np.any(variance < -NEGATIVE_VARIANCE_TOL):
            raise DgpError(
                f'Shifter variance {variance.min():.6g} is negative; lower '
                'the heterogeneity parameter')
        values = (np.sqrt(np.maximum(variance, VARIANCE_FLOOR))
                  * rng.standard_normal(n_sectors))
    elif dgp.kind == 'cluster_mvn':
        clusters = dgp.clusters
        if clusters is None and shares is not None:
            clusters = shares.sector_cluster
        if clusters is None:
            raise DgpError('Clustered shifters need sector clusters')
        codes, n_clusters = cluster_codes(clusters, n_sectors, 'sectors')
        values = cluster_normal(dgp.variance, dgp.rho, codes, n_clusters, rng)
    else:
        eta = np.asarray(dgp.eta, dtype=float)
        if eta.shape != (n_sectors,):
            raise DgpError(
                f'{eta.shape[0]} factor loadings for {n_sectors} sectors')
        noise = math.sqrt(dgp.u_variance) * rng.standard_normal(n_sectors)
        values = dgp.kappa * eta * dgp.dxbar + noise
    return Shifters(values, sectors)


# ---- Shares

def synth_shares(n_regions, n_sectors, concentration, rng,
                 scale_range=(1.0, 1.0), require_full_rank=False,
                 region_cluster=None, cluster_profile_weight=0.0):
    """Synthetic share matrix.

    Rows are symmetric Dirichlet draws scaled by a per-region factor
    uniform on ``scale_range``; a factor below one leaves part of the
    region outside the listed sectors. Small ``concentration`` gives
    nearly concentrated rows.

    With ``cluster_profile_weight`` phi > 0 every region cluster gets its
    own Dirichlet profile p_c and region i has shares
    phi p_c(i) + (1 - phi) d_i, so regions of a cluster have similar
    sector mixes.
    """
    if concentration <= 0:
        raise DgpError(f'Dirichlet concentration must be positive, '
                       f'got {concentration}')
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise DgpError(f'Share scale range must lie in (0, 1], got '
                       f'{scale_range}')
    phi = cluster_profile_weight
    if not 0 <= phi <= 1:
        raise DgpError(f'Cluster profile weight must lie in [0, 1], got {phi}')
    if phi > 0:
        if region_cluster is None:
            raise DgpError('A cluster profile weight needs region clusters')
        codes, n_clusters = cluster_codes(region_cluster, n_regions,
                                          'regions')
    regions = tuple(f'r{i + 1}' for i in range(n_regions))
    sectors = tuple(f's{s + 1}' for s in range(n_sectors))
    alpha = np.full(n_sectors, float(concentration))
    for _ in range(MAX_SHARE_DRAWS):
        w = rng.dirichlet(alpha, size=n_regions)
        if phi > 0:
            profiles = rng.dirichlet(alpha, size=n_clusters)
            w = phi * profiles[codes] + (1 - phi) * w
        if hi > lo:
            w = w * rng.uniform(lo, hi, size=n_regions)[:, np.newaxis]
        elif hi < 1:
            w = w * hi
        shares = SharesMatrix(regions, sectors, w)
        if not require_full_rank or akm_feasibility(shares)[0]:
            return shares
    raise DgpError(
        f'Could not draw a full-rank {n_regions} x {n_sectors} share matrix')


def synth_region_clusters(n_regions, size):
    """Consecutive groups of ``size`` regions ("states")."""
    if size < 1:
        raise DgpError(f'Cluster size must be positive, got {size}')
    return tuple(f'c{i // size + 1}' for i in range(n_regions))


def synth_sector_clusters(n_sectors, size):
    """Consecutive groups of ``size`` sectors."""
    if size < 1:
        raise DgpError(f'Cluster size must be positive, got {size}')
    return tuple(f'g{s // size + 1}' for s in range(n_sectors))


def alternative_shares(shares, sigma_u2, sigma_v, rng):
    """Shares correlated with ``shares`` to a degree set by the noise.

    Each entry is (w_is + v_is) exp(u_is) with u normal of variance
    ``sigma_u2`` and v uniform on [0, sigma_v]; rows are rescaled to the
    row sums of ``shares``.
    """
    _nonnegative(sigma_u2, 'sigma_u2')
    _nonnegative(sigma_v, 'sigma_v')
    w = shares.w
    noise = math.sqrt(sigma_u2) * rng.standard_normal(w.shape)
    shift = rng.uniform(0.0, sigma_v, size=w.shape) if sigma_v > 0 else 0.0
    raw = (w + shift) * np.exp(noise)
    totals = raw.sum(axis=1)
    alt = np.zeros(w.shape)
    positive = totals > 0
    alt[positive] = (raw[positive] / totals[positive, np.newaxis]
                     * shares.row_sums[positive, np.newaxis])
    return SharesMatrix(shares.regions, shares.sectors, alt,
                        shares.sector_cluster)


# ---- Outcomes

@dataclass(frozen=True)
class RegionClusterShock:
    """Common normal shock to all regions of a cluster."""

    variance: float
    clusters: tuple

    def draw(self, shares, rng):
        codes, n_clusters = cluster_codes(self.clusters, shares.n_regions,
                                          'regions')
        return math.sqrt(self.variance) * rng.standard_normal(n_clusters)[codes]


@dataclass(frozen=True)
class ResidualSectorShock:
    """Shock to the sector outside the share matrix, (1 - sum_s w_is) eta."""

    variance: float

    def draw(self, shares, rng):
        return ((1.0 - shares.row_sums)
                * math.sqrt(self.variance) * rng.standard_normal())


@dataclass(frozen=True)
class AltShareShiftShare:
    variance: float
    alt_shares: SharesMatrix

    def draw(self, shares, rng):
        shocks = math.sqrt(self.variance) * rng.standard_normal(
            self.alt_shares.n_sectors)
        return self.alt_shares.w @ shocks


@dataclass(frozen=True)
class SameShareShiftShare:
    """Shift-share residual W a on the regressor's own shares.

    The sector shocks a are correlated ``rho`` within the sector
    ``clusters``.
    """

    variance: float
    rho: float = 0.0
    clusters: tuple = None

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise DgpError(f'Residual shock correlation {self.rho} outside '
                           '[0, 1]')
        if self.rho > 0 and self.clusters is None:
            raise DgpError('Correlated residual shocks need sector clusters')

    def draw(self, shares, rng):
        if self.rho == 0:
            shocks = math.sqrt(self.variance) * rng.standard_normal(
                shares.n_sectors)
        else:
            codes, n_clusters = cluster_codes(self.clusters, shares.n_sectors,
                                              'sectors')
            shocks = cluster_normal(self.variance, self.rho, codes,
                                    n_clusters, rng)
        return shares.w @ shocks


@dataclass(frozen=True)
class RegionNoise:
    """Independent normal noise, redrawn for every replication."""

    variance: float

    def draw(self, shares, rng):
        return math.sqrt(self.variance) * rng.standard_normal(
            shares.n_regions)


def nonlinear_outcome(beta_check, shares, values):
    """beta_check * log(sum_s w_is exp(shifter_s)) for every region."""
    if np.any(shares.row_sums <= 0):
        raise DgpError('The nonlinear outcome needs positive shares in '
                       'every region')
    values = np.asarray(values, dtype=float)
    top = values.max()
    return beta_check * (np.log(shares.w @ np.exp(values - top)) + top)


def estimand_nonlinear(beta_check, shares, variance, mc_draws, rng,
                       chunk_size=1000, z=None):
    """Estimand of the nonlinear design by Monte Carlo integration.

    With shifters gamma * Z_s, Z standard normal and gamma^2 = variance,
    beta = beta_check * E[sum_i Xdd_i L_i] / E[sum_i Xdd_i^2] where
    X_i = sum_s w_is gamma Z_s, Xdd is X with the controls ``z`` partialled
    out and L_i = log(sum_k w_ik exp(gamma Z_k)). Both expectations are
    integrated on the same draws, which makes the estimate exact when
    every region is concentrated in one sector. Regions without shares
    are excluded. Returns the estimate and its Monte Carlo standard error.
    """
    if mc_draws < 1:
        raise DgpError(f'mc_draws must be positive, got {mc_draws}')
    _nonnegative(variance, 'Shifter variance')
    if variance == 0:
        return float(beta_check), 0.0
    gamma = math.sqrt(variance)
    keep = shares.row_sums > 0
    w = shares.w[keep]
    if w.size == 0:
        raise DgpError('All shares are zero')
    if z is not None:
        z = np.asarray(z, dtype=float)
        z = (z[:, np.newaxis] if z.ndim == 1 else z)[keep]
    numerators = np.empty(mc_draws)
    denominators = np.empty(mc_draws)
    for start in range(0, mc_draws, chunk_size):
        size = min(chunk_size, mc_draws - start)
        shifters = gamma * rng.standard_normal((size, shares.n_sectors))
        top = shifters.max(axis=1, keepdims=True)
        log_sum = np.log(np.exp(shifters - top) @ w.T) + top
        exposure = shifters @ w.T
        if z is not None:
            exposure = partial_out(z, exposure.T).T
        numerators[start:start + size] = np.sum(exposure * log_sum, axis=1)
        denominators[start:start + size] = np.sum(exposure ** 2, axis=1)
    ratio = numerators.mean() / denominators.mean()
    beta = beta_check * ratio
    if mc_draws == 1:
        return float(beta), math.inf
    spread = np.std(numerators - ratio * denominators, ddof=1)
    se = (abs(beta_check) * spread
          / (math.sqrt(mc_draws) * denominators.mean()))
    return float(beta), float(se)


@dataclass(frozen=True)
class NullEffect:
    def apply(self, shares, shifters):
        return np.zeros(shares.n_regions)

    def true_estimand(self, shares, shifter_dgp, rng, z=None):
        return 0.0


@dataclass(frozen=True)
class HomogeneousEffect:
    beta: float

    def apply(self, shares, shifters):
        return self.beta * build_shift_share(shares, shifters)

    def true_estimand(self, shares, shifter_dgp, rng, z=None):
        return float(self.beta)


@dataclass(frozen=True)
class HeterogeneousLinearEffect:
    """Region-sector effects beta_is = lam * w_is.

    The OLS estimand is lam sum (M W) w^3 / sum (M W) w^2 summed over i and
    s, with M W the shares net of the controls.
    """

    lam: float

    def apply(self, shares, shifters):
        return self.lam * (shares.w ** 2) @ shifters.values

    def true_estimand(self, shares, shifter_dgp, rng, z=None):
        w = shares.w
        net = w if z is None else partial_out(z, w)
        return float(self.lam * np.sum(net * w ** 2) / np.sum(net * w))


@dataclass(frozen=True)
class NonlinearEffect:
    beta_check: float
    mc_draws: int = 50000

    def apply(self, shares, shifters):
        return nonlinear_outcome(self.beta_check, shares, shifters.values)

    def true_estimand(self, shares, shifter_dgp, rng, z=None):
        if shifter_dgp.kind != 'iid_normal' or shifter_dgp.mean != 0:
            raise DgpError('The nonlinear estimand assumes centred iid '
                           'normal shifters')
        beta, se = estimand_nonlinear(self.beta_check, shares,
                                      shifter_dgp.variance, self.mc_draws, rng,
                                      z=z)
        logger.info('Nonlinear estimand %.6g (Monte Carlo s.e. %.2g)',
                    beta, se)
        return beta


@dataclass(frozen=True)
class OutcomeDgp:
    """Placebo outcome: fixed base plus random addons plus an effect."""

    base: np.ndarray
    addons: tuple = ()
    effect: object = field(default_factory=NullEffect)


def make_outcome(dgp, shares, shifters, rng):
    """Outcome for one replication: base + addon draws + effect."""
    y = np.array(dgp.base, dtype=float)
    if y.shape != (shares.n_regions,):
        raise DgpError(f'Base outcome has shape {y.shape}, expected '
                       f'({shares.n_regions},)')
    for addon in dgp.addons:
        y = y + addon.draw(shares, rng)
    return y + dgp.effect.apply(shares, shifters)


# ---- Placebo designs

@dataclass(frozen=True)
class Replication:
    fit: object
    loo: object = None


class ShiftSharePlacebo:
    """OLS of a simulated outcome on X = W shifters."""

    estimand_name = 'beta'

    def __init__(self, shares, design, shifter_dgp, outcome_dgp):
        self.shares = shares
        self.design = design
        self.shifter_dgp = shifter_dgp
        self.outcome_dgp = outcome_dgp

    def replicate(self, rng):
        shares = self.shares
        shifters = draw_shifters(self.shifter_dgp, shares.n_sectors, rng,
                                 shares)
        y = make_outcome(self.outcome_dgp, shares, shifters, rng)
        x = build_shift_share(shares, shifters)
        return Replication(fit_ols(self.design.with_outcome(y), x))

    def true_estimand(self, rng):
        return self.outcome_dgp.effect.true_estimand(
            self.shares, self.shifter_dgp, rng, self.design.z)


class MismeasuredShifterPlacebo(ShiftSharePlacebo):
    """IV with shifters observed only through region-sector shocks.

    Local shocks are X_is = shifter_s + psi_is, the treatment is
    Y2 = sum_s w_is X_is and the outcome Y1 = rho sum_s w_is psi_is +
    sum_s w_is A_s. The instrument is built from the true shifters, from
    shifters estimated with aggregation weights w_is / n_s, or from their
    leave-one-out version.
    """

    estimand_name = 'alpha'
    INSTRUMENTS = ('true', 'aggregate', 'leave_one_out')

    def __init__(self, shares, design, shifter_dgp, outcome_dgp,
                 psi_variance=10.0, a_variance=20.0, rho=0.0,
                 instrument='leave_one_out'):
        super().__init__(shares, design, shifter_dgp, outcome_dgp)
        if instrument not in self.INSTRUMENTS:
            raise DgpError(f'Unknown instrument {instrument!r}')
        if not isinstance(outcome_dgp.effect,
                          (NullEffect, HomogeneousEffect)):
            raise DgpError('IV placebos support null or homogeneous effects')
        self.psi_variance = _nonnegative(psi_variance, 'psi_variance')
        self.a_variance = _nonnegative(a_variance, 'a_variance')
        self.rho = rho
        self.instrument = instrument
        self.noise_dgp = OutcomeDgp(outcome_dgp.base, outcome_dgp.addons)
        n_s = shares.n_s
        self.agg_weights = np.divide(shares.w, n_s, out=np.zeros(
            shares.w.shape), where=n_s > 0)

    def replicate(self, rng):
        shares = self.shares
        w = shares.w
        shifters = draw_shifters(self.shifter_dgp, shares.n_sectors, rng,
                                 shares)
        psi = math.sqrt(self.psi_variance) * rng.standard_normal(w.shape)
        local = shifters.values[np.newaxis, :] + psi
        y2 = np.sum(w * local, axis=1)
        a = math.sqrt(self.a_variance) * rng.standard_normal(shares.n_sectors)
        y1 = (make_outcome(self.noise_dgp, shares, shifters, rng)
              + self.rho * np.sum(w * psi, axis=1) + w @ a)
        effect = self.outcome_dgp.effect
        if isinstance(effect, HomogeneousEffect):
            y1 = y1 + effect.beta * y2
        design = self.design.with_outcome(y1, y2)
        if self.instrument == 'true':
            return Replication(fit_iv(design, build_shift_share(shares,
                                                                shifters)))
        loo = build_loo_instrument(shares, self.agg_weights, local)
        if self.instrument == 'aggregate':
            return Replication(fit_iv(design, loo.x_hat))
        return Replication(fit_iv(design, loo.x_hat_loo), loo)


class ConfoundedPlacebo(ShiftSharePlacebo):
    """Shifter of interest correlated with a confounding sector shock.

    Sector draws (a, b, c) are jointly normal with common variance
    ``sigma_tilde``, corr(a, b) = corr(a, c) = ``rho_tilde`` and b, c
    independent. The outcome adds ``delta * W b``. Estimators: ``ols`` on
    W a, ``ols_proxy`` also controlling for u + W b with u normal of
    variance ``u_variance``, and ``iv`` instrumenting W a with W c.
    """

    ESTIMATORS = ('ols', 'ols_proxy', 'iv')

    def __init__(self, shares, design, shifter_dgp, outcome_dgp,
                 rho_tilde=0.7, sigma_tilde=12.0, delta=6.0, u_variance=0.0,
                 estimator='ols'):
        super().__init__(shares, design, shifter_dgp, outcome_dgp)
        if estimator not in self.ESTIMATORS:
            raise DgpError(f'Unknown estimator {estimator!r}')
        _nonnegative(sigma_tilde, 'sigma_tilde')
        self.u_variance = _nonnegative(u_variance, 'u_variance')
        self.delta = delta
        self.estimator = estimator
        if estimator == 'iv':
            self.estimand_name = 'alpha'
        covariance = sigma_tilde * np.array([[1.0, rho_tilde, rho_tilde],
                                             [rho_tilde, 1.0, 0.0],
                                             [rho_tilde, 0.0, 1.0]])
        try:
            self.chol = scipy.linalg.cholesky(covariance, lower=True)
        except scipy.linalg.LinAlgError:
            raise DgpError(
                f'rho_tilde={rho_tilde} gives a shifter covariance that is '
                'not positive definite') from None

    def replicate(self, rng):
        shares = self.shares
        draws = rng.standard_normal((shares.n_sectors, 3)) @ self.chol.T
        interest = Shifters(draws[:, 0], shares.sectors)
        x_a = build_shift_share(shares, interest)
        x_b = shares.w @ draws[:, 1]
        x_c = shares.w @ draws[:, 2]
        y = (make_outcome(self.outcome_dgp, shares, interest, rng)
             + self.delta * x_b)
        if self.estimator == 'iv':
            return Replication(fit_iv(self.design.with_outcome(y, x_a), x_c))
        design = self.design.with_outcome(y)
        if self.estimator == 'ols_proxy':
            proxy = (math.sqrt(self.u_variance)
                     * rng.standard_normal(shares.n_regions) + x_b)
            design = design.with_controls(
                np.column_stack([design.z, proxy]),
                design.z_names + ('proxy',))
        return Replication(fit_ols(design, x_a))


# ---- Configuration

DEFAULT_CONFIG = {
    'M': 2000,
    'seed': 0,
    'level': 0.95,
    'methods': ['robust', 'akm', 'akm0'],
    'null_value': 0.0,
    'controls_spec': 'intercept',
}

CONFIG_KEYS = ('M', 'seed', 'level', 'shares', 'shifter_dgp', 'outcome_dgp',
               'design', 'methods', 'null_value', 'controls_spec', 'workers')

SHARES_DEFAULTS = {
    'synthetic': {'n_regions': 200, 'n_sectors': 50, 'concentration': 0.1,
                  'scale_range': [1.0, 1.0], 'require_full_rank': True,
                  'region_cluster_size': None, 'sector_cluster_size': None,
                  'cluster_profile_weight': 0.0, 'residual_sector': False},
    'csv': {'path': None, 'regions': None, 'sector_cluster_size': None,
            'residual_sector': False},
}

DESIGN_DEFAULTS = {
    'ols': {},
    'mismeasured_iv': {'psi_variance': 10.0, 'a_variance': 20.0, 'rho': 0.0,
                       'instrument': 'leave_one_out'},
    'confounded': {'rho_tilde': 0.7, 'sigma_tilde': 12.0, 'delta': 6.0,
                   'u_variance': 0.0, 'estimator': 'ols'},
}

ADDON_DEFAULTS = {
    'region_cluster_shock': {'variance': 6.0},
    'residual_sector_shock': {'variance': 5.0},
    'alt_share_shiftshare': {'variance': 5.0, 'sigma_u2': 0.0,
                             'sigma_v': 0.0},
    'same_share_shiftshare': {'variance': 5.0, 'rho': 0.0},
    'region_noise': {'variance': 1.0},
}

EFFECT_DEFAULTS = {
    'null': {},
    'homogeneous': {'beta': 0.0},
    'heterogeneous_linear': {'lam': 1.0},
    'nonlinear': {'beta_check': 0.4, 'mc_draws': 50000},
}

BASE_DEFAULTS = {
    'zeros': {},
    'normal': {'variance': 1.0},
    'observed': {},
}


def _with_defaults(record, defaults, what):
    if not isinstance(record, dict) or 'kind' not in record:
        raise DgpError(f'{what} must be an object with a "kind"')
    kind = record['kind']
    if kind not in defaults:
        raise DgpError(f'Unknown {what} kind {kind!r}; valid options are '
                       f'{", ".join(defaults)}')
    _check_keys(record, ('kind', *defaults[kind]), f'{what} {kind!r}')
    return {'kind': kind, **defaults[kind],
            **{k: v for k, v in record.items() if k != 'kind'}}


@dataclass(frozen=True)
class PlaceboConfig:
    """Validated placebo configuration with every default filled in."""

    M: int
    seed: int
    level: float
    shares: dict
    shifter_dgp: ShifterDgp
    outcome_dgp: dict
    design: dict
    methods: tuple
    null_value: object
    controls_spec: str
    workers: int = None

    @classmethod
    def from_dict(cls, record):
        if not isinstance(record, dict):
            raise DgpError('A placebo configuration must be a JSON object')
        _check_keys(record, CONFIG_KEYS, 'configuration')
        merged = {**DEFAULT_CONFIG, **record}
        if 'shares' not in merged:
            raise DgpError('The configuration needs a "shares" section')
        try:
            n_replications = int(merged['M'])
            seed = int(merged['seed'])
            level = float(merged['level'])
        except (TypeError, ValueError) as error:
            raise DgpError(f'Invalid M, seed or level: {error}') from None
        if n_replications < 1:
            raise DgpError(f'M must be at least 1, got {n_replications}')
        if seed < 0:
            raise DgpError(f'seed must be nonnegative, got {seed}')
        if not 0 < level < 1:
            raise DgpError(f'level must lie in (0, 1), got {level}')
        methods = tuple(merged['methods'])
        unknown = [m for m in methods if m not in METHODS]
        if unknown or not methods:
            raise DgpError(f'Invalid method list {list(methods)}; valid '
                           f'options are {", ".join(METHODS)}')
        null_value = merged['null_value']
        if null_value != 'estimand':
            try:
                null_value = float(null_value)
            except (TypeError, ValueError):
                raise DgpError(
                    f'null_value must be a number or "estimand", got '
                    f'{null_value!r}') from None
        if merged['controls_spec'] not in CONTROLS_SPECS:
            raise DgpError(f'Unknown controls_spec '
                           f'{merged["controls_spec"]!r}')
        shares = _with_defaults(merged['shares'], SHARES_DEFAULTS, 'shares')
        outcome = dict(merged.get('outcome_dgp') or {})
        _check_keys(outcome, ('base', 'addons', 'effect'), 'outcome_dgp')
        outcome = {
            'base': _with_defaults(outcome.get('base', {'kind': 'zeros'}),
                                   BASE_DEFAULTS, 'base outcome'),
            'addons': [_with_defaults(addon, ADDON_DEFAULTS, 'addon')
                       for addon in outcome.get('addons', [])],
            'effect': _with_defaults(outcome.get('effect', {'kind': 'null'}),
                                     EFFECT_DEFAULTS, 'effect'),
        }
        design = _with_defaults(merged.get('design', {'kind': 'ols'}),
                                DESIGN_DEFAULTS, 'design')
        if 'akm_loo' in methods and not (
                design['kind'] == 'mismeasured_iv'
                and design['instrument'] == 'leave_one_out'):
            raise DgpError('akm_loo needs the mismeasured_iv design with '
                           'the leave_one_out instrument')
        workers = merged.get('workers')
        return cls(
            M=n_replications,
            seed=seed,
            level=level,
            shares=shares,
            shifter_dgp=ShifterDgp.from_dict(
                dict(merged.get('shifter_dgp', {'kind': 'iid_normal'}))),
            outcome_dgp=outcome,
            design=design,
            methods=methods,
            null_value=null_value,
            controls_spec=merged['controls_spec'],
            workers=None if workers is None else int(workers),
        )

    def to_dict(self):
        """Canonical configuration; the worker count is left out."""
        return to_jsonable({
            'M': self.M,
            'seed': self.seed,
            'level': self.level,
            'shares': self.shares,
            'shifter_dgp': self.shifter_dgp.to_dict(),
            'outcome_dgp': self.outcome_dgp,
            'design': self.design,
            'methods': list(self.methods),
            'null_value': self.null_value,
            'controls_spec': self.controls_spec,
        })

    @property
    def config_hash(self):
        return config_hash(self.to_dict())


def load_config(path, seed=None):
    """Read a placebo configuration from a JSON file.

    ``seed`` overrides the configured seed.
    """
    path = Path(path)
    try:
        with open(path, encoding='utf-8') as handle:
            record = json.load(handle)
    except json.JSONDecodeError as error:
        raise DataError(f'Cannot parse {path}: {error}') from None
    if seed is not None and isinstance(record, dict):
        record['seed'] = seed
    return PlaceboConfig.from_dict(record)


def _resolve(path, base_dir):
    path = Path(path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return path


def build_shares(spec, rng, base_dir=None):
    """Share matrix, region clusters and observed outcome for a run."""
    region_cluster = None
    observed = None
    if spec['kind'] == 'synthetic':
        if spec['region_cluster_size']:
            region_cluster = synth_region_clusters(
                spec['n_regions'], spec['region_cluster_size'])
        shares = synth_shares(spec['n_regions'], spec['n_sectors'],
                              spec['concentration'], rng,
                              tuple(spec['scale_range']),
                              spec['require_full_rank'], region_cluster,
                              spec['cluster_profile_weight'])
    else:
        if not spec['path']:
            raise DgpError('CSV shares need a "path"')
        frame = read_shares_csv(_resolve(spec['path'], base_dir))
        if spec['regions']:
            regions_frame = read_regions_csv(
                _resolve(spec['regions'], base_dir))
            regions = list(regions_frame['region'])
            observed = regions_frame['y'].to_numpy(dtype=float)
            if 'cluster' in regions_frame.columns:
                region_cluster = tuple(regions_frame['cluster'])
        else:
            regions = list(pd.unique(frame['region']))
        sectors = list(pd.unique(frame['sector']))
        shares = SharesMatrix(regions, sectors,
                              long_to_matrix(frame, regions, sectors))
    if spec['residual_sector']:
        shares = shares.with_residual_sector()
    if spec['sector_cluster_size']:
        shares = shares.with_sector_cluster(synth_sector_clusters(
            shares.n_sectors, spec['sector_cluster_size']))
    return shares, region_cluster, observed


def build_controls(shares, controls_spec):
    """Control matrix and names for a ``controls_spec``."""
    n = shares.n_regions
    if controls_spec == 'none':
        return np.zeros((n, 0)), ()
    if controls_spec == 'intercept':
        return np.ones((n, 1)), ('intercept',)
    residual = 1.0 - shares.row_sums
    if np.ptp(residual) <= 1e-12:
        logger.info('Residual share is constant; using the intercept only')
        return np.ones((n, 1)), ('intercept',)
    return np.column_stack([np.ones(n), residual]), ('intercept',
                                                     'residual_share')


def build_outcome_dgp(spec, shares, region_cluster, observed, rng):
    base_spec = spec['base']
    if base_spec['kind'] == 'zeros':
        base = np.zeros(shares.n_regions)
    elif base_spec['kind'] == 'normal':
        base = (math.sqrt(_nonnegative(base_spec['variance'],
                                       'Base variance'))
                * rng.standard_normal(shares.n_regions))
    else:
        if observed is None:
            raise DgpError('An observed base outcome needs a regions file')
        base = observed
    addons = []
    for addon in spec['addons']:
        variance = _nonnegative(addon['variance'], 'Addon variance')
        if addon['kind'] == 'region_cluster_shock':
            if region_cluster is None:
                raise DgpError('Region cluster shocks need region clusters')
            addons.append(RegionClusterShock(variance, region_cluster))
        elif addon['kind'] == 'residual_sector_shock':
            addons.append(ResidualSectorShock(variance))
        elif addon['kind'] == 'alt_share_shiftshare':
            alt = alternative_shares(shares, addon['sigma_u2'],
                                     addon['sigma_v'], rng)
            addons.append(AltShareShiftShare(variance, alt))
        elif addon['kind'] == 'region_noise':
            addons.append(RegionNoise(variance))
        else:
            addons.append(SameShareShiftShare(variance, addon['rho'],
                                              shares.sector_cluster))
    effect_spec = dict(spec['effect'])
    kind = effect_spec.pop('kind')
    effect = {
        'null': NullEffect,
        'homogeneous': HomogeneousEffect,
        'heterogeneous_linear': HeterogeneousLinearEffect,
        'nonlinear': NonlinearEffect,
    }[kind](**effect_spec)
    return OutcomeDgp(base, tuple(addons), effect)


def build_placebo(config, rng, base_dir=None):
    """Placebo design object for a configuration."""
    shares, region_cluster, observed = build_shares(config.shares, rng,
                                                    base_dir)
    z, z_names = build_controls(shares, config.controls_spec)
    if 'cluster' in config.methods and region_cluster is None:
        raise DgpError('The cluster method needs region clusters '
                       '(region_cluster_size or a regions file)')
    design = Design(np.zeros(shares.n_regions), z=z,
                    region_cluster=region_cluster, z_names=z_names)
    outcome = build_outcome_dgp(config.outcome_dgp, shares, region_cluster,
                                observed, rng)
    params = {k: v for k, v in config.design.items() if k != 'kind'}
    cls = {
        'ols': ShiftSharePlacebo,
        'mismeasured_iv': MismeasuredShifterPlacebo,
        'confounded': ConfoundedPlacebo,
    }[config.design['kind']]
    return cls(shares, design, config.shifter_dgp, outcome, **params)


# ---- Report

@dataclass(frozen=True)
class MethodSummary:
    method: str
    rejection_rate: float
    rejection_se: float
    median_effective_se: float
    median_se: float
    unbounded_share: float

    def to_dict(self):
        return {
            'method': self.method,
            'rejection_rate': self.rejection_rate,
            'rejection_se': self.rejection_se,
            'median_effective_se': self.median_effective_se,
            'median_se': self.median_se,
            'unbounded_share': self.unbounded_share,
        }


@dataclass(frozen=True)
class PlaceboReport:
    methods: tuple
    estimate_mean: float
    estimate_sd: float
    estimate_median: float
    n_replications: int
    seed: int
    level: float
    null_value: float
    config_hash: str
    extra: dict = field(default_factory=dict)

    def summary(self, method):
        for summary in self.methods:
            if summary.method == method:
                return summary
        raise KeyError(method)

    def rejection_rate(self, method):
        return self.summary(method).rejection_rate

    def median_effective_se(self, method):
        return self.summary(method).median_effective_se

    def to_dict(self):
        return {
            'config_hash': self.config_hash,
            'seed': self.seed,
            'M': self.n_replications,
            'level': self.level,
            'null_value': self.null_value,
            'estimate': {'mean': self.estimate_mean, 'sd': self.estimate_sd,
                         'median': self.estimate_median},
            'methods': [summary.to_dict() for summary in self.methods],
            **self.extra,
        }

    def to_frame(self):
        """One row per method."""
        frame = pd.DataFrame([summary.to_dict() for summary in self.methods])
        frame['estimate_mean'] = self.estimate_mean
        frame['estimate_sd'] = self.estimate_sd
        frame['M'] = self.n_replications
        frame['seed'] = self.seed
        frame['config_hash'] = self.config_hash
        return frame

    def to_csv(self, path=None):
        return self.to_frame().to_csv(path, index=False, float_format='%.6g')


def _median(values):
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return math.nan
    return float(np.median(values))


def _run_replication(placebo, index, seed, methods, level, null_value,
                     factorization):
    try:
        replication = placebo.replicate(replication_rng(seed, index))
        results = infer(replication.fit, placebo.shares, methods, level,
                        loo=replication.loo, check_shares=False,
                        factorization=factorization, warn=False)
    except (ShiftShareError, ValueError, ArithmeticError,
            np.linalg.LinAlgError) as error:
        raise ReplicationError(index=index, error=error) from error
    return (replication.fit.estimate,
            [(not bool(r.confset.contains(null_value)), r.effective_se,
              math.nan if r.se is None else r.se) for r in results])


def run_placebo(config, workers=None, base_dir=None):
    """Run a placebo study and summarise it.

    ``config`` is a ``PlaceboConfig`` or its JSON-like dictionary.
    ``workers`` overrides the configured worker count; the report does not
    depend on it.
    """
    if not isinstance(config, PlaceboConfig):
        config = PlaceboConfig.from_dict(config)
    if workers is None:
        workers = config.workers or DEFAULT_WORKERS
    digest = config.config_hash
    logger.info('Placebo run %s: M=%d seed=%d workers=%d', digest, config.M,
                config.seed, workers)
    rng = setup_rng(config.seed)
    placebo = build_placebo(config, rng, base_dir)
    shares = placebo.shares
    if not shares_controlled(shares, placebo.design):
        logger.warning('Shares do not sum to one and their sum is not '
                       'controlled for')
    if 'cluster' in config.methods:
        n_clusters = cluster_codes(placebo.design.region_cluster,
                                   shares.n_regions, 'regions')[1]
        if n_clusters < 10:
            logger.warning('Only %d region clusters', n_clusters)
    factorization = None
    if any(m.startswith('akm') for m in config.methods):
        factorization = factorize_shares(shares)

    true_estimand = placebo.true_estimand(rng)
    null_value = (true_estimand if config.null_value == 'estimand'
                  else config.null_value)

    batch = max(1, math.ceil(config.M / 10))
    outcomes = []
    with Parallel(n_jobs=workers, prefer='threads') as parallel:
        for start in range(0, config.M, batch):
            stop = min(start + batch, config.M)
            outcomes.extend(parallel(
                delayed(_run_replication)(placebo, index, config.seed,
                                          config.methods, config.level,
                                          null_value, factorization)
                for index in range(start, stop)))
            logger.debug('Placebo %s: %d/%d replications', digest, stop,
                         config.M)

    estimates = np.array([estimate for estimate, _ in outcomes])
    summaries = []
    for k, method in enumerate(config.methods):
        rejects = np.array([records[k][0] for _, records in outcomes],
                           dtype=float)
        effective = np.array([records[k][1] for _, records in outcomes])
        ses = np.array([records[k][2] for _, records in outcomes])
        rate = float(rejects.mean())
        summaries.append(MethodSummary(
            method=method,
            rejection_rate=rate,
            rejection_se=math.sqrt(rate * (1 - rate) / config.M),
            median_effective_se=_median(effective),
            median_se=_median(ses),
            unbounded_share=float(np.mean(np.isinf(effective))),
        ))
    extra = {'true_estimand': true_estimand,
             'estimand': placebo.estimand_name}
    for addon in placebo.outcome_dgp.addons:
        if isinstance(addon, AltShareShiftShare):
            extra['alt_share_correlation'] = float(np.corrcoef(
                shares.w.ravel(), addon.alt_shares.w.ravel())[0, 1])
    report = PlaceboReport(
        methods=tuple(summaries),
        estimate_mean=float(estimates.mean()),
        estimate_sd=float(estimates.std(ddof=1)) if config.M > 1 else 0.0,
        estimate_median=float(np.median(estimates)),
        n_replications=config.M,
        seed=config.seed,
        level=config.level,
        null_value=float(null_value),
        config_hash=digest,
        extra=extra,
    )
    logger.info('Placebo run %s done: %s', digest, ', '.join(
        f'{s.method}={s.rejection_rate:.3f}' for s in summaries))
    return report

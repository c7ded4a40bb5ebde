# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""
Point estimation of shift-share regressions.

Controls are partialled out (Frisch-Waugh-Lovell) with a pivoted QR
factorization, so the coefficient on the shift-share regressor is
beta = X''Y / X''X'' where X'' is the regressor net of controls. With
observation weights every inner product is weighted.
"""

from dataclasses import dataclass
import logging

import numpy as np

from . import (
    DataError,
    DegenerateRegressor,
    DimensionError,
    LeaveOneOutUndefined,
    WeakInstrumentDegenerate,
)
from ._utils import lstsq_full_rank

logger = logging.getLogger(__name__)

# Relative size of X'' below which the regressor is treated as collinear
DEGENERATE_RTOL = 1e-10

# Relative size of X''Y2 below which the instrument is irrelevant
WEAK_RTOL = 1e-12

# Relative size of a leave-one-out aggregation weight treated as zero
LOO_RTOL = 1e-12


def build_shift_share(shares, shifters):
    """Regional regressor X_i = sum_s w_is * shifter_s."""
    values = getattr(shifters, 'values', shifters)
    values = np.asarray(values, dtype=float)
    if values.shape != (shares.n_sectors,):
        raise DimensionError(
            f'{values.shape[0] if values.ndim else 0} shifters for '
            f'{shares.n_sectors} sectors')
    sectors = getattr(shifters, 'sectors', None)
    if sectors is not None and tuple(sectors) != shares.sectors:
        raise DimensionError('Shifter sectors are not aligned with shares')
    return shares.w @ values


def partial_out(z, v, obs_weight=None, z_names=None):
    """Residual of ``v`` after a (weighted) least-squares fit on ``z``.

    ``v`` may be a vector or an N x m matrix. Raises ``RankError`` naming
    the first linearly dependent control.
    """
    z = np.asarray(z, dtype=float)
    v = np.array(v, dtype=float)
    if z.ndim == 1:
        z = z[:, np.newaxis]
    if z.shape[0] != v.shape[0]:
        raise DimensionError(
            f'Controls have {z.shape[0]} rows, target has {v.shape[0]}')
    if z.shape[1] == 0:
        return v
    root = np.ones(z.shape[0]) if obs_weight is None else np.sqrt(obs_weight)
    scaled_v = root * v if v.ndim == 1 else root[:, np.newaxis] * v
    coef = lstsq_full_rank(root[:, np.newaxis] * z, scaled_v, names=z_names)
    return v - z @ coef


def _control_coefficients(design, target):
    root = np.sqrt(design.weights)
    return lstsq_full_rank(root[:, np.newaxis] * design.z, root * target,
                           names=design.z_names)


def _is_degenerate(x_dotdot, x, weight):
    norm_dd = np.sqrt(np.sum(weight * x_dotdot ** 2))
    norm = np.sqrt(np.sum(weight * x ** 2))
    return norm_dd == 0 or norm_dd <= DEGENERATE_RTOL * norm


@dataclass(frozen=True)
class FitResult:
    """Outcome of an OLS or IV shift-share fit.

    In IV mode ``beta_hat`` is the first-stage coefficient and
    ``alpha_hat`` the structural coefficient. ``y_dotdot`` and
    ``y2_dotdot`` hold the outcome and treatment net of controls; the
    null-imposed residuals are ``y_dotdot - theta * v`` with ``v`` either
    ``x_dotdot`` (OLS) or ``y2_dotdot`` (IV).
    """

    mode: str
    beta_hat: float
    delta_hat: np.ndarray
    x: np.ndarray
    x_dotdot: np.ndarray
    residuals: np.ndarray
    y_dotdot: np.ndarray
    design: object
    alpha_hat: float = None
    y2_dotdot: np.ndarray = None
    reduced_form: float = None

    @property
    def estimate(self):
        return self.alpha_hat if self.mode == 'iv' else self.beta_hat

    @property
    def first_stage(self):
        return self.beta_hat if self.mode == 'iv' else None

    @property
    def weights(self):
        return self.design.weights

    @property
    def null_direction(self):
        return self.y2_dotdot if self.mode == 'iv' else self.x_dotdot

    @property
    def denominator(self):
        """X''Y2 in IV mode, X''X'' in OLS mode (weighted)."""
        return float(np.sum(self.weights * self.x_dotdot * self.null_direction))

    @property
    def n_regions(self):
        return self.x.shape[0]

    @property
    def residual_norm(self):
        return float(np.sqrt(np.sum(self.weights * self.residuals ** 2)))

    def to_dict(self):
        return {
            'mode': self.mode,
            'beta_hat': self.beta_hat,
            'alpha_hat': self.alpha_hat,
            'first_stage': self.first_stage,
            'reduced_form': self.reduced_form,
            'residual_norm': self.residual_norm,
            'n_regions': self.n_regions,
            'n_controls': self.design.n_controls,
        }


def fit_ols(design, x):
    """OLS of ``design.y1`` on a given regressor ``x`` and the controls."""
    x = np.asarray(x, dtype=float)
    if x.shape != (design.n_regions,):
        raise DimensionError(
            f'Regressor has shape {x.shape}, expected ({design.n_regions},)')
    weight = design.weights
    z_fit = partial_out(design.z, np.column_stack([x, design.y1]),
                        design.obs_weight, design.z_names)
    x_dotdot, y_dotdot = z_fit[:, 0], z_fit[:, 1]
    if _is_degenerate(x_dotdot, x, weight):
        raise DegenerateRegressor()
    beta = float(np.sum(weight * x_dotdot * design.y1)
                 / np.sum(weight * x_dotdot ** 2))
    delta = _control_coefficients(design, design.y1 - beta * x)
    residuals = design.y1 - beta * x - design.z @ delta
    logger.debug('OLS fit N=%d K=%d beta=%.6g', design.n_regions,
                 design.n_controls, beta)
    return FitResult(
        mode='ols',
        beta_hat=beta,
        delta_hat=delta,
        x=x,
        x_dotdot=x_dotdot,
        residuals=residuals,
        y_dotdot=y_dotdot,
        design=design,
    )


def fit_iv(design, x):
    """IV of ``design.y1`` on ``design.y2`` instrumented by ``x``.

    Raises ``WeakInstrumentDegenerate`` carrying the partial fit when the
    instrument is orthogonal to the treatment.
    """
    if design.y2 is None:
        raise DataError('An IV fit requires a treatment variable y2')
    x = np.asarray(x, dtype=float)
    if x.shape != (design.n_regions,):
        raise DimensionError(
            f'Instrument has shape {x.shape}, expected ({design.n_regions},)')
    weight = design.weights
    z_fit = partial_out(design.z, np.column_stack([x, design.y1, design.y2]),
                        design.obs_weight, design.z_names)
    x_dotdot, y_dotdot, y2_dotdot = z_fit[:, 0], z_fit[:, 1], z_fit[:, 2]
    if _is_degenerate(x_dotdot, x, weight):
        raise DegenerateRegressor()
    xx = np.sum(weight * x_dotdot ** 2)
    xy1 = np.sum(weight * x_dotdot * design.y1)
    xy2 = np.sum(weight * x_dotdot * design.y2)
    first_stage = float(xy2 / xx)
    reduced_form = float(xy1 / xx)
    scale = np.sqrt(xx * np.sum(weight * design.y2 ** 2))
    if xy2 == 0 or abs(xy2) <= WEAK_RTOL * scale:
        partial = FitResult(
            mode='iv',
            beta_hat=first_stage,
            delta_hat=np.full(design.n_controls, np.nan),
            x=x,
            x_dotdot=x_dotdot,
            residuals=np.full(design.n_regions, np.nan),
            y_dotdot=y_dotdot,
            design=design,
            alpha_hat=np.nan,
            y2_dotdot=y2_dotdot,
            reduced_form=reduced_form,
        )
        raise WeakInstrumentDegenerate(fit=partial)
    alpha = float(xy1 / xy2)
    delta = _control_coefficients(design, design.y1 - alpha * design.y2)
    residuals = design.y1 - alpha * design.y2 - design.z @ delta
    logger.debug('IV fit N=%d K=%d alpha=%.6g first stage=%.6g',
                 design.n_regions, design.n_controls, alpha, first_stage)
    return FitResult(
        mode='iv',
        beta_hat=first_stage,
        delta_hat=delta,
        x=x,
        x_dotdot=x_dotdot,
        residuals=residuals,
        y_dotdot=y_dotdot,
        design=design,
        alpha_hat=alpha,
        y2_dotdot=y2_dotdot,
        reduced_form=reduced_form,
    )


def ols_fit(design, shares, shifters):
    """OLS of the outcome on the shift-share regressor and controls."""
    return fit_ols(design, build_shift_share(shares, shifters))


def iv_fit(design, shares, shifters):
    """IV of the outcome on the treatment with a shift-share instrument."""
    return fit_iv(design, build_shift_share(shares, shifters))


@dataclass(frozen=True)
class LooInstrument:
    """Estimated shift-share instrument and its leave-one-out version.

    ``shifter_estimates_loo[i, s]`` is the sector-s shifter estimated
    without region i (zero where region i has no exposure to s) and
    ``n_loo[i, s]`` the matching aggregation weight.
    """

    x_hat: np.ndarray
    x_hat_loo: np.ndarray
    shifter_estimates: np.ndarray
    shifter_estimates_loo: np.ndarray
    psi_hat: np.ndarray
    bias_proxy: float
    agg_weights: np.ndarray
    n_loo: np.ndarray


def build_loo_instrument(shares, agg_weights, local_shocks):
    """Estimate shifters from region-sector shocks and build instruments.

    Shifters are weighted means sum_j aw_js X_js / sum_j aw_js. The
    residuals ``psi_hat`` use the full-sample shifter estimates.
    """
    w = shares.w
    agg = np.asarray(agg_weights, dtype=float)
    local = np.asarray(local_shocks, dtype=float)
    for name, array in [('Aggregation weights', agg),
                        ('Local shocks', local)]:
        if array.shape != w.shape:
            raise DimensionError(
                f'{name} have shape {array.shape}, expected {w.shape}')
        if not np.all(np.isfinite(array)):
            raise DataError(f'{name} contain NaN or infinite values')
    if np.any(agg < 0):
        raise DataError('Aggregation weights must be nonnegative')

    n_check = agg.sum(axis=0)
    totals = (agg * local).sum(axis=0)
    n_loo = n_check[np.newaxis, :] - agg
    needed = w > 0
    undefined = needed & (n_loo <= LOO_RTOL * n_check[np.newaxis, :])
    if np.any(undefined):
        i, s = np.argwhere(undefined)[0]
        raise LeaveOneOutUndefined(sector=shares.sectors[s],
                                   region=shares.regions[i])

    supported = n_check > 0
    estimates = np.zeros(shares.n_sectors)
    estimates[supported] = totals[supported] / n_check[supported]
    loo = np.zeros(w.shape)
    loo[needed] = ((totals[np.newaxis, :] - agg * local)[needed]
                   / n_loo[needed])
    bias_terms = np.zeros(w.shape)
    bias_terms[:, supported] = (w * agg)[:, supported] / n_check[supported]
    loo_instrument = LooInstrument(
        x_hat=w @ estimates,
        x_hat_loo=np.sum(w * loo, axis=1),
        shifter_estimates=estimates,
        shifter_estimates_loo=loo,
        psi_hat=local - estimates[np.newaxis, :],
        bias_proxy=float(bias_terms.sum() / shares.n_regions),
        agg_weights=agg,
        n_loo=np.where(needed, n_loo, 0.0),
    )
    logger.debug('Leave-one-out instrument: bias proxy %.4g',
                 loo_instrument.bias_proxy)
    return loo_instrument


def iv_fit_estimated(design, shares, loo, leave_one_out=True):
    """IV fit using the estimated (or leave-one-out) shift-share instrument."""
    if loo.x_hat.shape != (shares.n_regions,):
        raise DimensionError('Instrument and shares are not aligned')
    return fit_iv(design, loo.x_hat_loo if leave_one_out else loo.x_hat)


def estimand_weights(shares, shifter_variance):
    """Weights pi_is = w_is^2 var_s / sum w^2 var of the estimand.

    The OLS estimand is the pi-weighted average of region-sector effects.
    """
    variance = np.broadcast_to(np.asarray(shifter_variance, dtype=float),
                               (shares.n_sectors,))
    if np.any(variance < 0):
        raise DataError('Shifter variances must be nonnegative')
    weights = shares.w ** 2 * variance[np.newaxis, :]
    total = weights.sum()
    if total == 0:
        raise DataError('Estimand weights are undefined for zero shares')
    return weights / total

#
# Copyright © 2024- The shiftshare Contributors
#
# Licensed under the terms of the MIT License
# (see LICENSE.txt for details)

"""
**shiftshare** estimates shift-share (Bartik) regressions and builds
confidence intervals that remain valid when regression residuals are
correlated across regions with similar sectoral composition.

Estimation
==========

A regional regressor is built as X_i = sum_s w_is * shifter_s from an
N x S share matrix and an S-vector of sector-level shifters::

    >>> from shiftshare import SharesMatrix, Shifters, Design, ols_fit
    >>> fit = ols_fit(design, shares, shifters)
    >>> fit.beta_hat

Inference
=========

Besides Eicker-Huber-White and cluster-robust standard errors, the
package implements the shift-share standard error (``akm``), the
null-imposed confidence set (``akm0``) and the leave-one-out IV variance
correction (``akm_loo``)::

    >>> from shiftshare import infer
    >>> for result in infer(fit, shares, methods=['robust', 'akm', 'akm0']):
    ...     print(result.method, result.confset)

Observation weights
===================

When a ``Design`` carries observation weights, every inner product is
weighted, the sector terms are R_s = sum_i w_is * weight_i * resid_i and the
sector projection is (W' Omega W)^-1 W' Omega Xdd. Unit weights recover the
unweighted formulas exactly.

Configuration
=============

``SHIFTSHARE_LOG`` sets the log verbosity of the command line tool
(``debug``, ``info``, ``warning`` or ``error``) and ``SHIFTSHARE_WORKERS``
the default number of placebo workers.
"""

from packaging.version import parse
import os
import warnings

# Version of shiftshare
__version__ = '0.1.0.dev0'


def get_env(key, default=None):
    """Read a configuration value from the environment."""
    return os.environ.get(key, default)


class ShiftShareError(RuntimeError):
    """Generic error superclass for shiftshare."""


class ShiftShareWarning(RuntimeWarning):
    """Warning class for shiftshare."""


class IncompleteSharesWarning(ShiftShareWarning):
    """Shares do not sum to one and their sum is not controlled for."""


class SmallClusterWarning(ShiftShareWarning):
    """A cluster-robust variance is computed from very few clusters."""


class ShiftShareValueError(ValueError):
    """Error raised if an invalid configuration value is specified."""


class DataError(ShiftShareError, ValueError):
    """Raised when input data are malformed or violate share constraints."""


class DimensionError(DataError):
    """Raised when inputs are not aligned on regions, sectors or controls."""


class RankError(ShiftShareError, ValueError):
    """Raised when a design matrix is rank deficient."""
    _msg = 'Column {column!r} is linearly dependent on the preceding columns.'

    def __init__(self, *, column, msg=None, **msg_kwargs):
        self.column = column
        msg = msg or self._msg
        super().__init__(msg.format(column=column, **msg_kwargs))


class DegenerateRegressor(ShiftShareError):
    """Raised when the partialled-out regressor has no variation."""
    _msg = 'The shift-share regressor is collinear with the controls.'

    def __init__(self, msg=None):
        super().__init__(msg or self._msg)


class WeakInstrumentDegenerate(DegenerateRegressor):
    """Raised when the instrument is orthogonal to the treatment.

    The point estimate is undefined, but ``fit`` holds everything the
    null-imposed confidence set needs.
    """
    _msg = ('The shift-share instrument is orthogonal to the treatment; '
            'the IV estimate is undefined.')

    def __init__(self, *, fit=None, msg=None):
        self.fit = fit
        super().__init__(msg)


class AkmInfeasible(ShiftShareError):
    """Raised when shifters cannot be backed out of the shares."""
    _msg = 'Shift-share standard errors are infeasible: {reason}.'

    def __init__(self, *, reason, msg=None):
        self.reason = reason
        msg = msg or self._msg
        super().__init__(msg.format(reason=reason))


class ClusterError(ShiftShareError):
    """Raised when a clustered variance has fewer than two clusters."""


class LeaveOneOutUndefined(ShiftShareError):
    """Raised when a leave-one-out shifter estimate has no support."""
    _msg = ('Leave-one-out shifter for sector {sector!r} excluding region '
            '{region!r} has zero aggregation weight.')

    def __init__(self, *, sector, region, msg=None):
        self.sector = sector
        self.region = region
        msg = msg or self._msg
        super().__init__(msg.format(sector=sector, region=region))


class DgpError(ShiftShareError):
    """Raised when a simulation design is invalid."""


class ReplicationError(ShiftShareError):
    """Raised when a placebo replication fails."""
    _msg = 'Placebo replication {index} failed: {error}'

    def __init__(self, *, index, error, msg=None):
        self.index = index
        msg = msg or self._msg
        super().__init__(msg.format(index=index, error=error))


# Logging environment variable name
SHIFTSHARE_LOG = 'SHIFTSHARE_LOG'

# Placebo worker count environment variable name
SHIFTSHARE_WORKERS = 'SHIFTSHARE_WORKERS'

LOG_LEVELS = {'debug': 10, 'info': 20, 'warning': 30, 'error': 40}

LOG_LEVEL_ = get_env(SHIFTSHARE_LOG, 'warning')
LOG_LEVEL = LOG_LEVEL_.lower()
if LOG_LEVEL not in LOG_LEVELS:
    raise ShiftShareValueError(
        f'Specified {SHIFTSHARE_LOG}={LOG_LEVEL_} environment variable is not '
        f'in valid options: {", ".join(LOG_LEVELS)}'
    )

WORKERS_ = get_env(SHIFTSHARE_WORKERS, '1')
try:
    DEFAULT_WORKERS = int(WORKERS_)
except ValueError:
    raise ShiftShareValueError(
        f'Specified {SHIFTSHARE_WORKERS}={WORKERS_} environment variable is '
        'not an integer'
    ) from None

# Minimum supported versions of the numerical stack
NUMPY_VERSION_MIN = '1.24.0'
SCIPY_VERSION_MIN = '1.9.0'
PANDAS_VERSION_MIN = '1.5.0'

import numpy
import scipy
import pandas

NUMPY_VERSION = numpy.__version__
SCIPY_VERSION = scipy.__version__
PANDAS_VERSION = pandas.__version__


def _warn_old_minor_version(name, old_version, min_version):
    """Warn if using a dependency version no longer supported."""
    warning_message = (
        f'{name} version {old_version} is not supported by shiftshare. '
        'To ensure reproducible results, '
        f'please upgrade to {name} {min_version} or later.'
    )
    warnings.warn(warning_message, ShiftShareWarning)


if parse(NUMPY_VERSION) < parse(NUMPY_VERSION_MIN):
    _warn_old_minor_version('numpy', NUMPY_VERSION, NUMPY_VERSION_MIN)
if parse(SCIPY_VERSION) < parse(SCIPY_VERSION_MIN):
    _warn_old_minor_version('scipy', SCIPY_VERSION, SCIPY_VERSION_MIN)
if parse(PANDAS_VERSION) < parse(PANDAS_VERSION_MIN):
    _warn_old_minor_version('pandas', PANDAS_VERSION, PANDAS_VERSION_MIN)


from .data import (  # noqa: E402
    Dataset,
    Design,
    DiagnosticsReport,
    PanelIndex,
    PanelSpec,
    SharesMatrix,
    Shifters,
    ValidationReport,
    diagnostics,
    load_dataset,
    panel_expand,
    validate_dataset,
)
from .estimate import (  # noqa: E402
    FitResult,
    LooInstrument,
    build_loo_instrument,
    build_shift_share,
    estimand_weights,
    fit_iv,
    fit_ols,
    iv_fit,
    iv_fit_estimated,
    ols_fit,
    partial_out,
)
from .infer import (  # noqa: E402
    ConfidenceSet,
    InferenceResult,
    SectorProjection,
    ci_akm0,
    factorize_shares,
    infer,
    se_akm,
    se_akm_loo,
    se_conventional,
    sector_project,
)
from .placebo import (  # noqa: E402
    OutcomeDgp,
    PlaceboConfig,
    PlaceboReport,
    ShifterDgp,
    draw_shifters,
    estimand_nonlinear,
    load_config,
    make_outcome,
    run_placebo,
    synth_shares,
)

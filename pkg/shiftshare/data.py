# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""
Dataset model: exposure shares, regional design, sector shifters.

Every container is immutable after construction (arrays are flagged
read-only) so the same objects can be shared by parallel placebo workers.
Region and sector identifiers travel with the data; outputs never carry
bare positional indices.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
import pandas as pd
import scipy.linalg

from . import DataError, DimensionError
from ._utils import pivoted_qr

logger = logging.getLogger(__name__)

# Tolerance on share row sums above one
ROW_SUM_TOL = 1e-8


def _frozen_array(values, ndim, what):
    try:
        array = np.array(values, dtype=float)
    except (TypeError, ValueError) as error:
        raise DataError(f'{what} is not numeric: {error}') from None
    if array.ndim != ndim:
        raise DimensionError(
            f'{what} must be {ndim}-dimensional, got shape {array.shape}')
    array.setflags(write=False)
    return array


def _check_unique(labels, what):
    seen = set()
    for label in labels:
        if label in seen:
            raise DataError(f'Duplicate {what} identifier {label!r}')
        seen.add(label)


def _check_finite(array, what):
    if array is not None and not np.all(np.isfinite(array)):
        raise DataError(f'{what} contains NaN or infinite values')


@dataclass(frozen=True)
class SharesMatrix:
    """N x S matrix of exposure shares with region and sector identifiers.

    ``sector_cluster`` is either ``None`` or a cluster label per sector,
    given as a sequence aligned with ``sectors`` or a mapping
    sector -> cluster.
    """

    regions: tuple
    sectors: tuple
    w: np.ndarray
    sector_cluster: tuple = None

    def __post_init__(self):
        regions = tuple(self.regions)
        sectors = tuple(self.sectors)
        w = _frozen_array(self.w, 2, 'Share matrix')
        if w.shape != (len(regions), len(sectors)):
            raise DimensionError(
                f'Share matrix has shape {w.shape} but there are '
                f'{len(regions)} regions and {len(sectors)} sectors')
        _check_unique(regions, 'region')
        _check_unique(sectors, 'sector')
        cluster = self.sector_cluster
        if cluster is not None:
            if isinstance(cluster, dict):
                missing = [s for s in sectors if s not in cluster]
                if missing:
                    raise DataError(
                        f'No cluster given for sector {missing[0]!r}')
                cluster = tuple(cluster[s] for s in sectors)
            else:
                cluster = tuple(cluster)
            if len(cluster) != len(sectors):
                raise DimensionError(
                    f'Expected {len(sectors)} sector cluster labels, '
                    f'got {len(cluster)}')
        object.__setattr__(self, 'regions', regions)
        object.__setattr__(self, 'sectors', sectors)
        object.__setattr__(self, 'w', w)
        object.__setattr__(self, 'sector_cluster', cluster)

    @property
    def n_regions(self):
        return self.w.shape[0]

    @property
    def n_sectors(self):
        return self.w.shape[1]

    @property
    def n_s(self):
        """Sector sizes n_s = sum_i w_is."""
        return self.w.sum(axis=0)

    @property
    def row_sums(self):
        return self.w.sum(axis=1)

    def with_sector_cluster(self, sector_cluster):
        return SharesMatrix(self.regions, self.sectors, self.w, sector_cluster)

    def with_residual_sector(self, label='residual'):
        """Append a sector holding 1 - sum_s w_is for every region."""
        if label in self.sectors:
            raise DataError(f'Sector {label!r} already exists')
        residual = np.clip(1.0 - self.row_sums, 0.0, None)
        w = np.column_stack([self.w, residual])
        cluster = None
        if self.sector_cluster is not None:
            cluster = self.sector_cluster + (label,)
        return SharesMatrix(self.regions, self.sectors + (label,), w, cluster)

    def to_long(self):
        """Long DataFrame (region, sector, share) of the non-zero entries."""
        rows, cols = np.nonzero(self.w)
        return pd.DataFrame({
            'region': [self.regions[i] for i in rows],
            'sector': [self.sectors[s] for s in cols],
            'share': self.w[rows, cols],
        })


@dataclass(frozen=True)
class Shifters:
    """Sector-level shifters aligned with a ``SharesMatrix`` sector order."""

    values: np.ndarray
    sectors: tuple = None

    def __post_init__(self):
        values = _frozen_array(self.values, 1, 'Shifters')
        _check_finite(values, 'Shifters')
        sectors = self.sectors
        if sectors is not None:
            sectors = tuple(sectors)
            if len(sectors) != values.shape[0]:
                raise DimensionError(
                    f'{values.shape[0]} shifters for {len(sectors)} sectors')
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'sectors', sectors)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Design:
    """Regional outcome, treatment, controls and weights.

    ``y2`` is present in IV mode only. ``z`` defaults to an empty N x 0
    control matrix. ``region_cluster`` holds one cluster label per region
    for the conventional cluster-robust variance.
    """

    y1: np.ndarray
    y2: np.ndarray = None
    z: np.ndarray = None
    obs_weight: np.ndarray = None
    region_cluster: tuple = None
    z_names: tuple = None

    def __post_init__(self):
        y1 = _frozen_array(self.y1, 1, 'Outcome')
        n = y1.shape[0]
        y2 = None
        if self.y2 is not None:
            y2 = _frozen_array(self.y2, 1, 'Treatment')
            if y2.shape[0] != n:
                raise DimensionError(
                    f'Treatment has {y2.shape[0]} rows, outcome has {n}')
        if self.z is None:
            z = _frozen_array(np.zeros((n, 0)), 2, 'Controls')
        else:
            z = np.asarray(self.z, dtype=float)
            if z.ndim == 1:
                z = z[:, np.newaxis]
            z = _frozen_array(z, 2, 'Controls')
        if z.shape[0] != n:
            raise DimensionError(
                f'Controls have {z.shape[0]} rows, outcome has {n}')
        weight = None
        if self.obs_weight is not None:
            weight = _frozen_array(self.obs_weight, 1, 'Observation weights')
            if weight.shape[0] != n:
                raise DimensionError(
                    f'{weight.shape[0]} observation weights for {n} regions')
        cluster = None
        if self.region_cluster is not None:
            cluster = tuple(self.region_cluster)
            if len(cluster) != n:
                raise DimensionError(
                    f'{len(cluster)} region cluster labels for {n} regions')
        names = self.z_names
        if names is None:
            names = tuple(f'z{k + 1}' for k in range(z.shape[1]))
        else:
            names = tuple(names)
            if len(names) != z.shape[1]:
                raise DimensionError(
                    f'{len(names)} control names for {z.shape[1]} controls')
        for name, value in [('y1', y1), ('y2', y2), ('z', z),
                            ('obs_weight', weight), ('region_cluster', cluster),
                            ('z_names', names)]:
            object.__setattr__(self, name, value)

    @property
    def n_regions(self):
        return self.y1.shape[0]

    @property
    def n_controls(self):
        return self.z.shape[1]

    @property
    def mode(self):
        return 'ols' if self.y2 is None else 'iv'

    @property
    def weights(self):
        """Observation weights, ones when the design is unweighted."""
        if self.obs_weight is None:
            return np.ones(self.n_regions)
        return self.obs_weight

    def with_outcome(self, y1, y2=None):
        return Design(y1, y2, self.z, self.obs_weight, self.region_cluster,
                      self.z_names)

    def with_controls(self, z, z_names=None):
        return Design(self.y1, self.y2, z, self.obs_weight,
                      self.region_cluster, z_names)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple
    akm_feasible: bool
    akm_reason: str
    rows_exceed_one: bool
    residual_share: np.ndarray
    incomplete_shares_uncontrolled: bool

    @property
    def clean(self):
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            extra = len(self.violations) - 1
            more = f' (and {extra} more)' if extra else ''
            raise DataError(f'{self.violations[0]}{more}')

    def to_dict(self):
        return {
            'clean': self.clean,
            'violations': list(self.violations),
            'akm_feasible': self.akm_feasible,
            'akm_reason': self.akm_reason,
            'rows_exceed_one': self.rows_exceed_one,
            'min_row_sum': float(1.0 - self.residual_share.max())
            if self.residual_share.size else None,
            'incomplete_shares_uncontrolled':
                self.incomplete_shares_uncontrolled,
        }


def shares_controlled(shares, design):
    """Whether sum_s w_is is constant or spanned by the design controls."""
    row_sums = shares.row_sums
    if np.all(np.abs(row_sums - 1.0) <= ROW_SUM_TOL):
        return True
    if design.n_controls == 0:
        return False
    root = np.sqrt(design.weights)
    target = root * row_sums
    coef = scipy.linalg.lstsq(root[:, np.newaxis] * design.z, target)[0]
    resid = target - (root[:, np.newaxis] * design.z) @ coef
    return np.linalg.norm(resid) <= ROW_SUM_TOL * max(
        np.linalg.norm(target), 1.0)


def akm_feasibility(shares, obs_weight=None):
    """Return ``(feasible, reason)`` for backing shifters out of the shares."""
    n, s = shares.w.shape
    if n < s:
        return False, 'N < S'
    w = shares.w
    if obs_weight is not None:
        w = np.sqrt(obs_weight)[:, np.newaxis] * w
    rank = pivoted_qr(w)[3]
    if rank < s:
        return False, 'W is rank deficient'
    return True, None


def validate_dataset(shares, design, shifters=None):
    """Check alignment and share constraints of a dataset.

    Misalignment and non-finite values raise immediately. Constraint
    violations (negative shares, row sums above one, invalid weights) are
    collected into the returned report.
    """
    n, s = shares.w.shape
    if design.n_regions != n:
        raise DimensionError(
            f'Design has {design.n_regions} regions, shares have {n}')
    if shifters is not None:
        if len(shifters) != s:
            raise DimensionError(
                f'{len(shifters)} shifters for {s} sectors')
        if shifters.sectors is not None and shifters.sectors != shares.sectors:
            raise DimensionError('Shifter sectors are not aligned with shares')
    _check_finite(shares.w, 'Share matrix')
    _check_finite(design.y1, 'Outcome')
    _check_finite(design.y2, 'Treatment')
    _check_finite(design.z, 'Controls')
    _check_finite(design.obs_weight, 'Observation weights')

    violations = []
    for i, k in zip(*np.nonzero(shares.w < 0)):
        violations.append(
            f'negative share at ({shares.regions[i]},{shares.sectors[k]})')
    row_sums = shares.row_sums
    exceed = row_sums > 1.0 + ROW_SUM_TOL
    for i in np.flatnonzero(exceed):
        violations.append(
            f'shares of region {shares.regions[i]} sum to '
            f'{row_sums[i]:.10g} > 1')
    weight = design.obs_weight
    if weight is not None:
        if np.any(weight < 0):
            violations.append('negative observation weight')
        elif not np.any(weight > 0):
            violations.append('all observation weights are zero')

    feasible, reason = akm_feasibility(
        shares, weight if not violations else None)
    report = ValidationReport(
        violations=tuple(violations),
        akm_feasible=feasible,
        akm_reason=reason,
        rows_exceed_one=bool(np.any(exceed)),
        residual_share=1.0 - row_sums,
        incomplete_shares_uncontrolled=not shares_controlled(shares, design),
    )
    logger.debug('Validated N=%d S=%d: %d violation(s), akm_feasible=%s',
                 n, s, len(violations), feasible)
    return report


@dataclass(frozen=True)
class PanelSpec:
    """Panel dataset before expansion to a cross-section.

    ``shares`` is either a mapping ``(j, k, t) -> w`` or a sequence of
    ``(j, k, t, w)`` records; missing entries are zero.
    """

    observations: tuple
    shifter_rows: tuple
    shares: tuple

    def __post_init__(self):
        shares = self.shares
        if isinstance(shares, dict):
            shares = tuple((j, k, t, w) for (j, k, t), w in shares.items())
        else:
            shares = tuple(tuple(record) for record in shares)
        object.__setattr__(self, 'observations',
                           tuple(tuple(row) for row in self.observations))
        object.__setattr__(self, 'shifter_rows',
                           tuple(tuple(row) for row in self.shifter_rows))
        object.__setattr__(self, 'shares', shares)


@dataclass(frozen=True)
class PanelIndex:
    """Maps expanded row and column positions back to (id, period) pairs."""

    regions: tuple
    sectors: tuple

    def region_of(self, i):
        return self.regions[i]

    def sector_of(self, s):
        return self.sectors[s]

    def to_long(self, shares):
        """Flatten an expanded matrix to (region, sector, period, share)."""
        rows, cols = np.nonzero(shares.w)
        return pd.DataFrame({
            'region': [self.regions[i][0] for i in rows],
            'sector': [self.sectors[s][0] for s in cols],
            'period': [self.regions[i][1] for i in rows],
            'share': shares.w[rows, cols],
        })


def panel_expand(spec, cluster_over_time=False):
    """Expand a panel into a cross-section of (region, period) rows.

    Sectors become (sector, period) pairs and a region only has exposure
    to sector-period pairs of its own period, so the result is block
    diagonal by period. With ``cluster_over_time`` every (k, t) column is
    clustered on k. A single-period panel comes back as the plain
    cross-section, labelled by region and sector identifiers alone.
    """
    _check_unique(spec.observations, 'observation')
    _check_unique(spec.shifter_rows, 'shifter row')
    row_index = {row: i for i, row in enumerate(spec.observations)}
    col_index = {col: s for s, col in enumerate(spec.shifter_rows)}
    w = np.zeros((len(row_index), len(col_index)))
    seen = set()
    for j, k, t, share in spec.shares:
        if (j, k, t) in seen:
            raise DataError(f'Duplicate share entry for ({j}, {k}, {t})')
        seen.add((j, k, t))
        try:
            i = row_index[(j, t)]
        except KeyError:
            raise DataError(
                f'Share entry references unknown observation ({j}, {t})'
            ) from None
        try:
            s = col_index[(k, t)]
        except KeyError:
            raise DataError(
                f'Share entry references unknown shifter row ({k}, {t})'
            ) from None
        w[i, s] = share
    regions, sectors = spec.observations, spec.shifter_rows
    periods = {t for _, t in regions} | {t for _, t in sectors}
    if len(periods) == 1:
        regions = tuple(j for j, _ in regions)
        sectors = tuple(k for k, _ in sectors)
    cluster = None
    if cluster_over_time:
        cluster = tuple(k for k, _ in spec.shifter_rows)
    index = PanelIndex(spec.observations, spec.shifter_rows)
    shares = SharesMatrix(regions, sectors, w, cluster)
    return shares, index


@dataclass(frozen=True)
class DiagnosticsReport:
    max_sector_share: float
    max_sector_share_sq: float
    t_n: float
    t_n_squared_shares: float
    max_cluster_share_sq: float = None
    n_regions: int = 0
    n_sectors: int = 0

    def to_dict(self):
        return {
            'n_regions': self.n_regions,
            'n_sectors': self.n_sectors,
            'max_sector_share': self.max_sector_share,
            'max_sector_share_sq': self.max_sector_share_sq,
            't_n': self.t_n,
            't_n_squared_shares': self.t_n_squared_shares,
            'max_cluster_share_sq': self.max_cluster_share_sq,
        }


def diagnostics(shares):
    """Sector concentration and heterogeneity statistics of a share matrix.

    Reports max_s n_s / sum n, max_s n_s^2 / sum n^2,
    T_N = sum_{s != t} (sum_i w_is w_it)^2 / sum n^2 and
    sum_{s != t} sum_i w_is^2 w_it^2 / sum n^2. Values are raw; no
    threshold is applied.
    """
    w = shares.w
    n = shares.n_s
    total_sq = float(np.sum(n ** 2))
    if not np.any(w != 0):
        raise DataError('All shares are zero')
    gram = w.T @ w
    t_n = (np.sum(gram ** 2) - np.sum(np.diag(gram) ** 2)) / total_sq
    w_sq = w ** 2
    gram_sq = w_sq.T @ w_sq
    t_n_sq = (np.sum(gram_sq) - np.trace(gram_sq)) / total_sq
    max_cluster = None
    if shares.sector_cluster is not None:
        codes, uniques = pd.factorize(np.asarray(shares.sector_cluster,
                                                 dtype=object))
        n_c = np.bincount(codes, weights=n, minlength=len(uniques))
        max_cluster = float(np.max(n_c ** 2) / np.sum(n_c ** 2))
    return DiagnosticsReport(
        max_sector_share=float(np.max(n) / np.sum(n)),
        max_sector_share_sq=float(np.max(n ** 2) / total_sq),
        t_n=float(t_n),
        t_n_squared_shares=float(t_n_sq),
        max_cluster_share_sq=max_cluster,
        n_regions=shares.n_regions,
        n_sectors=shares.n_sectors,
    )


# ---- CSV ingestion

REGION_COLUMNS = ('region', 'period', 'y', 'y2', 'weight', 'cluster')


def _read_csv(path, required, numeric, panel):
    required = list(required) + (['period'] if panel else [])
    try:
        frame = pd.read_csv(path, dtype={'region': str, 'sector': str,
                                         'period': str, 'cluster': str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError,
            UnicodeDecodeError) as error:
        raise DataError(f'Cannot parse {path}: {error}') from None
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DataError(f'{path} lacks column(s): {", ".join(missing)}')
    for column in numeric:
        if column in frame.columns:
            try:
                frame[column] = pd.to_numeric(frame[column])
            except (TypeError, ValueError):
                raise DataError(
                    f'Column {column!r} of {path} is not numeric') from None
    return frame


def read_shares_csv(path, panel=False):
    """Read a long shares file: ``region,sector[,period],share``."""
    return _read_csv(path, ['region', 'sector', 'share'], ['share'], panel)


def read_shifters_csv(path, panel=False):
    """Read a shifters file: ``sector[,period],shifter[,cluster]``."""
    return _read_csv(path, ['sector', 'shifter'], ['shifter'], panel)


def read_long_csv(path, value):
    """Read a long region-sector file: ``region,sector,<value>``."""
    return _read_csv(path, ['region', 'sector', value], [value], False)


def read_regions_csv(path, panel=False):
    """Read a regions file: ``region[,period],y[,y2][,weight][,cluster],z...``.

    Every column not listed in ``REGION_COLUMNS`` is a control.
    """
    frame = _read_csv(path, ['region', 'y'], ['y', 'y2', 'weight'], panel)
    controls = [c for c in frame.columns if c not in REGION_COLUMNS]
    for column in controls:
        try:
            frame[column] = pd.to_numeric(frame[column])
        except (TypeError, ValueError):
            raise DataError(
                f'Control {column!r} of {path} is not numeric') from None
    return frame


@dataclass(frozen=True)
class Dataset:
    shares: SharesMatrix
    design: Design
    shifters: Shifters
    panel_index: PanelIndex = None
    paths: dict = field(default_factory=dict)


def _keys(frame, panel, id_column):
    if panel:
        return list(zip(frame[id_column], frame['period']))
    return list(frame[id_column])


def long_to_matrix(frame, regions, sectors, what='shares', value='share'):
    """Scatter long (region, sector, value) records into an N x S matrix.

    Missing pairs are zero; unknown identifiers and duplicates are errors.
    """
    row_index = {r: i for i, r in enumerate(regions)}
    col_index = {s: k for k, s in enumerate(sectors)}
    w = np.zeros((len(regions), len(sectors)))
    duplicated = frame.duplicated(subset=['region', 'sector'])
    if duplicated.any():
        first = frame[duplicated].iloc[0]
        raise DataError(f'Duplicate {what} entry for '
                        f'({first["region"]}, {first["sector"]})')
    for region, sector, share in zip(frame['region'], frame['sector'],
                                     frame[value]):
        if region not in row_index:
            raise DataError(f'{what} reference unknown region {region!r}')
        if sector not in col_index:
            raise DataError(f'{what} reference unknown sector {sector!r}')
        w[row_index[region], col_index[sector]] = share
    return w


def load_dataset(regions, shares, shifters, panel=False, intercept=True,
                 use_weights=False, cluster_shifters=False,
                 cluster_over_time=False):
    """Load a dataset from the three CSV files.

    Region order follows the regions file and sector order the shifters
    file. An ``intercept`` control is added unless ``intercept`` is false
    or a constant control column is already present.
    """
    logger.info('Loading regions=%s shares=%s shifters=%s',
                regions, shares, shifters)
    region_frame = read_regions_csv(regions, panel)
    share_frame = read_shares_csv(shares, panel)
    shifter_frame = read_shifters_csv(shifters, panel)

    region_keys = _keys(region_frame, panel, 'region')
    sector_keys = _keys(shifter_frame, panel, 'sector')
    panel_index = None
    if panel:
        spec = PanelSpec(
            region_keys, sector_keys,
            list(zip(share_frame['region'], share_frame['sector'],
                     share_frame['period'], share_frame['share'])))
        matrix, panel_index = panel_expand(
            spec, cluster_over_time=cluster_over_time)
        w = matrix.w
        region_labels, sector_labels = matrix.regions, matrix.sectors
    else:
        _check_unique(region_keys, 'region')
        _check_unique(sector_keys, 'sector')
        w = long_to_matrix(share_frame, region_keys, sector_keys)
        region_labels, sector_labels = region_keys, sector_keys

    sector_cluster = None
    if cluster_over_time and panel:
        sector_cluster = tuple(k for k, _ in sector_keys)
    elif cluster_shifters:
        if 'cluster' not in shifter_frame.columns:
            raise DataError(f'{shifters} has no cluster column')
        sector_cluster = tuple(shifter_frame['cluster'])
    share_matrix = SharesMatrix(region_labels, sector_labels, w,
                                sector_cluster)

    controls = [c for c in region_frame.columns if c not in REGION_COLUMNS]
    z = region_frame[controls].to_numpy(dtype=float)
    constant = any(np.ptp(z[:, k]) == 0 and z[0, k] != 0
                   for k in range(z.shape[1])) if len(z) else False
    if intercept and not constant:
        z = np.column_stack([np.ones(len(region_frame)), z])
        controls = ['intercept'] + controls

    weight = None
    if use_weights:
        if 'weight' not in region_frame.columns:
            raise DataError(f'{regions} has no weight column')
        weight = region_frame['weight'].to_numpy(dtype=float)
    region_cluster = None
    if 'cluster' in region_frame.columns:
        region_cluster = tuple(region_frame['cluster'])
    y2 = None
    if 'y2' in region_frame.columns:
        y2 = region_frame['y2'].to_numpy(dtype=float)
    design = Design(
        y1=region_frame['y'].to_numpy(dtype=float),
        y2=y2,
        z=z,
        obs_weight=weight,
        region_cluster=region_cluster,
        z_names=controls,
    )
    shifter_values = Shifters(shifter_frame['shifter'].to_numpy(dtype=float),
                              sector_labels)
    return Dataset(share_matrix, design, shifter_values, panel_index,
                   {'regions': str(regions), 'shares': str(shares),
                    'shifters': str(shifters)})

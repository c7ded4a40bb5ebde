# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""Provides utility functions for use by shiftshare itself."""

import hashlib
import json
import logging
import math

import numpy as np
import pandas as pd
import scipy.linalg

import shiftshare

# Relative tolerance on the diagonal of R below which a column is dependent
RANK_RTOL = 1e-10


def pivoted_qr(a):
    """Economic QR with column pivoting; return ``(q, r, piv, rank)``."""
    a = np.asarray(a, dtype=float)
    if a.shape[1] == 0:
        return (np.zeros((a.shape[0], 0)), np.zeros((0, 0)),
                np.zeros(0, dtype=int), 0)
    q, r, piv = scipy.linalg.qr(a, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return q, r, piv, 0
    rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    return q, r, piv, rank


def solve_pivoted(q, r, piv, b):
    """Least-squares coefficients from a full-rank pivoted QR factorization."""
    k = r.shape[1]
    b = np.asarray(b, dtype=float)
    rhs = q.T @ b
    coef_perm = scipy.linalg.solve_triangular(r[:k, :k], rhs[:k])
    coef = np.empty_like(coef_perm)
    coef[piv] = coef_perm
    return coef


def lstsq_full_rank(a, b, names=None, error=None):
    """Solve ``min ||a c - b||`` requiring ``a`` to have full column rank.

    ``error`` is a callable receiving the name of the first dependent column
    and returning the exception to raise; it defaults to ``RankError``.
    """
    q, r, piv, rank = pivoted_qr(a)
    k = np.shape(a)[1]
    if rank < k:
        names = list(names) if names is not None else [f'z{j + 1}' for j in range(k)]
        column = names[piv[rank]]
        if error is None:
            raise shiftshare.RankError(column=column)
        raise error(column)
    if k == 0:
        return np.zeros((0,) + np.shape(b)[1:])
    return solve_pivoted(q, r, piv, b)


def cluster_codes(labels, n, what='observations'):
    """Integer codes for cluster labels, singleton clusters when ``None``."""
    if labels is None:
        return np.arange(n), n
    labels = np.asarray(labels, dtype=object)
    if labels.shape != (n,):
        raise shiftshare.DimensionError(
            f'Expected {n} cluster labels for the {what}, got {labels.shape[0]}')
    codes, uniques = pd.factorize(labels, sort=False)
    if np.any(codes < 0):
        raise shiftshare.DataError(f'Missing cluster label among the {what}')
    return codes, len(uniques)


def cluster_sums(values, codes, n_clusters):
    """Sum ``values`` within clusters."""
    return np.bincount(codes, weights=values, minlength=n_clusters)


def configure_logging(level='warning'):
    """Install a single stderr handler on the package logger."""
    logger = logging.getLogger('shiftshare')
    logger.setLevel(shiftshare.LOG_LEVELS[level.lower()])
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter('%(levelname)s %(name)s: %(message)s'))
        logger.addHandler(handler)
    return logger


def to_jsonable(value):
    """Convert numpy scalars and non-finite floats to JSON-safe values."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(val) for val in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(val) for val in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def config_hash(config):
    """Short SHA-256 digest of a JSON-serialisable configuration."""
    payload = json.dumps(to_jsonable(config), sort_keys=True,
                         separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

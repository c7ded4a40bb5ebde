# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""Provide a CLI to estimate shift-share regressions and run placebos."""

# Standard library imports
import argparse
import json
import logging
from pathlib import Path
import sys
import textwrap

# Third party imports
import pandas as pd

logger = logging.getLogger(__name__)

# Exit statuses by failure class
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_DGP = 4

AKM_HINT = ('hint: drop or merge sectors without exposure, or restrict to '
            'the robust and cluster methods')


def print_version():
    """Print the current version of the package."""
    import shiftshare
    print('shiftshare version', shiftshare.__version__)


def exit_status(error):
    """Exit status for an exception raised by a subcommand."""
    import shiftshare
    if isinstance(error, (shiftshare.DgpError, shiftshare.ReplicationError)):
        return EXIT_DGP
    if isinstance(error, (shiftshare.AkmInfeasible,
                          shiftshare.DegenerateRegressor,
                          shiftshare.ClusterError,
                          shiftshare.LeaveOneOutUndefined)):
        return EXIT_INFEASIBLE
    return EXIT_INPUT


def describe_error(error):
    """One-line diagnostic for an exception."""
    import shiftshare
    if isinstance(error, FileNotFoundError) and error.filename:
        return f'error: file not found: {error.filename}'
    message = ' '.join(str(error).split())
    if isinstance(error, shiftshare.AkmInfeasible):
        return f'error: {message} ({AKM_HINT})'
    return f'error: {message}'


def parse_methods(methods):
    """Split a comma separated method list and check every name."""
    from shiftshare import ShiftShareValueError
    from shiftshare.infer import METHODS
    names = [name.strip() for name in methods.split(',') if name.strip()]
    unknown = [name for name in names if name not in METHODS]
    if unknown or not names:
        raise ShiftShareValueError(
            f'Invalid method list {methods!r}; valid options are '
            f'{", ".join(METHODS)}')
    return names


def write_output(record, frame, out, format):
    """Write a JSON record or a CSV table to ``out`` (stdout if unset)."""
    from shiftshare._utils import to_jsonable
    if format == 'json':
        text = json.dumps(to_jsonable(record), indent=2) + '\n'
    else:
        text = frame.to_csv(index=False, float_format='%.6g')
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding='utf-8')
        logger.info('Wrote %s', out)


def echo_provenance(digest, seed=None):
    """Echo the configuration hash (and seed) on stderr."""
    seed_part = '' if seed is None else f'seed={seed} '
    print(f'{seed_part}config_hash={digest}', file=sys.stderr)


def _read_long_matrix(path, shares, value):
    from shiftshare.data import long_to_matrix, read_long_csv
    return long_to_matrix(read_long_csv(path, value), shares.regions,
                          shares.sectors, what=Path(path).name, value=value)


def _fit(mode, dataset, agg_weights, local_shocks):
    """Fit the regression; return the fit and the leave-one-out instrument."""
    from shiftshare import DataError
    from shiftshare.estimate import (
        build_loo_instrument, iv_fit, iv_fit_estimated, ols_fit)
    design = dataset.design
    if mode == 'estimate':
        return ols_fit(design.with_outcome(design.y1), dataset.shares,
                       dataset.shifters), None
    if design.y2 is None:
        raise DataError('iv needs a y2 column in the regions file')
    if (agg_weights is None) != (local_shocks is None):
        raise DataError('--agg-weights and --local-shocks go together')
    if agg_weights is None:
        return iv_fit(design, dataset.shares, dataset.shifters), None
    if dataset.panel_index is not None:
        raise DataError('Estimated instruments are not supported with --panel')
    loo = build_loo_instrument(
        dataset.shares,
        _read_long_matrix(agg_weights, dataset.shares, 'weight'),
        _read_long_matrix(local_shocks, dataset.shares, 'shock'))
    return iv_fit_estimated(design, dataset.shares, loo), loo


def run_estimation(mode, regions, shares, shifters, panel=False,
                   methods='robust,akm,akm0', level=0.95,
                   cluster_shifters=False, weights=False, null=0.0, out=None,
                   format='json', no_intercept=False, cluster_over_time=False,
                   small_sample=False, agg_weights=None, local_shocks=None):
    """Fit, run every requested method and write one row per method."""
    from shiftshare import WeakInstrumentDegenerate, infer, load_dataset
    from shiftshare import validate_dataset
    from shiftshare._utils import config_hash

    method_list = parse_methods(methods)
    settings = {
        'mode': mode, 'regions': str(regions), 'shares': str(shares),
        'shifters': str(shifters), 'panel': panel, 'methods': method_list,
        'level': level, 'cluster_shifters': cluster_shifters,
        'weights': weights, 'null': null, 'intercept': not no_intercept,
        'cluster_over_time': cluster_over_time,
        'small_sample': small_sample, 'agg_weights': agg_weights,
        'local_shocks': local_shocks,
    }
    digest = config_hash(settings)
    echo_provenance(digest)

    dataset = load_dataset(regions, shares, shifters, panel=panel,
                           intercept=not no_intercept, use_weights=weights,
                           cluster_shifters=cluster_shifters,
                           cluster_over_time=cluster_over_time)
    report = validate_dataset(dataset.shares, dataset.design,
                              dataset.shifters)
    report.raise_if_invalid()

    try:
        fit, loo = _fit(mode, dataset, agg_weights, local_shocks)
    except WeakInstrumentDegenerate as error:
        kept = [m for m in method_list if m.startswith('akm0')]
        if error.fit is None or not kept:
            raise
        logger.warning('%s; reporting %s only', error, ', '.join(kept))
        fit, loo, method_list = error.fit, None, kept

    results = infer(fit, dataset.shares, method_list, level,
                    cluster_shifters=cluster_shifters or cluster_over_time,
                    loo=loo, small_sample=small_sample)
    rows = []
    for result in results:
        row = result.to_dict()
        row['rejects_null'] = result.rejects(null)
        rows.append(row)
    record = {
        'command': mode,
        'config_hash': digest,
        'n_regions': dataset.shares.n_regions,
        'n_sectors': dataset.shares.n_sectors,
        'null': null,
        'fit': fit.to_dict(),
        'results': rows,
        'validation': report.to_dict(),
    }
    frame = pd.DataFrame([{
        'method': result.method,
        'estimate': result.estimate,
        'se': result.se,
        'ci_shape': result.confset.shape,
        'ci_lo': result.confset.lo,
        'ci_hi': result.confset.hi,
        'effective_se': result.effective_se,
        'level': result.level,
        'rejects_null': row['rejects_null'],
    } for result, row in zip(results, rows)])
    write_output(record, frame, out, format)


def cmd_estimate(**kwargs):
    run_estimation('estimate', **kwargs)


def cmd_iv(**kwargs):
    run_estimation('iv', **kwargs)


def cmd_simulate(config, seed=None, workers=None, out=None, format='json'):
    """Run a placebo study from a JSON configuration."""
    from shiftshare import load_config, run_placebo
    placebo_config = load_config(config, seed)
    echo_provenance(placebo_config.config_hash, placebo_config.seed)
    report = run_placebo(placebo_config, workers=workers,
                         base_dir=Path(config).parent)
    write_output(report.to_dict(), report.to_frame(), out, format)


def cmd_diagnose(shares, shifters, regions=None, panel=False,
                 cluster_shifters=False, weights=False, out=None,
                 format='json'):
    """Report share concentration and data validation."""
    from shiftshare import (
        Design, SharesMatrix, diagnostics, load_dataset, validate_dataset)
    from shiftshare.data import long_to_matrix, read_shares_csv
    from shiftshare.data import read_shifters_csv

    if regions is not None:
        dataset = load_dataset(regions, shares, shifters, panel=panel,
                               use_weights=weights,
                               cluster_shifters=cluster_shifters)
        share_matrix, design = dataset.shares, dataset.design
    else:
        if panel:
            from shiftshare import DataError
            raise DataError('diagnose --panel needs --regions')
        share_frame = read_shares_csv(shares)
        shifter_frame = read_shifters_csv(shifters)
        region_ids = list(pd.unique(share_frame['region']))
        sector_ids = list(shifter_frame['sector'])
        cluster = None
        if cluster_shifters and 'cluster' in shifter_frame.columns:
            cluster = tuple(shifter_frame['cluster'])
        share_matrix = SharesMatrix(
            region_ids, sector_ids,
            long_to_matrix(share_frame, region_ids, sector_ids), cluster)
        design = Design([0.0] * len(region_ids))
    report = diagnostics(share_matrix)
    validation = validate_dataset(share_matrix, design)
    record = {
        'command': 'diagnose',
        'diagnostics': report.to_dict(),
        'validation': validation.to_dict(),
    }
    write_output(record, pd.DataFrame([report.to_dict()]), out, format)


def add_output_arguments(parser):
    parser.add_argument(
        '--out', default=None,
        help='Output file; results go to stdout if omitted')
    parser.add_argument(
        '--format', choices=['json', 'csv'], default='json',
        help='Output format (default: %(default)s)')


def add_data_arguments(parser, regions_required=True):
    parser.add_argument(
        '--regions', required=regions_required,
        help='Regions CSV: region[,period],y[,y2][,weight][,cluster],controls')
    parser.add_argument(
        '--shares', required=True,
        help='Long shares CSV: region,sector[,period],share')
    parser.add_argument(
        '--shifters', required=True,
        help='Shifters CSV: sector[,period],shifter[,cluster]')
    parser.add_argument(
        '--panel', action='store_true',
        help='Files carry a period column; stack region-periods')
    parser.add_argument(
        '--cluster-shifters', action='store_true',
        help='Cluster shift-share errors on the shifters cluster column')
    parser.add_argument(
        '--weights', action='store_true',
        help='Weight regions by the weight column of the regions file')


def add_estimation_arguments(parser):
    add_data_arguments(parser)
    parser.add_argument(
        '--methods', default='robust,akm,akm0',
        help='Comma separated inference methods (default: %(default)s)')
    parser.add_argument(
        '--level', type=float, default=0.95,
        help='Confidence level (default: %(default)s)')
    parser.add_argument(
        '--null', type=float, default=0.0,
        help='Null value tested by every method (default: %(default)s)')
    parser.add_argument(
        '--no-intercept', action='store_true',
        help='Do not add an intercept control')
    parser.add_argument(
        '--cluster-over-time', action='store_true',
        help='In panel mode, cluster each sector across periods')
    parser.add_argument(
        '--small-sample', action='store_true',
        help='Apply the HC1 / cluster small-sample factor')
    add_output_arguments(parser)


def generate_arg_parser():
    """Generate the argument parser for the shiftshare CLI."""
    parser = argparse.ArgumentParser(
        description='Shift-share regressions with valid inference.',
    )
    parser.set_defaults(func=parser.print_help)

    parser.add_argument(
        '--version', action='store_const', dest='func', const=print_version,
        help='If passed, will print the version and exit')

    cli_subparsers = parser.add_subparsers(
        title='Subcommands', help='Subcommand to run', metavar='Subcommand')

    estimate_parser = cli_subparsers.add_parser(
        name='estimate',
        help='OLS of the outcome on the shift-share regressor.',
        formatter_class=argparse.RawTextHelpFormatter,
        description=textwrap.dedent(
            """
            Regress y on X_i = sum_s w_is * shifter_s and the controls, and
            report one row per inference method.

            Exit status is 0 on success, 2 for input errors and 3 when a
            method is statistically infeasible, for example:

                shiftshare estimate --regions r.csv --shares w.csv \\
                    --shifters g.csv --methods robust,akm,akm0
            """
        ),
    )
    add_estimation_arguments(estimate_parser)
    estimate_parser.set_defaults(func=cmd_estimate)

    iv_parser = cli_subparsers.add_parser(
        name='iv',
        help='IV of the outcome on y2 with a shift-share instrument.',
        formatter_class=argparse.RawTextHelpFormatter,
        description=textwrap.dedent(
            """
            Instrument the y2 column of the regions file with the
            shift-share instrument. With --agg-weights and --local-shocks
            the shifters are estimated from region-sector shocks and the
            leave-one-out instrument is used, enabling akm_loo.
            """
        ),
    )
    add_estimation_arguments(iv_parser)
    iv_parser.add_argument(
        '--agg-weights', default=None,
        help='Long CSV region,sector,weight of aggregation weights')
    iv_parser.add_argument(
        '--local-shocks', default=None,
        help='Long CSV region,sector,shock of region-sector shocks')
    iv_parser.set_defaults(func=cmd_iv)

    simulate_parser = cli_subparsers.add_parser(
        name='simulate',
        help='Run a Monte Carlo placebo study from a JSON configuration.',
    )
    simulate_parser.add_argument(
        'config', help='Placebo configuration (JSON)')
    simulate_parser.add_argument(
        '--seed', type=int, default=None,
        help='Override the configured seed')
    simulate_parser.add_argument(
        '--workers', type=int, default=None,
        help='Worker threads; results do not depend on it')
    add_output_arguments(simulate_parser)
    simulate_parser.set_defaults(func=cmd_simulate)

    diagnose_parser = cli_subparsers.add_parser(
        name='diagnose',
        help='Report share concentration and validate the data.',
    )
    add_data_arguments(diagnose_parser, regions_required=False)
    add_output_arguments(diagnose_parser)
    diagnose_parser.set_defaults(func=cmd_diagnose)

    return parser


def main(args=None):
    """Run the shiftshare CLI."""
    import shiftshare
    from shiftshare._utils import configure_logging

    parser = generate_arg_parser()
    parsed_args = parser.parse_args(args=args)
    configure_logging(shiftshare.LOG_LEVEL)

    reserved_params = {'func'}
    cleaned_args = {key: value for key, value in vars(parsed_args).items()
                    if key not in reserved_params}
    try:
        parsed_args.func(**cleaned_args)
    except (shiftshare.ShiftShareError, shiftshare.ShiftShareValueError,
            OSError, ValueError) as error:
        print(describe_error(error), file=sys.stderr)
        return exit_status(error)
    return EXIT_OK

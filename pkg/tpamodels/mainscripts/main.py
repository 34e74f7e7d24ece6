#!/usr/bin/env python

"""
Command-line entry point of the tpamodels package.

Subcommands:
------------

verify: run the self-check suites of available_routines and write a
        JSON report. Exits with 1 if any property fails.

calc:   evaluate the analytic cost model for a set of mechanism
        specs (a JSON file or one of the built-in presets) and write
        a CSV table.

bench:  time decode steps of the factorized and materialized
        mechanisms over a sweep of sequence lengths.

Exit codes: 0 success, 1 failed property, 2 usage or parse error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from tpamodels.utils.cmd_parser_tools import (add_config_arguments,
                                              load_json_config,
                                              merge_overrides, str_list)
from tpamodels.utils.errors import TpaError, SpecParseError
from tpamodels.utils.filesaver import (resolve_output_path, save_csv,
                                       save_json)
from tpamodels.utils.logger import configure_logging
from tpamodels.utils.set_numba_lib import set_threads
from tpamodels.postprocessing import cost_model
from tpamodels.postprocessing.available_routines import (_suites_dict,
                                                         available_faults)
from tpamodels.mainscripts import _bench

logger = logging.getLogger('tpamodels.main')

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _selected_suites(parser, requested):
    if not requested:
        return list(_suites_dict)
    names = [name for item in requested for name in str_list(item)]
    unknown = [name for name in names if name not in _suites_dict]
    if unknown:
        parser.error('unknown suite(s) {}; available: {}'.format(
            ', '.join(unknown), ', '.join(_suites_dict)))
    return names


def cmd_verify(args, parser):
    suites = _selected_suites(parser, args.suite)
    faults = set(args.inject or [])
    report = {'seed': args.seed, 'faults': sorted(faults), 'suites': {},
              'failed': []}
    for name in suites:
        suite, desc = _suites_dict[name]
        logger.info('running suite %s (%s)', name, desc)
        # each suite gets its own stream so a filter does not shift seeds
        rng = np.random.default_rng([args.seed, list(_suites_dict).index(
            name)])
        results = suite(rng, faults)
        report['suites'][name] = results
        for res in results:
            if not res['passed']:
                logger.error('%s: %s failed (max_err=%s)', name,
                             res['property'], res['max_err'])
                report['failed'].append(f"{name}: {res['property']}")
    report['passed'] = not report['failed']

    if args.report == '-':
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write('\n')
    else:
        save_json(resolve_output_path(args.report), report)
    return EXIT_OK if report['passed'] else EXIT_FAILURE


def _pretty_table(reports):
    columns = ['label'] + cost_model.csv_columns + ['kv_bytes_per_token']
    rows = [[getattr(r, col) or r.kind if col == 'label'
             else getattr(r, col) for col in columns] for r in reports]
    widths = [max(len(str(x)) for x in [col] + [row[i] for row in rows])
              for i, col in enumerate(columns)]
    lines = ['  '.join(str(c).rjust(w) for c, w in zip(columns, widths))]
    lines += ['  '.join(str(x).rjust(w) for x, w in zip(row, widths))
              for row in rows]
    return '\n'.join(lines) + '\n'


def cmd_calc(args, parser):
    if args.describe:
        sys.stdout.write(cost_model.footer_cost_table)
        return EXIT_OK
    if (args.specs is None) == (args.preset is None):
        parser.error('exactly one of --specs and --preset is required')
    try:
        if args.specs is not None:
            specs = cost_model.load_specs(args.specs)
        else:
            specs = cost_model.presets[args.preset]()
    except SpecParseError as exc:
        logger.error('%s: %s', args.specs, exc)
        return EXIT_USAGE
    reports = cost_model.comparison_table(specs, args.element_bytes)

    if args.format == 'pretty':
        text = _pretty_table(reports)
        if args.output == '-':
            sys.stdout.write(text)
        else:
            with open(resolve_output_path(args.output), 'w') as f:
                f.write(text)
    else:
        save_csv(resolve_output_path(args.output), cost_model.csv_columns,
                 cost_model.report_rows(reports))
    return EXIT_OK


def cmd_bench(args, parser):
    config = load_json_config(args.config) if args.config else {}
    merged = merge_overrides(_bench.bench_defaults, config, args)
    plan = _bench.BenchPlan.from_dict(merged)
    set_threads(plan.threads)
    logger.info('bench plan: %s', plan.to_dict())

    rows, counters = _bench.run_bench(plan)
    for key, slope in _bench.log2_slopes(rows).items():
        logger.info('%s batch=%d d_model=%d: log2 slope %.3f', *key, slope)
    out = resolve_output_path(plan.output)
    save_csv(out, _bench.bench_columns, rows)
    if counters:
        base = resolve_output_path('bench') if out == '-' \
            else os.path.splitext(out)[0]
        save_json(base + '_counters.json', counters)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog='tpa', description='Tensor product attention toolkit.')
    parser.add_argument('-v', '--verbose', action='count', default=0)
    parser.add_argument('-q', '--quiet', action='store_true')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    verify = sub.add_parser('verify', help='run the self-check suites')
    verify.add_argument('--suite', action='append',
                        help='suite name(s), comma separated; repeatable. '
                        'Available: ' + ', '.join(_suites_dict))
    verify.add_argument('--seed', type=int, required=True)
    verify.add_argument('--inject', action='append',
                        choices=available_faults,
                        help='inject a fault the suites must detect')
    verify.add_argument('--report', default='-',
                        help="JSON report path, '-' for stdout")
    verify.set_defaults(func=cmd_verify)

    calc = sub.add_parser('calc', help='analytic cost tables')
    calc.add_argument('--specs', help='JSON array or JSON lines of specs')
    calc.add_argument('--preset', choices=sorted(cost_model.presets))
    calc.add_argument('--format', choices=['csv', 'pretty'], default='csv')
    calc.add_argument('--output', default='-')
    calc.add_argument('--element-bytes', type=int, default=2)
    calc.add_argument('--describe', action='store_true',
                      help='print the column descriptions and exit')
    calc.set_defaults(func=cmd_calc)

    bench = sub.add_parser('bench', help='decode timing sweep',
                           epilog=_bench.footer_bench,
                           formatter_class=argparse.
                           RawDescriptionHelpFormatter)
    bench.add_argument('--config', help='JSON file with plan keys')
    add_config_arguments(bench, _bench.bench_defaults)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args, parser)
    except TpaError as exc:
        logger.error('%s', exc)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())

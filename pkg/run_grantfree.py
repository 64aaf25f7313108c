import argparse
import logging
import os
import sys

import yaml
from omegaconf.errors import OmegaConfBaseException

from grantfree.config import load_experiment_spec
from grantfree.harness import run_sweep, summarize, theory_command
from grantfree.utils import set_logging_format


def default_workers():
  value = os.environ.get('GRANTFREE_WORKERS')
  return int(value) if value else None


def build_parser():
  parser = argparse.ArgumentParser(description='BiGAMP grant-free access simulator')
  parser.add_argument('--log_level', type=str, default='INFO')
  sub = parser.add_subparsers(dest='command', required=True)

  simulate = sub.add_parser('simulate', help='run the trials of a config and print per-point means')
  simulate.add_argument('--config', type=str, required=True)
  simulate.add_argument('--seed', type=int, default=None)
  simulate.add_argument('--out', type=str, default=None)
  simulate.add_argument('--workers', type=int, default=default_workers())

  for name, help in [('sweep', 'Monte Carlo sweep to CSV'), ('compare', 'sweep plus genie reference and residual diagnostics')]:
    p = sub.add_parser(name, help=help)
    p.add_argument('--config', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--workers', type=int, default=default_workers())
    p.add_argument('--resume', action='store_true')

  theory = sub.add_parser('theory', help='state evolution traces and predictors to CSV')
  theory.add_argument('--config', type=str, required=True)
  theory.add_argument('--out', type=str, required=True)

  for p in sub.choices.values():
    p.add_argument('--set', nargs='*', default=[], metavar='KEY=VALUE', help='dotlist overrides, e.g. system.n_antennas=32')
  return parser


def main(argv=None):
  args = build_parser().parse_args(argv)
  set_logging_format(getattr(logging, args.log_level.upper()))

  overrides = list(args.set)
  if getattr(args, 'seed', None) is not None:
    overrides.append(f'system.seed={args.seed}')
  try:
    spec = load_experiment_spec(args.config, overrides)
  except (ValueError, FileNotFoundError, OmegaConfBaseException, yaml.YAMLError) as e:
    logging.error(f"invalid config {args.config}: {e}")
    return 2

  if args.command=='theory':
    theory_command(spec, args.out)
  elif args.command=='simulate':
    rows = run_sweep(spec, output=args.out, workers=args.workers)
    logging.info(f"ce_mse is per-antenna ||h_hat - h||^2 / M over correctly detected devices\n{summarize(rows, list(spec.axes)).to_string(index=False)}")
  else:
    try:
      run_sweep(spec, output=args.out, workers=args.workers, resume=args.resume, compare=args.command=='compare')
    except ValueError as e:
      logging.error(f"{args.out}: {e}")
      return 2
  logging.info(f"{args.command} done")
  return 0


if __name__=='__main__':
  sys.exit(main())

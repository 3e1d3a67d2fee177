"""
Command line entry point.

    python cli.py limit-analysis --config bench.json --out runs/a

Every subcommand writes manifest.json into --out before computing
anything, then its outputs, then the manifest again with the sha256 of
every output. Exit codes: 0 on success, 1 on validation errors, 2 on
numerical failures (including Monte Carlo studies reporting failures).
"""
import argparse
import hashlib
import logging
import os
import sys
from typing import Any, Callable, Dict, List, NamedTuple, Optional, \
    Sequence

import torch

from action import QuasipotentialOptions, as_cost_matrix, class_costs, \
    class_kind, fw_weights, quasipotential_v
from control import STEER_DT, dm_cost_scaling, hormander_rank, \
    stlc_certificate, steer
from experiments import WEAK_DT, Region, StudyOptions, exit_time_study, \
    occupation_study, records_table, region_w_infimum, weak_error_study
from harness import default_jobs, generator
from hawkes import simulate_hawkes
from limit import LimitCycleOptions, LimitSet, benchmark_trial_points, \
    find_equilibrium, find_limit_cycles
from model import BENCH_CONFIG, CONFIG_KEYS, Model, load_config, \
    make_model, parse_value
from sde import DEFAULT_DT, as_state, simulate_sde
from serialize import parse_float, read_json, write_control_csv, \
    write_events_csv, write_json, write_path_csv, write_rows_csv


LOGGER = logging.getLogger(__name__)

# Environment variable holding the log level.
LOG_ENV = 'OSC_HAWKES_LOG'

MANIFEST = 'manifest.json'

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


class RunManifest(NamedTuple):
    subcommand: str
    config: Dict[str, Any]
    seed: int
    # Input file name -> git blob hash.
    inputs: Dict[str, str]
    # Output file name -> sha256 (None until written).
    outputs: Dict[str, Optional[str]]
    argv: List[str]


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation errors, not SystemExit(2)."""

    def error(self, message):
        raise ValueError(message)


def blob_hash(data: bytes) -> str:
    """Hash of `data` as git stores it (`git hash-object`)."""
    header = 'blob {}\0'.format(len(data)).encode()
    return hashlib.sha1(header + data).hexdigest()


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _vector(text: str) -> List[float]:
    return [parse_float(v) for v in text.split(',')]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(',')]


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(',')]


def _ball(text: str) -> Region:
    """CENTER:RADIUS with CENTER a comma-separated state."""
    center, _, radius = text.rpartition(':')
    if not center:
        raise ValueError('Expected CENTER:RADIUS. Got {}'.format(text))
    return Region(center=torch.tensor(_vector(center), dtype=torch.float64),
                  radius=float(radius))


class Context(NamedTuple):
    args: argparse.Namespace
    model: Optional[Model]

    def path(self, name: str) -> str:
        return os.path.join(self.args.out, name)


def _limit_options(args: argparse.Namespace) -> LimitCycleOptions:
    opts = LimitCycleOptions()
    if args.dt is not None:
        opts = opts._replace(dt=args.dt)
    return opts.refined() if args.refine else opts


def _quasipotential_options(
        args: argparse.Namespace) -> QuasipotentialOptions:
    opts = QuasipotentialOptions()
    return opts.refined() if args.refine else opts


def _study_options(args: argparse.Namespace) -> StudyOptions:
    opts = StudyOptions(jobs=args.jobs, block=args.block)
    if args.dt is not None:
        opts = opts._replace(dt=args.dt)
    return opts.refined() if args.refine else opts


def _limit_set(ctx: Context) -> LimitSet:
    args = ctx.args
    eq = find_equilibrium(ctx.model)
    trials = benchmark_trial_points(
        ctx.model, eq, args.trials, generator(args.seed, 'trial-points'),
        args.spread)
    return find_limit_cycles(ctx.model, trials, _limit_options(args))


def _limit_summary(limitset: LimitSet) -> Dict[str, Any]:
    eq = limitset.equilibrium
    return {
        'equilibrium': eq.point,
        'rho': eq.rho,
        'roots': [complex(r) for r in eq.roots.tolist()],
        'unstable_count': eq.unstable_count,
        'assumption4': eq.assumption4,
        'orbits': [{'anchor': o.anchor, 'period': o.period,
                    'floquet': [complex(m) for m in o.floquet.tolist()],
                    'stable': o.stable} for o in limitset.orbits],
    }


def cmd_simulate_hawkes(ctx: Context) -> List[str]:
    args, model = ctx.args, ctx.model
    N1, N2 = args.N1, args.N2
    if args.N is not None:
        N1 = max(1, int(round(model.p1 * args.N)))
        N2 = max(1, args.N - N1)
    if N1 is None or N2 is None:
        raise ValueError('Give --N or both --N1 and --N2')
    start = None if args.start is None else as_state(model, args.start)
    events, path = simulate_hawkes(model, N1, N2, args.horizon, args.seed,
                                   start=start)
    write_events_csv(ctx.path('events.csv'), events.times1, events.times2)
    write_path_csv(ctx.path('path.csv'), path.grid, path.states)
    write_json(ctx.path('summary.json'), {
        'N1': N1, 'N2': N2, 'horizon': args.horizon,
        'events1': events.times1.numel(), 'events2': events.times2.numel(),
        'final': path.states[-1],
    })
    return []


def cmd_simulate_sde(ctx: Context) -> List[str]:
    args, model = ctx.args, ctx.model
    dt = args.dt if args.dt is not None else DEFAULT_DT
    if args.refine:
        dt /= 2
    x0 = args.x0 if args.x0 is not None else [0.0] * model.dim
    path = simulate_sde(model, args.N, x0, args.horizon, dt, args.seed)
    write_path_csv(ctx.path('path.csv'), path.grid, path.states)
    return []


def cmd_limit_analysis(ctx: Context) -> List[str]:
    limitset = _limit_set(ctx)
    summary = _limit_summary(limitset)
    write_json(ctx.path('limit.json'), summary)
    rows = []
    for k, orbit in enumerate(limitset.orbits):
        times = (torch.arange(orbit.samples.size()[0], dtype=torch.float64)
                 * orbit.period / orbit.samples.size()[0])
        for t, x in zip(times.tolist(), orbit.samples.tolist()):
            rows.append([k, t] + x)
    header = (['orbit', 't']
              + ['x{}'.format(i + 1) for i in range(ctx.model.dim)])
    write_rows_csv(ctx.path('orbits.csv'), header, rows)
    if not limitset.orbits and summary['assumption4']:
        return ['no periodic orbit found']
    return []


def cmd_steer(ctx: Context) -> List[str]:
    args = ctx.args
    dt = args.dt if args.dt is not None else STEER_DT
    if args.refine:
        dt /= 2
    result = steer(ctx.model, args.x, args.y, args.T, dt)
    write_control_csv(ctx.path('control.csv'), result.control.grid,
                      result.control.values)
    write_json(ctx.path('steer.json'), {
        'achieved': result.achieved, 'action': result.action,
        'residual': result.residual, 'T': args.T, 'dt': dt,
    })
    return []


def cmd_certify_stlc(ctx: Context) -> List[str]:
    args, model = ctx.args, ctx.model
    x0 = (args.x0 if args.x0 is not None
          else find_equilibrium(model).point)
    x0 = as_state(model, x0)
    steps = 400 if args.refine else 200
    certificate = stlc_certificate(model, x0, args.delta, args.M,
                                   frozen=args.frozen, steps=steps)
    report = {
        'x0': x0,
        'hormander_rank': hormander_rank(model, x0),
        'dim': model.dim,
        'min_singular_value': certificate.min_singular_value,
        'r': certificate.r,
        'control_bound': certificate.control_bound,
        'Z': certificate.Z,
    }
    if args.deltas is not None:
        report['cost_scaling'] = [
            dict(dm_cost_scaling(model, population, l, args.deltas)._asdict(),
                 population=population, coordinate=l)
            for population in (1, 2)
            for l in range(1, (model.n1 if population == 1 else model.n2)
                           + 2)]
    write_json(ctx.path('certificate.json'), report)
    failures = []
    if not certificate.min_singular_value > 0:
        failures.append('singular certificate matrix')
    if report['hormander_rank'] < model.dim:
        failures.append('bracket rank {} below {}'.format(
            report['hormander_rank'], model.dim))
    return failures


def cmd_quasipotential(ctx: Context) -> List[str]:
    args = ctx.args
    result = quasipotential_v(ctx.model, args.x, args.y,
                              _quasipotential_options(args), seed=args.seed)
    write_json(ctx.path('quasipotential.json'), {
        'cost': result.cost, 'T': result.T, 'residual': result.residual,
        'times': [r.T for r in result.results],
        'costs': [r.cost for r in result.results],
    })
    if result.control is None:
        write_control_csv(ctx.path('control.csv'),
                          torch.zeros(1, dtype=torch.float64),
                          torch.zeros(0, 2, dtype=torch.float64))
    else:
        write_control_csv(ctx.path('control.csv'), result.control.grid,
                          result.control.values)
    return []


def cmd_class_costs(ctx: Context) -> List[str]:
    args = ctx.args
    limitset = _limit_set(ctx)
    costs = class_costs(ctx.model, limitset, _quasipotential_options(args),
                        seed=args.seed, jobs=args.jobs, avoid=args.avoid)
    write_json(ctx.path('costs.json'), {
        'entries': costs.entries,
        'classes': [class_kind(k) for k in limitset.classes],
        'limit_set': _limit_summary(limitset),
    })
    return []


def cmd_fw_weights(ctx: Context) -> List[str]:
    args = ctx.args
    data = read_json(args.costs)
    entries = data['entries'] if isinstance(data, dict) else data
    weights = fw_weights(as_cost_matrix(entries), args.method)
    write_json(ctx.path('weights.json'), weights)
    return []


def _write_study(ctx: Context, result) -> List[str]:
    write_json(ctx.path('study.json'), result)
    header, rows = records_table(result)
    write_rows_csv(ctx.path('study.csv'), header, rows)
    for failure in result.failures:
        LOGGER.warning('%s', failure)
    return list(result.failures)


def cmd_exit_times(ctx: Context) -> List[str]:
    args = ctx.args
    result = exit_time_study(
        ctx.model, _limit_set(ctx), args.N, (args.eps, args.eps_bar),
        cap=args.cap, replicas=args.replicas, seed=args.seed,
        opts=_study_options(args))
    return _write_study(ctx, result)


def cmd_occupation(ctx: Context) -> List[str]:
    args = ctx.args
    limitset = _limit_set(ctx)
    regions = list(args.ball)
    if args.tube is not None:
        regions.append(Region(center=None, radius=args.tube, kind='tube'))
    if not regions:
        raise ValueError('Give at least one --ball or --tube')
    w_infima = None
    if args.compare_w:
        opts = _quasipotential_options(args)
        costs = class_costs(ctx.model, limitset, opts, seed=args.seed,
                            jobs=args.jobs)
        weights = fw_weights(costs)
        w_infima = [region_w_infimum(ctx.model, limitset, weights, r,
                                     opts=opts, seed=args.seed)
                    if r.kind == 'ball' else 0.0 for r in regions]
    result = occupation_study(
        ctx.model, limitset, args.N, regions, args.horizon,
        burn_in=args.burn_in, seed=args.seed, replicas=args.replicas,
        opts=_study_options(args), w_infima=w_infima)
    return _write_study(ctx, result)


def cmd_weak_error(ctx: Context) -> List[str]:
    args = ctx.args
    x0 = (args.x0 if args.x0 is not None
          else find_equilibrium(ctx.model).point)
    dt = args.dt if args.dt is not None else WEAK_DT
    result = weak_error_study(
        ctx.model, args.N, x0, args.t, args.statistic,
        replicas=args.replicas, seed=args.seed,
        dt=dt / 2 if args.refine else dt,
        opts=StudyOptions(jobs=args.jobs, block=args.block))
    return _write_study(ctx, result)


class Subcommand(NamedTuple):
    handler: Callable[[Context], List[str]]
    outputs: Sequence[str]
    needs_model: bool = True


SUBCOMMANDS = {
    'simulate-hawkes': Subcommand(
        cmd_simulate_hawkes, ['events.csv', 'path.csv', 'summary.json']),
    'simulate-sde': Subcommand(cmd_simulate_sde, ['path.csv']),
    'limit-analysis': Subcommand(
        cmd_limit_analysis, ['limit.json', 'orbits.csv']),
    'steer': Subcommand(cmd_steer, ['control.csv', 'steer.json']),
    'certify-stlc': Subcommand(cmd_certify_stlc, ['certificate.json']),
    'quasipotential': Subcommand(
        cmd_quasipotential, ['quasipotential.json', 'control.csv']),
    'class-costs': Subcommand(cmd_class_costs, ['costs.json']),
    'fw-weights': Subcommand(cmd_fw_weights, ['weights.json'], False),
    'exit-times': Subcommand(cmd_exit_times, ['study.json', 'study.csv']),
    'occupation': Subcommand(cmd_occupation, ['study.json', 'study.csv']),
    'weak-error': Subcommand(cmd_weak_error, ['study.json', 'study.csv']),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help='JSON or key = value model file '
                        '(default: the shipped benchmark)')
    common.add_argument('--set', action='append', default=[],
                        metavar='KEY=VALUE',
                        help='Override a config value')
    common.add_argument('--out', required=True, help='Output directory')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--jobs', type=int, default=default_jobs())
    common.add_argument('--refine', action='store_true',
                        help='Tighten every resolution knob')
    common.add_argument('--dt', type=float)

    limit = _Parser(add_help=False)
    limit.add_argument('--trials', type=int, default=10,
                       help='Trial points for the limit-cycle search')
    limit.add_argument('--spread', type=float, default=1.0)

    study = _Parser(add_help=False)
    study.add_argument('--N', type=_ints, required=True,
                       help='Comma-separated population sizes')
    study.add_argument('--replicas', type=int, default=200)
    study.add_argument('--block', type=int, default=100)

    parser = _Parser(description='Oscillating Hawkes populations.')
    commands = parser.add_subparsers(dest='subcommand', required=True)

    p = commands.add_parser('simulate-hawkes', parents=[common])
    p.add_argument('--N', type=int, help='Total units, split by p1')
    p.add_argument('--N1', type=int)
    p.add_argument('--N2', type=int)
    p.add_argument('--horizon', type=float, default=10.0)
    p.add_argument('--start', type=_vector)

    p = commands.add_parser('simulate-sde', parents=[common])
    p.add_argument('--N', type=parse_float, required=True)
    p.add_argument('--x0', type=_vector)
    p.add_argument('--horizon', type=float, default=10.0)

    commands.add_parser('limit-analysis', parents=[common, limit])

    p = commands.add_parser('steer', parents=[common])
    p.add_argument('--x', type=_vector, required=True)
    p.add_argument('--y', type=_vector, required=True)
    p.add_argument('--T', type=float, default=1.0)

    p = commands.add_parser('certify-stlc', parents=[common])
    p.add_argument('--x0', type=_vector)
    p.add_argument('--delta', type=float, default=0.1)
    p.add_argument('--M', type=float, default=1e4)
    p.add_argument('--frozen', action='store_true')
    p.add_argument('--deltas', type=_floats,
                   help='Also fit the small-time cost scaling')

    p = commands.add_parser('quasipotential', parents=[common])
    p.add_argument('--x', type=_vector, required=True)
    p.add_argument('--y', type=_vector, required=True)

    p = commands.add_parser('class-costs', parents=[common, limit])
    p.add_argument('--avoid', action='store_true',
                   help='Keep paths out of the other classes')

    p = commands.add_parser('fw-weights', parents=[common])
    p.add_argument('--costs', required=True, help='JSON cost matrix')
    p.add_argument('--method', choices=['enumeration', 'arborescence',
                                        'both'], default='both')

    p = commands.add_parser('exit-times', parents=[common, limit, study])
    p.add_argument('--eps', type=float, default=0.02)
    p.add_argument('--eps-bar', type=float, default=0.1)
    p.add_argument('--cap', type=float, default=100.0)

    p = commands.add_parser('occupation', parents=[common, limit, study])
    p.add_argument('--ball', type=_ball, action='append', default=[],
                   metavar='CENTER:RADIUS')
    p.add_argument('--tube', type=float, help='Radius of B_eps(K)')
    p.add_argument('--horizon', type=float, default=200.0)
    p.add_argument('--burn-in', type=float)
    p.add_argument('--compare-w', action='store_true',
                   help='Also estimate inf W over each ball')

    p = commands.add_parser('weak-error', parents=[common, study])
    p.add_argument('--x0', type=_vector)
    p.add_argument('--t', type=float, default=1.0)
    p.add_argument('--statistic', choices=['smooth-first', 'constant'],
                   default='smooth-first')
    return parser


def _resolve_config(args: argparse.Namespace):
    """Return (config, inputs) after applying --set overrides."""
    inputs = {}
    path = args.config or BENCH_CONFIG
    with open(path, 'rb') as f:
        inputs[os.path.basename(path)] = blob_hash(f.read())
    config = load_config(path)
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ValueError('Expected KEY=VALUE. Got {}'.format(item))
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ValueError('Unknown config key {}. Choose from {}'.format(
                key, ', '.join(CONFIG_KEYS)))
        config[key] = parse_value(value.strip())
    return config, inputs


def _write_manifest(args: argparse.Namespace, manifest: RunManifest):
    write_json(os.path.join(args.out, MANIFEST), manifest)


def execute(argv: Sequence[str]) -> List[str]:
    """Run a subcommand; return the reported failures."""
    args = build_parser().parse_args(argv)
    subcommand = SUBCOMMANDS[args.subcommand]
    if args.jobs < 1:
        raise ValueError('--jobs must be positive. Got {}'.format(args.jobs))

    config, inputs = _resolve_config(args)
    if args.subcommand == 'fw-weights':
        with open(args.costs, 'rb') as f:
            inputs[os.path.basename(args.costs)] = blob_hash(f.read())
    model = make_model(config) if subcommand.needs_model else None

    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(
        subcommand=args.subcommand,
        config=config,
        seed=args.seed,
        inputs=inputs,
        outputs={name: None for name in subcommand.outputs},
        argv=list(argv),
    )
    _write_manifest(args, manifest)

    LOGGER.info('Running %s into %s', args.subcommand, args.out)
    failures = subcommand.handler(Context(args=args, model=model))

    outputs = {name: file_sha256(os.path.join(args.out, name))
               for name in subcommand.outputs}
    _write_manifest(args, manifest._replace(outputs=outputs))
    return failures


def run(argv: Sequence[str]) -> int:
    """Run the command line and return the exit code."""
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, 'WARNING').upper(),
        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        failures = execute(argv)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_INVALID
    except (ValueError, OSError) as e:
        LOGGER.error('%s', e)
        print('error: {}'.format(e), file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as e:
        LOGGER.error('%s', e)
        print('numerical failure: {}'.format(e), file=sys.stderr)
        return EXIT_FAILED
    for failure in failures:
        print('failure: {}'.format(failure), file=sys.stderr)
    return EXIT_FAILED if failures else EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()

# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Command-line for rate change simulation, weighting and filtering."""

import argparse
import contextlib
import csv
import io
import json
import logging
import math
from pathlib import Path
import sys
import tempfile
import typing as tp

from .chains import ChainPath, validate
from .errors import ModelError, RateChangeError, UsageError
from .filtering import BranchingConfig, DirectConfig, compare_models, run_direct_filter, run_particle_filter
from .formats import (
    ChainModel, Model, load_model, obs_space_of, read_path, write_manifest, write_path, write_records)
from .models import as_cmom, joint_log_weight, simulate_joint_reference, simulate_joint_target
from .parallel import set_threads
from .rng import RngStream
from .sampling import (
    certified_bound, log_weight, rejection_sample, segmented_rejection_sample, simulate_reference_chain)
from .utils import file_checksum

LAWS = ['reference', 'target-rejection', 'joint-reference', 'joint-target']
# Stored observation of the two state benchmark and its filter trajectories.
GOLDEN = Path(__file__).parent / 'data'


def _add_common(parser: argparse.ArgumentParser, seed: bool = True, output: bool = True):
    if seed:
        parser.add_argument('--seed', type=int, required=True, help='Master seed of every random stream.')
    if output:
        parser.add_argument('-o', '--output', type=Path, required=True, help='Output file.')
        parser.add_argument('-f', '--force', action='store_true', help='Overwrite output file if it exists.')
    parser.add_argument('--threads', type=int, default=1, help='Maximum number of workers.')
    parser.add_argument('-v', '--verbose', action='store_true', help='Log diagnostics to stderr.')


def _add_rejection(parser: argparse.ArgumentParser):
    parser.add_argument('--C', type=float, help='Bound on the weight, computed from the rates if not given.')
    parser.add_argument('-n', '--jumps-per-segment', type=int,
                        help='Use segmented rejection over blocks of this many jumps.')
    parser.add_argument('--max-attempts', type=float, default=1e6, help='Attempts before giving up (per block).')


def get_parser():
    parser = argparse.ArgumentParser(
        'ratechange',
        description='Simulate, weight and filter continuous time Markov chains whose '
                    'transition rates are changed by a likelihood ratio.')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='Simulate paths of a model.')
    simulate.add_argument('--model', type=Path, required=True, help='Model json file.')
    simulate.add_argument('--law', choices=LAWS, default='reference',
                          help='Reference chain, target chain by rejection, or joint (hidden, observation) pair.')
    simulate.add_argument('--T', type=float, required=True, help='Horizon.')
    simulate.add_argument('--count', type=int, default=1, help='Number of independent paths.')
    _add_rejection(simulate)
    _add_common(simulate)

    reject = sub.add_parser('reject-sample', help='Sample the target chain by rejection.')
    reject.add_argument('--model', type=Path, required=True, help='Chain model json file.')
    reject.add_argument('--T', type=float, required=True, help='Horizon.')
    reject.add_argument('--count', type=int, default=1, help='Number of independent paths.')
    _add_rejection(reject)
    _add_common(reject)

    weight = sub.add_parser('weight', help='Log likelihood weight of a path.')
    weight.add_argument('--model', type=Path, required=True, help='Model json file.')
    weight.add_argument('--path', type=Path, required=True, help='Observed path CSV.')
    weight.add_argument('--hidden', type=Path, help='Hidden path CSV, for cmom and cthmm models.')
    _add_common(weight, seed=False, output=False)

    filt = sub.add_parser('filter', help='Filter an observation path.')
    filt.add_argument('--model', type=Path, required=True, help='cmom or cthmm model json file.')
    filt.add_argument('--obs', type=Path, required=True, help='Observation path CSV.')
    filt.add_argument('--engine', choices=['particle', 'direct'], default='direct')
    filt.add_argument('--N', type=int, default=1000, help='Number of particles.')
    filt.add_argument('--r', type=float, default=2., help='Resampling parameter, inf for no branching.')
    filt.add_argument('--v-halfwidth', type=float, default=0.1, help='Half width of the smoothing uniforms.')
    filt.add_argument('--v-scale', choices=['absolute', 'relative'], default='absolute')
    filt.add_argument('--h', type=float, default=1e-2, help='Trotter step of the direct engine.')
    filt.add_argument('--grid', type=float, default=0., help='Extra records every GRID time units (direct engine).')
    filt.add_argument('--format', choices=['csv', 'jsonl'], default='csv')
    _add_common(filt)

    compare = sub.add_parser('compare', help='Bayes factors of several models.')
    compare.add_argument('--models', type=Path, nargs='+', required=True, help='Model json files.')
    compare.add_argument('--obs', type=Path, required=True, help='Observation path CSV.')
    compare.add_argument('--h', type=float, default=1e-2, help='Trotter step.')
    _add_common(compare, seed=False)

    check = sub.add_parser('validate', help='Check the conditions of a model.')
    check.add_argument('--model', type=Path, required=True, help='Model json file.')
    _add_common(check, seed=False, output=False)
    return parser


def fatal(*args, code: int = 1):
    print(*args, file=sys.stderr)
    sys.exit(code)


def check_output_exists(args):
    if not args.output.parent.exists():
        fatal(f"Output folder for {args.output} does not exist.", code=UsageError.exit_code)
    if args.output.exists() and not args.force:
        fatal(f"Output file {args.output} exist. Use -f / --force to overwrite.", code=UsageError.exit_code)


def _inputs(*paths: tp.Optional[Path]) -> tp.Dict[str, str]:
    return {str(path): file_checksum(path) for path in paths if path is not None}


def _manifest(args, inputs: tp.Dict[str, str], **extra) -> tp.Dict[str, tp.Any]:
    # Thread count and verbosity do not change outputs, they stay out of the manifest.
    params = {key: str(value) if isinstance(value, Path) else value for key, value in vars(args).items()
              if key not in ('threads', 'verbose', 'force')}
    return dict(params, inputs=inputs, **extra)


def _indexed(output: Path, index: int, count: int, tag: str = '') -> Path:
    stem = output.stem + (f'_{index}' if count > 1 else '') + tag
    return output.with_name(stem + output.suffix)


def _chain(model: Model, command: str) -> ChainModel:
    if not isinstance(model, ChainModel):
        raise UsageError(f"`{command}` needs a chain model.")
    return model


def _sample_target(model: ChainModel, args, rng: RngStream) -> tp.Tuple[ChainPath, tp.Dict[str, tp.Any]]:
    max_attempts = int(args.max_attempts)
    if args.jumps_per_segment:
        blocks: tp.List[tp.Tuple[float, int]] = []
        path = segmented_rejection_sample(model.reference, model.target, args.jumps_per_segment, args.T,
                                          model.init, rng, max_attempts, blocks=blocks)
        return path, {'attempts': [attempts for _, attempts in blocks], 'C': [bound for bound, _ in blocks]}
    bound = args.C if args.C is not None else certified_bound(model.reference, model.target, args.T)
    path, attempts = rejection_sample(model.reference, model.target, bound, model.init, args.T, rng, max_attempts)
    return path, {'attempts': attempts, 'C': bound}


def cmd_simulate(args) -> int:
    check_output_exists(args)
    model = load_model(args.model)
    stats = []
    for index in range(args.count):
        rng = RngStream(args.seed, index)
        output = _indexed(args.output, index, args.count)
        if args.law in ('joint-reference', 'joint-target'):
            if isinstance(model, ChainModel):
                raise UsageError(f"--law {args.law} needs a cmom or cthmm model.")
            cmom = as_cmom(model)
            report = cmom.validate()
            if not report.ok:
                raise ModelError(f"Invalid model:\n{report}")
            simulate = simulate_joint_reference if args.law == 'joint-reference' else simulate_joint_target
            x_path, y_path = simulate(cmom, args.T, rng)
            with open(output, 'w') as fo:
                write_path(fo, y_path, cmom.obs_space)
            with open(_indexed(args.output, index, args.count, '.hidden'), 'w') as fo:
                write_path(fo, x_path, cmom.hidden.space)  # type: ignore
            continue
        chain = _chain(model, 'simulate')
        if args.law == 'reference':
            path = simulate_reference_chain(chain.reference, chain.init, args.T, rng)
        else:
            path, info = _sample_target(chain, args, rng)
            stats.append(info)
        with open(output, 'w') as fo:
            write_path(fo, path, chain.space)
    write_manifest(args.output, _manifest(args, _inputs(args.model), rejection=stats))
    return 0


def cmd_reject_sample(args) -> int:
    args.law = 'target-rejection'
    return cmd_simulate(args)


def cmd_weight(args) -> int:
    model = load_model(args.model)
    space = obs_space_of(model)
    if isinstance(model, ChainModel):
        with open(args.path) as fo:
            path = read_path(fo, space, updates=model.reference.self_updates)
        result = log_weight(path, model.target, model.reference)
    else:
        cmom = as_cmom(model)
        if args.hidden is None:
            raise UsageError("--hidden is required for cmom and cthmm models.")
        with open(args.path) as fo:
            path = read_path(fo, space, updates=cmom.reference.self_updates)
        with open(args.hidden) as fo:
            hidden = read_path(fo, cmom.hidden.space)  # type: ignore
        result = joint_log_weight(hidden, path, cmom)
    print(json.dumps({'log_a': result.log_a, 't': result.t}, sort_keys=True))
    return 0


def cmd_filter(args) -> int:
    check_output_exists(args)
    cmom = as_cmom(_observed_model(load_model(args.model)))
    with open(args.obs) as fo:
        y_path = read_path(fo, cmom.obs_space, updates=cmom.reference.self_updates)
    extra: tp.Dict[str, tp.Any] = {}
    if args.engine == 'particle':
        config = BranchingConfig(args.r, args.v_halfwidth, args.v_scale)
        ensemble, records = run_particle_filter(cmom, y_path, args.N, RngStream(args.seed, 0), config)
        extra['final_particle_count'] = len(ensemble)
    else:
        grid: tp.List[float] = []
        if args.grid > 0:
            grid = [k * args.grid for k in range(1, int(math.floor(y_path.horizon / args.grid)) + 1)]
        records = run_direct_filter(cmom, y_path, grid, DirectConfig(step=args.h))
    extra['log_sigma_total'] = records[-1].log_sigma_total
    with open(args.output, 'w') as fo:
        write_records(fo, records, args.format)
    write_manifest(args.output, _manifest(args, _inputs(args.model, args.obs), **extra))
    return 0


def _observed_model(model: Model):
    if isinstance(model, ChainModel):
        raise UsageError("Filtering needs a cmom or cthmm model.")
    return model


def cmd_compare(args) -> int:
    check_output_exists(args)
    models = [as_cmom(_observed_model(load_model(path))) for path in args.models]
    with open(args.obs) as fo:
        y_path = read_path(fo, models[0].obs_space, updates=models[0].reference.self_updates)
    comparison = compare_models(models, y_path, DirectConfig(step=args.h))
    names = [str(path) for path in args.models]
    result = {
        'models': names,
        'log_sigma_total': comparison.log_totals,
        'log_bayes_factor': comparison.log_factors,
        'bayes_factor': comparison.factors,
    }
    args.output.write_text(json.dumps(result, sort_keys=True, indent=2) + '\n')
    write_manifest(args.output, _manifest(args, _inputs(args.obs, *args.models)))
    return 0


def cmd_validate(args) -> int:
    model = load_model(args.model)
    if isinstance(model, ChainModel):
        report = validate(model.reference, model.target)
    else:
        report = model.validate()
        if report.ok:
            report.extend(as_cmom(model).validate())
    print(report)
    return 0 if report.ok else 2


COMMANDS = {
    'simulate': cmd_simulate,
    'reject-sample': cmd_reject_sample,
    'weight': cmd_weight,
    'filter': cmd_filter,
    'compare': cmd_compare,
    'validate': cmd_validate,
}


def main(argv: tp.Optional[tp.List[str]] = None):
    args = get_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format='%(name)s %(levelname)s %(message)s')
    set_threads(args.threads)
    inputs = [getattr(args, name, None) for name in ('model', 'obs', 'path', 'hidden')]
    for path in inputs + list(getattr(args, 'models', None) or []):
        if path is not None and not path.exists():
            fatal(f"Input file {path} does not exist.", code=UsageError.exit_code)
    try:
        code = COMMANDS[args.command](args)
    except RateChangeError as error:
        fatal(f"{type(error).__name__}: {error}", code=error.exit_code)
    sys.exit(code)


def _run(argv: tp.List[str]) -> tp.Tuple[int, str]:
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        try:
            main(argv)
        except SystemExit as error:
            return int(error.code or 0), out.getvalue()
    return 0, out.getvalue()


def _read_trajectory(path: Path) -> tp.List[tp.Dict[str, tp.Any]]:
    with open(path) as fo:
        return [{key: value if key == 'event' else float(value) for key, value in row.items()}
                for row in csv.DictReader(fo)]


def test():
    chain = {'schema_version': 1, 'kind': 'chain', 'states': ['a', 'b'], 'reference': [[0, 2], [1, 0]],
             'target': [[0, 1], [1, 0]], 'init': [1, 0]}
    cmom = {'schema_version': 1, 'kind': 'cmom', 'hidden_states': ['0', '1'], 'obs_states': ['u', 'v'],
            'lambda': [[0, 1], [1, 0]], 'mu': [0.5, 0.5], 'gamma_bar': [[0, 1.5], [1.5, 0]],
            'gamma': [[[0, 2], [1, 0]], [[0, 1], [2, 0]]], 'init_obs': [0.5, 0.5]}
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / 'chain.json').write_text(json.dumps(chain))
        (root / 'cmom.json').write_text(json.dumps(cmom))
        (root / 'bad.json').write_text(json.dumps(dict(chain, reference=[[0, 0], [1, 0]])))

        first, second = root / 'a.csv', root / 'b.csv'
        for output in (first, second):
            code, _ = _run(['reject-sample', '--model', str(root / 'chain.json'), '--T', '1', '--seed', '7',
                            '-o', str(output)])
            assert code == 0
        assert first.read_bytes() == second.read_bytes()
        manifest = json.loads((root / 'a.csv.manifest.json').read_text())
        assert manifest['seed'] == 7 and manifest['rejection'][0]['attempts'] >= 1
        assert str(root / 'chain.json') in manifest['inputs']
        code, _ = _run(['reject-sample', '--model', str(root / 'chain.json'), '--T', '1', '--seed', '7',
                        '-o', str(first)])
        assert code == UsageError.exit_code, "existing outputs need --force"

        code, out = _run(['weight', '--model', str(root / 'chain.json'), '--path', str(first)])
        assert code == 0 and json.loads(out)['t'] == 1.

        code, _ = _run(['simulate', '--model', str(root / 'cmom.json'), '--law', 'joint-target', '--T', '3',
                        '--seed', '3', '-o', str(root / 'obs.csv')])
        assert code == 0 and (root / 'obs.hidden.csv').exists()
        for engine in ('direct', 'particle'):
            code, _ = _run(['filter', '--model', str(root / 'cmom.json'), '--obs', str(root / 'obs.csv'),
                            '--engine', engine, '--N', '200', '--seed', '1', '-o', str(root / f'{engine}.csv')])
            assert code == 0
        header = (root / 'particle.csv').read_text().splitlines()[0]
        assert header.endswith('particle_count')

        # Direct engine on the benchmark against the stored trajectories: the default step
        # is reproduced to 1e-8, and a finer step approaches the converged Euler solution.
        obs = str(GOLDEN / 'benchmark_obs.csv')
        for step, golden, tolerance in [('0.01', 'benchmark_direct.csv', 1e-8),
                                        ('0.001', 'benchmark_euler.csv', 1e-3)]:
            output = root / f'golden_{step}.csv'
            code, _ = _run(['filter', '--model', str(root / 'cmom.json'), '--obs', obs, '--engine', 'direct',
                            '--h', step, '--seed', '0', '-o', str(output)])
            assert code == 0
            ours, stored = _read_trajectory(output), _read_trajectory(GOLDEN / golden)
            assert [row['event'] for row in ours] == [row['event'] for row in stored]
            for row, expected in zip(ours, stored):
                for key, value in expected.items():
                    if key != 'event':
                        assert abs(row[key] - value) < tolerance, (golden, key, row[key], value)
        from .oracles import euler_reference_filter
        benchmark = as_cmom(_observed_model(load_model(root / 'cmom.json')))
        with open(obs) as fo:
            y_path = read_path(fo, benchmark.obs_space)
        euler = euler_reference_filter(benchmark, y_path, 1e-6)
        for (t, sigma), expected in zip(euler, _read_trajectory(GOLDEN / 'benchmark_euler.csv')):
            assert t == expected['t']
            assert max(abs(sigma[0] - expected['sigma_1']), abs(sigma[1] - expected['sigma_2'])) < 1e-6

        code, _ = _run(['compare', '--models', str(root / 'cmom.json'), str(root / 'cmom.json'),
                        '--obs', str(root / 'obs.csv'), '-o', str(root / 'cmp.json')])
        assert code == 0
        result = json.loads((root / 'cmp.json').read_text())
        assert all(abs(value - 1) < 1e-12 for row in result['bayes_factor'] for value in row)
        code, _ = _run(['compare', '--models', str(root / 'cmom.json'), str(root / 'chain.json'),
                        '--obs', str(root / 'obs.csv'), '-o', str(root / 'cmp2.json')])
        assert code == UsageError.exit_code

        code, out = _run(['validate', '--model', str(root / 'cmom.json')])
        assert code == 0 and out.strip() == 'ok'
        code, out = _run(['validate', '--model', str(root / 'bad.json')])
        assert code == 2 and '[C3]' in out


if __name__ == '__main__':
    main()

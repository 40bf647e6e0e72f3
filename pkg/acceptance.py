# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
"""Full scale acceptance checks, run with `make acceptance` or
`python3 acceptance.py [--only NAME ...]`. Statistical checks use 3 standard errors."""

import argparse
import filecmp
import json
import math
from pathlib import Path
import subprocess
import sys
import tempfile
import time
import typing as tp

import numpy as np
import torch

from ratechange.chains import ChainPath, RateMatrix, StateSpace, TargetRateFamily
from ratechange.filtering import (
    BranchingConfig, DirectConfig, Ensemble, FilterVector, compare_models, evolve_between_jumps, jump_update,
    log_bayes_factor, resample_residual, run_direct_filter, run_particle_filter, unnormalized_estimate)
from ratechange.filtering.particles import log_unnormalized_total
from ratechange.formats import write_path
from ratechange.models import (
    CmomModel, CthmmModel, HiddenChain, joint_log_weight, simulate_joint_reference, simulate_joint_target,
    two_state_benchmark)
from ratechange.oracles import conditional_mc_sigma, dense_expm, empirical_generator, euler_reference_filter
from ratechange.parallel import map_ordered, set_threads
from ratechange.rng import RngStream
from ratechange.sampling import (
    certified_bound, log_weight, rejection_sample, simulate_reference_chain)

SEED = 1234
M = 100_000
SIGMAS = 3.


def _timer():
    last = time.perf_counter()

    def _measure():
        nonlocal last
        result = time.perf_counter() - last
        last += result
        return result

    return _measure


def _mean_stderr(values: tp.Sequence[float]) -> tp.Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std(ddof=1) / math.sqrt(len(array)))


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def _time_dependent_chain() -> tp.Tuple[RateMatrix, TargetRateFamily]:
    reference = RateMatrix([[0., 2.], [2., 0.]])
    target = TargetRateFamily.piecewise([1.], [[[0., 1.], [2., 0.]], [[0., 2.], [1., 0.]]])
    return reference, target


def _cthmm() -> CthmmModel:
    hidden = HiddenChain([[0., 0.5], [1., 0.]], [0.5, 0.5])
    return CthmmModel(hidden, StateSpace(('a', 'b', 'c')), [2., 0.5], [[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]],
                      1., [1 / 3, 1 / 3, 1 / 3], [1., 0., 0.])


def check_martingale(rng: RngStream) -> bool:
    """E[A_T] = 1 under the reference law for a time dependent, a CMOM and a CTHMM model."""
    reference, target = _time_dependent_chain()
    horizon = 2.

    def chain_weight(index: int) -> float:
        path = simulate_reference_chain(reference, [1., 0.], horizon, rng.substream(0, index))
        return log_weight(path, target, reference).value

    def joint_weight(model, key: int) -> tp.Callable[[int], float]:
        def one(index: int) -> float:
            x_path, y_path = simulate_joint_reference(model, horizon, rng.substream(key, index))
            return joint_log_weight(x_path, y_path, model).value
        return one

    cases: tp.List[tp.Tuple[str, tp.Callable[[int], float]]] = [
        ('time dependent', chain_weight),
        ('cmom', joint_weight(two_state_benchmark(), 1)),
        ('cthmm', joint_weight(_cthmm(), 2)),
    ]
    ok = True
    for name, one in cases:
        mean, stderr = _mean_stderr(map_ordered(one, range(M)))
        ok &= _report(f"martingale ({name})", abs(mean - 1) <= SIGMAS * stderr,
                      f"mean {mean:.5f} +- {stderr:.5f}")
    return ok


def check_acceptance_rate(rng: RngStream) -> bool:
    """Acceptance frequency of the rejection sampler is 1 / C."""
    reference = RateMatrix([[0., 2.], [1., 0.]])
    target = TargetRateFamily.constant([[0., 1.], [1., 0.]])
    bound = certified_bound(reference, target, 1.)
    attempts = accepted = 0
    while attempts < M:
        _, used = rejection_sample(reference, target, bound, [1., 0.], 1., rng.substream(accepted))
        attempts += used
        accepted += 1
    p = 1 / bound
    stderr = math.sqrt(p * (1 - p) / attempts)
    rate = accepted / attempts
    return _report("rejection acceptance rate", abs(rate - p) <= SIGMAS * stderr,
                   f"{rate:.5f} vs 1/C = {p:.5f} +- {stderr:.5f} over {attempts} attempts")


def check_rejection_law(rng: RngStream) -> bool:
    """Accepted paths have the target rates, checked on each constant piece of the target."""
    reference, target = _time_dependent_chain()
    horizon = 2.
    bound = certified_bound(reference, target, horizon)

    def one(index: int) -> ChainPath:
        path, _ = rejection_sample(reference, target, bound, [0.5, 0.5], horizon, rng.substream(index))
        return path

    paths = map_ordered(one, range(M))
    ok = True
    for piece, window in enumerate([(0., 1.), (1., 2.)]):
        estimate = empirical_generator(paths, 2, window=window)
        for i, j in [(0, 1), (1, 0)]:
            expected = target.eval(i, j, window[0])
            value, stderr = estimate.rates[i, j], estimate.stderr[i, j]
            ok &= _report(f"rejection law, piece {piece}, {i}->{j}", abs(value - expected) <= SIGMAS * stderr,
                          f"{value:.4f} vs {expected} +- {stderr:.4f}")
    return ok


def check_reduction(rng: RngStream) -> bool:
    """With gamma = gammabar, sigma_t(1) = 1 and pi_t is the forward law of the hidden chain."""
    rates = [[0., 1., 0.5, 0.], [0.3, 0., 1., 0.2], [0., 0.7, 0., 1.], [1., 0., 0.4, 0.]]
    mu = [0.4, 0.3, 0.2, 0.1]
    obs = [[0., 1.], [2., 0.]]
    hidden = HiddenChain(rates, mu)
    model = CmomModel(hidden, StateSpace.of_size(2), TargetRateFamily.state_dependent([obs] * 4),
                      RateMatrix(obs), [1., 0.])
    y_path = simulate_reference_chain(model.reference, model.init_obs, 5., rng)
    grid = [0.25 * k for k in range(1, 21)]
    generator = hidden.generator().numpy()
    worst_total = worst_law = 0.
    for record in run_direct_filter(model, y_path, grid):
        worst_total = max(worst_total, abs(math.exp(record.log_sigma_total) - 1))
        law = np.asarray(mu) @ dense_expm(generator, record.t)
        worst_law = max(worst_law, float(np.abs(np.asarray(record.pi) - law).max()))
    return _report("direct filter reduction", worst_total <= 1e-8 and worst_law <= 1e-8,
                   f"max |sigma(1) - 1| = {worst_total:.2e}, max |pi - mu P_t| = {worst_law:.2e}")


def _trotter_records(model: CmomModel, y_path: ChainPath, steps_per_unit: float,
                     refine: int = 1) -> tp.List[tp.Tuple[float, np.ndarray]]:
    # Step counts are chosen per interval, then multiplied by `refine`, so that two
    # runs differ by exactly a factor of the step size.
    assert isinstance(model.hidden, HiddenChain)
    fv = FilterVector(torch.tensor(model.hidden.mu, dtype=torch.float64), 0.)
    records = [(0., fv.sigma.numpy().copy())]
    events = sorted({*y_path.jump_times, y_path.horizon})
    for event in events:
        y = y_path.state_at(fv.t)
        dt = event - fv.t
        if dt > 0:
            steps = refine * max(1, math.ceil(dt * steps_per_unit))
            fv = evolve_between_jumps(fv, model, y, dt, steps)
            fv = FilterVector(fv.sigma, event, fv.log_scale)
        if event in y_path.jump_times:
            fv = jump_update(fv, model, y, y_path.state_at(event))
        records.append((event, (fv.sigma * math.exp(fv.log_scale)).numpy()))
    return records


def extrapolated_direct(model: CmomModel, y_path: ChainPath,
                        steps_per_unit: float = 1e4) -> tp.List[tp.Tuple[float, np.ndarray]]:
    """Trotter solution with the first order splitting error removed by one Richardson step."""
    coarse = _trotter_records(model, y_path, steps_per_unit)
    fine = _trotter_records(model, y_path, steps_per_unit, refine=2)
    return [(t, 2 * sf - sc) for (t, sc), (_, sf) in zip(coarse, fine)]


def check_cross_oracles(rng: RngStream) -> bool:
    """Direct filter against the Euler oracle, conditional Monte Carlo and the particle filter."""
    model = two_state_benchmark()
    _, y_path = simulate_joint_target(model, 5., rng.substream(0))
    ok = True

    direct = extrapolated_direct(model, y_path)
    # Euler is first order with no splitting to extrapolate, the step is taken fine
    # enough for its own error to stay well below the tolerance.
    euler = euler_reference_filter(model, y_path, step=1e-8)
    gap = max(float(np.abs(a - b).max() / max(1., float(np.abs(b).max())))
              for (_, a), (_, b) in zip(direct, euler))
    ok &= _report("direct vs euler", gap <= 1e-6, f"max relative gap {gap:.2e}")

    # The filter engine as the CLI runs it: first order convergence toward the same solution.
    engine_gaps = []
    for step in (2e-3, 1e-3):
        records = run_direct_filter(model, y_path, config=DirectConfig(step=step))
        assert [r.t for r in records] == [t for t, _ in euler]
        engine_gaps.append(max(float(np.abs(np.asarray(r.sigma) - b).max() / max(1., float(np.abs(b).max())))
                               for r, (_, b) in zip(records, euler)))
    ok &= _report("direct engine vs euler", engine_gaps[1] <= 0.6 * engine_gaps[0] and engine_gaps[1] <= 1e-2,
                  f"max relative gap {engine_gaps[0]:.2e} at h=2e-3, {engine_gaps[1]:.2e} at h=1e-3")

    sigma_t = direct[-1][1]
    for name, fn in [('sigma(1)', [1., 1.]), ('sigma(x=0)', [1., 0.])]:
        mean, stderr = conditional_mc_sigma(model, y_path, fn, M, rng.substream(1))
        expected = float(np.dot(sigma_t, fn))
        ok &= _report(f"direct vs conditional MC {name}", abs(mean - expected) <= SIGMAS * stderr,
                      f"{expected:.5f} vs {mean:.5f} +- {stderr:.5f}")

    records = run_direct_filter(model, y_path, config=DirectConfig(step=1e-4))
    _, particles = run_particle_filter(model, y_path, M, rng.substream(2), BranchingConfig(r=1.5))
    worst = max(abs(a.pi[0] - b.pi[0]) for a, b in zip(records, particles) if a.event == 'jump')
    ok &= _report("direct vs particle pi(1)", worst <= 0.02, f"max gap {worst:.4f}")
    return ok


def check_branching_unbiased(rng: RngStream) -> bool:
    """Residual branching preserves S^N(f) in conditional expectation."""
    size = 1000
    init = rng.substream(0)
    states = (init.uniforms(size) * 2).long().clamp_(max=1)
    log_weights = init.uniforms(size, -2., 2.)
    ensemble = Ensemble(states, log_weights, size, t=1.)
    config = BranchingConfig(r=1.5)
    functionals = {'1': [1., 1.], 'x=0': [1., 0.], 'x=1': [0., 1.]}
    before = {name: unnormalized_estimate(ensemble, fn) for name, fn in functionals.items()}
    after: tp.Dict[str, tp.List[float]] = {name: [] for name in functionals}
    for index in range(M):
        branched = resample_residual(ensemble, config, rng.substream(1, index))
        for name, fn in functionals.items():
            after[name].append(unnormalized_estimate(branched, fn))
    ok = True
    for name in functionals:
        mean, stderr = _mean_stderr(after[name])
        ok &= _report(f"branching unbiased f={name}", abs(mean - before[name]) <= SIGMAS * stderr,
                      f"{mean:.6f} vs {before[name]:.6f} +- {stderr:.6f}")
    return ok


def check_convergence_slope(rng: RngStream, repeats: int = 16) -> bool:
    """Fitted log-log slope of the particle error in N. This is an empirical check
    of a convergence rate that is conjectured, not proven."""
    model = two_state_benchmark()
    _, y_path = simulate_joint_target(model, 5., rng.substream(0))
    exact = math.log(float(extrapolated_direct(model, y_path)[-1][1].sum()))
    sizes = [100, 1_000, 10_000, 100_000]
    errors = []
    for size in sizes:
        squares = []
        for rep in range(repeats):
            ensemble, _ = run_particle_filter(model, y_path, size, rng.substream(1, size, rep),
                                              BranchingConfig(r=1.5))
            squares.append((math.exp(log_unnormalized_total(ensemble) - exact) - 1) ** 2)
        errors.append(math.sqrt(sum(squares) / repeats))
    (slope, _), cov = np.polyfit(np.log(sizes), np.log(errors), 1, cov=True)
    band = SIGMAS * math.sqrt(cov[0, 0])
    detail = ", ".join(f"N={n}: {e:.2e}" for n, e in zip(sizes, errors))
    return _report("particle error slope", slope <= -0.35, f"slope {slope:.3f} +- {band:.3f} ({detail})")


def _perturbed(model: CmomModel, factor: float) -> CmomModel:
    assert model.obs_rates.tables is not None
    tables = model.obs_rates.tables * factor
    return CmomModel(model.hidden, model.obs_space, TargetRateFamily.state_dependent(tables), model.reference,
                     model.init_obs)


def check_bayes_factor(rng: RngStream, replications: int = 100, particles: int = 1000) -> bool:
    """Data simulated from A favours A over a model with 25% lower observation rates."""
    model_a = two_state_benchmark(coupling=3.)
    model_b = _perturbed(model_a, 0.75)
    wins = {'direct': 0, 'particle': 0}
    for rep in range(replications):
        _, y_path = simulate_joint_target(model_a, 10., rng.substream(0, rep))
        comparison = compare_models([model_a, model_b], y_path)
        wins['direct'] += comparison.log_factors[0][1] > 0
        run_a, _ = run_particle_filter(model_a, y_path, particles, rng.substream(1, rep))
        run_b, _ = run_particle_filter(model_b, y_path, particles, rng.substream(2, rep))
        wins['particle'] += log_bayes_factor(run_a, run_b) > 0
    threshold = math.ceil(0.7 * replications)
    verdicts = {engine: count >= threshold for engine, count in wins.items()}
    return _report("bayes factor discrimination", verdicts['direct'] and verdicts['particle'],
                   f"A preferred in {wins['direct']} (direct) and {wins['particle']} (particle) "
                   f"of {replications} replications")


def _cli(args: tp.List[str], cwd: Path) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, '-m', 'ratechange'] + args, cwd=cwd, capture_output=True, text=True)


def check_determinism(rng: RngStream) -> bool:
    """Every command gives byte identical outputs for the same seed, whatever the thread count."""
    model = two_state_benchmark()
    chain = {'schema_version': 1, 'kind': 'chain', 'states': ['a', 'b'], 'reference': [[0, 2], [2, 0]],
             'target': {'breakpoints': [1.], 'rates': [[[0, 1], [2, 0]], [[0, 2], [1, 0]]]}, 'init': [1, 0]}
    cmom = {'schema_version': 1, 'kind': 'cmom', 'hidden_states': ['0', '1'], 'obs_states': ['0', '1'],
            'lambda': [[0, 1], [1, 0]], 'mu': [0.5, 0.5], 'gamma_bar': [[0, 1.5], [1.5, 0]],
            'gamma': [[[0, 2], [1, 0]], [[0, 1], [2, 0]]], 'init_obs': [0.5, 0.5]}
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / 'chain.json').write_text(json.dumps(chain))
        (root / 'cmom.json').write_text(json.dumps(cmom))
        _, y_path = simulate_joint_target(model, 5., rng)
        with open(root / 'obs.csv', 'w') as fo:
            write_path(fo, y_path, model.obs_space)
        commands = {
            'simulate': ['simulate', '--model', 'chain.json', '--law', 'reference', '--T', '5', '--count', '3',
                         '--seed', '7', '-o', 'sim.csv'],
            'reject-sample': ['reject-sample', '--model', 'chain.json', '--T', '2', '--count', '3',
                              '--seed', '7', '-o', 'rej.csv'],
            'joint': ['simulate', '--model', 'cmom.json', '--law', 'joint-target', '--T', '5',
                      '--seed', '7', '-o', 'joint.csv'],
            'particle': ['filter', '--model', 'cmom.json', '--obs', 'obs.csv', '--engine', 'particle',
                         '--N', '2000', '--r', '1.5', '--seed', '7', '-o', 'particle.csv'],
            'direct': ['filter', '--model', 'cmom.json', '--obs', 'obs.csv', '--engine', 'direct',
                       '--grid', '0.5', '--seed', '7', '-o', 'direct.csv', '--format', 'jsonl'],
            'compare': ['compare', '--models', 'cmom.json', 'cmom.json', '--obs', 'obs.csv', '-o', 'cmp.json'],
            'weight': ['weight', '--model', 'chain.json', '--path', 'sim_0.csv'],
            'validate': ['validate', '--model', 'cmom.json'],
        }
        for name, args in commands.items():
            outputs = []
            for threads in (1, 8, 1):
                run = root / f'{name}_{threads}_{len(outputs)}'
                run.mkdir()
                for source in ('chain.json', 'cmom.json', 'obs.csv'):
                    (run / source).write_bytes((root / source).read_bytes())
                if name == 'weight':
                    first = _cli(commands['simulate'], run)
                    assert first.returncode == 0, first.stderr
                result = _cli(args + ['--threads', str(threads)], run)
                if result.returncode != 0:
                    ok &= _report(f"determinism {name}", False, result.stderr.strip())
                    break
                outputs.append((run, result.stdout))
            else:
                (first_run, first_out), *others = outputs
                produced = sorted(p.name for p in first_run.iterdir())
                same = all(out == first_out and
                           filecmp.cmpfiles(first_run, run, produced, shallow=False)[1:] == ([], [])
                           for run, out in others)
                ok &= _report(f"determinism {name}", same, f"{len(produced)} files compared")
    return ok


CHECKS = {
    'martingale': check_martingale,
    'acceptance-rate': check_acceptance_rate,
    'rejection-law': check_rejection_law,
    'reduction': check_reduction,
    'cross-oracles': check_cross_oracles,
    'branching': check_branching_unbiased,
    'slope': check_convergence_slope,
    'bayes-factor': check_bayes_factor,
    'determinism': check_determinism,
}


def main():
    parser = argparse.ArgumentParser('acceptance', description='Full scale acceptance checks.')
    parser.add_argument('--only', nargs='+', choices=list(CHECKS), help='Run only these checks.')
    parser.add_argument('--threads', type=int, default=1)
    args = parser.parse_args()
    set_threads(args.threads)
    failed = []
    for index, (name, check) in enumerate(CHECKS.items()):
        if args.only and name not in args.only:
            continue
        timer = _timer()
        if not check(RngStream(SEED, index)):
            failed.append(name)
        print(f"  {name} took {timer():.1f}s")
    if failed:
        print("Failed:", ", ".join(failed))
        sys.exit(1)


if __name__ == '__main__':
    main()

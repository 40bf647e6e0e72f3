# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Brute force reference computations used to check the samplers and filters.

Everything here runs on numpy / scipy and shares no numerical kernel with the
torch based filters. Performance is not a concern.
"""

from dataclasses import dataclass
import logging
import math
import typing as tp

import numpy as np
from scipy.linalg import expm

from .chains import ChainPath
from .errors import NumericalError
from .models import AnyModel, HiddenChain, as_cmom, joint_log_weight
from .rng import RngStream

logger = logging.getLogger(__name__)

# Entries of an Euler solution larger than this mean the step is too large.
EULER_LIMIT = 1e12


@dataclass
class RateEstimate:
    """Maximum likelihood rates `counts / exposure` with Poisson standard errors.
    Rows of states that were never visited are flagged and left at 0."""
    rates: np.ndarray
    stderr: np.ndarray
    exposure: np.ndarray
    counts: np.ndarray

    @property
    def flagged(self) -> tp.List[int]:
        return [int(i) for i in np.flatnonzero(self.exposure <= 0)]


def _estimate(counts: np.ndarray, exposure: np.ndarray) -> RateEstimate:
    visited = exposure > 0
    rates = np.zeros_like(counts)
    stderr = np.zeros_like(counts)
    rates[visited] = counts[visited] / exposure[visited, None]
    stderr[visited] = np.sqrt(counts[visited]) / exposure[visited, None]
    if not visited.all():
        logger.debug("States %s never visited, rates not estimated.", np.flatnonzero(~visited).tolist())
    return RateEstimate(rates, stderr, exposure, counts)


def _accumulate(path: ChainPath, counts: np.ndarray, exposure: np.ndarray,
                bucket: tp.Callable[[float], int], window: tp.Tuple[float, float]):
    start, end = window
    end = min(end, path.horizon)
    cuts = {start, end}
    cuts.update(c for c in path.jump_times if start < c < end)
    cuts.update(c for c in getattr(bucket, "cuts", ()) if start < c < end)
    ordered = sorted(cuts)
    for a, b in zip(ordered, ordered[1:]):
        exposure[bucket(a), path.state_at(a)] += b - a
    for n in path.jumps_between(start, end):
        s = path.jump_times[n - 1]
        before, after = path.state_after(n - 1), path.state_after(n)
        if before != after:
            counts[bucket(s), before, after] += 1


def empirical_generator(paths: tp.Sequence[ChainPath], n_states: int,
                        window: tp.Optional[tp.Tuple[float, float]] = None) -> RateEstimate:
    """Estimate the jump rates of a time homogeneous chain from observed paths,
    optionally restricted to the time window `(start, end]`."""
    if not paths:
        raise ValueError("At least one path is needed.")
    counts = np.zeros((1, n_states, n_states))
    exposure = np.zeros((1, n_states))
    for path in paths:
        _accumulate(path, counts, exposure, lambda s: 0, window or (0., path.horizon))
    return _estimate(counts[0], exposure[0])


class _HiddenBucket:
    def __init__(self, hidden: ChainPath):
        self.hidden = hidden
        self.cuts = hidden.jump_times

    def __call__(self, s: float) -> int:
        return self.hidden.state_at(s)


def conditional_empirical_generator(obs_paths: tp.Sequence[ChainPath], hidden_paths: tp.Sequence[ChainPath],
                                    n_hidden: int, n_states: tp.Optional[int] = None) -> tp.List[RateEstimate]:
    """Observation rates estimated separately for each hidden state, transitions and
    exposure being attributed to the hidden state occupied at the time."""
    if len(obs_paths) != len(hidden_paths) or not obs_paths:
        raise ValueError("Need as many hidden paths as observation paths, and at least one.")
    if n_states is None:
        n_states = 1 + max(max((p.initial_state, *p.jump_targets)) for p in obs_paths)
    counts = np.zeros((n_hidden, n_states, n_states))
    exposure = np.zeros((n_hidden, n_states))
    for obs, hidden in zip(obs_paths, hidden_paths):
        _accumulate(obs, counts, exposure, _HiddenBucket(hidden), (0., obs.horizon))
    return [_estimate(counts[x], exposure[x]) for x in range(n_hidden)]


def dense_expm(q: tp.Any, t: float) -> np.ndarray:
    """exp(tQ) by Pade scaling and squaring."""
    out = expm(t * np.asarray(q, dtype=np.float64))
    if not np.isfinite(out).all():
        raise NumericalError(f"Matrix exponential overflowed at t={t}, reduce t or scale Q.")
    return out


def _drift(model: AnyModel, y: int) -> np.ndarray:
    cmom = as_cmom(model)
    assert isinstance(cmom.hidden, HiddenChain)
    lam = cmom.hidden.rates.rates.numpy()
    generator = lam - np.diag(lam.sum(1))
    tables = cmom.obs_rates.tables.numpy()  # type: ignore
    gap = cmom.reference.leave(y) - tables[:, y, :].sum(-1)
    return generator.T + np.diag(gap)


def euler_reference_filter(model: AnyModel, y_path: ChainPath, step: float,
                           grid: tp.Sequence[float] = ()) -> tp.List[tp.Tuple[float, np.ndarray]]:
    """Unnormalized filter by explicit Euler integration between observation jumps.

    Returns `(t, sigma)` at every jump, grid point and at the horizon. Between two
    records, the `k` Euler steps of size `dt / k` are applied as the matrix power
    `(I + dt / k * D) ** k`.
    """
    cmom = as_cmom(model)
    assert isinstance(cmom.hidden, HiddenChain), "Euler filter needs a finite hidden chain"
    sigma = np.asarray(cmom.hidden.mu, dtype=np.float64)
    eye = np.eye(len(sigma))
    events = sorted({*y_path.jump_times, *(g for g in grid if 0 < g <= y_path.horizon), y_path.horizon})
    records = [(0., sigma.copy())]
    t = 0.
    for event in events:
        y = y_path.state_at(t)
        if event > t:
            steps = max(1, int(math.ceil((event - t) / step - 1e-9)))
            h = (event - t) / steps
            sigma = np.linalg.matrix_power(eye + h * _drift(cmom, y), steps) @ sigma
            if not np.isfinite(sigma).all() or np.abs(sigma).max() > EULER_LIMIT:
                raise NumericalError(f"Euler integration unstable at t={event} with step {h}.")
        count = y_path.jump_count(event) - y_path.jump_count(t)
        if count:
            after = y_path.state_at(event)
            tables = cmom.obs_rates.tables.numpy()  # type: ignore
            sigma = sigma * tables[:, y, after] / cmom.reference.rate(y, after)
        records.append((event, sigma.copy()))
        t = event
    return records


def conditional_mc_sigma(model: AnyModel, y_path: ChainPath, fn: tp.Any, M: int,
                         rng: RngStream) -> tp.Tuple[float, float]:
    """Estimate sigma_T(f) for a fixed observation path by averaging the weights of `M`
    independent hidden paths, `fn` being a callable or a vector over hidden states."""
    cmom = as_cmom(model)
    values = fn if callable(fn) else (lambda x, table=list(fn): table[x])
    terms = []
    for index in range(M):
        x_path = cmom.hidden.simulate(y_path.horizon, rng.substream(index))
        terms.append(joint_log_weight(x_path, y_path, cmom).value * values(x_path.final_state))
    mean = math.fsum(terms) / M
    variance = math.fsum((term - mean) ** 2 for term in terms) / max(1, M - 1)
    return mean, math.sqrt(variance / M)


def test():
    from .chains import RateMatrix
    from .sampling import simulate_reference_chain
    from .models import two_state_benchmark

    rates = RateMatrix([[0., 1.], [2., 0.]])
    paths = [simulate_reference_chain(rates, [1., 0.], 100., RngStream(3, k)) for k in range(30)]
    estimate = empirical_generator(paths, 2)
    assert abs(estimate.rates[0, 1] - 1.) < 4 * estimate.stderr[0, 1]
    assert abs(estimate.rates[1, 0] - 2.) < 4 * estimate.stderr[1, 0]
    assert estimate.rates[0, 0] == 0 and not estimate.flagged
    assert abs(estimate.exposure.sum() - 3000.) < 1e-8
    still = empirical_generator([ChainPath(0, horizon=2.)], 2)
    assert still.flagged == [1] and (still.counts == 0).all()
    windowed = empirical_generator(paths, 2, window=(50., 100.))
    assert abs(windowed.exposure.sum() - 1500.) < 1e-8

    q = np.array([[-1., 1.], [1., -1.]])
    assert np.allclose(dense_expm(q, 0.), np.eye(2), atol=0)
    t = 0.7
    closed = np.array([[1 + math.exp(-2 * t), 1 - math.exp(-2 * t)],
                       [1 - math.exp(-2 * t), 1 + math.exp(-2 * t)]]) / 2
    assert np.abs(dense_expm(q, t) - closed).max() < 1e-12
    assert np.abs(dense_expm(q, 3.).sum(1) - 1).max() < 1e-12

    model = two_state_benchmark(coupling=0.)
    y_path = ChainPath(0, (0.4, 1.1), (1, 0), horizon=1.5)
    records = euler_reference_filter(model, y_path, 1e-3)
    assert [r[0] for r in records] == [0., 0.4, 1.1, 1.5]
    # No coupling: the weights stay at 1 and sigma is the prior law of X.
    for _, sigma in records:
        assert abs(sigma.sum() - 1) < 1e-12 and np.abs(sigma - 0.5).max() < 1e-12
    mean, stderr = conditional_mc_sigma(model, y_path, [1., 1.], 50, RngStream(1, 0))
    assert abs(mean - 1) < 1e-12 and stderr < 1e-12


if __name__ == '__main__':
    test()

# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Weighted and residual branching particle filters.

Particles are independent copies of the hidden signal. Between two observation
transitions each particle evolves under the signal law and accumulates the
likelihood weight of the observed segment. At each observation transition
particles whose weight (plus a small uniform smoothing term) leaves
`(mean / r, r * mean)` are replaced by `floor(w / mean)` or one more offspring
carrying the mean weight. Estimates always divide by the initial particle
count.
"""

from dataclasses import dataclass, replace
import logging
import math
import typing as tp
import warnings

import torch

from ..chains import ChainPath
from ..errors import DegenerateFilter, DomainError, ModelError, UsageError
from ..models import AnyModel, CmomModel, HiddenChain, as_cmom
from ..rng import RngStream
from ..utils import path_checksum
from .records import GRID, JUMP, FilterRecord

logger = logging.getLogger(__name__)

Functional = tp.Union[tp.Sequence[float], torch.Tensor, tp.Callable[[int], float]]


@dataclass
class Ensemble:
    """Particle system. The true log weight of particle i is
    `log_weights[i] + total_log_offset`.

    Args:
        states (torch.Tensor): long tensor of hidden states.
        log_weights (torch.Tensor): float64 log weights relative to `total_log_offset`.
        n0 (int): initial number of particles N, used to normalize every estimate.
        t (float): current time.
        total_log_offset (float): common log factor of all the weights.
        observation_hash (str): digest of the observation path being filtered.
    """
    states: torch.Tensor
    log_weights: torch.Tensor
    n0: int
    t: float = 0.
    total_log_offset: float = 0.
    observation_hash: str = ''

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class BranchingConfig:
    """Resampling parameters.

    Args:
        r (float): resampling parameter, > 1. `math.inf` never branches (weighted filter).
        v_halfwidth (float): smoothing uniforms are drawn on `[-v_halfwidth, v_halfwidth]`.
        v_scale (str): `absolute` adds V to the weight as is, `relative` multiplies it
            by the average weight first.
    """
    r: float = 2.
    v_halfwidth: float = 0.1
    v_scale: str = 'absolute'

    def __post_init__(self):
        if not self.r > 1:
            raise DomainError(f"r must be > 1, got {self.r}.")
        if not self.v_halfwidth >= 0:
            raise DomainError(f"v_halfwidth must be >= 0, got {self.v_halfwidth}.")
        if self.v_scale not in ('absolute', 'relative'):
            raise DomainError(f"v_scale must be 'absolute' or 'relative', got {self.v_scale}.")

    @property
    def branching(self) -> bool:
        return math.isfinite(self.r)


def init_ensemble(model: AnyModel, N: int, rng: RngStream, observation_hash: str = '') -> Ensemble:
    """N independent draws from the initial hidden law, all with weight 1."""
    if N < 1:
        raise DomainError(f"Need at least one particle, got {N}.")
    hidden = as_cmom(model).hidden
    if isinstance(hidden, HiddenChain):
        cumulative = torch.tensor(hidden.mu, dtype=torch.float64).cumsum(0)
        draws = rng.uniforms(N) * cumulative[-1]
        states = torch.searchsorted(cumulative, draws, right=True).clamp_(max=hidden.n_states - 1)
    else:
        states = torch.tensor([hidden.initial(rng) for _ in range(N)], dtype=torch.long)
    return Ensemble(states, torch.zeros(N, dtype=torch.float64), N, observation_hash=observation_hash)


def _evolve_chain(hidden: HiddenChain, states: torch.Tensor, gap: torch.Tensor, start: float, end: float,
                  rng: RngStream) -> tp.Tuple[torch.Tensor, torch.Tensor]:
    # Vectorized exact simulation, the weight integral being split at every particle jump.
    leave = hidden.rates.leave_rates
    cumulative = hidden.rates.rates.cumsum(-1)
    states = states.clone()
    integral = torch.zeros(len(states), dtype=torch.float64)
    clock = torch.full((len(states),), start, dtype=torch.float64)
    active = torch.arange(len(states))
    while len(active):
        current = states[active]
        rates = leave[current]
        draws = -torch.log1p(-rng.uniforms(len(active)))
        holding = torch.where(rates > 0, draws / rates, torch.full_like(draws, math.inf))
        arrival = clock[active] + holding
        done = arrival >= end
        stop = torch.where(done, torch.full_like(arrival, end), arrival)
        integral[active] += gap[current] * (stop - clock[active])
        jumping = active[~done]
        if len(jumping):
            rows = cumulative[states[jumping]]
            draws = rng.uniforms(len(jumping)) * rows[:, -1]
            targets = torch.searchsorted(rows, draws[:, None], right=True)[:, 0]
            states[jumping] = targets.clamp_(max=hidden.n_states - 1)
            clock[jumping] = arrival[~done]
        active = jumping
    return states, integral


def _evolve_generic(model: CmomModel, states: torch.Tensor, gap: torch.Tensor, start: float, end: float,
                    rng: RngStream) -> tp.Tuple[torch.Tensor, torch.Tensor]:
    out = states.clone()
    integral = torch.zeros(len(states), dtype=torch.float64)
    gaps = gap.tolist()
    for index, state in enumerate(states.tolist()):
        times, targets = model.hidden.advance(state, start, end, rng)
        terms = []
        clock = start
        for time, target in zip(times, targets):
            terms.append(gaps[state] * (time - clock))
            clock, state = time, target
        terms.append(gaps[state] * (end - clock))
        integral[index] = math.fsum(terms)
        out[index] = state
    return out, integral


def evolve(ensemble: Ensemble, model: AnyModel, y_path: ChainPath, t_next: float, rng: RngStream) -> Ensemble:
    """Move every particle to `t_next` and add the weight of the observation segment
    `[ensemble.t, t_next]`, which must end with the only transition of the segment
    (or at the horizon, without transition)."""
    cmom = as_cmom(model)
    start = ensemble.t
    jumps = y_path.jumps_between(start, t_next)
    if not t_next > start:
        raise UsageError(f"Cannot evolve from {start} to {t_next}.")
    ends_with_jump = len(jumps) == 1 and y_path.jump_times[jumps[0] - 1] == t_next
    tail = not jumps and t_next == y_path.horizon
    if not (ends_with_jump or tail):
        raise UsageError(f"Observation segment ({start}, {t_next}] must contain exactly one transition, "
                         f"at its end, found {len(jumps)}.")
    y = y_path.state_at(start)
    gap = cmom.leave_gap()[:, y]
    if isinstance(cmom.hidden, HiddenChain):
        states, integral = _evolve_chain(cmom.hidden, ensemble.states, gap, start, t_next, rng)
    else:
        states, integral = _evolve_generic(cmom, ensemble.states, gap, start, t_next, rng)
    log_weights = ensemble.log_weights + integral
    if ends_with_jump:
        factor = cmom.jump_factor(y, y_path.state_at(t_next))
        log_weights = log_weights + factor[states].log()
    alive = log_weights > -math.inf
    if not alive.all():
        logger.debug("Dropping %d particles with zero weight at t=%g.", int((~alive).sum()), t_next)
        states, log_weights = states[alive], log_weights[alive]
    if not len(states):
        raise DegenerateFilter(f"Every particle has weight 0 at t={t_next}, the observation is "
                               "impossible under the model.")
    return replace(ensemble, states=states, log_weights=log_weights, t=t_next)


def resample_residual(ensemble: Ensemble, config: BranchingConfig, rng: RngStream) -> Ensemble:
    """Residual branching at the current time, see the module docstring."""
    if not config.branching or not len(ensemble):
        return ensemble
    top = float(ensemble.log_weights.max())
    if not math.isfinite(top):
        raise DegenerateFilter("Non finite particle weights.", ensemble.log_weights.tolist())
    scale = ensemble.total_log_offset + top
    weights = (ensemble.log_weights - top).exp()
    average = float(weights.sum()) / ensemble.n0
    smoothing = rng.uniforms(len(ensemble), -config.v_halfwidth, config.v_halfwidth)
    if config.v_scale == 'relative':
        smoothing = smoothing * average
    elif config.v_halfwidth > 0:
        # V lives on the true weight scale, the weights here are divided by exp(scale).
        shrink = math.exp(min(-scale, 700.))
        if config.v_halfwidth * shrink >= average * (1 - 1 / config.r):
            warnings.warn(f"Smoothing half width {config.v_halfwidth:.3g} is not small against the "
                          f"average weight {average / shrink:.3g} at t={ensemble.t}, branching is driven "
                          "by the smoothing noise. Use v_scale='relative' or a smaller v_halfwidth.")
        smoothing = smoothing * shrink
    smoothed = weights + smoothing
    trigger = (smoothed <= average / config.r) | (smoothed >= config.r * average)
    ratio = weights / average
    whole = ratio.floor()
    bernoulli = (rng.uniforms(len(ensemble)) < ratio - whole).to(whole.dtype)
    counts = torch.where(trigger, whole + bernoulli, torch.ones_like(whole)).long()
    if int(counts.sum()) == 0:
        raise DegenerateFilter(f"Branching left no particle at t={ensemble.t}.",
                               (ensemble.log_weights + ensemble.total_log_offset).tolist())
    new_weights = torch.where(trigger, torch.full_like(weights, average), weights).log()
    logger.debug("Branching at t=%g: %d triggered, %d -> %d particles.", ensemble.t,
                 int(trigger.sum()), len(ensemble), int(counts.sum()))
    return replace(ensemble,
                   states=ensemble.states.repeat_interleave(counts),
                   log_weights=new_weights.repeat_interleave(counts),
                   total_log_offset=scale)


def _functional_values(fn: Functional, states: torch.Tensor) -> torch.Tensor:
    if callable(fn):
        return torch.tensor([float(fn(int(s))) for s in states], dtype=torch.float64)
    return torch.as_tensor(fn, dtype=torch.float64)[states]


def log_unnormalized_total(ensemble: Ensemble) -> float:
    """log S^N(1)."""
    if not len(ensemble):
        return -math.inf
    return ensemble.total_log_offset + float(torch.logsumexp(ensemble.log_weights, 0)) - math.log(ensemble.n0)


def unnormalized_estimate(ensemble: Ensemble, fn: Functional) -> float:
    """S^N(f) = (1 / N) sum_i A^i f(X^i), N being the initial particle count."""
    if not len(ensemble):
        return 0.
    top = float(ensemble.log_weights.max())
    values = _functional_values(fn, ensemble.states)
    scaled = float(((ensemble.log_weights - top).exp() * values).sum()) / ensemble.n0
    return scaled * math.exp(ensemble.total_log_offset + top)


def normalized_estimate(ensemble: Ensemble, fn: Functional) -> float:
    if not len(ensemble) or not math.isfinite(float(ensemble.log_weights.max())):
        raise DegenerateFilter("S^N(1) = 0, the normalized filter is undefined.")
    weights = torch.softmax(ensemble.log_weights, 0)
    return float((weights * _functional_values(fn, ensemble.states)).sum())


def scaled_marginals(ensemble: Ensemble, n_states: int) -> tp.Tuple[torch.Tensor, float]:
    """`(scaled, log_scale)` with `scaled[i] * exp(log_scale) = S^N(1{X = i})`."""
    top = float(ensemble.log_weights.max())
    scaled = torch.zeros(n_states, dtype=torch.float64)
    scaled.index_add_(0, ensemble.states, (ensemble.log_weights - top).exp())
    return scaled / ensemble.n0, ensemble.total_log_offset + top


def log_bayes_factor(run_a: Ensemble, run_b: Ensemble) -> float:
    if run_a.observation_hash != run_b.observation_hash:
        raise UsageError("Bayes factors need both runs to filter the same observation path.")
    return log_unnormalized_total(run_a) - log_unnormalized_total(run_b)


def bayes_factor(run_a: Ensemble, run_b: Ensemble) -> float:
    """S^{N,a}(1) / S^{N,b}(1)."""
    return math.exp(log_bayes_factor(run_a, run_b))


def run_particle_filter(model: AnyModel, y_path: ChainPath, N: int, rng: RngStream,
                        config: BranchingConfig = BranchingConfig()) -> tp.Tuple[Ensemble, tp.List[FilterRecord]]:
    """Filter `y_path` with `N` particles, resampling at every observation transition.

    The substream `(0,)` of `rng` draws the initial particles, then generation n uses
    `(n, 0)` to evolve and `(n, 1)` to branch. Returns the final ensemble and one
    record at time 0, at each transition time and at the horizon.
    """
    cmom = as_cmom(model)
    report = cmom.validate()
    if not report.ok:
        raise ModelError(f"Invalid model:\n{report}")
    ensemble = init_ensemble(cmom, N, rng.substream(0), observation_hash=path_checksum(y_path))

    def record(event: str) -> FilterRecord:
        scaled, log_scale = scaled_marginals(ensemble, cmom.n_hidden)
        return FilterRecord.from_scaled(ensemble.t, event, scaled, log_scale, len(ensemble))

    records = [record(GRID)]
    stops = list(y_path.jump_times)
    if not stops or stops[-1] < y_path.horizon:
        stops.append(y_path.horizon)
    for generation, stop in enumerate(stops, start=1):
        if stop == 0.:
            continue
        ensemble = evolve(ensemble, cmom, y_path, stop, rng.substream(generation, 0))
        is_jump = generation <= y_path.num_jumps
        if is_jump:
            ensemble = resample_residual(ensemble, config, rng.substream(generation, 1))
        records.append(record(JUMP if is_jump else GRID))
    return ensemble, records


def test():
    from ..models import CthmmModel, two_state_benchmark
    from ..chains import StateSpace

    model = two_state_benchmark()
    ensemble = init_ensemble(model, 1, RngStream(0, 0))
    assert len(ensemble) == 1 and unnormalized_estimate(ensemble, [1., 1.]) == 1.

    n = 20000
    ensemble = init_ensemble(model, n, RngStream(1, 0))
    share = float((ensemble.states == 0).double().mean())
    assert abs(share - 0.5) < 4 * math.sqrt(0.25 / n), share
    assert torch.equal(init_ensemble(model, 50, RngStream(1, 0)).states, ensemble.states[:50])

    # One CTHMM step, a single particle sitting in the only hidden state.
    cthmm = CthmmModel(HiddenChain([[0.]], [1.]), StateSpace.of_size(2), [2.], [[0.75, 0.25]], 1.,
                       [0.5, 0.5], [1., 0.])
    y_path = ChainPath(0, (1.,), (1,), horizon=1., updates=True)
    single = evolve(init_ensemble(cthmm, 1, RngStream(0, 0)), cthmm, y_path, 1., RngStream(0, 1))
    assert abs(float(single.log_weights[0]) + 1) < 1e-12
    try:
        evolve(init_ensemble(model, 3, RngStream(0, 0)), model, ChainPath(0, (0.5, 1.), (1, 0), horizon=2.), 1.,
               RngStream(0, 1))
    except UsageError:
        pass
    else:
        assert False, "segments with two transitions must be rejected"

    # Offspring counts of a particle at 2.5 times the average.
    weights = torch.tensor([2.5, 0.5, 0.5, 0.5], dtype=torch.float64).log()
    fixed = Ensemble(torch.tensor([0, 1, 1, 1]), weights, n0=4)
    config = BranchingConfig(r=1.5, v_halfwidth=0.)
    trials = 4000
    first_counts = []
    estimates = []
    for k in range(trials):
        out = resample_residual(fixed, config, RngStream(5, k))
        first_counts.append(int((out.states == 0).sum()))
        estimates.append(unnormalized_estimate(out, [1., 0.]))
    assert set(first_counts) <= {2, 3}
    mean = sum(first_counts) / trials
    assert abs(mean - 2.5) < 4 * 0.5 / math.sqrt(trials), mean
    # Branching is unbiased, S^N(1{X = 0}) = 2.5 / 4 before resampling.
    assert abs(sum(estimates) / trials - 0.625) < 4 * 0.125 / math.sqrt(trials)

    exact = Ensemble(torch.tensor([0, 1, 1]), torch.tensor([3., 0., 0.], dtype=torch.float64).log(), n0=3)
    out = resample_residual(exact, BranchingConfig(r=1.5, v_halfwidth=0.), RngStream(0, 0))
    assert int((out.states == 0).sum()) == 3 and abs(unnormalized_estimate(out, [1., 1.]) - 1.) < 1e-12
    flat = Ensemble(torch.tensor([0, 1]), torch.zeros(2, dtype=torch.float64), n0=2)
    assert torch.equal(resample_residual(flat, BranchingConfig(r=2.), RngStream(0, 0)).states, flat.states)
    assert resample_residual(exact, BranchingConfig(r=math.inf), RngStream(0, 0)) is exact

    partition = sum(normalized_estimate(fixed, [1. if s == x else 0. for s in range(2)]) for x in range(2))
    assert abs(partition - 1) < 1e-12

    # An absolute half width that swamps tiny weights is reported.
    parity = torch.arange(1000) % 2
    tiny = Ensemble(parity, 0.1 * (1 - 2 * parity).double(), n0=1000, total_log_offset=-20.)
    absolute = BranchingConfig(r=2., v_halfwidth=0.1)
    relative = replace(absolute, v_scale='relative')
    for ensemble, config, expected in [(tiny, absolute, True), (tiny, relative, False),
                                       (replace(tiny, total_log_offset=0.), absolute, False)]:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            resample_residual(ensemble, config, RngStream(0, 0))
        assert any('Smoothing' in str(w.message) for w in caught) == expected, config

    # Any signal simulator goes through the generic evolution, which agrees with the direct filter.
    from ..models import SignalSimulator
    from .direct import run_direct_filter

    class Opaque(SignalSimulator):
        def __init__(self, chain: HiddenChain):
            self.chain = chain
            self.n_states = chain.n_states

        def initial(self, rng: RngStream) -> int:
            return self.chain.initial(rng)

        def advance(self, state, start, end, rng):
            return self.chain.advance(state, start, end, rng)

    assert isinstance(model.hidden, HiddenChain)
    opaque = replace(model, hidden=Opaque(model.hidden))
    y_path = ChainPath(0, (0.3, 0.9, 1.4), (1, 0, 1), horizon=2.)
    _, generic = run_particle_filter(opaque, y_path, 5000, RngStream(12, 0), BranchingConfig(r=2.))
    direct = run_direct_filter(model, y_path)
    assert [r.t for r in generic] == [r.t for r in direct]
    for ours, theirs in zip(generic, direct):
        assert max(abs(a - b) for a, b in zip(ours.pi, theirs.pi)) < 0.05, (ours.t, ours.pi, theirs.pi)

    run_a, records = run_particle_filter(model, y_path, 200, RngStream(3, 0))
    run_b, _ = run_particle_filter(model, y_path, 200, RngStream(3, 0))
    assert bayes_factor(run_a, run_b) == 1.
    assert [r.event for r in records] == ['grid', 'jump', 'jump', 'jump', 'grid']
    assert all(abs(sum(r.pi) - 1) < 1e-12 for r in records)
    try:
        bayes_factor(run_a, replace(run_b, observation_hash='other'))
    except UsageError:
        pass
    else:
        assert False


if __name__ == '__main__':
    test()

# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Reference chain simulation, likelihood weights and rate change samplers.

Weights are always handled in log domain: `log_a` is the log of the
likelihood ratio A_t of the target law against the reference law, restricted
to the observation of the path up to time t.
"""

from dataclasses import dataclass
import itertools
import logging
import math
import typing as tp
import warnings

import torch

from .chains import ChainPath, RateMatrix, TargetRateFamily
from .errors import BoundViolation, BudgetError, DomainError, ModelError
from .parallel import map_ordered
from .rng import RngStream

logger = logging.getLogger(__name__)

Driver = tp.Optional[ChainPath]
PROBABILITY_TOL = 1e-12
# Relative slack when comparing an observed weight with its certified bound.
BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class LogWeight:
    log_a: float
    t: float

    @property
    def value(self) -> float:
        return math.exp(self.log_a)


def check_probability(vector: tp.Sequence[float], size: int, name: str = "init") -> tp.List[float]:
    probs = [float(p) for p in vector]
    if len(probs) != size:
        raise DomainError(f"{name} has {len(probs)} entries, expected {size}.")
    if any(p < 0 or not math.isfinite(p) for p in probs):
        raise DomainError(f"{name} must have finite non-negative entries, got {probs}.")
    if abs(math.fsum(probs) - 1) > PROBABILITY_TOL:
        raise DomainError(f"{name} must sum to 1, got {math.fsum(probs)}.")
    return probs


def simulate_from(rates: RateMatrix, state: int, start: float, horizon: float, rng: RngStream,
                  max_jumps: tp.Optional[int] = None) -> tp.Tuple[tp.List[float], tp.List[int]]:
    times: tp.List[float] = []
    targets: tp.List[int] = []
    t = start
    while max_jumps is None or len(times) < max_jumps:
        t += rng.exponential(rates.leave(state))
        if t > horizon:
            break
        state = rng.choice(rates.cumulative(state))
        times.append(t)
        targets.append(state)
    return times, targets


def simulate_reference_chain(rates: RateMatrix, init: tp.Sequence[float], horizon: float,
                             rng: RngStream) -> ChainPath:
    """Exact simulation of the chain with constant rates `rates` on `[0, horizon]`.

    Holding times are exponential with the leaving rate of the current state and
    the next state is drawn proportionally to the rates out of it.
    """
    probs = check_probability(init, rates.n_states)
    if horizon < 0:
        raise DomainError(f"Horizon must be non-negative, got {horizon}.")
    state = rng.choice(list(itertools.accumulate(probs)))
    times, targets = simulate_from(rates, state, 0., horizon, rng)
    return ChainPath(state, times, targets, horizon, updates=rates.self_updates)


def _check_driver(target: TargetRateFamily, driver: Driver):
    if target.kind == TargetRateFamily.STATE_DEPENDENT:
        if driver is None:
            raise ModelError("State dependent target rates need a hidden path as driver.")
        if driver.initial_state >= target.n_tables or any(s >= target.n_tables for s in driver.jump_targets):
            raise ModelError(f"Hidden path visits a state without target rates ({target.n_tables} tables).")
    elif driver is not None:
        raise ModelError("Only state dependent target rates accept a hidden driver path.")


def _log_weight_between(path: ChainPath, target: TargetRateFamily, reference: RateMatrix,
                        driver: Driver, start: float, end: float) -> float:
    # Integral part, split so the integrand is constant (or smooth) on every piece.
    cuts = {start, end}
    cuts.update(path.jump_times[n - 1] for n in path.jumps_between(start, end))
    cuts.update(target.breakpoints_between(start, end))
    if driver is not None:
        cuts.update(driver.jump_times[n - 1] for n in driver.jumps_between(start, end))
    cuts_list = sorted(c for c in cuts if start <= c <= end)
    terms = []
    for a, b in zip(cuts_list, cuts_list[1:]):
        y = path.state_at(a)
        if driver is None:
            integral = target.integrate_leave(y, a, b)
        else:
            integral = target.leave(y, driver.state_at(a)) * (b - a)
        terms.append(reference.leave(y) * (b - a) - integral)

    for n in path.jumps_between(start, end):
        s = path.jump_times[n - 1]
        before, after = path.state_after(n - 1), path.state_after(n)
        ref = reference.rate(before, after)
        if ref <= 0:
            raise ModelError(f"Jump {before}->{after} at {s} has reference rate 0, "
                             "the target law is not absolutely continuous.")
        value = target.eval(before, after, s if driver is None else driver.state_at(s))
        if value <= 0:
            return -math.inf
        terms.append(math.log(value / ref))
    return math.fsum(terms)


def log_weight(path: ChainPath, target: TargetRateFamily, reference: RateMatrix,
               driver: Driver = None, t: tp.Optional[float] = None) -> LogWeight:
    """Log likelihood ratio of the target rates against the reference ones for `path` on `[0, t]`.

    Args:
        path (ChainPath): observed path.
        target (TargetRateFamily): target rates, evaluated at time `s` or at the
            hidden state `driver(s)` for state dependent families.
        reference (RateMatrix): reference rates the path is assumed to follow.
        driver (ChainPath or None): hidden path, only for state dependent targets.
        t (float or None): evaluation time, defaults to the path horizon.
    """
    _check_driver(target, driver)
    t = path.horizon if t is None else t
    path.state_at(t)
    if driver is not None:
        driver.state_at(t)
    return LogWeight(_log_weight_between(path, target, reference, driver, 0., t), t)


def incremental_log_weight(prev: LogWeight, path: ChainPath, target: TargetRateFamily,
                           reference: RateMatrix, driver: Driver = None,
                           until: tp.Optional[float] = None) -> LogWeight:
    """Advance `prev` from `prev.t` to `until`, by default the first jump of `path` after
    `prev.t` (or the horizon if there is none)."""
    _check_driver(target, driver)
    if until is None:
        following = path.jumps_between(prev.t, path.horizon)
        until = path.jump_times[following[0] - 1] if following else path.horizon
    if until < prev.t:
        raise DomainError(f"Cannot move a weight backward from {prev.t} to {until}.")
    path.state_at(until)
    if driver is not None:
        driver.state_at(until)
    increment = _log_weight_between(path, target, reference, driver, prev.t, until)
    return LogWeight(prev.log_a + increment, until)


def certified_bound(proposal: RateMatrix, target: TargetRateFamily, duration: float,
                    jumps: tp.Optional[int] = None) -> float:
    """Bound C on the weight of a path of length `duration`.

    Without `jumps` every jump ratio gamma / gammabar must be at most 1 and C only
    accounts for the integral term. With `jumps`, paths are stopped at their
    `jumps`-th jump and each jump may contribute the ratio bound.
    """
    gap = target.sup_gap(proposal)
    ratio = target.sup_jump_ratio(proposal)
    if not math.isfinite(ratio):
        raise ModelError("Jump ratios are not bounded, declare a ratio_bound or fix the dominance.")
    if jumps is None:
        if ratio > 1:
            raise ModelError(f"Jump ratio reaches {ratio} > 1, the weight is not bounded over a "
                             "whole horizon: use segmented rejection.")
        return math.exp(gap * duration)
    return math.exp(gap * duration) * max(ratio, 1.) ** jumps


def _rejection_loop(propose: tp.Callable[[], tp.Tuple[ChainPath, float]], bound_c: float,
                    rng: RngStream, max_attempts: int, what: str) -> tp.Tuple[ChainPath, int]:
    if not bound_c >= 1 or not math.isfinite(bound_c):
        raise ModelError(f"Rejection bound must be a finite number >= 1, got {bound_c}.")
    if math.log(bound_c) > 50:
        warnings.warn(f"Rejection bound {bound_c:.3g} is very loose, expect few acceptances.")
    accept_sum = 0.
    for attempt in range(1, max_attempts + 1):
        path, log_a = propose()
        weight = math.exp(log_a)
        if weight > bound_c * (1 + BOUND_SLACK):
            raise BoundViolation(f"Observed weight {weight} above the bound {bound_c} for {what}.",
                                 value=weight, bound=bound_c)
        accept_sum += weight / bound_c
        if rng.uniform() * bound_c <= weight:
            logger.info("Accepted %s after %d attempts.", what, attempt)
            return path, attempt
    estimate = accept_sum / max_attempts
    raise BudgetError(f"No {what} accepted after {max_attempts} attempts, estimated acceptance "
                      f"probability {estimate:.3g}.", attempts=max_attempts, estimate=estimate)


def rejection_sample(proposal: RateMatrix, target: TargetRateFamily, bound_c: float,
                     init: tp.Sequence[float], horizon: float, rng: RngStream,
                     max_attempts: int = 10**6) -> tp.Tuple[ChainPath, int]:
    """Von Neumann rejection: draw a proposal path Y and U uniform on [0, C] and accept
    when U <= A_T(Y). Returns the accepted path and the number of attempts.

    `bound_c` must bound A_T for every proposal path, see `certified_bound`. A weight
    above it raises `BoundViolation` rather than being clipped.
    """
    def propose():
        path = simulate_reference_chain(proposal, init, horizon, rng)
        return path, log_weight(path, target, proposal).log_a

    return _rejection_loop(propose, bound_c, rng, max_attempts, "path")


def segmented_rejection_sample(proposal: RateMatrix, target: TargetRateFamily, jumps_per_segment: int,
                               horizon: float, init: tp.Sequence[float], rng: RngStream,
                               max_attempts: int = 10**6,
                               blocks: tp.Optional[tp.List[tp.Tuple[float, int]]] = None) -> ChainPath:
    """Rejection sampling applied to successive blocks of `jumps_per_segment` jumps.

    Each block starts from the end of the previously accepted one and is stopped at
    `min(horizon, n-th jump)`, where the weight is bounded. If `blocks` is a list, the
    `(bound, attempts)` of every block is appended to it.
    """
    if jumps_per_segment < 1:
        raise DomainError(f"jumps_per_segment must be at least 1, got {jumps_per_segment}.")
    probs = check_probability(init, proposal.n_states)
    if horizon < 0:
        raise DomainError(f"Horizon must be non-negative, got {horizon}.")
    initial = rng.choice(list(itertools.accumulate(probs)))
    times: tp.List[float] = []
    targets: tp.List[int] = []
    start = 0.
    while True:
        state = targets[-1] if targets else initial
        bound_c = certified_bound(proposal, target, horizon - start, jumps=jumps_per_segment)

        def propose():
            block_times, block_targets = simulate_from(proposal, state, start, horizon, rng,
                                                       max_jumps=jumps_per_segment)
            end = block_times[-1] if len(block_times) == jumps_per_segment else horizon
            path = ChainPath(initial, times + block_times, targets + block_targets, end,
                             updates=proposal.self_updates)
            increment = incremental_log_weight(LogWeight(0., start), path, target, proposal, until=end)
            return path, increment.log_a

        block, attempts = _rejection_loop(propose, bound_c, rng, max_attempts, "block")
        if blocks is not None:
            blocks.append((bound_c, attempts))
        times, targets = list(block.jump_times), list(block.jump_targets)
        if block.horizon >= horizon:
            return ChainPath(initial, times, targets, horizon, updates=proposal.self_updates)
        start = block.horizon


@dataclass
class WeightedSampleSet:
    """Independent proposal paths with their weights against one (reference, target) pair."""
    paths: tp.List[ChainPath]
    log_weights: tp.List[LogWeight]

    def __post_init__(self):
        if len(self.paths) != len(self.log_weights):
            raise ValueError("paths and log_weights must have the same length.")

    @property
    def M(self) -> int:
        return len(self.paths)

    def weights(self) -> torch.Tensor:
        return torch.tensor([w.log_a for w in self.log_weights], dtype=torch.float64).exp()

    def effective_sample_size(self) -> float:
        log_w = torch.tensor([w.log_a for w in self.log_weights], dtype=torch.float64)
        return float((2 * torch.logsumexp(log_w, 0) - torch.logsumexp(2 * log_w, 0)).exp())

    def estimate(self, fn: tp.Callable[[ChainPath], float]) -> tp.Tuple[float, float]:
        """Weighted mean of `fn` and the standard error of the weighted terms."""
        if self.M < 2:
            raise DomainError("At least 2 samples are needed for a standard error.")
        terms = [w.value * fn(path) for path, w in zip(self.paths, self.log_weights)]
        mean = math.fsum(terms) / self.M
        variance = math.fsum((term - mean) ** 2 for term in terms) / (self.M - 1)
        return mean, math.sqrt(variance / self.M)


def weighted_samples(proposal: RateMatrix, target: TargetRateFamily, M: int, horizon: float,
                     rng: RngStream, init: tp.Sequence[float]) -> WeightedSampleSet:
    """Draw `M` proposal paths, path m using the substream `m` of `rng`."""
    def one(index: int) -> tp.Tuple[ChainPath, LogWeight]:
        path = simulate_reference_chain(proposal, init, horizon, rng.substream(index))
        return path, log_weight(path, target, proposal)

    results = map_ordered(one, range(M))
    return WeightedSampleSet([path for path, _ in results], [w for _, w in results])


def weighted_expectation(fn: tp.Callable[[ChainPath], float], proposal: RateMatrix, target: TargetRateFamily,
                         M: int, horizon: float, rng: RngStream,
                         init: tp.Sequence[float]) -> tp.Tuple[float, float]:
    """Importance sampling estimate of the target expectation of `fn(Y)`, with its standard error."""
    if M < 2:
        raise DomainError(f"M must be at least 2, got {M}.")
    samples = weighted_samples(proposal, target, M, horizon, rng, init)
    return samples.estimate(fn)


def test():
    reference = RateMatrix([[0., 1.], [1., 0.]])
    target = TargetRateFamily.constant([[0., 2.], [1., 0.]])
    path = ChainPath(0, (1.,), (1,), horizon=2.)
    expected = math.log(2) - 1
    assert abs(log_weight(path, target, reference).log_a - expected) < 1e-15
    first = incremental_log_weight(LogWeight(0., 0.), path, target, reference)
    assert first.t == 1.
    second = incremental_log_weight(first, path, target, reference)
    assert second.t == 2. and abs(second.log_a - expected) < 1e-12
    assert log_weight(path, TargetRateFamily.constant(reference.rates), reference).log_a == 0.
    still = ChainPath(1, horizon=3.)
    assert abs(log_weight(still, target, reference).log_a - 0.) < 1e-15
    assert abs(log_weight(ChainPath(0, horizon=3.), target, reference).log_a + 3.) < 1e-15
    try:
        log_weight(path, target, RateMatrix([[0., 0.], [1., 0.]]))
    except ModelError:
        pass
    else:
        assert False, "jumps without reference rate break absolute continuity"

    rng = RngStream(11, 0)
    assert simulate_reference_chain(reference, [0.3, 0.7], 0., rng).num_jumps == 0
    a = simulate_reference_chain(reference, [0.5, 0.5], 5., RngStream(3, 1))
    b = simulate_reference_chain(reference, [0.5, 0.5], 5., RngStream(3, 1))
    assert a == b

    # Composition of increments reproduces the whole path weight.
    long_path = simulate_reference_chain(reference, [1., 0.], 20., RngStream(5, 0))
    current = LogWeight(0., 0.)
    while current.t < long_path.horizon:
        current = incremental_log_weight(current, long_path, target, reference)
    assert abs(current.log_a - log_weight(long_path, target, reference).log_a) < 1e-12

    # Martingale mean of the weights.
    samples = weighted_samples(reference, target, 4000, 2., RngStream(21, 0), [0.5, 0.5])
    mean, stderr = samples.estimate(lambda p: 1.)
    assert abs(mean - 1) < 4 * stderr, (mean, stderr)
    assert 0 < samples.effective_sample_size() <= samples.M

    # Acceptance of the whole horizon sampler, every jump ratio being <= 1.
    slower = TargetRateFamily.constant([[0., 0.5], [0.5, 0.]])
    bound = certified_bound(reference, slower, 1.)
    assert abs(bound - math.exp(0.5)) < 1e-15
    rng = RngStream(8, 0)
    runs = 3000
    attempts = [rejection_sample(reference, slower, bound, [1., 0.], 1., rng)[1] for _ in range(runs)]
    p = 1 / bound
    mean_attempts = sum(attempts) / runs
    assert abs(mean_attempts - bound) < 4 * math.sqrt((1 - p) / p ** 2 / runs), mean_attempts
    same = TargetRateFamily.constant(reference.rates)
    assert rejection_sample(reference, same, 1., [1., 0.], 3., rng)[1] == 1

    # Callable rates dipping between sample points: the certified bound still holds.
    dip = TargetRateFamily.from_callable(lambda i, j, s: 1 - 0.99 * math.exp(-((s - 0.0625) / 0.01) ** 2),
                                         2, grid=[0., 1.], ratio_bound=1.)
    bound = certified_bound(reference, dip, 1.)
    assert abs(bound - math.e) < 1e-12
    assert log_weight(ChainPath(0, horizon=1.), dip, reference).value <= bound
    for _ in range(50):
        rejection_sample(reference, dip, bound, [0.5, 0.5], 1., rng)
    try:
        _rejection_loop(lambda: (path, math.log(3.)), 2., RngStream(0, 0), 10, "path")
    except BoundViolation as error:
        assert error.value > error.bound
    else:
        assert False, "weights above the bound must not be clipped"
    try:
        _rejection_loop(lambda: (path, -math.inf), 2., RngStream(0, 0), 10, "path")
    except BudgetError as error:
        assert error.attempts == 10
        assert error.acceptance_rate == 0.
    else:
        assert False
    # Positive weights that never pass the uniform: the estimate is the mean of A / C.
    try:
        _rejection_loop(lambda: (path, -40.), 2., RngStream(0, 0), 10, "path")
    except BudgetError as error:
        assert error.accepted == 0
        assert abs(error.acceptance_rate - math.exp(-40.) / 2) < 1e-30
    else:
        assert False

    # Weighted estimates against the forward equation of the target chain.
    from .oracles import dense_expm
    horizon = 1.
    transition = dense_expm([[-2., 2.], [1., -1.]], horizon)
    in_one = 0.5 * float(transition[0, 1] + transition[1, 1])
    mean, stderr = weighted_expectation(lambda p: float(p.state_at(horizon) == 1), reference, target,
                                        4000, horizon, RngStream(31, 0), [0.5, 0.5])
    assert abs(mean - in_one) < 4 * stderr, (mean, in_one, stderr)
    mean, stderr = weighted_expectation(lambda p: 1., reference, target, 4000, horizon,
                                        RngStream(31, 0), [0.5, 0.5])
    assert abs(mean - 1) < 4 * stderr, (mean, stderr)
    again = weighted_samples(reference, target, 4000, horizon, RngStream(31, 0), [0.5, 0.5])
    assert again.estimate(lambda p: 1.) == (mean, stderr)
    try:
        weighted_expectation(lambda p: 1., reference, target, 1, horizon, RngStream(31, 0), [0.5, 0.5])
    except DomainError:
        pass
    else:
        assert False, "a single sample has no standard error"

    blocks: tp.List[tp.Tuple[float, int]] = []
    out = segmented_rejection_sample(reference, target, 2, 5., [1., 0.], RngStream(2, 0), blocks=blocks)
    assert out.horizon == 5. and blocks and all(bound == 4. for bound, _ in blocks)
    blocks = []
    out = segmented_rejection_sample(reference, same, 3, 5., [1., 0.], RngStream(2, 0), blocks=blocks)
    assert out.horizon == 5. and all(attempts == 1 for _, attempts in blocks)

    # Paths from the segmented sampler follow the target rates.
    from .oracles import empirical_generator
    rng = RngStream(17, 0)
    accepted = [segmented_rejection_sample(reference, target, 2, 3., [0.5, 0.5], rng) for _ in range(1500)]
    estimate = empirical_generator(accepted, 2)
    assert abs(estimate.rates[0, 1] - 2.) < 4 * estimate.stderr[0, 1], estimate.rates
    assert abs(estimate.rates[1, 0] - 1.) < 4 * estimate.stderr[1, 0], estimate.rates


if __name__ == '__main__':
    test()

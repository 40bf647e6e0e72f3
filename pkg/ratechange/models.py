# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Hidden signal / observation models.

A `CmomModel` pairs a hidden signal X with an observation chain Y whose rates
gamma_{i->j}(x) depend on the current hidden state. Under the reference law
Y runs with the constant rates gammabar independently of X. A `CthmmModel`
is the special case where Y is updated at rate gamma(x) and the new symbol is
drawn from the emission law q(x).
"""

from dataclasses import dataclass, field
import itertools
import math
import typing as tp

import torch

from .chains import ChainPath, RateMatrix, StateSpace, TargetRateFamily, ValidationReport, validate
from .errors import BoundViolation, ModelError
from .rng import RngStream
from .sampling import LogWeight, check_probability, log_weight, simulate_from, simulate_reference_chain


class SignalSimulator:
    """Hidden signal that can be simulated forward from any state.

    States are integer indices into the state dependent target tables. Implementations
    must only draw from the stream they are given, so that a run replays exactly.
    """
    n_states: int

    def initial(self, rng: RngStream) -> int:
        raise NotImplementedError()

    def advance(self, state: int, start: float, end: float,
                rng: RngStream) -> tp.Tuple[tp.List[float], tp.List[int]]:
        """Return the jump times in `(start, end]` and the states entered at them."""
        raise NotImplementedError()

    def simulate(self, horizon: float, rng: RngStream) -> ChainPath:
        state = self.initial(rng)
        times, targets = self.advance(state, 0., horizon, rng)
        return ChainPath(state, times, targets, horizon)


class HiddenChain(SignalSimulator):
    """Finite Markov chain signal with rates lambda_{i->j} and initial law mu.
    Rows of zeros are allowed (absorbing states)."""
    def __init__(self, rates: tp.Any, mu: tp.Sequence[float], space: tp.Optional[StateSpace] = None):
        self.rates = rates if isinstance(rates, RateMatrix) else RateMatrix(rates)
        if self.rates.self_updates:
            raise ModelError("The hidden chain cannot have self updates.")
        self.n_states = self.rates.n_states
        self.mu = check_probability(mu, self.n_states, "mu")
        self.space = space or StateSpace.of_size(self.n_states)
        if len(self.space) != self.n_states:
            raise ModelError(f"{len(self.space)} hidden labels for {self.n_states} hidden states.")
        self._mu_cumulative = list(itertools.accumulate(self.mu))

    def initial(self, rng: RngStream) -> int:
        return rng.choice(self._mu_cumulative)

    def advance(self, state: int, start: float, end: float,
                rng: RngStream) -> tp.Tuple[tp.List[float], tp.List[int]]:
        return simulate_from(self.rates, state, start, end, rng)

    def simulate(self, horizon: float, rng: RngStream) -> ChainPath:
        return simulate_reference_chain(self.rates, self.mu, horizon, rng)

    def generator(self) -> torch.Tensor:
        return self.rates.generator()

    def transition_matrix(self, t: float) -> torch.Tensor:
        """P_t, entry `(i, j)` being the probability to be in `j` at time `t` starting from `i`."""
        return torch.linalg.matrix_exp(t * self.generator())


@dataclass
class CmomModel:
    """Observation chain modulated by a hidden signal.

    Args:
        hidden (SignalSimulator): hidden signal, a `HiddenChain` for the direct filter.
        obs_space (StateSpace): observation states O.
        obs_rates (TargetRateFamily): state dependent rates gamma_{i->j}(x).
        reference (RateMatrix): reference rates gammabar on O.
        init_obs (list of float): initial law of Y.
    """
    hidden: SignalSimulator
    obs_space: StateSpace
    obs_rates: TargetRateFamily
    reference: RateMatrix
    init_obs: tp.List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.obs_rates.kind != TargetRateFamily.STATE_DEPENDENT:
            raise ModelError("Observation rates of a CMOM must be state dependent.")
        if self.obs_rates.n_tables != self.hidden.n_states:
            raise ModelError(f"{self.obs_rates.n_tables} observation rate tables for "
                             f"{self.hidden.n_states} hidden states.")
        if not (len(self.obs_space) == self.reference.n_states == self.obs_rates.n_states):
            raise ModelError("Observation space, reference and target rates disagree on the number of states.")
        if self.obs_rates.self_updates != self.reference.self_updates:
            raise ModelError("Reference and target rates must agree on self updates.")
        self.init_obs = check_probability(self.init_obs, len(self.obs_space), "init_obs")

    @property
    def n_hidden(self) -> int:
        return self.hidden.n_states

    @property
    def n_obs(self) -> int:
        return len(self.obs_space)

    @property
    def init_hidden(self) -> tp.Optional[tp.List[float]]:
        return self.hidden.mu if isinstance(self.hidden, HiddenChain) else None

    @property
    def is_finite(self) -> bool:
        return isinstance(self.hidden, HiddenChain)

    def validate(self, require_finite: bool = False) -> ValidationReport:
        report = validate(self.reference, self.obs_rates)
        if require_finite and not self.is_finite:
            report.add('U', "the hidden signal is not a finite Markov chain")
        return report

    def leave_gap(self) -> torch.Tensor:
        """`[h, o]` tensor of gammabar_{y->} - gamma_{y->}(x), indexed by hidden then observed state."""
        assert self.obs_rates.tables is not None
        return self.reference.leave_rates[None] - self.obs_rates.leave_table()

    def jump_factor(self, before: int, after: int) -> torch.Tensor:
        """Vector over hidden states of gamma_{before->after}(x) / gammabar_{before->after}."""
        assert self.obs_rates.tables is not None
        ref = self.reference.rate(before, after)
        if ref <= 0:
            raise ModelError(f"Observed transition {before}->{after} has reference rate 0.")
        return self.obs_rates.tables[:, before, after] / ref


@dataclass
class CthmmModel:
    """Continuous time hidden Markov model: Y is updated at rate gamma(x) and takes a
    new value drawn from q(x), self emissions being observable update events.

    Args:
        hidden (SignalSimulator): hidden signal.
        obs_space (StateSpace): emitted symbols O.
        update_rate (list of float): gamma(x) per hidden state.
        emission (list of list of float): q_j(x), one probability vector per hidden state.
        reference_update (float): gammabar.
        reference_emission (list of float): qbar_j.
        init_obs (list of float): initial law of Y.
        ratio_bound (float or None): declared bound on gamma(x) q_j(x) / (gammabar qbar_j),
            carried to the converted CMOM.
    """
    hidden: SignalSimulator
    obs_space: StateSpace
    update_rate: tp.List[float]
    emission: tp.List[tp.List[float]]
    reference_update: float
    reference_emission: tp.List[float]
    init_obs: tp.List[float] = field(default_factory=list)
    ratio_bound: tp.Optional[float] = None

    def __post_init__(self):
        o = len(self.obs_space)
        self.update_rate = [float(rate) for rate in self.update_rate]
        if len(self.update_rate) != self.hidden.n_states or len(self.emission) != self.hidden.n_states:
            raise ModelError("update_rate and emission need one entry per hidden state.")
        self.emission = [check_probability(row, o, "emission") for row in self.emission]
        self.reference_emission = check_probability(self.reference_emission, o, "reference_emission")
        self.reference_update = float(self.reference_update)
        self.init_obs = check_probability(self.init_obs, o, "init_obs")

    def validate(self, require_finite: bool = False) -> ValidationReport:
        report = ValidationReport()
        for x, rate in enumerate(self.update_rate):
            if not math.isfinite(rate):
                report.add('A2', f"update rate gamma({x}) is not finite")
            elif rate <= 0:
                report.add('A3', f"update rate gamma({x}) = {rate} is not positive")
        if not (math.isfinite(self.reference_update) and self.reference_update > 0):
            report.add('A3', f"reference update rate {self.reference_update} is not positive and finite")
        for x, row in enumerate(self.emission):
            for j, q in enumerate(row):
                if q > 0 and self.reference_emission[j] <= 0:
                    report.add('dominance', f"q_{j}({x}) > 0 while qbar_{j} = 0")
        if require_finite and not isinstance(self.hidden, HiddenChain):
            report.add('U', "the hidden signal is not a finite Markov chain")
        return report

    def log_weight(self, x_path: ChainPath, y_path: ChainPath, t: tp.Optional[float] = None) -> LogWeight:
        """Weight of the update events of `y_path` under the CTHMM, evaluated directly
        from gamma(x), q(x) and their reference counterparts."""
        t = y_path.horizon if t is None else t
        y_path.state_at(t)
        x_path.state_at(t)
        cuts = sorted({0., t, *(s for s in y_path.jump_times if s < t), *(s for s in x_path.jump_times if s < t)})
        terms = [(self.reference_update - self.update_rate[x_path.state_at(a)]) * (b - a)
                 for a, b in zip(cuts, cuts[1:])]
        for n in y_path.jumps_between(0., t):
            s = y_path.jump_times[n - 1]
            x = x_path.state_at(s)
            symbol = y_path.state_after(n)
            ref = self.reference_update * self.reference_emission[symbol]
            if ref <= 0:
                raise ModelError(f"Symbol {symbol} emitted at {s} has reference probability 0.")
            value = self.update_rate[x] * self.emission[x][symbol]
            if value <= 0:
                return LogWeight(-math.inf, t)
            terms.append(math.log(value / ref))
        return LogWeight(math.fsum(terms), t)

    def to_cmom(self) -> CmomModel:
        return cthmm_to_cmom(self)


AnyModel = tp.Union[CmomModel, CthmmModel]


def cthmm_to_cmom(model: CthmmModel) -> CmomModel:
    """Express a CTHMM as a CMOM with rates gamma(x) q_j(x), j = i included as an update event."""
    report = model.validate()
    if not report.ok:
        raise ModelError(f"Invalid CTHMM:\n{report}")
    o = len(model.obs_space)
    gamma = torch.tensor(model.update_rate, dtype=torch.float64)
    q = torch.tensor(model.emission, dtype=torch.float64)
    # Rates do not depend on the current symbol i.
    tables = (gamma[:, None] * q)[:, None, :].expand(-1, o, -1).contiguous()
    ref_row = model.reference_update * torch.tensor(model.reference_emission, dtype=torch.float64)
    reference = RateMatrix(ref_row[None].expand(o, -1).contiguous(), self_updates=True)
    target = TargetRateFamily.state_dependent(tables, ratio_bound=model.ratio_bound, self_updates=True)
    return CmomModel(model.hidden, model.obs_space, target, reference, list(model.init_obs))


def as_cmom(model: AnyModel) -> CmomModel:
    return model.to_cmom() if isinstance(model, CthmmModel) else model


def simulate_joint_reference(model: AnyModel, horizon: float,
                             rng: RngStream) -> tp.Tuple[ChainPath, ChainPath]:
    """Simulate (X, Y) under the reference law, where Y ignores X.
    X uses the substream 0 of `rng` and Y the substream 1."""
    cmom = as_cmom(model)
    x_path = cmom.hidden.simulate(horizon, rng.substream(0))
    y_path = simulate_reference_chain(cmom.reference, cmom.init_obs, horizon, rng.substream(1))
    return x_path, y_path


def thinning_rates(model: CmomModel) -> tp.List[float]:
    """Dominating rate gammabar_{y->} * ratio bound used to thin the observation chain."""
    ratio = model.obs_rates.ratio_bound
    if ratio is None:
        ratio = model.obs_rates.sup_ratio(model.reference)
    if not math.isfinite(ratio):
        raise ModelError("Observation rates are not dominated by the reference ones, cannot thin.")
    return [model.reference.leave(y) * ratio for y in range(model.n_obs)]


def simulate_joint_target(model: AnyModel, horizon: float,
                          rng: RngStream) -> tp.Tuple[ChainPath, ChainPath]:
    """Simulate (X, Y) under the target law: X follows its own dynamics and, given X,
    Y jumps with rates gamma_{y->j}(X_s). Y is obtained exactly by thinning a
    Poisson clock at the dominating rate of the current state."""
    cmom = as_cmom(model)
    x_path = cmom.hidden.simulate(horizon, rng.substream(0))
    y_rng = rng.substream(1)
    bounds = thinning_rates(cmom)
    y = y_rng.choice(list(itertools.accumulate(cmom.init_obs)))
    initial = y
    times: tp.List[float] = []
    targets: tp.List[int] = []
    t = 0.
    while True:
        bound = bounds[y]
        t += y_rng.exponential(bound)
        if t > horizon:
            break
        x = x_path.state_at(t)
        rate = cmom.obs_rates.leave(y, x)
        if rate > bound * (1 + 1e-12):
            raise BoundViolation(f"Observation rate {rate} out of state {y} above the thinning bound {bound}.",
                                 value=rate, bound=bound)
        if y_rng.uniform() * bound < rate:
            row = [cmom.obs_rates.eval(y, j, x) for j in range(cmom.n_obs)]
            y = y_rng.choice(list(itertools.accumulate(row)))
            times.append(t)
            targets.append(y)
    return x_path, ChainPath(initial, times, targets, horizon, updates=cmom.reference.self_updates)


def joint_log_weight(x_path: ChainPath, y_path: ChainPath, model: AnyModel,
                     t: tp.Optional[float] = None) -> LogWeight:
    cmom = as_cmom(model)
    return log_weight(y_path, cmom.obs_rates, cmom.reference, driver=x_path, t=t)


def two_state_benchmark(coupling: float = 1.) -> CmomModel:
    """2 hidden / 2 observed states model used across the tests: the observation chain
    switches faster out of the hidden state index (scaled by `coupling`)."""
    hidden = HiddenChain([[0., 1.], [1., 0.]], [0.5, 0.5])
    tables = [[[0., 1. + coupling], [1., 0.]],
              [[0., 1.], [1. + coupling, 0.]]]
    base = 1. + coupling / 2
    reference = RateMatrix([[0., base], [base, 0.]])
    return CmomModel(hidden, StateSpace.of_size(2), TargetRateFamily.state_dependent(tables), reference,
                     [0.5, 0.5])


def _mean_stderr(values: tp.Sequence[float]) -> tp.Tuple[float, float]:
    mean = math.fsum(values) / len(values)
    variance = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(variance / len(values))


def test():
    from .oracles import conditional_empirical_generator

    # Hand evaluated CTHMM weight.
    hidden = HiddenChain([[0.]], [1.])
    cthmm = CthmmModel(hidden, StateSpace.of_size(2), [2.], [[0.75, 0.25]], 1., [0.5, 0.5], [1., 0.])
    x_path = ChainPath(0, horizon=1.)
    y_path = ChainPath(0, (1.,), (1,), horizon=1., updates=True)
    assert abs(cthmm.log_weight(x_path, y_path).log_a + 1) < 1e-15
    assert abs(joint_log_weight(x_path, y_path, cthmm).log_a + 1) < 1e-12
    assert cthmm.validate().ok

    flat = CthmmModel(hidden, StateSpace.of_size(2), [2.], [[0.5, 0.5]], 1., [0.5, 0.5], [1., 0.])
    converted = flat.to_cmom()
    assert converted.obs_rates.eval(0, 0, 0) == 1. and converted.obs_rates.eval(1, 0, 0) == 1.
    assert converted.validate().ok

    # Direct CTHMM weights and converted CMOM weights agree path by path.
    two = CthmmModel(HiddenChain([[0., 1.], [2., 0.]], [0.5, 0.5]), StateSpace.of_size(3),
                     [1., 3.], [[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]], 2., [1 / 3, 1 / 3, 1 / 3], [1., 0., 0.])
    for index in range(20):
        xs, ys = simulate_joint_reference(two, 4., RngStream(9, index))
        direct = two.log_weight(xs, ys).log_a
        assert abs(direct - joint_log_weight(xs, ys, two).log_a) < 1e-12

    # Martingale mean of the joint weight under the reference law.
    model = two_state_benchmark()
    runs = 3000
    reference_pairs = [simulate_joint_reference(model, 2., RngStream(4, k)) for k in range(runs)]
    weights = [joint_log_weight(xs, ys, model).value for xs, ys in reference_pairs]
    mean, stderr = _mean_stderr(weights)
    assert abs(mean - 1) < 4 * stderr, (mean, stderr)

    # Under the reference law Y ignores X: their jump counts are uncorrelated.
    x_jumps = [float(xs.num_jumps) for xs, _ in reference_pairs]
    y_jumps = [float(ys.num_jumps) for _, ys in reference_pairs]
    mx, _ = _mean_stderr(x_jumps)
    my, _ = _mean_stderr(y_jumps)
    covariance = math.fsum((a - mx) * (b - my) for a, b in zip(x_jumps, y_jumps)) / (runs - 1)
    scale = math.sqrt(math.fsum((a - mx) ** 2 for a in x_jumps) * math.fsum((b - my) ** 2 for b in y_jumps))
    correlation = covariance * (runs - 1) / scale
    assert abs(correlation) < 4 / math.sqrt(runs), correlation

    # Reweighted reference pairs estimate target expectations of f(X_T) g(Y_T).
    def fg(xs: ChainPath, ys: ChainPath) -> float:
        return float(xs.state_at(2.) == 0 and ys.state_at(2.) == 1)

    reweighted, se_reweighted = _mean_stderr([w * fg(xs, ys) for w, (xs, ys) in zip(weights, reference_pairs)])
    direct, se_direct = _mean_stderr([fg(*simulate_joint_target(model, 2., RngStream(5, k))) for k in range(runs)])
    assert abs(reweighted - direct) < 4 * math.hypot(se_reweighted, se_direct), (reweighted, direct)

    # Thinning reproduces the conditional rates of the observation chain.
    pairs = [simulate_joint_target(model, 50., RngStream(6, k)) for k in range(40)]
    estimates = conditional_empirical_generator([y for _, y in pairs], [x for x, _ in pairs], model.n_hidden)
    for x, estimate in enumerate(estimates):
        for i in range(2):
            for j in range(2):
                if i != j:
                    expected = model.obs_rates.eval(i, j, x)
                    assert abs(estimate.rates[i][j] - expected) < 4 * max(estimate.stderr[i][j], 1e-3), \
                        (x, i, j, estimate.rates[i][j], expected)


if __name__ == '__main__':
    test()

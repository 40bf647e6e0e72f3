# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Direct solver of the unnormalized filter equation for finite hidden chains.

Between observation transitions, with Y fixed at y, the vector
`sigma_i = sigma_t({i})` follows `d sigma / dt = D_y sigma` with
`D_y = L^T + diag(gammabar_{y->} - gamma_{y->}(.))`. It is propagated with the
Trotter product of the hidden transition block and the diagonal weight. At an
observation transition `y -> y'`, sigma is multiplied entrywise by
`gamma_{y->y'}(.) / gammabar_{y->y'}`.
"""

from dataclasses import dataclass, replace
import logging
import math
import typing as tp

from einops import rearrange
import torch

from ..chains import ChainPath
from ..errors import DegenerateFilter, ModelError, NumericalError, UsageError
from ..models import AnyModel, CmomModel, HiddenChain, as_cmom
from ..parallel import map_ordered
from .records import GRID, JUMP, FilterRecord

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-10
CLAMP_TOL = 1e-14
# The largest entry of a filter vector is kept in [SCALE_LOW, SCALE_HIGH].
SCALE_LOW = 1e-2
SCALE_HIGH = 1e2

Transition = tp.Callable[[float], torch.Tensor]


@dataclass(frozen=True)
class FilterVector:
    """Unnormalized filter `sigma * exp(log_scale)` at time `t`."""
    sigma: torch.Tensor
    t: float
    log_scale: float = 0.

    @property
    def log_total(self) -> float:
        """log sigma_t(1)."""
        return self.log_scale + math.log(float(self.sigma.sum()))

    @property
    def pi(self) -> torch.Tensor:
        return self.sigma / self.sigma.sum()

    def record(self, event: str) -> FilterRecord:
        return FilterRecord.from_scaled(self.t, event, self.sigma, self.log_scale)


@dataclass(frozen=True)
class DirectConfig:
    """
    Args:
        step (float): target Trotter step h, an interval of length dt uses
            `max(1, ceil(dt / h))` steps.
        transition (callable or None): analytic `t -> P_t`, otherwise computed
            with the matrix exponential of the hidden generator.
    """
    step: float = 1e-2
    transition: tp.Optional[Transition] = None

    def steps(self, dt: float) -> int:
        # Guard against dt / step landing just above an integer through rounding.
        return max(1, math.ceil(dt / self.step - 1e-9))


def _finite_model(model: AnyModel) -> CmomModel:
    cmom = as_cmom(model)
    report = cmom.validate(require_finite=True)
    if not report.ok:
        raise ModelError(f"The direct filter cannot handle this model:\n{report}")
    return cmom


def _hidden(model: CmomModel) -> HiddenChain:
    assert isinstance(model.hidden, HiddenChain)
    return model.hidden


def drift_matrix(model: AnyModel, y: int) -> torch.Tensor:
    """D_y: off diagonal `(j, i)` entry is lambda_{i->j}, diagonal `(i, i)` is
    `gammabar_{y->} - gamma_{y->}(i) - lambda_{i->}`."""
    cmom = as_cmom(model)
    generator = _hidden(cmom).generator()
    return rearrange(generator, 'i j -> j i') + torch.diag(cmom.leave_gap()[:, y])


def transition_matrix(model: CmomModel, t: float, transition: tp.Optional[Transition] = None) -> torch.Tensor:
    """P_t, checked to be a stochastic matrix."""
    hidden = _hidden(model)
    p = hidden.transition_matrix(t) if transition is None else torch.as_tensor(transition(t), dtype=torch.float64)
    if p.shape != (hidden.n_states, hidden.n_states):
        raise NumericalError(f"P_t has shape {tuple(p.shape)}, expected {hidden.n_states} states.")
    if (p < -STOCHASTIC_TOL).any() or (p.sum(-1) - 1).abs().max() > STOCHASTIC_TOL:
        raise NumericalError(f"P_{t} is not a stochastic matrix.")
    return p


def trotter_factor(model: AnyModel, y: int, t: float, transition: tp.Optional[Transition] = None,
                   p: tp.Optional[torch.Tensor] = None) -> torch.Tensor:
    """S_t = P_t^T diag(exp(t (gammabar_{y->} - gamma_{y->}(.)))), column i of the first factor being
    P_t(i -> .). A precomputed `p` skips the matrix exponential."""
    if t < 0:
        raise ValueError(f"Negative time step {t}.")
    cmom = as_cmom(model)
    if p is None:
        p = transition_matrix(cmom, t, transition)
    weight = (t * cmom.leave_gap()[:, y]).exp()
    return rearrange(p, 'i j -> j i') * weight[None, :]


def _renormalize(sigma: torch.Tensor, log_scale: float, t: float) -> tp.Tuple[torch.Tensor, float]:
    low = float(sigma.min())
    if low < 0:
        if low < -CLAMP_TOL:
            raise NumericalError(f"Filter entry {low} < 0 at t={t}.")
        logger.debug("Clamping negative filter entries (min %g) at t=%g.", low, t)
        sigma = sigma.clamp(min=0)
    top = float(sigma.max())
    if top <= 0 or not math.isfinite(top):
        raise DegenerateFilter(f"Filter vector degenerated to {sigma.tolist()} at t={t}.", sigma.tolist())
    if not SCALE_LOW <= top <= SCALE_HIGH:
        sigma = sigma / top
        log_scale += math.log(top)
    return sigma, log_scale


def evolve_between_jumps(fv: FilterVector, model: AnyModel, y: int, dt: float,
                         steps: tp.Optional[int] = None, config: DirectConfig = DirectConfig(),
                         factor: tp.Optional[torch.Tensor] = None) -> FilterVector:
    """Apply `[S_{dt / steps}]^steps` to `fv`, renormalizing after every product."""
    if dt < 0:
        raise ValueError(f"Negative interval {dt}.")
    if dt == 0:
        return fv
    steps = config.steps(dt) if steps is None else steps
    if steps < 1:
        raise ValueError(f"Need at least one step, got {steps}.")
    if factor is None:
        factor = trotter_factor(model, y, dt / steps, config.transition)
    sigma, log_scale = fv.sigma, fv.log_scale
    for _ in range(steps):
        sigma, log_scale = _renormalize(factor @ sigma, log_scale, fv.t)
    return FilterVector(sigma, fv.t + dt, log_scale)


def jump_update(fv: FilterVector, model: AnyModel, y_prev: int, y_new: int) -> FilterVector:
    cmom = as_cmom(model)
    if y_prev == y_new and not cmom.reference.self_updates:
        raise UsageError(f"Self transition {y_prev}->{y_new} in a model without update events.")
    sigma = fv.sigma * cmom.jump_factor(y_prev, y_new)
    if not (sigma > 0).any():
        raise DegenerateFilter(f"Transition {y_prev}->{y_new} at t={fv.t} is impossible for every hidden state.",
                               fv.sigma.tolist())
    sigma, log_scale = _renormalize(sigma, fv.log_scale, fv.t)
    return replace(fv, sigma=sigma, log_scale=log_scale)


def fkk_jump_update(pi: torch.Tensor, model: AnyModel, y_prev: int, y_new: int) -> torch.Tensor:
    """Jump of the normalized filter: `pi * gamma_{y->y'}(.) / pi(gamma_{y->y'}(.))`."""
    cmom = as_cmom(model)
    assert cmom.obs_rates.tables is not None
    rates = cmom.obs_rates.tables[:, y_prev, y_new]
    mass = float((pi * rates).sum())
    if mass <= 0:
        raise DegenerateFilter(f"Transition {y_prev}->{y_new} has probability 0 under the filter.")
    return pi * rates / mass


def run_direct_filter(model: AnyModel, y_path: ChainPath, grid: tp.Sequence[float] = (),
                      config: DirectConfig = DirectConfig()) -> tp.List[FilterRecord]:
    """Filter `y_path` from `sigma_0 = mu`.

    Records are emitted at time 0, at every observation transition (after the
    update), at the requested grid points and at the horizon. Grid points inside an
    interval use the observation state at the start of that interval.
    """
    cmom = _finite_model(model)
    hidden = _hidden(cmom)
    fv = FilterVector(torch.tensor(hidden.mu, dtype=torch.float64), 0.)
    jump_times = set(y_path.jump_times)
    events = sorted(jump_times | {g for g in grid if 0 < g <= y_path.horizon} | {y_path.horizon})
    transitions: tp.Dict[float, torch.Tensor] = {}
    records = [fv.record(GRID)]
    for event in events:
        dt = event - fv.t
        y = y_path.state_at(fv.t)
        if dt > 0:
            steps = config.steps(dt)
            tau = dt / steps
            if tau not in transitions:
                transitions[tau] = transition_matrix(cmom, tau, config.transition)
            factor = trotter_factor(cmom, y, tau, p=transitions[tau])
            fv = evolve_between_jumps(fv, cmom, y, dt, steps, factor=factor)
            fv = replace(fv, t=event)
        if event in jump_times:
            fv = jump_update(fv, cmom, y, y_path.state_at(event))
            records.append(fv.record(JUMP))
        elif event > 0:
            records.append(fv.record(GRID))
    return records


@dataclass
class Comparison:
    """Pairwise Bayes factors `factors[a][b] = sigma^a_T(1) / sigma^b_T(1)`."""
    log_totals: tp.List[float]
    log_factors: tp.List[tp.List[float]]

    @property
    def factors(self) -> tp.List[tp.List[float]]:
        return [[math.exp(min(value, 700.)) for value in row] for row in self.log_factors]


def compare_models(models: tp.Sequence[AnyModel], y_path: ChainPath,
                   config: DirectConfig = DirectConfig()) -> Comparison:
    """Bayes factors of several models for the same observation path. All models must share
    the observation space and the reference rates."""
    cmoms = [as_cmom(model) for model in models]
    if len(cmoms) < 2:
        raise UsageError("Need at least two models to compare.")
    first = cmoms[0]
    for other in cmoms[1:]:
        if other.obs_space != first.obs_space:
            raise UsageError("Models disagree on the observation space.")
        if other.reference != first.reference:
            raise UsageError("Bayes factors are only comparable against common reference rates.")
    runs = map_ordered(lambda model: run_direct_filter(model, y_path, config=config), cmoms)
    totals = [records[-1].log_sigma_total for records in runs]
    return Comparison(totals, [[a - b for b in totals] for a in totals])


def test():
    from ..models import two_state_benchmark
    from ..oracles import dense_expm, euler_reference_filter
    from ..chains import RateMatrix, StateSpace, TargetRateFamily

    model = two_state_benchmark()
    assert torch.equal(trotter_factor(model, 0, 0.), torch.eye(2, dtype=torch.float64))
    t = 0.5
    expected = dense_expm([[-1., 1.], [1., -1.]], t)
    flat = two_state_benchmark(coupling=0.)
    assert (trotter_factor(flat, 1, t) - torch.from_numpy(expected.T)).abs().max() < 1e-10
    closed = (1 + math.exp(-2 * t)) / 2
    assert abs(float(trotter_factor(flat, 0, t)[0, 0]) - closed) < 1e-10
    tau = 1e-6
    first_order = torch.eye(2, dtype=torch.float64) + tau * drift_matrix(model, 0)
    assert (trotter_factor(model, 0, tau) - first_order).abs().max() < 1e-10

    fv = FilterVector(torch.tensor([0.3, 0.7], dtype=torch.float64), 0.)
    assert evolve_between_jumps(fv, model, 0, 0.) is fv
    tables = [[[0., 2.], [1., 0.]], [[0., 4.], [1., 0.]]]
    custom = CmomModel(HiddenChain([[0., 1.], [1., 0.]], [0.5, 0.5]), StateSpace.of_size(2),
                       TargetRateFamily.state_dependent(tables), RateMatrix([[0., 1.], [1., 0.]]), [1., 0.])
    jumped = jump_update(fv, custom, 0, 1)
    values = (jumped.sigma * math.exp(jumped.log_scale)).tolist()
    assert abs(values[0] - 0.6) < 1e-12 and abs(values[1] - 2.8) < 1e-12
    assert torch.equal(jump_update(fv, flat, 0, 1).sigma, fv.sigma)
    zero = CmomModel(custom.hidden, custom.obs_space,
                     TargetRateFamily.state_dependent([[[0., 0.], [1., 0.]], [[0., 4.], [1., 0.]]]),
                     custom.reference, [1., 0.])
    assert float(jump_update(fv, zero, 0, 1).sigma[0]) == 0.

    # Without coupling sigma(1) stays at 1 and pi follows the prior law.
    y_path = ChainPath(0, (0.4, 1.1), (1, 0), horizon=2.)
    for record in run_direct_filter(flat, y_path, grid=[0.5, 1.5]):
        assert abs(record.log_sigma_total) < 1e-8 and abs(sum(record.pi) - 1) < 1e-12

    # Against Euler integration of the same equation, and first order convergence.
    reference = euler_reference_filter(model, y_path, 1e-5)
    errors = []
    for step in (2e-2, 1e-2):
        records = run_direct_filter(model, y_path, config=DirectConfig(step=step))
        assert [r.t for r in records] == [r for r, _ in reference]
        errors.append(max(abs(a - b) for record, (_, sigma) in zip(records, reference)
                          for a, b in zip(record.sigma, sigma.tolist())))
    assert errors[1] < errors[0] * 0.6, errors
    fine = run_direct_filter(model, y_path, config=DirectConfig(step=1e-4))
    assert max(abs(a - b) for record, (_, sigma) in zip(fine, reference)
               for a, b in zip(record.sigma, sigma.tolist())) < 1e-3

    # The normalized filter jumps as the FKK update predicts.
    before = evolve_between_jumps(FilterVector(torch.tensor([0.5, 0.5], dtype=torch.float64), 0.), model, 0, 0.4)
    after = jump_update(before, model, 0, 1)
    assert (after.pi - fkk_jump_update(before.pi, model, 0, 1)).abs().max() < 1e-12

    perturbed = two_state_benchmark(coupling=0.5)
    try:
        compare_models([model, perturbed], y_path)
    except UsageError:
        pass
    else:
        assert False, "different reference rates must be rejected"
    same = compare_models([model, model, two_state_benchmark()], y_path)
    assert all(abs(value - 1) < 1e-12 for row in same.factors for value in row)


if __name__ == '__main__':
    test()

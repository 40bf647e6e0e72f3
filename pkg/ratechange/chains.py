# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""State spaces, cadlag paths, rate families and model validation."""

from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
import itertools
import math
import typing as tp

from scipy.integrate import quad
import torch

from .errors import DomainError, ModelError


RATE_DTYPE = torch.float64
# Tolerances of the adaptive quadrature used for callable rates.
QUADRATURE_RTOL = 1e-10
QUADRATURE_ATOL = 1e-14
QUADRATURE_LIMIT = 200


@dataclass(frozen=True)
class StateSpace:
    """Ordered finite list of distinct state labels. Countable spaces must be
    truncated by the user before reaching this class."""
    labels: tp.Tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(label) for label in self.labels)
        if not labels:
            raise ModelError("A state space needs at least one state.")
        if len(set(labels)) != len(labels):
            raise ModelError(f"State labels must be distinct, got {labels}.")
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, '_index', {label: idx for idx, label in enumerate(labels)})

    @classmethod
    def of_size(cls, size: int) -> 'StateSpace':
        return cls(tuple(str(idx + 1) for idx in range(size)))

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[str(label)]  # type: ignore
        except KeyError:
            raise DomainError(f"Unknown state {label!r}, expected one of {self.labels}.")

    def label(self, index: int) -> str:
        return self.labels[index]


@dataclass(frozen=True)
class ChainPath:
    """Cadlag piecewise constant trajectory on `[0, horizon]`.

    The value is `initial_state` on `[0, W_1)` and `jump_targets[n - 1]` on
    `[W_n, W_{n+1})`. Self-jumps are rejected unless `updates` is True, in
    which case the path records update events that may repeat the previous
    state (observable CTHMM emissions).
    """
    initial_state: int
    jump_times: tp.Tuple[float, ...] = ()
    jump_targets: tp.Tuple[int, ...] = ()
    horizon: float = 0.
    updates: bool = False

    def __post_init__(self):
        times = tuple(float(t) for t in self.jump_times)
        targets = tuple(int(s) for s in self.jump_targets)
        object.__setattr__(self, 'jump_times', times)
        object.__setattr__(self, 'jump_targets', targets)
        object.__setattr__(self, 'initial_state', int(self.initial_state))
        object.__setattr__(self, 'horizon', float(self.horizon))
        if len(times) != len(targets):
            raise ModelError("jump_times and jump_targets must have the same length.")
        if self.horizon < 0 or not math.isfinite(self.horizon):
            raise DomainError(f"Invalid horizon {self.horizon}.")
        previous_time = 0.
        previous_state = self.initial_state
        for time, state in zip(times, targets):
            if not time > previous_time:
                raise ModelError(f"Jump times must be positive and strictly increasing, got {time} "
                                 f"after {previous_time}.")
            if state == previous_state and not self.updates:
                raise ModelError(f"Self-jump to state {state} at time {time}.")
            previous_time, previous_state = time, state
        if times and times[-1] > self.horizon:
            raise ModelError(f"Last jump {times[-1]} is after the horizon {self.horizon}.")

    @property
    def num_jumps(self) -> int:
        return len(self.jump_times)

    @property
    def final_state(self) -> int:
        return self.state_after(self.num_jumps)

    def _check_time(self, t: float):
        if not 0 <= t <= self.horizon:
            raise DomainError(f"Time {t} outside of [0, {self.horizon}].")

    def state_after(self, n: int) -> int:
        """Return theta_n, the state entered at the n-th jump (theta_0 is the initial state)."""
        return self.initial_state if n == 0 else self.jump_targets[n - 1]

    def state_at(self, t: float) -> int:
        self._check_time(t)
        return self.state_after(bisect_right(self.jump_times, t))

    def jump_count(self, t: float) -> int:
        self._check_time(t)
        return bisect_right(self.jump_times, t)

    def jumps_between(self, start: float, end: float) -> tp.List[int]:
        """Indices n (1-based) of the jumps with `start < W_n <= end`."""
        first = bisect_right(self.jump_times, start)
        last = bisect_right(self.jump_times, end)
        return list(range(first + 1, last + 1))

    def segments(self, end: tp.Optional[float] = None) -> tp.Iterator[tp.Tuple[float, float, int]]:
        """Yield `(start, stop, state)` for the constant pieces of the path on `[0, end]`."""
        end = self.horizon if end is None else end
        self._check_time(end)
        start = 0.
        state = self.initial_state
        for time, target in zip(self.jump_times, self.jump_targets):
            if time > end:
                break
            if time > start:
                yield start, time, state
            start, state = time, target
        if end > start:
            yield start, end, state

    def truncate(self, t: float) -> 'ChainPath':
        count = self.jump_count(t)
        return ChainPath(self.initial_state, self.jump_times[:count], self.jump_targets[:count],
                         t, updates=self.updates)


def path_state_at(path: ChainPath, t: float) -> int:
    return path.state_at(t)


def jump_count(path: ChainPath, t: float) -> int:
    return path.jump_count(t)


def _as_rate_tensor(rates: tp.Any, name: str) -> torch.Tensor:
    tensor = torch.as_tensor(rates, dtype=RATE_DTYPE).clone()
    if not torch.isfinite(tensor).all():
        raise ModelError(f"{name} must be finite.")
    if (tensor < 0).any():
        raise DomainError(f"{name} must be non-negative.")
    return tensor


class RateMatrix:
    """Constant transition rates on a finite space.

    Args:
        rates: `[m, m]` non-negative rates, entry `(i, j)` being the rate of `i -> j`.
        self_updates (bool): if True the diagonal holds the rate of observable update
            events that keep the state. Otherwise the diagonal must be exactly 0.
    """
    def __init__(self, rates: tp.Any, self_updates: bool = False):
        tensor = _as_rate_tensor(rates, "Rates")
        if tensor.dim() != 2 or tensor.shape[0] != tensor.shape[1] or tensor.shape[0] == 0:
            raise ModelError(f"Rates must be a non-empty square matrix, got shape {tuple(tensor.shape)}.")
        if not self_updates and (tensor.diagonal() != 0).any():
            raise ModelError("Diagonal rates must be 0, use self_updates=True for update events.")
        self.rates = tensor
        self.self_updates = self_updates
        self._rows: tp.List[tp.List[float]] = tensor.tolist()
        self._leave: tp.List[float] = [math.fsum(row) for row in self._rows]
        self._cumulative = [list(itertools.accumulate(row)) for row in self._rows]

    @property
    def n_states(self) -> int:
        return len(self._rows)

    @property
    def leave_rates(self) -> torch.Tensor:
        return torch.tensor(self._leave, dtype=RATE_DTYPE)

    def leave(self, i: int) -> float:
        return self._leave[i]

    def rate(self, i: int, j: int) -> float:
        return self._rows[i][j]

    def cumulative(self, i: int) -> tp.List[float]:
        return self._cumulative[i]

    def generator(self) -> torch.Tensor:
        """Markov generator of the state process: the diagonal update rates do not move the chain."""
        off = self.rates - torch.diag(self.rates.diagonal())
        return off - torch.diag(off.sum(-1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RateMatrix):
            return NotImplemented
        return self.self_updates == other.self_updates and torch.equal(self.rates, other.rates)

    def __repr__(self) -> str:
        return f"RateMatrix({self._rows}, self_updates={self.self_updates})"


def _integrate(fn: tp.Callable[[float], float], a: float, b: float) -> float:
    value, _ = quad(fn, a, b, epsabs=QUADRATURE_ATOL, epsrel=QUADRATURE_RTOL, limit=QUADRATURE_LIMIT)
    return float(value)


class TargetRateFamily:
    """Target rates gamma_{i->j}(u) changing the reference chain into the target one.

    `u` is a time for the `constant` and `time_dependent` kinds and a hidden
    state index for the `state_dependent` kind. Use the class methods to build
    one rather than the constructor.

    Args:
        kind (str): one of `constant`, `time_dependent`, `state_dependent`.
        tables (torch.Tensor or None): `[K, m, m]` rates. For `constant` K = 1,
            for piecewise time dependent rates K = len(breakpoints) + 1, table k
            being used on `[breakpoints[k - 1], breakpoints[k])`, and for state
            dependent rates table k is used while the hidden state is k.
        breakpoints (tuple of float): increasing change times of piecewise rates.
        fn (callable or None): `fn(i, j, s)` for general time dependent rates.
        n_states (int or None): number of states, required with `fn`.
        grid (tuple of float): declared points between which `fn` is smooth,
            used by the quadrature.
        ratio_bound (float or None): declared bound on both gamma_{i->}(u) / gammabar_{i->}
            and gamma_{i->j}(u) / gammabar_{i->j}. Mandatory to certify callables.
        self_updates (bool): allow diagonal rates (update events keeping the state).
    """
    CONSTANT = 'constant'
    TIME_DEPENDENT = 'time_dependent'
    STATE_DEPENDENT = 'state_dependent'

    def __init__(self, kind: str, tables: tp.Optional[torch.Tensor] = None,
                 breakpoints: tp.Sequence[float] = (),
                 fn: tp.Optional[tp.Callable[[int, int, float], float]] = None,
                 n_states: tp.Optional[int] = None, grid: tp.Sequence[float] = (),
                 ratio_bound: tp.Optional[float] = None, self_updates: bool = False):
        if kind not in (self.CONSTANT, self.TIME_DEPENDENT, self.STATE_DEPENDENT):
            raise ModelError(f"Unknown rate family kind {kind}.")
        self.kind = kind
        self.breakpoints = tuple(float(b) for b in breakpoints)
        self.fn = fn
        self.grid = tuple(sorted(float(g) for g in grid))
        self.ratio_bound = None if ratio_bound is None else float(ratio_bound)
        self.self_updates = self_updates
        if any(b1 >= b2 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ModelError("Breakpoints must be strictly increasing.")
        if tables is None:
            if fn is None or n_states is None or kind != self.TIME_DEPENDENT:
                raise ModelError("A callable family needs `fn`, `n_states` and the time_dependent kind.")
            self.tables: tp.Optional[torch.Tensor] = None
            self._n_states = int(n_states)
            self._rows: tp.List[tp.List[tp.List[float]]] = []
            self._leave: tp.List[tp.List[float]] = []
            return
        tensor = _as_rate_tensor(tables, "Target rates")
        if tensor.dim() != 3 or tensor.shape[1] != tensor.shape[2]:
            raise ModelError(f"Target rates must have shape [K, m, m], got {tuple(tensor.shape)}.")
        if not self_updates and (tensor.diagonal(dim1=1, dim2=2) != 0).any():
            raise ModelError("Diagonal target rates must be 0, use self_updates=True for update events.")
        if kind == self.CONSTANT and tensor.shape[0] != 1:
            raise ModelError("A constant family has a single table.")
        if kind == self.TIME_DEPENDENT and tensor.shape[0] != len(self.breakpoints) + 1:
            raise ModelError(f"{len(self.breakpoints)} breakpoints need {len(self.breakpoints) + 1} tables, "
                             f"got {tensor.shape[0]}.")
        self.tables = tensor
        self._n_states = tensor.shape[1]
        self._rows = tensor.tolist()
        self._leave = [[math.fsum(row) for row in table] for table in self._rows]

    @classmethod
    def constant(cls, rates: tp.Any, ratio_bound: tp.Optional[float] = None,
                 self_updates: bool = False) -> 'TargetRateFamily':
        return cls(cls.CONSTANT, torch.as_tensor(rates, dtype=RATE_DTYPE)[None],
                   ratio_bound=ratio_bound, self_updates=self_updates)

    @classmethod
    def piecewise(cls, breakpoints: tp.Sequence[float], rates: tp.Any,
                  ratio_bound: tp.Optional[float] = None) -> 'TargetRateFamily':
        return cls(cls.TIME_DEPENDENT, torch.as_tensor(rates, dtype=RATE_DTYPE), breakpoints=breakpoints,
                   ratio_bound=ratio_bound)

    @classmethod
    def state_dependent(cls, rates: tp.Any, ratio_bound: tp.Optional[float] = None,
                        self_updates: bool = False) -> 'TargetRateFamily':
        return cls(cls.STATE_DEPENDENT, torch.as_tensor(rates, dtype=RATE_DTYPE),
                   ratio_bound=ratio_bound, self_updates=self_updates)

    @classmethod
    def from_callable(cls, fn: tp.Callable[[int, int, float], float], n_states: int,
                      grid: tp.Sequence[float], ratio_bound: float) -> 'TargetRateFamily':
        return cls(cls.TIME_DEPENDENT, fn=fn, n_states=n_states, grid=grid, ratio_bound=ratio_bound)

    @property
    def n_states(self) -> int:
        return self._n_states

    @property
    def n_tables(self) -> int:
        return 0 if self.tables is None else self.tables.shape[0]

    @property
    def is_callable(self) -> bool:
        return self.tables is None

    def _table(self, u: float) -> int:
        if self.kind == self.STATE_DEPENDENT:
            return int(u)
        if self.kind == self.CONSTANT:
            return 0
        return bisect_right(self.breakpoints, u)

    def eval(self, i: int, j: int, u: float) -> float:
        if self.tables is None:
            if i == j and not self.self_updates:
                return 0.
            value = float(self.fn(i, j, u))  # type: ignore
            if value < 0 or not math.isfinite(value):
                raise DomainError(f"Target rate {i}->{j} at {u} is {value}.")
            return value
        return self._rows[self._table(u)][i][j]

    def leave(self, i: int, u: float) -> float:
        if self.tables is None:
            return math.fsum(self.eval(i, j, u) for j in range(self._n_states))
        return self._leave[self._table(u)][i]

    def leave_table(self) -> torch.Tensor:
        """`[K, m]` leaving rates of every table."""
        assert self.tables is not None
        return self.tables.sum(-1)

    def breakpoints_between(self, start: float, end: float) -> tp.List[float]:
        """Change times strictly inside `(start, end)` at which the integrand may jump."""
        if self.kind != self.TIME_DEPENDENT:
            return []
        points = self.breakpoints if self.tables is not None else self.grid
        return list(points[bisect_right(points, start):bisect_left(points, end)])

    def integrate_leave(self, i: int, start: float, end: float) -> float:
        """Integral of gamma_{i->}(s) over `[start, end]`, exact for piecewise constant rates."""
        if self.kind == self.STATE_DEPENDENT:
            raise ModelError("State dependent rates need a hidden path to be integrated.")
        if end <= start:
            return 0.
        cuts = [start] + self.breakpoints_between(start, end) + [end]
        if self.tables is not None:
            return math.fsum(self.leave(i, a) * (b - a) for a, b in zip(cuts, cuts[1:]))
        return math.fsum(_integrate(lambda s: self.leave(i, s), a, b) for a, b in zip(cuts, cuts[1:]))

    def _sample_points(self) -> tp.List[float]:
        # Used to check callables, which cannot be inspected exhaustively.
        points = list(self.grid) or [0., 1.]
        samples: tp.List[float] = []
        for a, b in zip(points, points[1:]):
            samples.extend(a + (b - a) * k / 8 for k in range(8))
        samples.append(points[-1])
        return samples

    def _samples(self) -> tp.List[float]:
        if self.tables is None:
            return self._sample_points()
        return [0.] + list(self.breakpoints) if self.kind == self.TIME_DEPENDENT else list(range(self.n_tables))

    def sup_ratio(self, reference: RateMatrix) -> float:
        """Supremum over u and i of gamma_{i->}(u) / gammabar_{i->}, the constant of (C2).
        For callables the declared bound is returned."""
        if self.tables is None:
            return math.inf if self.ratio_bound is None else self.ratio_bound
        best = 0.
        for u in self._samples():
            for i in range(self.n_states):
                value = self.leave(i, u)
                if value > 0:
                    ref = reference.leave(i)
                    best = max(best, value / ref if ref > 0 else math.inf)
        return best

    def sup_jump_ratio(self, reference: RateMatrix) -> float:
        """Supremum of gamma_{i->j}(u) / gammabar_{i->j} over the pairs with a positive target rate."""
        if self.tables is None:
            return math.inf if self.ratio_bound is None else self.ratio_bound
        best = 0.
        for u in self._samples():
            for i in range(self.n_states):
                for j in range(self.n_states):
                    value = self.eval(i, j, u)
                    if value > 0:
                        ref = reference.rate(i, j)
                        best = max(best, value / ref if ref > 0 else math.inf)
        return best

    def sup_gap(self, reference: RateMatrix) -> float:
        """Supremum of the positive part of gammabar_{i->} - gamma_{i->}(u).
        Callables can dip between any finite set of points, their gap is bounded by
        gammabar_{i->} alone."""
        if self.tables is None:
            return max(reference.leave(i) for i in range(self.n_states))
        gap = 0.
        for u in self._samples():
            for i in range(self.n_states):
                gap = max(gap, reference.leave(i) - self.leave(i, u))
        return gap


@dataclass
class ValidationReport:
    """Outcome of `validate`. Violations are `(condition, detail)` pairs with
    condition one of C1, C2, C3, A1, A2, A3, U, dominance."""
    violations: tp.List[tp.Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, condition: str, detail: str):
        self.violations.append((condition, detail))

    def extend(self, other: 'ValidationReport'):
        self.violations.extend(other.violations)

    def conditions(self) -> tp.Set[str]:
        return {condition for condition, _ in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"[{condition}] {detail}" for condition, detail in self.violations)


def validate(reference: RateMatrix, target: TargetRateFamily) -> ValidationReport:
    """Check conditions (C1)-(C3) and absolute continuity for a reference/target pair.
    This is a pure function, violations are reported, never raised."""
    if reference.n_states != target.n_states:
        raise ModelError(f"Reference has {reference.n_states} states but target has {target.n_states}.")
    report = ValidationReport()
    m = reference.n_states
    leave = [reference.leave(i) for i in range(m)]
    if not all(math.isfinite(rate) for rate in leave):
        report.add('C1', "reference leaving rates are not bounded")
    for i in range(m):
        if leave[i] <= 0:
            report.add('C3', f"reference leaving rate of state {i} is 0 (cemetery state)")

    if target.is_callable and target.ratio_bound is None:
        report.add('C2', "callable target rates need a declared ratio_bound")
    for u in target._samples():
        where = f"u={u}"
        for i in range(m):
            value = target.leave(i, u)
            if value <= 0:
                report.add('C3', f"target leaving rate of state {i} is 0 at {where} (cemetery state)")
            elif leave[i] <= 0:
                report.add('C2', f"unbounded ratio gamma_{i}->(u) / gammabar_{i}-> at {where}")
            for j in range(m):
                if target.eval(i, j, u) > 0 and reference.rate(i, j) <= 0:
                    report.add('dominance', f"gamma_{i}->{j}({where}) > 0 while gammabar_{i}->{j} = 0")
    if not target.is_callable and target.ratio_bound is not None:
        actual = target.sup_ratio(reference)
        if actual > target.ratio_bound * (1 + 1e-12):
            report.add('C2', f"declared ratio_bound {target.ratio_bound} is below the actual ratio {actual}")
    return report


def test():
    space = StateSpace(('a', 'b', 'c'))
    assert space.index('b') == 1 and space.label(2) == 'c' and len(space) == 3
    try:
        StateSpace(('a', 'a'))
    except ModelError:
        pass
    else:
        assert False, "duplicated labels must be rejected"

    path = ChainPath(0, (1., 2.), (1, 0), horizon=3.)
    assert path_state_at(path, 0.) == 0
    assert path_state_at(path, 1.) == 1
    assert path_state_at(path, 1 - 1e-12) == 0
    assert jump_count(path, 1.5) == 1 and jump_count(path, 2.) == 2 and jump_count(path, 0.) == 0
    assert list(path.segments()) == [(0., 1., 0), (1., 2., 1), (2., 3., 0)]
    assert path.jumps_between(0.5, 2.) == [1, 2]
    for s, t in [(0., 3.), (0.5, 1.), (1., 2.5)]:
        assert path.jump_count(t) - path.jump_count(s) == len(path.jumps_between(s, t))
    try:
        path.state_at(3.5)
    except DomainError:
        pass
    else:
        assert False
    try:
        ChainPath(0, (1.,), (0,), horizon=2.)
    except ModelError:
        pass
    else:
        assert False, "self jumps are only allowed for update paths"
    assert ChainPath(0, (1.,), (0,), horizon=2., updates=True).jump_count(2.) == 1
    assert ChainPath(1, horizon=5.).state_at(4.) == 1
    assert path.truncate(1.5) == ChainPath(0, (1.,), (1,), horizon=1.5)

    ref = RateMatrix([[0., 1.], [1., 0.]])
    assert validate(ref, TargetRateFamily.constant(ref.rates)).ok
    report = validate(RateMatrix([[0., 0.], [1., 0.]]), TargetRateFamily.constant([[0., 0.], [1., 0.]]))
    assert 'C3' in report.conditions() and 'C2' not in report.conditions()
    report = validate(RateMatrix([[0., 0.], [1., 0.]]),
                      TargetRateFamily.state_dependent([[[0., 1.], [1., 0.]]]))
    assert {'dominance', 'C2'} <= report.conditions(), report

    piecewise = TargetRateFamily.piecewise([1.], [[[0., 2.], [1., 0.]], [[0., 1.], [3., 0.]]])
    assert piecewise.eval(0, 1, 0.5) == 2. and piecewise.eval(0, 1, 1.) == 1.
    assert abs(piecewise.integrate_leave(1, 0.5, 2.) - (0.5 * 1 + 1. * 3)) < 1e-15
    assert piecewise.sup_ratio(ref) == 3.

    smooth = TargetRateFamily.from_callable(lambda i, j, s: 1 + 0.5 * math.sin(s), 2, grid=[0., 2., 4.],
                                            ratio_bound=1.5)
    exact = 3. - 0.5 * math.cos(3.) + 0.5
    assert abs(smooth.integrate_leave(0, 0., 3.) - exact) < 1e-10 * exact
    assert validate(ref, smooth).ok

    # A dip narrower than the sample spacing still bounds the gap.
    dip = TargetRateFamily.from_callable(lambda i, j, s: 1 - 0.99 * math.exp(-((s - 0.0625) / 0.01) ** 2),
                                         2, grid=[0., 1.], ratio_bound=1.)
    assert validate(ref, dip).ok
    assert dip.sup_gap(ref) == 1.
    exact = 1 - 0.99 * 0.01 * math.sqrt(math.pi)
    assert abs(dip.integrate_leave(0, 0., 1.) - exact) < 1e-8
    assert RateMatrix([[0., 2.], [1., 0.]]).generator().sum(-1).abs().max() == 0
    updates = RateMatrix([[1., 2.], [1., 1.]], self_updates=True)
    assert updates.leave(0) == 3. and updates.generator()[0, 0] == -2.


if __name__ == '__main__':
    test()

# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""File formats: JSON model files, path CSV files, filter trajectories and run manifests."""

import csv
from dataclasses import dataclass
import io
import json
from pathlib import Path
import typing as tp

from .chains import ChainPath, RateMatrix, StateSpace, TargetRateFamily
from .errors import ModelError, RateChangeError, UsageError
from .filtering.records import FilterRecord
from .models import CmomModel, CthmmModel, HiddenChain
from .sampling import check_probability

# Model files are json objects with a `schema_version` and a `kind`, the other
# fields depending on the kind. Unknown fields are rejected.
SCHEMA_VERSION = 1
_FIELDS = {
    'chain': ({'states', 'reference', 'target', 'init'}, {'ratio_bound'}),
    'cmom': ({'hidden_states', 'obs_states', 'lambda', 'mu', 'gamma_bar', 'gamma', 'init_obs'}, {'ratio_bound'}),
    'cthmm': ({'hidden_states', 'obs_states', 'lambda', 'mu', 'gamma_bar', 'q_bar', 'gamma', 'q', 'init_obs'},
              {'ratio_bound'}),
}
FLOAT_FORMAT = '.17g'


@dataclass
class ChainModel:
    """Reference / target pair on a single chain."""
    space: StateSpace
    reference: RateMatrix
    target: TargetRateFamily
    init: tp.List[float]


Model = tp.Union[ChainModel, CmomModel, CthmmModel]


def _check_fields(data: tp.Dict[str, tp.Any]) -> str:
    if not isinstance(data, dict):
        raise ModelError("A model file must contain a json object.")
    version = data.get('schema_version')
    if version != SCHEMA_VERSION:
        raise ModelError(f"Unsupported schema_version {version}, expected {SCHEMA_VERSION}.")
    kind = data.get('kind')
    if kind not in _FIELDS:
        raise ModelError(f"Unknown model kind {kind}, expected one of {sorted(_FIELDS)}.")
    required, optional = _FIELDS[kind]
    present = set(data) - {'schema_version', 'kind'}
    missing = required - present
    unknown = present - required - optional
    if missing:
        raise ModelError(f"Missing fields for a {kind} model: {sorted(missing)}.")
    if unknown:
        raise ModelError(f"Unknown fields for a {kind} model: {sorted(unknown)}.")
    return kind


def _target(spec: tp.Any, ratio_bound: tp.Optional[float]) -> TargetRateFamily:
    if isinstance(spec, dict):
        if set(spec) != {'breakpoints', 'rates'}:
            raise ModelError("Piecewise targets need exactly the fields `breakpoints` and `rates`.")
        return TargetRateFamily.piecewise(spec['breakpoints'], spec['rates'], ratio_bound=ratio_bound)
    return TargetRateFamily.constant(spec, ratio_bound=ratio_bound)


def model_from_dict(data: tp.Dict[str, tp.Any]) -> Model:
    kind = _check_fields(data)
    try:
        if kind == 'chain':
            space = StateSpace(tuple(data['states']))
            return ChainModel(space, RateMatrix(data['reference']),
                              _target(data['target'], data.get('ratio_bound')),
                              check_probability(data['init'], len(space)))
        hidden = HiddenChain(data['lambda'], data['mu'], StateSpace(tuple(data['hidden_states'])))
        obs_space = StateSpace(tuple(data['obs_states']))
        if kind == 'cmom':
            target = TargetRateFamily.state_dependent(data['gamma'], ratio_bound=data.get('ratio_bound'))
            return CmomModel(hidden, obs_space, target, RateMatrix(data['gamma_bar']), data['init_obs'])
        return CthmmModel(hidden, obs_space, data['gamma'], data['q'], data['gamma_bar'], data['q_bar'],
                          data['init_obs'], data.get('ratio_bound'))
    except RateChangeError:
        raise
    except (TypeError, ValueError, RuntimeError) as error:
        # Ragged or non numeric arrays.
        raise ModelError(f"Malformed {kind} model: {error}")


def load_model(path: tp.Union[str, Path]) -> Model:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as error:
        raise ModelError(f"{path} is not valid json: {error}")
    return model_from_dict(data)


def obs_space_of(model: Model) -> StateSpace:
    return model.space if isinstance(model, ChainModel) else model.obs_space


def write_path(fo: tp.TextIO, path: ChainPath, space: StateSpace):
    """Path CSV: header `time,state`, a first row at time 0 with the initial state, one
    row per jump, and a last row `<horizon>,` with an empty state closing the path."""
    writer = csv.writer(fo, lineterminator='\n')
    writer.writerow(['time', 'state'])
    writer.writerow(['0.0', space.label(path.initial_state)])
    for time, state in zip(path.jump_times, path.jump_targets):
        writer.writerow([format(time, FLOAT_FORMAT), space.label(state)])
    writer.writerow([format(path.horizon, FLOAT_FORMAT), ''])


def read_path(fo: tp.TextIO, space: StateSpace, updates: bool = False) -> ChainPath:
    rows = list(csv.reader(fo))
    if not rows or [cell.strip() for cell in rows[0]] != ['time', 'state']:
        raise UsageError("Path files must start with the header `time,state`.")
    rows = [row for row in rows[1:] if row]
    if not rows:
        raise UsageError("Empty path file.")
    try:
        times = [float(row[0]) for row in rows]
    except (ValueError, IndexError):
        raise UsageError("Invalid time in path file.")
    if times[0] != 0:
        raise UsageError(f"Paths must start at time 0, got {times[0]}.")
    horizon = None
    if len(rows[-1]) < 2 or not rows[-1][1].strip():
        horizon = times[-1]
        rows, times = rows[:-1], times[:-1]
    if not rows:
        raise UsageError("Path files need an initial state at time 0.")
    states = [space.index(row[1].strip()) for row in rows]
    if horizon is None:
        horizon = times[-1]
    return ChainPath(states[0], times[1:], states[1:], horizon, updates=updates)


def write_records(fo: tp.TextIO, records: tp.Sequence[FilterRecord], fmt: str = 'csv'):
    if fmt == 'jsonl':
        for record in records:
            fo.write(json.dumps(record.as_dict()) + '\n')
        return
    if fmt != 'csv':
        raise UsageError(f"Unknown output format {fmt}.")
    writer = csv.writer(fo, lineterminator='\n')
    if records:
        writer.writerow(records[0].columns())
    for record in records:
        writer.writerow([format(v, FLOAT_FORMAT) if isinstance(v, float) else v for v in record.values()])


def manifest_path(output: Path) -> Path:
    return output.with_name(output.name + '.manifest.json')


def write_manifest(output: Path, manifest: tp.Dict[str, tp.Any]):
    manifest_path(output).write_text(json.dumps(manifest, sort_keys=True, indent=2) + '\n')


def test():
    space = StateSpace(('a', 'b'))
    path = ChainPath(0, (0.1, 1 / 3), (1, 0), horizon=2.)
    fo = io.StringIO()
    write_path(fo, path, space)
    assert fo.getvalue().splitlines()[:2] == ['time,state', '0.0,a']
    assert read_path(io.StringIO(fo.getvalue()), space) == path
    closed = read_path(io.StringIO("time,state\n0,b\n1.5,a\n"), space)
    assert closed == ChainPath(1, (1.5,), (0,), horizon=1.5)

    chain = {'schema_version': 1, 'kind': 'chain', 'states': ['a', 'b'], 'reference': [[0, 1], [1, 0]],
             'target': {'breakpoints': [1.], 'rates': [[[0, 2], [1, 0]], [[0, 1], [1, 0]]]}, 'init': [1, 0]}
    model = model_from_dict(chain)
    assert isinstance(model, ChainModel) and model.target.eval(0, 1, 0.5) == 2.
    try:
        model_from_dict(dict(chain, extra=1))
    except ModelError:
        pass
    else:
        assert False, "unknown fields must be rejected"
    cthmm = {'schema_version': 1, 'kind': 'cthmm', 'hidden_states': ['x'], 'obs_states': ['a', 'b'],
             'lambda': [[0]], 'mu': [1], 'gamma_bar': 1., 'q_bar': [0.5, 0.5], 'gamma': [2.],
             'q': [[0.75, 0.25]], 'init_obs': [1, 0]}
    assert isinstance(model_from_dict(cthmm), CthmmModel)
    bounded = model_from_dict(dict(cthmm, ratio_bound=3.))
    assert isinstance(bounded, CthmmModel) and bounded.to_cmom().obs_rates.ratio_bound == 3.
    assert bounded.to_cmom().validate().ok
    try:
        model_from_dict(dict(cthmm, schema_version=2))
    except ModelError:
        pass
    else:
        assert False

    record = FilterRecord(0.5, 'jump', [0.25, 0.5], -0.2876820724517809, [1 / 3, 2 / 3], 10)
    fo = io.StringIO()
    write_records(fo, [record])
    header, row = fo.getvalue().splitlines()
    assert header == 't,event,sigma_1,sigma_2,log_sigma_total,pi_1,pi_2,particle_count'
    assert row.startswith('0.5,jump,0.25,0.5,')
    fo = io.StringIO()
    write_records(fo, [record], fmt='jsonl')
    assert json.loads(fo.getvalue())['pi_2'] == 2 / 3


if __name__ == '__main__':
    test()

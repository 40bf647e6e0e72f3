# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Filter trajectory records shared by the particle and direct engines."""

from dataclasses import dataclass
import math
import typing as tp

import torch

GRID = 'grid'
JUMP = 'jump'


@dataclass
class FilterRecord:
    """Filter state at time `t`.

    Args:
        t (float): record time.
        event (str): `jump` for observation transition times, `grid` otherwise.
        sigma (list of float): unnormalized filter sigma_t({i}) for each hidden state.
        log_sigma_total (float): log sigma_t(1), accurate even when `sigma` underflows.
        pi (list of float): normalized filter.
        particle_count (int or None): ensemble size for the particle engine.
    """
    t: float
    event: str
    sigma: tp.List[float]
    log_sigma_total: float
    pi: tp.List[float]
    particle_count: tp.Optional[int] = None

    @staticmethod
    def from_scaled(t: float, event: str, scaled: torch.Tensor, log_scale: float,
                    particle_count: tp.Optional[int] = None) -> 'FilterRecord':
        """Build a record from `scaled * exp(log_scale)`, `scaled` having a positive sum."""
        total = float(scaled.sum())
        assert total > 0
        pi = scaled / total
        log_total = log_scale + math.log(total)
        sigma = pi * math.exp(log_total) if log_total < 700 else torch.full_like(pi, math.inf)
        return FilterRecord(t, event, sigma.tolist(), log_total, pi.tolist(), particle_count)

    def columns(self) -> tp.List[str]:
        m = len(self.pi)
        names = ['t', 'event'] + [f'sigma_{i + 1}' for i in range(m)] + ['log_sigma_total']
        names += [f'pi_{i + 1}' for i in range(m)]
        if self.particle_count is not None:
            names.append('particle_count')
        return names

    def values(self) -> tp.List[tp.Any]:
        out: tp.List[tp.Any] = [self.t, self.event, *self.sigma, self.log_sigma_total, *self.pi]
        if self.particle_count is not None:
            out.append(self.particle_count)
        return out

    def as_dict(self) -> tp.Dict[str, tp.Any]:
        return dict(zip(self.columns(), self.values()))


def test():
    record = FilterRecord.from_scaled(1., JUMP, torch.tensor([1., 3.], dtype=torch.float64), math.log(0.5))
    assert record.pi == [0.25, 0.75]
    assert abs(record.log_sigma_total - math.log(2)) < 1e-15
    assert abs(record.sigma[1] - 1.5) < 1e-15
    assert record.columns() == ['t', 'event', 'sigma_1', 'sigma_2', 'log_sigma_total', 'pi_1', 'pi_2']
    huge = FilterRecord.from_scaled(2., GRID, torch.tensor([1., 1.], dtype=torch.float64), 800., 5)
    assert huge.sigma == [math.inf, math.inf] and huge.pi == [0.5, 0.5]
    assert huge.as_dict()['particle_count'] == 5


if __name__ == '__main__':
    test()

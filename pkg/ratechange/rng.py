# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Seeded random streams.

Every variate in the library comes from an `RngStream`. A stream is identified
by `(seed, stream_id)`, optionally extended with extra keys, e.g.
`(generation, 0)` for the particle filter. Keys are fed to
`numpy.random.SeedSequence` as its spawn key, so distinct keys give
statistically independent PCG64 streams and nothing depends on wall-clock time.
"""

from bisect import bisect_right
import math
import typing as tp

import numpy as np
import torch


class RngStream:
    """Reproducible stream of variates.

    Scalar draws are served from a buffer of `block` uniforms so that the pure
    Python path simulators stay cheap. Given the same sequence of calls, the
    output is fully determined by `(seed, stream_id, draws)`.

    Args:
        seed (int): master seed, typically the `--seed` of the CLI.
        stream_id (int or tuple of int): stream key.
        block (int): number of uniforms generated at once for scalar draws.
    """
    def __init__(self, seed: int, stream_id: tp.Union[int, tp.Sequence[int]] = 0, block: int = 256):
        if isinstance(stream_id, int):
            key: tp.Tuple[int, ...] = (stream_id,)
        else:
            key = tuple(int(k) for k in stream_id)
        if seed < 0 or any(k < 0 for k in key):
            raise ValueError("Seeds and stream keys must be non-negative.")
        self.seed = int(seed)
        self.key = key
        self.block = block
        self.draws = 0
        sequence = np.random.SeedSequence(self.seed, spawn_key=key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))
        self._buffer: tp.List[float] = []
        self._cursor = 0

    @property
    def stream_id(self) -> int:
        return self.key[0]

    def substream(self, *keys: int) -> 'RngStream':
        """Return the independent child stream keyed by `self.key + keys`."""
        return RngStream(self.seed, self.key + tuple(keys), block=self.block)

    def uniform(self) -> float:
        """Uniform on [0, 1)."""
        if self._cursor >= len(self._buffer):
            self._buffer = self._generator.random(self.block).tolist()
            self._cursor = 0
        value = self._buffer[self._cursor]
        self._cursor += 1
        self.draws += 1
        return value

    def exponential(self, rate: float) -> float:
        """Exponential holding time with the given rate, `inf` for a zero rate."""
        u = self.uniform()
        if rate <= 0:
            return math.inf
        return -math.log1p(-u) / rate

    def choice(self, cumulative: tp.Sequence[float]) -> int:
        """Draw an index from a cumulative (unnormalized) weight list."""
        total = cumulative[-1]
        u = self.uniform() * total
        index = bisect_right(cumulative, u)
        # Guard against u landing exactly on the total through rounding.
        return min(index, len(cumulative) - 1)

    def uniforms(self, count: int, low: float = 0., high: float = 1.) -> torch.Tensor:
        """Vector of `count` uniforms on [low, high), as a float64 tensor.
        The scalar buffer is drained first so the stream stays a single sequence."""
        head = self._buffer[self._cursor:self._cursor + count]
        self._cursor += len(head)
        rest = count - len(head)
        values = np.asarray(head, dtype=np.float64)
        if rest > 0:
            values = np.concatenate([values, self._generator.random(rest)])
        self.draws += count
        out = torch.from_numpy(values)
        if low != 0. or high != 1.:
            out = low + (high - low) * out
        return out


def test():
    a = RngStream(7, 3)
    b = RngStream(7, 3)
    seq_a = [a.uniform() for _ in range(600)]
    seq_b = [b.uniform() for _ in range(600)]
    assert seq_a == seq_b
    assert a.draws == 600

    c = RngStream(7, 4)
    assert [c.uniform() for _ in range(10)] != seq_a[:10]
    assert a.substream(1).key == (3, 1)

    # Mixed scalar and vector draws replay identically.
    x = RngStream(1, 0)
    y = RngStream(1, 0)
    mixed_x = [x.uniform(), *x.uniforms(5).tolist(), x.exponential(2.)]
    mixed_y = [y.uniform(), *y.uniforms(5).tolist(), y.exponential(2.)]
    assert mixed_x == mixed_y

    rng = RngStream(1234, 0)
    n = 50_000
    mean = sum(rng.exponential(2.) for _ in range(n)) / n
    # Exponential(2) has mean 0.5 and standard deviation 0.5.
    assert abs(mean - 0.5) < 4 * 0.5 / math.sqrt(n), mean
    counts = [0, 0, 0]
    for _ in range(n):
        counts[rng.choice([1., 3., 4.])] += 1
    for count, p in zip(counts, [0.25, 0.5, 0.25]):
        assert abs(count / n - p) < 4 * math.sqrt(p * (1 - p) / n), counts
    assert math.isinf(rng.exponential(0.))


if __name__ == '__main__':
    test()

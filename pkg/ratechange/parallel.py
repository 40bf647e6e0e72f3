# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Worker count and ordered parallel map."""

from concurrent.futures import ThreadPoolExecutor
import typing as tp

import torch

T = tp.TypeVar('T')
R = tp.TypeVar('R')

_THREADS = 1


def set_threads(count: int):
    """Cap the number of workers used by the library and by torch kernels."""
    global _THREADS
    if count < 1:
        raise ValueError(f"Thread count must be at least 1, got {count}.")
    _THREADS = count
    torch.set_num_threads(count)


def threads() -> int:
    return _THREADS


def map_ordered(fn: tp.Callable[[T], R], items: tp.Iterable[T],
                workers: tp.Optional[int] = None) -> tp.List[R]:
    """Apply `fn` to every item, results being returned in input order.
    Callers own one random stream per item so the output does not depend on `workers`."""
    workers = threads() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def test():
    assert map_ordered(lambda x: x * x, range(5), workers=3) == [0, 1, 4, 9, 16]
    assert map_ordered(str, [], workers=2) == []
    previous = threads()
    set_threads(2)
    assert threads() == 2
    set_threads(previous)


if __name__ == '__main__':
    test()

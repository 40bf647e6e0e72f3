# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""Various utilities."""

from hashlib import sha256
from pathlib import Path
import typing as tp

from .chains import ChainPath


def file_checksum(path: tp.Union[str, Path]) -> str:
    sha = sha256()
    with open(path, 'rb') as file:
        while True:
            buf = file.read(2**20)
            if not buf:
                break
            sha.update(buf)
    return sha.hexdigest()


def path_checksum(path: ChainPath) -> str:
    """Digest identifying an observation path exactly, times being hashed bit for bit."""
    sha = sha256()
    sha.update(f"{path.initial_state};{path.horizon.hex()};{int(path.updates)}".encode())
    for time, state in zip(path.jump_times, path.jump_targets):
        sha.update(f";{time.hex()}:{state}".encode())
    return sha.hexdigest()


def test():
    a = ChainPath(0, (0.5, 1.), (1, 0), horizon=2.)
    b = ChainPath(0, (0.5, 1.), (1, 0), horizon=2.)
    c = ChainPath(0, (0.5, 1. + 1e-15), (1, 0), horizon=2.)
    assert path_checksum(a) == path_checksum(b)
    assert path_checksum(a) != path_checksum(c)
    assert file_checksum(__file__) == file_checksum(__file__)


if __name__ == '__main__':
    test()

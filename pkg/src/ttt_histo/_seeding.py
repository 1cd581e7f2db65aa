"""Named seed derivation and keyed random streams."""

import hashlib

import numpy as np
import torch


def derive_seed(base, *names):
    """Derive a 31-bit seed from a base seed and a sequence of names.

    The derivation is a hash, so subsystems seeded from the same base are
    independent of each other and of the order in which they are created.
    """
    h = hashlib.sha256(str(int(base)).encode())
    for name in names:
        h.update(b"\x00")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:4], "little") & 0x7FFFFFFF


def keyed_rng(base, *names):
    return np.random.default_rng(derive_seed(base, *names))


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g

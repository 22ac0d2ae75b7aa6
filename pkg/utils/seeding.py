# utils/seeding.py
# Counter-mode seed derivation: every random stream is a pure function of
# (root seed, purpose keys), so workers can draw in any order.
import hashlib

import numpy as np


def derive_seed(seed: int, *keys: object) -> int:
    """Hash (seed, *keys) into a 63-bit integer seed."""
    material = "/".join([str(int(seed)), *(str(k) for k in keys)]).encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def make_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))

"""Counter-based random streams that split by name.

Each stream is a Philox generator keyed by a BLAKE2b digest of the root seed
and the path of names used to reach it, so a substream does not depend on how
many draws were taken from its parent or its siblings. Normal variates use the
Box-Muller transform on the stream's uniforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .core import Tensor, default_dtype


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for name in path:
        h.update(b"/")
        h.update(name.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, self.path))
        self._gen = np.random.Generator(self._bitgen)

    def split(self, name) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals (float64) via Box-Muller."""
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(shape)

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        st = rng._bitgen.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._bitgen.state = st
        return rng


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def rand_normal(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape), dtype=default_dtype())

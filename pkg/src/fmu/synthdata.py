"""Deterministic low-rank synthetic hyperspectral scenes.

A scene is a sum of ``rank`` separable components, each a non-negative spatial
map (Gaussian blobs over a smoothed-noise texture) times a smooth positive
spectrum (a cubic spline through random positive knots). The cube is scaled to
a maximum of one and clamped to [0, 1].
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .ndtensor import Rng


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    bands: int = 8
    rank: int = 3
    blobs: int = 4
    smoothness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.width, self.height, self.bands) < 8:
            raise ValueError("scene extents must be at least 8")
        if not 1 <= self.rank <= min(self.bands, 8):
            raise ValueError(f"rank must lie in [1, min(bands, 8)], got {self.rank}")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")


def _spatial_map(spec: SceneSpec, rng: Rng) -> np.ndarray:
    w, h = spec.width, spec.height
    ii, jj = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    out = np.zeros((w, h))
    for _ in range(spec.blobs):
        ci, cj = rng.uniform(low=0, high=w), rng.uniform(low=0, high=h)
        radius = rng.uniform(low=0.06, high=0.25) * min(w, h) * math.sqrt(spec.smoothness)
        amp = rng.uniform(low=0.3, high=1.0)
        out += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * radius**2))
    texture = gaussian_filter(rng.normal((w, h)), sigma=1.5 * spec.smoothness, mode="wrap")
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    return out + 0.3 * texture


def _spectrum(spec: SceneSpec, rng: Rng) -> np.ndarray:
    knots = max(3, math.ceil(4 / spec.smoothness))
    xs = np.linspace(0, spec.bands - 1, knots)
    ys = rng.uniform(knots, low=0.15, high=1.0)
    curve = CubicSpline(xs, ys, bc_type="natural")(np.arange(spec.bands))
    return np.maximum(curve, 0.02)


def generate(spec: SceneSpec) -> np.ndarray:
    """Return a ``[W, H, L]`` float64 cube with values in [0, 1] and maximum 1."""
    root = Rng(spec.seed, ("scene",))
    cube = np.zeros((spec.width, spec.height, spec.bands))
    for k in range(spec.rank):
        comp = root.split(k)
        cube += _spatial_map(spec, comp.split("spatial"))[:, :, None] * _spectrum(spec, comp.split("spectrum"))[None, None, :]
    return np.clip(cube / cube.max(), 0.0, 1.0)


def _scene_seed(base_seed: int, index: int) -> int:
    h = hashlib.blake2b(f"{base_seed}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def make_split(n_train: int, n_test: int, base_seed: int, **spec_fields) -> tuple[list[SceneSpec], list[SceneSpec]]:
    """Disjoint, reproducible train/test scene specs."""
    if n_train < 1 or n_test < 0:
        raise ValueError("need at least one train scene and a non-negative test count")
    template = SceneSpec(**spec_fields)
    seeds: list[int] = []
    index = 0
    while len(seeds) < n_train + n_test:
        s = _scene_seed(base_seed, index)
        index += 1
        if s not in seeds:
            seeds.append(s)
    specs = [replace(template, seed=s) for s in seeds]
    return specs[:n_train], specs[n_train:]


def spectral_roughness(cube: np.ndarray) -> float:
    """Mean squared second difference along the band axis."""
    return float(np.mean(np.diff(cube, n=2, axis=-1) ** 2))

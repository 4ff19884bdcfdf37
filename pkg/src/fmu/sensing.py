"""CASSI and optical-filter forward models with their adjoint and pseudoinverse.

Cubes are arrays ``[..., W, H, L]`` with values in [0, 1]; measurements are
``[..., W, Hm]`` where ``Hm = H`` for filter systems and ``H + (L - 1) d`` for
CASSI. Leading axes are treated as a batch.

CASSI shears band ``l`` (0-based) by ``l * d`` pixels along H after masking, so
the voxel ``(i, j, l)`` lands on sensor pixel ``(i, j + l d)`` weighted by the
base mask ``m(i, j)``. Each voxel reaches exactly one sensor pixel, which makes
``Phi Phi^T`` diagonal and the pseudoinverse a per-pixel division.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndtensor import Rng, Tensor, linear_map

CASSI = "cassi"
FILTER = "filter"
DIAG_EPS = 1e-8
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class SensingSystem:
    mode: str
    mask: np.ndarray
    bands: int
    shift: int = 0
    noise_sigma: float = 0.0
    _mask_cube: np.ndarray = field(init=False, repr=False, compare=False)
    _diag: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        if self.mode not in (CASSI, FILTER):
            raise ValueError(f"unknown sensing mode {self.mode!r}")
        if mask.size and (mask.min() < 0 or mask.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if self.bands < 1:
            raise ValueError("need at least one band")
        if self.shift < 0:
            raise ValueError("shift step must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.mode == CASSI:
            if mask.ndim != 2:
                raise ValueError(f"CASSI needs a 2-D base mask, got shape {mask.shape}")
            cube = np.broadcast_to(mask[:, :, None], mask.shape + (self.bands,))
        else:
            if mask.ndim != 3:
                raise ValueError(f"filter mode needs a [W, H, L] mask cube, got shape {mask.shape}")
            if mask.shape[2] != self.bands:
                raise ValueError(f"filter mask has {mask.shape[2]} bands, system declares {self.bands}")
            if self.shift:
                raise ValueError("filter systems have no spectral shear")
            cube = mask
        cube = np.ascontiguousarray(cube)
        cube.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_mask_cube", cube)
        diag = _shear_sum(cube**2, self._offsets())
        # one voxel -> one pixel per band, so Phi Phi^T is diagonal with these entries
        if diag.shape != self.measurement_shape:
            raise AssertionError("sensing map is not one-to-one per band")
        diag.flags.writeable = False
        object.__setattr__(self, "_diag", diag)

    @classmethod
    def cassi(cls, mask, bands: int, shift: int = 2, noise_sigma: float = 0.0) -> "SensingSystem":
        return cls(CASSI, mask, bands, shift, noise_sigma)

    @classmethod
    def filter(cls, mask, noise_sigma: float = 0.0) -> "SensingSystem":
        mask = np.asarray(mask)
        return cls(FILTER, mask, mask.shape[2], 0, noise_sigma)

    def _offsets(self) -> list[int]:
        d = self.shift if self.mode == CASSI else 0
        return [band * d for band in range(self.bands)]

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        w, h = self.mask.shape[:2]
        return (w, h, self.bands)

    @property
    def measurement_shape(self) -> tuple[int, int]:
        w, h = self.mask.shape[:2]
        if self.mode == CASSI:
            return (w, h + (self.bands - 1) * self.shift)
        return (w, h)

    @property
    def mask_cube(self) -> np.ndarray:
        """Per-band transmittance on the unsheared grid, ``[W, H, L]``."""
        return self._mask_cube

    @property
    def phi_diag(self) -> np.ndarray:
        """Diagonal of ``Phi Phi^T`` as a measurement-shaped array."""
        return self._diag

    def with_noise(self, sigma: float) -> "SensingSystem":
        return SensingSystem(self.mode, self.mask, self.bands, self.shift, sigma)


def _shear_sum(cube: np.ndarray, offsets: list[int]) -> np.ndarray:
    w, h, bands = cube.shape[-3:]
    if not any(offsets):
        return cube.sum(axis=-1)
    out = np.zeros(cube.shape[:-3] + (w, h + offsets[-1]), dtype=cube.dtype)
    for band, off in enumerate(offsets):
        out[..., :, off : off + h] += cube[..., band]
    return out


def _check_cube(sys: SensingSystem, x: np.ndarray) -> None:
    if x.ndim < 3 or x.shape[-3:] != sys.cube_shape:
        if x.ndim >= 3 and x.shape[-3:-1] == sys.cube_shape[:2]:
            raise ValueError(f"mask has {sys.bands} bands but cube has {x.shape[-1]}")
        raise ValueError(f"cube shape {x.shape} does not match system cube shape {sys.cube_shape}")


def _check_measurement(sys: SensingSystem, y: np.ndarray) -> None:
    if y.shape[-2:] != sys.measurement_shape:
        raise ValueError(f"measurement shape {y.shape} does not match system measurement shape {sys.measurement_shape}")


def _project(sys: SensingSystem, x) -> np.ndarray:
    x = np.asarray(x)
    _check_cube(sys, x)
    return _shear_sum(x * sys.mask_cube, sys._offsets())


def forward(sys: SensingSystem, x, rng: Rng | None = None) -> np.ndarray:
    """Simulate the sensor image ``Phi x + eta``; noise needs an explicit ``rng``."""
    y = _project(sys, x)
    if sys.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy forward model needs an rng")
        y = y + sys.noise_sigma * rng.normal(y.shape)
    return y


def adjoint(sys: SensingSystem, y) -> np.ndarray:
    """``Phi^T y`` as a cube: each band reads its sheared window of ``y`` times its mask."""
    y = np.asarray(y)
    _check_measurement(sys, y)
    h = sys.cube_shape[1]
    bands = [y[..., :, off : off + h] for off in sys._offsets()]
    return np.stack(bands, axis=-1) * sys.mask_cube


def pinv_apply(sys: SensingSystem, y) -> np.ndarray:
    """``Phi^T (Phi Phi^T)^-1 y``, with dead pixels clamped at ``DIAG_EPS``."""
    y = np.asarray(y)
    _check_measurement(sys, y)
    return adjoint(sys, y / np.maximum(sys.phi_diag, DIAG_EPS))


def vec(x: np.ndarray) -> np.ndarray:
    """Band-major vectorisation: ``[vec(X[:, :, 0]), vec(X[:, :, 1]), ...]``."""
    return np.moveaxis(np.asarray(x), -1, 0).reshape(-1)


def unvec(v: np.ndarray, cube_shape) -> np.ndarray:
    w, h, bands = cube_shape
    return np.moveaxis(np.asarray(v).reshape(bands, w, h), 0, -1)


def build_dense(sys: SensingSystem) -> np.ndarray:
    """Explicit ``Phi = [D_1, ..., D_L]`` with CASSI shear as row re-indexing. Test use only."""
    w, h, bands = sys.cube_shape
    if w * h > DENSE_LIMIT:
        raise ValueError(f"build_dense is limited to W*H <= {DENSE_LIMIT}, got {w * h}")
    wm, hm = sys.measurement_shape
    phi = np.zeros((wm * hm, w * h * bands))
    ii, jj = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    for band, off in enumerate(sys._offsets()):
        rows = (ii * hm + jj + off).reshape(-1)
        cols = band * w * h + (ii * h + jj).reshape(-1)
        phi[rows, cols] = sys.mask_cube[:, :, band].reshape(-1)
    return phi


# differentiable wrappers used by the unfolding network


def forward_t(sys: SensingSystem, x: Tensor) -> Tensor:
    return linear_map(x, lambda a: _project(sys, a), lambda g: adjoint(sys, g), name="sensing_forward")


def pinv_t(sys: SensingSystem, y: Tensor) -> Tensor:
    diag = np.maximum(sys.phi_diag, DIAG_EPS)
    return linear_map(y, lambda a: pinv_apply(sys, a), lambda g: _project(sys, g) / diag, name="sensing_pinv")

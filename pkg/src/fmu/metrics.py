"""PSNR and SSIM for hyperspectral cubes, plus the evaluation report record."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IDENTICAL = "identical"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, data_range: float = 1.0) -> float:
    """PSNR in dB over all voxels; ``math.inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    patches = sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    window = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a**2
    var_b = _filter_valid(b * b, window) - mu_b**2
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean over bands of 2-D SSIM (11x11 Gaussian window, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim needs spatial extents >= {SSIM_WINDOW}, got {a.shape[:2]}")
    return float(np.mean([ssim_2d(a[:, :, k], b[:, :, k], data_range) for k in range(a.shape[2])]))


def _fmt_psnr(value: float):
    return IDENTICAL if math.isinf(value) else round(value, 6)


@dataclass
class EvalReport:
    scenes: list[str]
    psnr: list[float]
    ssim: list[float]
    config_hash: str
    seed: int
    runtime_s: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_text(self) -> str:
        """JSON text; infinite PSNR is written as the ``"identical"`` sentinel."""
        body = asdict(self)
        body["psnr"] = [_fmt_psnr(v) for v in self.psnr]
        body["ssim"] = [round(v, 6) for v in self.ssim]
        body["mean_psnr"] = _fmt_psnr(self.mean_psnr)
        body["mean_ssim"] = round(self.mean_ssim, 6)
        if self.runtime_s is None:
            body.pop("runtime_s")
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        body = json.loads(text)
        body.pop("mean_psnr", None)
        body.pop("mean_ssim", None)
        body["psnr"] = [math.inf if v == IDENTICAL else float(v) for v in body["psnr"]]
        return cls(**body)

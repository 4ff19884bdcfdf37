"""Simulate a CASSI and a filter measurement of one synthetic scene, then undo it with a single projection.

A single GAP projection from zero is the minimum-norm solution, so its PSNR is a
floor that any trained model should beat.

    python3 demos/sensing_roundtrip.py
"""

import numpy as np

from fmu import sensing
from fmu.metrics import psnr
from fmu.ndtensor import Rng, Tensor
from fmu.synthdata import SceneSpec, generate
from fmu.unfolding import gap_project

cube = generate(SceneSpec(seed=3))
rng = Rng(0, ("demo",))
systems = {
    "cassi": sensing.SensingSystem.cassi(rng.uniform((32, 32)), bands=8, shift=2),
    "filter": sensing.SensingSystem.filter(rng.uniform((32, 32, 8))),
}
for name, sys in systems.items():
    y = sensing.forward(sys, cube)
    x = gap_project(sys, Tensor(np.zeros(sys.cube_shape)), y).data
    resid = np.abs(sensing.forward(sys, x) - y).max()
    print(f"{name:6s}  y {y.shape}  pinv PSNR {psnr(np.clip(x, 0, 1), cube):.2f} dB  max residual {resid:.1e}")

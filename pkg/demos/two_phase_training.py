"""Short two-phase run on the synthetic filter-mode task, compared against a prior-free baseline.

Phase 1 trains the latent encoder together with the unfolding network; phase 2 freezes
the encoder and fits the flow prior. About seven minutes on one core. Pass a seed as the
first argument.

    python3 demos/two_phase_training.py 7
"""

import logging
import sys

import numpy as np

from fmu.training import TrainConfig, ablation

logging.basicConfig(level=logging.INFO, format="%(message)s")
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
res = ablation(TrainConfig(seed=seed, epochs=5))
print("test PSNR flow prior:", np.round(res.flow_psnr, 2))
print("test PSNR no prior:  ", np.round(res.base_psnr, 2))
print(f"median gain {res.gain_db:+.2f} dB")

"""Deep unfolding for snapshot spectral imaging with a flow-matching latent prior.

Pure numpy/scipy; the autodiff substrate lives in :mod:`fmu.ndtensor`.
"""

__version__ = "0.1.0"

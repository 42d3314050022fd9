"""Latent diffusion trajectory generation for closed-loop driving, with reward fine-tuning.

Subpackages: ``diffcompute`` (reverse-mode autodiff on numpy) and ``kernels``
(numba hot loops with a numpy fallback). Modules follow the pipeline:
core -> dynamics -> vae -> diffusion -> reward -> rlft -> simulation -> metrics -> cli.
"""
__version__ = "0.1.0"

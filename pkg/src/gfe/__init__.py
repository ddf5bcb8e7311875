"""Decoder-only autoencoding by latent gradient flow.

Instead of a learned encoder, each sample's latent code is the endpoint
of a gradient flow run against the current decoder; the decoder is then
trained on the reconstruction loss at those solved codes.  The package
ships the flow solvers (fixed-grid RK4 with an exact or detached
backward pass, a momentum variant, and an adaptive backtracking
solver), a conventional autoencoder baseline, and a small training
harness with a CLI.
"""

from ._kernels import BACKEND
from .flow import FlowConfig
from .harness import TrainConfig, run_training
from .model import DecoderParams, EncoderParams, init_params

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FlowConfig",
    "TrainConfig",
    "DecoderParams",
    "EncoderParams",
    "init_params",
    "run_training",
    "__version__",
]

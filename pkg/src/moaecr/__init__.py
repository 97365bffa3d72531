"""Mixture-of-Attack-Experts with class regularization, at desk scale."""
from .config import RunConfig, load_config, parse_config, with_overrides
from .diffcore import Tensor, gradcheck, no_grad
from .training import RunRecord, train

__all__ = ["RunConfig", "RunRecord", "Tensor", "gradcheck", "load_config", "no_grad",
           "parse_config", "train", "with_overrides"]
__version__ = "0.1.0"

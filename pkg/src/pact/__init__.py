"""Probabilistic adaptive computation: halting blocks, estimators, toy models."""

from .blocks import BlockConfig, HaltingTrace, run_act, run_block, run_discrete, run_relaxed, run_thresholded
from .models import build_model, load_checkpoint, save_checkpoint
from .stochastic import RngStream, TruncatedGeometricPrior

__version__ = "0.1.0"

__all__ = ["BlockConfig", "HaltingTrace", "RngStream", "TruncatedGeometricPrior", "build_model", "load_checkpoint",
           "run_act", "run_block", "run_discrete", "run_relaxed", "run_thresholded", "save_checkpoint"]

"""Multi-resolution PDE-preserving neural networks for 2D periodic systems.

Modules, bottom up: ``field`` (grids, fields, resampling), ``stencil`` (finite
differences), ``physics`` (right-hand sides and forward Euler), ``datagen``
(reference trajectories and the dataset file), ``autodiff`` (reverse-mode
tensors, Adam, gradcheck), ``model`` (PPNN and the black-box ConvResNet),
``train``, ``rollout`` and ``cli``.
"""
from .field import DivergenceError, Field, Grid2D, ParamVector
from .model import ModelConfig, NextStepModel, build_model

__all__ = ["DivergenceError", "Field", "Grid2D", "ParamVector", "ModelConfig",
           "NextStepModel", "build_model"]
__version__ = "0.1.0"

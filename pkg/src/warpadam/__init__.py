"""WarpAdam: Adam with a learnable gradient warp, plus the machinery to learn it.

The package is organized as:

- ``tensor``: float64 tensors with a reverse-mode autodiff graph whose backward
  rules are themselves differentiable (needed to push gradients through
  unrolled optimizer trajectories).
- ``nn``: small dense networks built on those tensors.
- ``optim``: pure-function optimizer steps — Adam, WarpAdam, and the baseline
  suite (SGD, Momentum, AMSGrad, AdamW, RAdam).
- ``warp``: the warp matrix in its structural forms, the off-diagonal (TOD)
  penalty, unrolled hypergradients, and the outer loop that learns the warps.
- ``tasks``: episodic few-shot task sources (synthetic families and a PGM
  image-directory importer).
- ``bench``: sequential-task training curves, optimizer comparison tables,
  and their CSV formats.
- ``cli``: the ``warpadam`` command.
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, NumericError, grad, finite_diff_grad
from .optim import HyperParams, AdamState, adam_step, warpadam_step, baseline_step
from .warp import WarpMatrix, MetaConfig, warp_apply, tod_penalty, hypergrad_P, meta_update_P

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "grad",
    "finite_diff_grad",
    "HyperParams",
    "AdamState",
    "adam_step",
    "warpadam_step",
    "baseline_step",
    "WarpMatrix",
    "MetaConfig",
    "warp_apply",
    "tod_penalty",
    "hypergrad_P",
    "meta_update_P",
    "__version__",
]

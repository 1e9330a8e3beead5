"""Sparse modular addition sandbox: a one-layer transformer trained with hand-derived gradients."""
__version__ = "0.1.0"

from .kernel import BACKEND as KERNEL_BACKEND  # noqa: E402
from .model import HyperParams, ModelParams, forward, init_params  # noqa: E402
from .task import TaskSpec, sample_dataset  # noqa: E402

__all__ = [
    "KERNEL_BACKEND", "HyperParams", "ModelParams", "TaskSpec",
    "forward", "init_params", "sample_dataset", "__version__",
]

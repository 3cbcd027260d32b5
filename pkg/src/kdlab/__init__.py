"""kdlab: a desk-scale feature-distillation workbench.

Perturbation-generated supervisor features ("avatars"), a teacher-feature
variance temperature, uncertainty-weighted distillation losses, and the
toy training harness and CLI that exercise them.
"""

from .kernels import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]

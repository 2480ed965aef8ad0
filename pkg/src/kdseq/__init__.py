"""Knowledge distillation from earlier training runs, at desk scale."""
from ._kernels import BACKEND

__version__ = "0.1.0"

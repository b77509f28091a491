"""Domain-aware mixture of adapters on a frozen dual encoder, with a numpy autodiff core."""

from .config import RunConfig
from .model import DMAdapterModel

__all__ = ["RunConfig", "DMAdapterModel"]
__version__ = "0.1.0"

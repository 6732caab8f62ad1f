"""Road-impedance principal component network for probabilistic traffic forecasting."""

from .errors import RipcnError
from .pipeline import RunConfig

__version__ = "0.1.0"

__all__ = ["RipcnError", "RunConfig", "__version__"]

"""Learning unmasking policies for masked diffusion models with GRPO."""
from .errors import ConfigError, ContractError, InconsistencyError, NumericalError, UnmaskError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "InconsistencyError", "NumericalError", "UnmaskError", "__version__"]

"""Region-based dense descriptors, uniform-grid keypoints and robust matching."""

from rdnkit.errors import (
    ContractError,
    DecodeError,
    DegeneracyError,
    RdnError,
)

__version__ = "0.1.0"

__all__ = ["ContractError", "DecodeError", "DegeneracyError", "RdnError", "__version__"]

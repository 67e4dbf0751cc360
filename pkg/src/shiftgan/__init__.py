"""Unpaired image translation and feed-forward stylization with a shift-equivariance loss."""

from shiftgan.errors import ConfigError, ContractError, FormatError, TrainingDiverged

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "FormatError", "TrainingDiverged", "__version__"]

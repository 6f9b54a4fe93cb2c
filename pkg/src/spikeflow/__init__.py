"""Hybrid spiking/analog optical-flow estimation from event-camera streams."""

from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    SpikeFlowError,
)
from .tensor import GradTape, Tensor, backward, no_grad, set_strict, strict

__version__ = "0.1.0"

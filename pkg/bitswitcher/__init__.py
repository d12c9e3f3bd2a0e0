"""Quantized weight-shared super-networks with per-sample bit-width selection."""
from .errors import BitSwitcherError
from .quantization import BitSet, QuantMode
from .supernet import BitConfig, NetSpec, SuperNet

__version__ = "1.0.0"

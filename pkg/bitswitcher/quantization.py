"""
Fake quantization with learned step sizes.

Forward rule for weights and activations alike::

    q(t) = s * round(clip(t / s, Q_b, P_b))

with half-away-from-zero rounding. The backward pass is straight-through
inside the clip range (zero outside) and the step size receives the LSQ
gradient scaled by ``1 / sqrt(N * P_b)``.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from .errors import DomainError
from .tensor import DEFAULT_DTYPE, Parameter

MIN_BITS = 2
MAX_BITS = 8
# Sentinel for layers that are never quantized (first conv, classifier)
FULL_PRECISION = 32

STEP_FLOOR = 1e-9
STEP_FALLBACK = 1e-3


class QuantKind(str, Enum):
    WEIGHTS = "weights"
    ACTIVATIONS = "activations"


class QuantMode(str, Enum):
    """How weights below b_max are derived: from the float master or from the b_max grid."""
    ROUND_MASTER = "round_master"
    WEIGHTS_ALIGNED = "weights_aligned"


def check_bit_width(b: int) -> int:
    """
    Validates a quantizing bit-width.

    Raises:
        DomainError: If ``b`` is not an integer in [MIN_BITS, MAX_BITS].
    """
    if isinstance(b, bool) or int(b) != b or not MIN_BITS <= int(b) <= MAX_BITS:
        raise DomainError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {b}")
    return int(b)


@dataclass(frozen=True)
class QuantBounds:
    lower: int
    upper: int

    @property
    def levels(self) -> int:
        return self.upper - self.lower + 1


def bounds_for(b: int, kind: Union[QuantKind, str]) -> QuantBounds:
    """
    Integer clipping levels of a b-bit quantizer.

    Args:
        b (int): Bit-width in [2, 8].
        kind (QuantKind): Signed levels for weights, unsigned for activations.

    Returns:
        QuantBounds: (Q_b, P_b).
    """
    b = check_bit_width(b)
    kind = QuantKind(kind)
    if kind is QuantKind.WEIGHTS:
        return QuantBounds(-(2 ** (b - 1)), 2 ** (b - 1) - 1)
    return QuantBounds(0, 2 ** b - 1)


@dataclass(frozen=True)
class BitSet:
    """
    The candidate bit-widths of every quantizable layer, largest first.

    A single-element set is accepted for enumeration and sampling; training
    the super-network needs at least two entries.
    """
    bits: Tuple[int, ...]

    def __post_init__(self):
        bits = tuple(check_bit_width(b) for b in self.bits)
        if not bits:
            raise DomainError("bit set must not be empty")
        if any(a <= b for a, b in zip(bits, bits[1:])):
            raise DomainError(f"bit set must be strictly decreasing without duplicates, got {bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def parse(cls, text: str) -> "BitSet":
        """Parses "4,3,2" (any order) into a BitSet."""
        try:
            values = [int(part) for part in text.replace(" ", "").split(",") if part]
        except ValueError as e:
            raise DomainError(f"malformed bit set '{text}': {e}") from e
        return cls(tuple(sorted(set(values), reverse=True)))

    @property
    def b_max(self) -> int:
        return self.bits[0]

    @property
    def b_min(self) -> int:
        return self.bits[-1]

    @property
    def mids(self) -> Tuple[int, ...]:
        return self.bits[1:-1]

    def index(self, b: int) -> int:
        if b not in self.bits:
            raise DomainError(f"bit-width {b} not in bit set {self}")
        return self.bits.index(b)

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self) -> Iterator[int]:
        return iter(self.bits)

    def __contains__(self, b) -> bool:
        return b in self.bits

    def __str__(self) -> str:
        return ",".join(str(b) for b in self.bits)


# ---------------------------------------------------------------------------
# Forward rules
# ---------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    """Rounds to the nearest integer, ties away from zero."""
    magnitude = np.abs(x)
    lower = np.floor(magnitude)
    # compare the exact fraction; adding 0.5 first rounds 0.49999997 up
    return np.sign(x) * np.where(magnitude - lower >= 0.5, lower + 1, lower)


def _check_step(s) -> None:
    if not float(s) > 0:
        raise DomainError(f"step size must be positive, got {float(s)}")


def quantize_round(t: np.ndarray, s, bounds: QuantBounds) -> np.ndarray:
    """
    Quantizes ``t`` onto the grid {s*k : Q_b <= k <= P_b}.

    Args:
        t (np.ndarray): Tensor to quantize.
        s: Positive step size (scalar or 0-d array).
        bounds (QuantBounds): Integer clipping levels.

    Returns:
        np.ndarray: The fake-quantized tensor, same dtype as ``t``.
    """
    _check_step(s)
    s = np.asarray(s, dtype=t.dtype)
    levels = round_half_away(np.clip(t / s, bounds.lower, bounds.upper))
    return s * levels


def quantize_weights_aligned(master_q: np.ndarray, s, bounds: QuantBounds) -> np.ndarray:
    """
    Re-quantizes weights stored on the b_max grid onto a b-bit grid.

    ``master_q`` is the b_max quantization of the float weights; at b = b_max
    the caller passes the float weights themselves, which makes the result
    identical to quantize_round at b_max.
    """
    return quantize_round(master_q, s, bounds)


def align_weights(weights: np.ndarray, steps: Mapping[int, object], b: int, bitset: BitSet) -> np.ndarray:
    """
    Weights of one layer at bit ``b`` derived through the b_max grid.

    Args:
        weights (np.ndarray): Float master weights.
        steps (Mapping): Weight step size per bit-width.
        b (int): Target bit-width.
        bitset (BitSet): The layer's bit set.
    """
    b_max = bitset.b_max
    master_q = quantize_weights_aligned(weights, steps[b_max], bounds_for(b_max, QuantKind.WEIGHTS))
    if b == b_max:
        return master_q
    return quantize_weights_aligned(master_q, steps[b], bounds_for(b, QuantKind.WEIGHTS))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def ste_grad_input(t: np.ndarray, s, bounds: QuantBounds) -> np.ndarray:
    """1 where Q_b < t/s < P_b, else 0."""
    _check_step(s)
    v = t / np.asarray(s, dtype=t.dtype)
    return ((v > bounds.lower) & (v < bounds.upper)).astype(t.dtype)


def lsq_step_elements(t: np.ndarray, s, bounds: QuantBounds) -> np.ndarray:
    """Per-element d q / d s before gradient scaling."""
    _check_step(s)
    v = t / np.asarray(s, dtype=t.dtype)
    inside = round_half_away(v) - v
    return np.where(v <= bounds.lower, bounds.lower, np.where(v >= bounds.upper, bounds.upper, inside)).astype(t.dtype)


def lsq_grad_scale(num_elements: int, bounds: QuantBounds) -> float:
    return 1.0 / math.sqrt(num_elements * bounds.upper)


def lsq_grad_step(t: np.ndarray, s, bounds: QuantBounds, grad_elements: np.ndarray) -> float:
    """
    Step-size gradient of a quantizer given the upstream gradient.

    Args:
        t (np.ndarray): Quantizer input.
        s: Step size.
        bounds (QuantBounds): Clipping levels.
        grad_elements (np.ndarray): Upstream gradient w.r.t. the quantizer output.

    Returns:
        float: Scaled gradient w.r.t. s.
    """
    total = float((grad_elements * lsq_step_elements(t, s, bounds)).sum())
    return total * lsq_grad_scale(t.size, bounds)


def fake_quantize_forward(t: np.ndarray, s, bounds: QuantBounds) -> Tuple[np.ndarray, tuple]:
    return quantize_round(t, s, bounds), (t, s, bounds)


def fake_quantize_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, float]:
    """Returns the STE input gradient and the LSQ step gradient."""
    t, s, bounds = cache
    return dout * ste_grad_input(t, s, bounds), lsq_grad_step(t, s, bounds, dout)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_step_weight(weights: np.ndarray, b: int) -> float:
    """
    Initial weight step size: max(|mu - 3 sigma|, |mu + 3 sigma|) / 2^(b-1).

    Falls back to STEP_FALLBACK for an all-zero tensor.
    """
    if weights.size == 0:
        raise DomainError("cannot initialize a step size from an empty tensor")
    b = check_bit_width(b)
    mu = float(np.mean(weights, dtype=np.float64))
    sigma = float(np.std(weights, dtype=np.float64))
    step = max(abs(mu - 3 * sigma), abs(mu + 3 * sigma)) / 2 ** (b - 1)
    return step if step > 0 else STEP_FALLBACK


def init_step_activation(abs_mean: float, b: int) -> float:
    """Initial activation step size: 2 * mean(|x|) / sqrt(P_b)."""
    step = 2.0 * float(abs_mean) / math.sqrt(bounds_for(b, QuantKind.ACTIVATIONS).upper)
    return step if step > 0 else STEP_FALLBACK


class StepSizeBank:
    """
    Learned step sizes of one quantizable layer, one per bit-width and operand.

    Step sizes are scalar Parameters without weight decay and with a floor of
    STEP_FLOOR, so they stay positive after every optimizer step.
    """

    def __init__(self, bitset: BitSet, dtype=DEFAULT_DTYPE, name: str = "layer"):
        self.bitset = bitset
        self.weights: Dict[int, Parameter] = {}
        self.activations: Dict[int, Parameter] = {}
        for b in bitset:
            self.weights[b] = Parameter(np.array(STEP_FALLBACK, dtype=dtype), f"{name}.step_w@{b}",
                                        decay=False, floor=STEP_FLOOR)
            self.activations[b] = Parameter(np.array(STEP_FALLBACK, dtype=dtype), f"{name}.step_x@{b}",
                                            decay=False, floor=STEP_FLOOR)

    def step(self, b: int, kind: Union[QuantKind, str]) -> Parameter:
        table = self.weights if QuantKind(kind) is QuantKind.WEIGHTS else self.activations
        if b not in table:
            raise DomainError(f"no step size for bit-width {b}")
        return table[b]

    def parameters(self) -> List[Parameter]:
        return [self.weights[b] for b in self.bitset] + [self.activations[b] for b in self.bitset]

    def initialize_weights(self, weights: np.ndarray):
        for b, p in self.weights.items():
            p.value[...] = init_step_weight(weights, b)

    def initialize_activations(self, abs_mean: float):
        for b, p in self.activations.items():
            p.value[...] = init_step_activation(abs_mean, b)

    def weight_steps(self) -> Dict[int, np.ndarray]:
        return {b: p.value for b, p in self.weights.items()}


def noise_variance_report(t: np.ndarray, bank: StepSizeBank, bitset: BitSet,
                          kind: Union[QuantKind, str] = QuantKind.WEIGHTS) -> Dict[int, float]:
    """
    Variance of the quantization noise t - q_b(t) for every bit-width.

    Args:
        t (np.ndarray): Tensor to inspect.
        bank (StepSizeBank): Step sizes to quantize with.
        bitset (BitSet): Bit-widths to report.
        kind (QuantKind): Which step sizes and bounds to use.

    Returns:
        dict: bit-width -> Var(t - q_b(t)).
    """
    report = {}
    for b in bitset:
        noise = t - quantize_round(t, bank.step(b, kind).value, bounds_for(b, kind))
        report[b] = float(np.var(noise, dtype=np.float64))
    logging.debug(f"noise variance report ({QuantKind(kind).value}): {report}")
    return report


def mean_abs_error_report(t: np.ndarray, bank: StepSizeBank, bitset: BitSet,
                          kind: Union[QuantKind, str] = QuantKind.WEIGHTS) -> Dict[int, float]:
    """Mean |t - q_b(t)| for every bit-width."""
    return {
        b: float(np.mean(np.abs(t - quantize_round(t, bank.step(b, kind).value, bounds_for(b, kind))),
                         dtype=np.float64))
        for b in bitset
    }

"""
Numeric substrate for BitSwitcher.

Tensors are plain numpy arrays. Every layer primitive comes as a
``*_forward`` function returning ``(output, cache)`` and a matching
``*_backward`` function that turns an upstream gradient plus the cache into
gradients for its inputs. Parameters carry their gradient accumulator and
optimizer slots; the optimizers update them in place.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .errors import DimensionError, DomainError, NumericalError, PreconditionError

# Precision used for training runs; gradient checks switch to CHECK_DTYPE
DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

PROB_CLAMP = 1e-12
PROB_TOLERANCE = 1e-5

# Fixed spawn keys so that adding a consumer never shifts another stream
RNG_STREAMS = ("init", "shuffle", "sampling", "exploration", "data", "agent_init", "replay")


class RngStreams:
    """
    Independent, reproducible random streams, one per consumer.

    Each stream is a PCG64 generator seeded from ``SeedSequence(seed,
    spawn_key=(k,))`` where ``k`` is the consumer's fixed index, so equal
    seeds yield identical draws on every platform regardless of the order in
    which consumers ask for their stream.
    """

    def __init__(self, seed: int):
        """
        Args:
            seed (int): Non-negative 64-bit seed.
        """
        if seed < 0:
            raise DomainError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        """
        Returns the generator for one consumer, creating it on first use.

        Args:
            name (str): One of RNG_STREAMS.

        Returns:
            np.random.Generator: The consumer's stream.
        """
        if name not in RNG_STREAMS:
            raise DomainError(f"unknown random stream '{name}', expected one of {RNG_STREAMS}")
        if name not in self._streams:
            sequence = np.random.SeedSequence(self.seed, spawn_key=(RNG_STREAMS.index(name),))
            self._streams[name] = np.random.Generator(np.random.PCG64(sequence))
        return self._streams[name]


@dataclass(eq=False)
class Parameter:
    """
    A learnable tensor with its gradient accumulator and optimizer slots.

    ``decay`` disables weight decay when False (step sizes, BN affine).
    ``floor`` clamps the value from below after every optimizer step.
    """
    value: np.ndarray
    name: str = ""
    decay: bool = True
    learnable: bool = True
    floor: Optional[float] = None
    grad: np.ndarray = field(init=False)
    slots: Dict[str, np.ndarray] = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "Parameter":
        """Returns a detached copy in another precision (slots are dropped)."""
        return Parameter(self.value.astype(dtype), self.name, self.decay, self.learnable, self.floor)


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    """Raises NumericalError if ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values in {what}")
    return array


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """
    Output extent of a convolution along one axis (floor convention).

    Raises:
        DimensionError: If the padded input is smaller than the kernel.
    """
    if stride < 1 or pad < 0 or kernel < 1:
        raise DimensionError(f"invalid conv geometry kernel={kernel} stride={stride} pad={pad}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise DimensionError(f"kernel {kernel} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int, pad: int) -> Tuple[np.ndarray, tuple]:
    """
    Cross-correlation of an NCHW batch with an OIKK kernel, no bias.

    Args:
        x (np.ndarray): Input of shape (N, C_in, H, W).
        weight (np.ndarray): Kernel of shape (C_out, C_in, K, K).
        stride (int): Stride along both spatial axes.
        pad (int): Zero padding on every spatial border.

    Returns:
        tuple: Output of shape (N, C_out, H', W') and the backward cache.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kernel = weight.shape[2]
    if weight.shape[3] != kernel:
        raise DimensionError(f"only square kernels are supported, got {weight.shape[2:]}")
    h_out = conv_output_size(x.shape[2], kernel, stride, pad)
    w_out = conv_output_size(x.shape[3], kernel, stride, pad)

    x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out, (x.shape, x_pad.shape, windows, weight, stride, pad)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. its input and weight."""
    x_shape, pad_shape, windows, weight, stride, pad = cache
    kernel = weight.shape[2]
    h_out, w_out = dout.shape[2], dout.shape[3]

    dweight = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # (N, H', W', C_in, K, K)
    dx_pad = np.zeros(pad_shape, dtype=dout.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dx_pad[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dx_pad[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
    return np.ascontiguousarray(dx), dweight


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BNState:
    """
    One batch-normalization instance: affine parameters and running statistics.

    ``updates`` counts the train-mode forwards that changed the running
    statistics.
    """
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON
    updates: int = 0

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, name: str = "bn") -> "BNState":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma", decay=False),
            beta=Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta", decay=False),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.value.shape[0]


def _channel_view(x: np.ndarray) -> Tuple[tuple, tuple]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise DimensionError(f"batch norm expects 2-d or 4-d input, got shape {x.shape}")


def batchnorm_forward(x: np.ndarray, state: BNState, mode: str = "train",
                      track_stats: bool = True) -> Tuple[np.ndarray, tuple]:
    """
    Batch normalization followed by the affine transform.

    Args:
        x (np.ndarray): Input of shape (N, C) or (N, C, H, W).
        state (BNState): Parameters and running statistics.
        mode (str): "train" normalizes with batch statistics, "eval" with the
            running statistics.
        track_stats (bool): In train mode, whether the running statistics are
            updated. Target networks normalize with batch statistics without
            touching their running statistics.

    Returns:
        tuple: Normalized output and the backward cache.
    """
    axes, view = _channel_view(x)
    if x.shape[1] != state.channels:
        raise DimensionError(f"input has {x.shape[1]} channels, BN expects {state.channels}")
    if mode == "train":
        if x.shape[0] == 0:
            raise PreconditionError("batch norm in train mode needs a nonempty batch")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if track_stats:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
            state.updates += 1
    elif mode == "eval":
        mean = state.running_mean
        var = state.running_var
    else:
        raise DomainError(f"unknown batch norm mode '{mode}'")

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
    out = state.gamma.value.reshape(view) * x_hat + state.beta.value.reshape(view)
    return out, (mode, x_hat, inv_std, state.gamma.value, axes, view)


def batchnorm_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm_forward w.r.t. input, scale and shift."""
    mode, x_hat, inv_std, gamma, axes, view = cache
    dgamma = (dout * x_hat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dx_hat = dout * gamma.reshape(view)
    if mode == "eval":
        return dx_hat * inv_std.reshape(view), dgamma, dbeta
    count = dout.size // dout.shape[1]
    dx = (inv_std.reshape(view) / count) * (
        count * dx_hat
        - dx_hat.sum(axis=axes).reshape(view)
        - x_hat * (dx_hat * x_hat).sum(axis=axes).reshape(view)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Pointwise, pooling and dense layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return dout * mask


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    if x.ndim != 4:
        raise DimensionError(f"global average pool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout: np.ndarray, shape: tuple) -> np.ndarray:
    area = shape[2] * shape[3]
    return np.broadcast_to((dout / area)[:, :, None, None], shape).copy()


def fully_connected_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """
    Dense layer ``x @ weight.T + bias``.

    Args:
        x (np.ndarray): Input of shape (N, D).
        weight (np.ndarray): Weight of shape (O, D).
        bias (np.ndarray): Bias of shape (O,).
    """
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"fully connected layer expects (N, {weight.shape[1]}) input, got {x.shape}")
    return x @ weight.T + bias, (x, weight)


def fully_connected_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of integer labels under softmax(logits).

    Returns:
        tuple: Scalar loss and its gradient w.r.t. the logits.
    """
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    n = logits.shape[0]
    log_probs = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    return loss, dlogits / n


def kl_divergence(teacher_probs: np.ndarray, student_logits: np.ndarray,
                  temperature: float = 1.0) -> Tuple[float, np.ndarray]:
    """
    KL(teacher || student) averaged over the batch.

    The teacher is a constant: no gradient is returned for it. Probabilities
    are clamped to at least PROB_CLAMP before taking logs. For a temperature
    other than 1 the student is softened by it and the loss is scaled by T^2.

    Args:
        teacher_probs (np.ndarray): Rows summing to 1, shape (N, classes).
        student_logits (np.ndarray): Student logits, same shape.
        temperature (float): Softening temperature of the student.

    Returns:
        tuple: Scalar loss and its gradient w.r.t. the student logits.
    """
    if teacher_probs.shape != student_logits.shape:
        raise DimensionError(f"teacher {teacher_probs.shape} and student {student_logits.shape} differ")
    if np.any(np.abs(teacher_probs.sum(axis=1) - 1.0) > PROB_TOLERANCE):
        raise DomainError("teacher probabilities must sum to 1 per row")
    n = student_logits.shape[0]
    student_probs = softmax(student_logits, temperature)
    log_teacher = np.log(np.maximum(teacher_probs, PROB_CLAMP))
    log_student = np.log(np.maximum(student_probs, PROB_CLAMP))
    loss = float((teacher_probs * (log_teacher - log_student)).sum() / n) * temperature ** 2
    dlogits = temperature * (student_probs - teacher_probs) / n
    return loss, dlogits.astype(student_logits.dtype)


# ---------------------------------------------------------------------------
# Optimizers and schedules
# ---------------------------------------------------------------------------

def _finish_update(p: Parameter):
    if p.floor is not None:
        np.maximum(p.value, p.floor, out=p.value)
    check_finite(p.value, f"parameter {p.name}")


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """
    One SGD step with heavy-ball momentum and decoupled-from-flag weight decay.

    Parameters flagged ``decay=False`` get no weight decay.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not p.learnable:
            continue
        grad = p.grad
        if weight_decay and p.decay:
            grad = grad + weight_decay * p.value
        if momentum:
            buf = p.slots.get("momentum")
            if buf is None:
                buf = np.zeros_like(p.value)
                p.slots["momentum"] = buf
            buf *= momentum
            buf += grad
            grad = buf
        p.value -= lr * grad
        _finish_update(p)


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam step with bias correction."""
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not p.learnable:
            continue
        if "m" not in p.slots:
            p.slots["m"] = np.zeros_like(p.value)
            p.slots["v"] = np.zeros_like(p.value)
            p.slots["t"] = np.zeros((), dtype=np.int64)
        p.slots["t"] += 1
        t = int(p.slots["t"])
        p.slots["m"][...] = beta1 * p.slots["m"] + (1 - beta1) * p.grad
        p.slots["v"][...] = beta2 * p.slots["v"] + (1 - beta2) * p.grad * p.grad
        m_hat = p.slots["m"] / (1 - beta1 ** t)
        v_hat = p.slots["v"] / (1 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        _finish_update(p)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at total_steps."""
    if lr0 <= 0:
        raise DomainError(f"learning rate must be positive, got {lr0}")
    if total_steps <= 0:
        raise DomainError(f"total_steps must be positive, got {total_steps}")
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Verification harness
# ---------------------------------------------------------------------------

def finite_difference_check(fn: Callable[[np.ndarray], float], grad_fn: Callable[[np.ndarray], np.ndarray],
                            at: np.ndarray, eps: float = 1e-6) -> float:
    """
    Compares an analytic gradient with central finite differences.

    Both callables are evaluated in 64-bit precision.

    Args:
        fn (callable): Scalar function of one tensor.
        grad_fn (callable): Analytic gradient of ``fn``.
        at (np.ndarray): Evaluation point.
        eps (float): Finite-difference step.

    Returns:
        float: Worst relative error, denominator max(|analytic|, |numeric|, 1e-8).
    """
    x = np.array(at, dtype=CHECK_DTYPE)
    analytic = np.asarray(grad_fn(x.copy()), dtype=CHECK_DTYPE)
    if analytic.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic.shape} differs from input shape {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        upper = float(fn(x.copy()))
        flat[i] = saved - eps
        lower = float(fn(x.copy()))
        flat[i] = saved
        numeric = (upper - lower) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    logging.debug(f"finite difference check over {flat.size} coordinates: max rel error {worst:.3e}")
    return worst

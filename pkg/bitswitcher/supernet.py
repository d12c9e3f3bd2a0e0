"""
The weight-shared, layer-wise quantizable super-network.

One master weight tensor per quantizable convolution serves every bit-width;
each layer keeps one step-size pair and one BN instance per bit-width and
switches them according to the BitConfig of the forward pass. The first
convolution and the classifier stay at full precision.
"""
import copy
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .cost_model import LayerGeometry, macs_of_layer
from .errors import ConfigSpaceError, DimensionError, DomainError
from .quantization import (
    FULL_PRECISION, BitSet, QuantKind, QuantMode, StepSizeBank, align_weights, bounds_for,
    fake_quantize_backward, fake_quantize_forward,
)
from .tensor import (
    DEFAULT_DTYPE, BNState, Parameter, RngStreams, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, conv_output_size, fully_connected_backward, fully_connected_forward,
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, zero_grads,
)

# Reference desk-scale architecture
INPUT_SHAPE = (1, 28, 28)
STEM_CHANNELS = 16
QUANT_LAYERS = ((32, 2), (32, 1), (64, 2), (64, 1))  # (out_channels, stride)
KERNEL = 3
PADDING = 1
DEFAULT_CLASSES = 10
DEFAULT_ENUMERATION_CAP = 100_000


@dataclass(frozen=True)
class BitConfig:
    """One bit-width per quantizable layer."""
    bits: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))

    @classmethod
    def uniform(cls, b: int, num_layers: int) -> "BitConfig":
        return cls((b,) * num_layers)

    @classmethod
    def parse(cls, text: str) -> "BitConfig":
        """Parses "4,3,2,2" or "4-3-2-2"."""
        try:
            return cls(tuple(int(part) for part in text.replace("-", ",").split(",") if part.strip()))
        except ValueError as e:
            raise DomainError(f"malformed bit config '{text}': {e}") from e

    @property
    def is_uniform(self) -> bool:
        return len(set(self.bits)) == 1

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, i: int) -> int:
        return self.bits[i]

    def __str__(self) -> str:
        return "-".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a super-network, enough to rebuild it from a checkpoint."""
    input_shape: Tuple[int, int, int] = INPUT_SHAPE
    stem_channels: int = STEM_CHANNELS
    layers: Tuple[Tuple[int, int], ...] = QUANT_LAYERS
    classes: int = DEFAULT_CLASSES
    bits: Tuple[int, ...] = (4, 3, 2)

    @property
    def bitset(self) -> BitSet:
        return BitSet(self.bits)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stem_channels": self.stem_channels,
            "layers": [list(layer) for layer in self.layers],
            "classes": self.classes,
            "bits": list(self.bits),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetSpec":
        return cls(
            input_shape=tuple(data["input_shape"]),
            stem_channels=int(data["stem_channels"]),
            layers=tuple(tuple(layer) for layer in data["layers"]),
            classes=int(data["classes"]),
            bits=tuple(data["bits"]),
        )


@dataclass
class ForwardResult:
    """Logits of one forward pass plus what backward and the policy need."""
    logits: np.ndarray
    tape: list
    snapshots: Optional[List[np.ndarray]] = None


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class FullPrecisionConv:
    """3x3 convolution + BN + relu, never quantized."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE, name: str = "stem"):
        self.name = name
        self.stride = stride
        self.weight = Parameter(_he_normal(rng, (out_channels, in_channels, KERNEL, KERNEL),
                                           in_channels * KERNEL * KERNEL, dtype), f"{name}.weight")
        self.bn = BNState.create(out_channels, dtype, f"{name}.bn")

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bn.gamma, self.bn.beta]

    def bn_states(self) -> Dict[str, BNState]:
        return {f"{self.name}.bn": self.bn}

    def forward(self, x: np.ndarray, mode: str, track_stats: bool = True):
        y, conv_cache = conv2d_forward(x, self.weight.value, self.stride, PADDING)
        z, bn_cache = batchnorm_forward(y, self.bn, mode, track_stats)
        a, mask = relu_forward(z)
        return a, (conv_cache, bn_cache, mask)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        conv_cache, bn_cache, mask = cache
        dy, dgamma, dbeta = batchnorm_backward(relu_backward(dout, mask), bn_cache)
        self.bn.gamma.grad += dgamma
        self.bn.beta.grad += dbeta
        dx, dweight = conv2d_backward(dy, conv_cache)
        self.weight.grad += dweight
        return dx


class QuantConvLayer:
    """
    A quantizable 3x3 convolution with switchable step sizes and BN.

    The layer quantizes its input activations (unsigned bounds, since the
    input is a relu output) and its master weights with the step sizes of the
    requested bit-width, convolves, and normalizes with that bit-width's BN.
    ``b = FULL_PRECISION`` bypasses both quantizers and uses BN_{b_max}; it
    only serves full-precision pretraining.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, bitset: BitSet,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE, name: str = "layer"):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.bitset = bitset
        self.weight = Parameter(_he_normal(rng, (out_channels, in_channels, KERNEL, KERNEL),
                                           in_channels * KERNEL * KERNEL, dtype), f"{name}.weight")
        self.steps = StepSizeBank(bitset, dtype, name)
        self.bn: Dict[int, BNState] = {b: BNState.create(out_channels, dtype, f"{name}.bn@{b}") for b in bitset}

    def parameters(self) -> List[Parameter]:
        params = [self.weight] + self.steps.parameters()
        for b in self.bitset:
            params += [self.bn[b].gamma, self.bn[b].beta]
        return params

    def bn_states(self) -> Dict[str, BNState]:
        return {f"{self.name}.bn@{b}": self.bn[b] for b in self.bitset}

    def quantized_weights(self, b: int, quant_mode: QuantMode = QuantMode.ROUND_MASTER) -> np.ndarray:
        if quant_mode is QuantMode.WEIGHTS_ALIGNED:
            return align_weights(self.weight.value, self.steps.weight_steps(), b, self.bitset)
        return fake_quantize_forward(self.weight.value, self.steps.weights[b].value,
                                     bounds_for(b, QuantKind.WEIGHTS))[0]

    def forward(self, x: np.ndarray, b: int, mode: str, track_stats: bool = True,
                quant_mode: QuantMode = QuantMode.ROUND_MASTER):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"{self.name} expects {self.in_channels} input channels, got shape {x.shape}")
        if b == FULL_PRECISION:
            x_cache = w_cache = None
            xq, wq = x, self.weight.value
            bn = self.bn[self.bitset.b_max]
        else:
            if b not in self.bitset:
                raise DomainError(f"{self.name} has no mode for bit-width {b}")
            xq, x_cache = fake_quantize_forward(x, self.steps.activations[b].value,
                                                bounds_for(b, QuantKind.ACTIVATIONS))
            if quant_mode is QuantMode.WEIGHTS_ALIGNED:
                wq, w_cache = self.quantized_weights(b, quant_mode), None
            else:
                wq, w_cache = fake_quantize_forward(self.weight.value, self.steps.weights[b].value,
                                                    bounds_for(b, QuantKind.WEIGHTS))
            bn = self.bn[b]
        y, conv_cache = conv2d_forward(xq, wq, self.stride, PADDING)
        z, bn_cache = batchnorm_forward(y, bn, mode, track_stats)
        a, mask = relu_forward(z)
        return a, (b, quant_mode, x_cache, w_cache, conv_cache, bn, bn_cache, mask)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        b, quant_mode, x_cache, w_cache, conv_cache, bn, bn_cache, mask = cache
        if quant_mode is QuantMode.WEIGHTS_ALIGNED:
            raise DomainError("weights-aligned mode is export-only and has no backward pass")
        dy, dgamma, dbeta = batchnorm_backward(relu_backward(dout, mask), bn_cache)
        bn.gamma.grad += dgamma
        bn.beta.grad += dbeta
        dxq, dwq = conv2d_backward(dy, conv_cache)
        if b == FULL_PRECISION:
            self.weight.grad += dwq
            return dxq
        dweight, dstep_w = fake_quantize_backward(dwq, w_cache)
        self.weight.grad += dweight
        self.steps.weights[b].grad += dstep_w
        dx, dstep_x = fake_quantize_backward(dxq, x_cache)
        self.steps.activations[b].grad += dstep_x
        return dx


class SuperNet:
    """
    Stem conv -> quantizable conv layers -> global average pool -> classifier.

    Args:
        spec (NetSpec): Architecture and bit set.
        rng (np.random.Generator): Initialization stream.
        dtype: Parameter precision (float32 for training, float64 for checks).
    """

    def __init__(self, spec: NetSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.bitset = spec.bitset
        self.dtype = dtype
        channels, height, width = spec.input_shape
        self.stem = FullPrecisionConv(channels, spec.stem_channels, 1, rng, dtype, "stem")
        self.layers: List[QuantConvLayer] = []
        in_channels = spec.stem_channels
        for i, (out_channels, stride) in enumerate(spec.layers):
            self.layers.append(QuantConvLayer(in_channels, out_channels, stride, self.bitset, rng, dtype,
                                              f"layer{i + 1}"))
            in_channels = out_channels
        self.head_weight = Parameter(_he_normal(rng, (spec.classes, in_channels), in_channels, dtype) * 0.5,
                                     "head.weight")
        self.head_bias = Parameter(np.zeros(spec.classes, dtype=dtype), "head.bias", decay=False)

    @classmethod
    def reference(cls, bits: Sequence[int] = (4, 3, 2), classes: int = DEFAULT_CLASSES,
                  seed: int = 0, dtype=DEFAULT_DTYPE) -> "SuperNet":
        """The fixed desk-scale reference architecture."""
        return cls(NetSpec(bits=tuple(sorted(bits, reverse=True)), classes=classes),
                   RngStreams(seed).get("init"), dtype)

    @property
    def num_quant_layers(self) -> int:
        return len(self.layers)

    # -- configurations ------------------------------------------------------

    def check_config(self, cfg: BitConfig) -> BitConfig:
        if len(cfg) != self.num_quant_layers:
            raise DimensionError(f"config {cfg} has {len(cfg)} entries, net has {self.num_quant_layers} "
                                 f"quantizable layers")
        for b in cfg:
            if b not in self.bitset:
                raise DomainError(f"config {cfg} uses bit-width {b} outside {self.bitset}")
        return cfg

    def uniform(self, b: int) -> BitConfig:
        return BitConfig.uniform(b, self.num_quant_layers)

    def sample_random_config(self, rng: np.random.Generator, forbid: Optional[Set[BitConfig]] = None) -> BitConfig:
        return sample_random_config(self.bitset, self.num_quant_layers, rng, forbid)

    def enumerate_configs(self, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[BitConfig]:
        return enumerate_configs(self.bitset, self.num_quant_layers, cap)

    # -- forward / backward --------------------------------------------------

    def forward_stem(self, x: np.ndarray, mode: str = "eval", track_stats: bool = True):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"expected input of shape (N, {self.spec.input_shape}), got {x.shape}")
        return self.stem.forward(x.astype(self.dtype, copy=False), mode, track_stats)

    def forward_layer(self, i: int, h: np.ndarray, b: int, mode: str = "eval", track_stats: bool = True,
                      quant_mode: QuantMode = QuantMode.ROUND_MASTER):
        return self.layers[i].forward(h, b, mode, track_stats, quant_mode)

    def forward_head(self, h: np.ndarray):
        pooled, pool_cache = global_avg_pool_forward(h)
        logits, fc_cache = fully_connected_forward(pooled, self.head_weight.value, self.head_bias.value)
        return logits, (pool_cache, fc_cache)

    def forward(self, x: np.ndarray, cfg: Optional[BitConfig], mode: str = "train", track_stats: bool = True,
                capture: bool = False, quant_mode: QuantMode = QuantMode.ROUND_MASTER) -> ForwardResult:
        """
        Runs the network under one bit-width configuration.

        Args:
            x (np.ndarray): Batch of shape (N, C, H, W).
            cfg (BitConfig): One bit per quantizable layer; None runs every
                layer at full precision.
            mode (str): "train" or "eval" (BN behaviour).
            track_stats (bool): Whether train-mode BN updates running statistics.
            capture (bool): Record each quantizable layer's input feature map.
            quant_mode (QuantMode): Weight derivation rule.

        Returns:
            ForwardResult: Logits, backward tape and optional snapshots.
        """
        quant_mode = QuantMode(quant_mode)
        bits = [FULL_PRECISION] * self.num_quant_layers if cfg is None else list(self.check_config(cfg))
        tape = []
        snapshots = [] if capture else None
        h, cache = self.forward_stem(x, mode, track_stats)
        tape.append(cache)
        for i, b in enumerate(bits):
            if capture:
                snapshots.append(h)
            h, cache = self.forward_layer(i, h, b, mode, track_stats, quant_mode)
            tape.append(cache)
        logits, cache = self.forward_head(h)
        tape.append(cache)
        return ForwardResult(logits, tape, snapshots)

    def backward(self, result: ForwardResult, dlogits: np.ndarray):
        """Accumulates parameter gradients of one forward pass."""
        pool_cache, fc_cache = result.tape[-1]
        dpooled, dweight, dbias = fully_connected_backward(dlogits, fc_cache)
        self.head_weight.grad += dweight
        self.head_bias.grad += dbias
        dh = global_avg_pool_backward(dpooled, pool_cache)
        for layer, cache in zip(reversed(self.layers), reversed(result.tape[1:-1])):
            dh = layer.backward(dh, cache)
        self.stem.backward(dh, result.tape[0])

    def predict(self, x: np.ndarray, cfg: Optional[BitConfig], batch_size: int = 256,
                quant_mode: QuantMode = QuantMode.ROUND_MASTER) -> np.ndarray:
        """Eval-mode logits in batches; side-effect free."""
        outputs = [self.forward(x[i:i + batch_size], cfg, "eval", capture=False, quant_mode=quant_mode).logits
                   for i in range(0, len(x), batch_size)]
        return np.concatenate(outputs) if outputs else np.zeros((0, self.spec.classes), dtype=self.dtype)

    # -- parameters and state ------------------------------------------------

    def parameters(self) -> List[Parameter]:
        params = self.stem.parameters()
        for layer in self.layers:
            params += layer.parameters()
        return params + [self.head_weight, self.head_bias]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def bn_states(self) -> Dict[str, BNState]:
        states = self.stem.bn_states()
        for layer in self.layers:
            states.update(layer.bn_states())
        return states

    def named_buffers(self) -> Dict[str, np.ndarray]:
        """Running BN statistics by name."""
        buffers = {}
        for name, state in self.bn_states().items():
            buffers[f"{name}.running_mean"] = state.running_mean
            buffers[f"{name}.running_var"] = state.running_var
        return buffers

    def quantizable_weight_names(self) -> List[str]:
        return [layer.weight.name for layer in self.layers]

    def zero_grad(self):
        zero_grads(self.parameters())

    def clone(self) -> "SuperNet":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "SuperNet":
        """A copy of this network in another precision, optimizer slots dropped."""
        twin = self.clone()
        twin.dtype = dtype
        for p in twin.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.slots.clear()
        for state in twin.bn_states().values():
            state.running_mean = state.running_mean.astype(dtype)
            state.running_var = state.running_var.astype(dtype)
        return twin

    def bn_update_counts(self) -> Dict[str, int]:
        return {name: state.updates for name, state in self.bn_states().items()}

    def load_full_precision(self, other: "SuperNet"):
        """
        Initializes from a full-precision pretrained network of the same shape.

        Master weights, stem and classifier are copied; every per-bit BN of a
        quantizable layer starts from the pretrained net's BN_{b_max}.
        """
        if other.spec.layers != self.spec.layers or other.spec.classes != self.spec.classes:
            raise DimensionError("pretrained network architecture does not match")
        for name, p in other.stem_and_head_parameters().items():
            self.named_parameters()[name].value[...] = p.value
        for mine, theirs in zip(self.layers, other.layers):
            mine.weight.value[...] = theirs.weight.value
            source = theirs.bn[theirs.bitset.b_max]
            for state in mine.bn.values():
                state.gamma.value[...] = source.gamma.value
                state.beta.value[...] = source.beta.value
                state.running_mean[...] = source.running_mean
                state.running_var[...] = source.running_var
        logging.info("Initialized super-network from full-precision weights")

    def stem_and_head_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.stem.parameters() + [self.head_weight, self.head_bias]}

    def calibrate(self, x: np.ndarray):
        """
        Initializes every step size from one calibration batch.

        Weight steps come from each master weight tensor; activation steps
        from the mean magnitude of each layer's input, propagated through the
        network at full precision with batch statistics (running statistics
        are left untouched).
        """
        h, _ = self.forward_stem(x, "train", track_stats=False)
        for layer in self.layers:
            layer.steps.initialize_weights(layer.weight.value)
            layer.steps.initialize_activations(float(np.mean(np.abs(h), dtype=np.float64)))
            h, _ = layer.forward(h, FULL_PRECISION, "train", track_stats=False)
        logging.info(f"Calibrated step sizes on a batch of {len(x)} samples")

    # -- geometry and cost ---------------------------------------------------

    def layer_geometries(self) -> List[LayerGeometry]:
        _, height, width = self.spec.input_shape
        height = conv_output_size(height, KERNEL, 1, PADDING)
        width = conv_output_size(width, KERNEL, 1, PADDING)
        geometries = []
        for layer in self.layers:
            g = LayerGeometry(layer.in_channels, layer.out_channels, KERNEL, layer.stride, PADDING, height, width)
            geometries.append(g)
            height, width = g.out_height, g.out_width
        return geometries

    def full_precision_geometries(self) -> List[LayerGeometry]:
        channels, height, width = self.spec.input_shape
        stem = LayerGeometry(channels, self.spec.stem_channels, KERNEL, 1, PADDING, height, width)
        head = LayerGeometry(self.layers[-1].out_channels, self.spec.classes, 1, 1, 0, 1, 1)
        return [stem, head]

    def forward_macs(self) -> int:
        """Multiply-accumulates of one forward pass (independent of bit-widths)."""
        return sum(macs_of_layer(g) for g in self.layer_geometries() + self.full_precision_geometries())


def sample_random_config(bitset: BitSet, num_layers: int, rng: np.random.Generator,
                         forbid: Optional[Iterable[BitConfig]] = None) -> BitConfig:
    """
    Draws each layer's bit uniformly and independently from the bit set.

    Args:
        bitset (BitSet): Candidate bit-widths.
        num_layers (int): Number of quantizable layers.
        rng (np.random.Generator): Sampling stream.
        forbid (Iterable[BitConfig]): Configurations rejected and redrawn.

    Raises:
        DomainError: If every configuration is forbidden.
    """
    forbid = set(forbid or ())
    space = len(bitset) ** num_layers
    if len({f for f in forbid if len(f) == num_layers and all(b in bitset for b in f)}) >= space:
        raise DomainError("every configuration is forbidden")
    choices = np.array(bitset.bits)
    while True:
        cfg = BitConfig(tuple(choices[rng.integers(0, len(choices), size=num_layers)]))
        if cfg not in forbid:
            return cfg


def enumerate_configs(bitset: BitSet, num_layers: int, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[BitConfig]:
    """
    All n^L configurations in ascending lexicographic order.

    Raises:
        ConfigSpaceError: If n^L exceeds ``cap``.
    """
    count = len(bitset) ** num_layers
    if count > cap:
        raise ConfigSpaceError(count, cap)
    ascending = sorted(bitset.bits)
    return (BitConfig(bits) for bits in itertools.product(ascending, repeat=num_layers))

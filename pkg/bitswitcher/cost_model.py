"""
BitOps accounting for bit-width configurations.

BitOps of a layer at bit b is MACs * b_w * b_a with b_w = b_a = b. The first
convolution and the classifier stay at full precision; they are left out of
the reward cost and only show up in the "total including FP layers" figure,
counted at 32 x 32.
"""
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Sequence

from .errors import DomainError
from .quantization import FULL_PRECISION, BitSet
from .tensor import conv_output_size


@dataclass(frozen=True)
class LayerGeometry:
    """Shape of one convolution (or a dense layer, as a 1x1 conv on a 1x1 map)."""
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int
    in_height: int
    in_width: int

    @property
    def out_height(self) -> int:
        return conv_output_size(self.in_height, self.kernel, self.stride, self.pad)

    @property
    def out_width(self) -> int:
        return conv_output_size(self.in_width, self.kernel, self.stride, self.pad)


def macs_of_layer(geometry: LayerGeometry) -> int:
    """H_out * W_out * C_out * C_in * K * K."""
    return (geometry.out_height * geometry.out_width * geometry.out_channels
            * geometry.in_channels * geometry.kernel * geometry.kernel)


class CostTable:
    """
    Per-layer MACs and BitOps of a super-network's quantizable layers.

    Args:
        geometries (Sequence[LayerGeometry]): Quantizable layers in order.
        bitset (BitSet): Candidate bit-widths.
        fp_geometries (Sequence[LayerGeometry]): Full-precision layers.
    """

    def __init__(self, geometries: Sequence[LayerGeometry], bitset: BitSet,
                 fp_geometries: Sequence[LayerGeometry] = ()):
        self.bitset = bitset
        self.macs: List[int] = [macs_of_layer(g) for g in geometries]
        if any(m <= 0 for m in self.macs):
            raise DomainError("every quantizable layer needs a positive MAC count")
        self.fp_macs: List[int] = [macs_of_layer(g) for g in fp_geometries]
        self.normalizer = sum(self.bitops(i, bitset.b_max) for i in range(len(self.macs)))

    @classmethod
    def from_net(cls, net) -> "CostTable":
        return cls(net.layer_geometries(), net.bitset, net.full_precision_geometries())

    @property
    def num_layers(self) -> int:
        return len(self.macs)

    def _check_layer(self, i: int):
        if not 0 <= i < len(self.macs):
            raise DomainError(f"unknown layer index {i}, net has {len(self.macs)} quantizable layers")

    def bitops(self, i: int, b: int) -> int:
        self._check_layer(i)
        return self.macs[i] * b * b

    def normalized_cost(self, i: int, b: int) -> float:
        """BitOps(i, b) / Z with Z the uniform-b_max total, so uniform b_max sums to 1."""
        return float(Fraction(self.bitops(i, b), self.normalizer))

    def total_normalized_cost(self, bits: Sequence[int]) -> float:
        """Exact sum of normalized costs of a configuration."""
        return float(Fraction(self.network_bitops(bits), self.normalizer))

    def network_bitops(self, bits: Sequence[int]) -> int:
        bits = list(bits)
        if len(bits) != len(self.macs):
            raise DomainError(f"configuration has {len(bits)} entries, expected {len(self.macs)}")
        return sum(self.bitops(i, b) for i, b in enumerate(bits))

    def uniform_bitops(self, b: int) -> int:
        return self.network_bitops([b] * len(self.macs))

    def fp_bitops(self) -> int:
        return sum(m * FULL_PRECISION * FULL_PRECISION for m in self.fp_macs)

    def total_including_fp(self, bits: Sequence[int]) -> int:
        return self.network_bitops(bits) + self.fp_bitops()

    def _as_bitops(self, config_or_bitops) -> float:
        if isinstance(config_or_bitops, (int, float)) or hasattr(config_or_bitops, "__float__"):
            return float(config_or_bitops)
        return float(self.network_bitops(config_or_bitops))

    def relative_usage(self, config_or_bitops, baseline_b: int) -> float:
        """
        BitOps as a percentage of the uniform-baseline_b network.

        Args:
            config_or_bitops: A configuration, or a BitOps figure such as a
                policy's mean over a test set.
            baseline_b (int): Bit-width of the uniform baseline.
        """
        return 100.0 * self._as_bitops(config_or_bitops) / self.uniform_bitops(baseline_b)

    def savings_ratio(self, config_or_bitops, baseline_b: int) -> float:
        """Percentage of BitOps saved against the uniform-baseline_b network."""
        return 100.0 - self.relative_usage(config_or_bitops, baseline_b)

    def report_rows(self) -> List[Dict[str, int]]:
        """One row per layer: layer, macs, bitops@b for every b (ascending)."""
        rows = []
        for i, macs in enumerate(self.macs):
            row = {"layer": i + 1, "macs": macs}
            for b in sorted(self.bitset):
                row[f"bitops@{b}"] = self.bitops(i, b)
            rows.append(row)
        return rows


def format_usage(percentage: float) -> str:
    """Formats a usage percentage like "77.2%"."""
    return f"{percentage:.1f}%"

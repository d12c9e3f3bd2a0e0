"""
Super-network persistence.

A checkpoint directory holds ``manifest.json`` (tensor name -> shape, element
type, byte offset, storage) and ``weights.bin``, one little-endian blob with
the tensors laid out back to back in manifest order.

Two storage modes:

* round_master: every tensor as 32-bit floats.
* weights_aligned: quantizable master weights as b_max-level integer codes,
  bit-packed at b_max bits per element; step sizes, BN states, stem and
  classifier as floats. Loading reconstructs the weights on the b_max grid.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import CorruptionError
from .quantization import QuantKind, QuantMode, bounds_for, round_half_away
from .reports import format_bytes
from .supernet import NetSpec, SuperNet
from .tensor import DEFAULT_DTYPE, RngStreams

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
FORMAT_NAME = "bitswitcher-checkpoint"
FORMAT_VERSION = 1
FLOAT_TYPE = "<f4"


@dataclass
class Checkpoint:
    """A written checkpoint and its byte accounting."""
    directory: Path
    manifest: dict
    blob_size: int

    @property
    def storage_mode(self) -> QuantMode:
        return QuantMode(self.manifest["storage_mode"])

    def quantizable_weight_bytes(self) -> int:
        return sum(entry["nbytes"] for entry in self.manifest["tensors"] if entry["quantizable"])


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Packs unsigned integer codes (< 2^bits) into a big-endian bit stream."""
    as_bits = np.unpackbits(codes.astype(np.uint8).reshape(-1, 1), axis=1)[:, 8 - bits:]
    return np.packbits(as_bits.reshape(-1)).tobytes()


def _unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.int64)
    return stream.astype(np.int64) @ weights


def _packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def _serialize(net: SuperNet, mode: QuantMode) -> Tuple[dict, bytes]:
    mode = QuantMode(mode)
    quantizable = set(net.quantizable_weight_names())
    layers_by_weight = {layer.weight.name: layer for layer in net.layers}
    entries: List[dict] = []
    chunks: List[bytes] = []
    offset = 0

    def add(name: str, array: np.ndarray, kind: str):
        nonlocal offset
        data = np.ascontiguousarray(array, dtype=FLOAT_TYPE).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": FLOAT_TYPE, "offset": offset,
                        "nbytes": len(data), "storage": "float", "kind": kind,
                        "quantizable": name in quantizable})
        chunks.append(data)
        offset += len(data)

    deferred = []
    for name, p in net.named_parameters().items():
        if mode is QuantMode.WEIGHTS_ALIGNED and name in quantizable:
            deferred.append((name, p))
        else:
            add(name, p.value, "parameter")
    for name, buffer in net.named_buffers().items():
        add(name, buffer, "buffer")

    b_max = net.bitset.b_max
    bounds = bounds_for(b_max, QuantKind.WEIGHTS)
    for name, p in deferred:
        layer = layers_by_weight[name]
        step = layer.steps.weights[b_max]
        levels = round_half_away(np.clip(p.value / step.value, bounds.lower, bounds.upper)).astype(np.int64)
        data = _pack_codes(levels - bounds.lower, b_max)
        entries.append({"name": name, "shape": list(p.value.shape), "dtype": f"packed-u{b_max}",
                        "offset": offset, "nbytes": len(data), "storage": "codes", "kind": "parameter",
                        "quantizable": True, "bits": b_max, "zero_level": bounds.lower,
                        "step": step.name})
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "storage_mode": mode.value,
        "spec": net.spec.to_dict(),
        "tensors": entries,
    }
    return manifest, b"".join(chunks)


def save_checkpoint(net: SuperNet, directory: Union[str, Path],
                    mode: QuantMode = QuantMode.ROUND_MASTER) -> Checkpoint:
    """
    Writes the network to ``directory`` in the given storage mode.

    Args:
        net (SuperNet): Network to persist.
        directory (str | Path): Target directory, created if missing.
        mode (QuantMode): round_master or weights_aligned.

    Returns:
        Checkpoint: The manifest and blob size that were written.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, blob = _serialize(net, mode)
    (directory / BLOB_NAME).write_bytes(blob)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    checkpoint = Checkpoint(directory, manifest, len(blob))
    logging.info(f"Saved {manifest['storage_mode']} checkpoint to {directory} "
                 f"({format_bytes(len(blob))}, quantizable weights "
                 f"{format_bytes(checkpoint.quantizable_weight_bytes())})")
    return checkpoint


def export_aligned(net: SuperNet, directory: Union[str, Path]) -> Checkpoint:
    """Writes the b_max-aligned deployment form of a trained network."""
    return save_checkpoint(net, directory, QuantMode.WEIGHTS_ALIGNED)


def _expected_nbytes(entry: dict) -> int:
    count = int(np.prod(entry["shape"], dtype=np.int64))
    if entry["storage"] == "codes":
        return _packed_size(count, int(entry["bits"]))
    return count * np.dtype(entry["dtype"]).itemsize


def load_checkpoint(directory: Union[str, Path], dtype=DEFAULT_DTYPE) -> SuperNet:
    """
    Rebuilds a SuperNet from a checkpoint directory.

    Raises:
        CorruptionError: If the manifest and blob disagree; names the tensor.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
        blob = (directory / BLOB_NAME).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptionError(MANIFEST_NAME, f"cannot read checkpoint in {directory}: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise CorruptionError(MANIFEST_NAME, f"unexpected format '{manifest.get('format')}'")

    net = SuperNet(NetSpec.from_dict(manifest["spec"]), RngStreams(0).get("init"), dtype)
    params = net.named_parameters()
    buffers = net.named_buffers()
    expected_names = set(params) | set(buffers)
    seen = set()
    cursor = 0
    codes = []
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected_names:
            raise CorruptionError(name, "not part of this architecture")
        if entry["offset"] != cursor:
            raise CorruptionError(name, f"offset {entry['offset']} does not follow the previous tensor "
                                        f"ending at {cursor}")
        if entry["nbytes"] != _expected_nbytes(entry):
            raise CorruptionError(name, f"byte count {entry['nbytes']} does not match shape {entry['shape']}")
        if entry["offset"] + entry["nbytes"] > len(blob):
            raise CorruptionError(name, f"extends past the end of {BLOB_NAME} ({len(blob)} bytes)")
        target = params[name].value if name in params else buffers[name]
        if list(target.shape) != entry["shape"]:
            raise CorruptionError(name, f"shape {entry['shape']} does not match {list(target.shape)}")
        payload = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if entry["storage"] == "codes":
            codes.append((entry, payload, target))
        else:
            target[...] = np.frombuffer(payload, dtype=entry["dtype"]).reshape(entry["shape"])
        seen.add(name)
        cursor += entry["nbytes"]
    if cursor != len(blob):
        raise CorruptionError(BLOB_NAME, f"{len(blob) - cursor} trailing bytes after the last tensor")
    missing = expected_names - seen
    if missing:
        raise CorruptionError(sorted(missing)[0], "missing from the manifest")

    # codes are decoded last, once their step sizes are loaded
    for entry, payload, target in codes:
        count = target.size
        levels = _unpack_codes(payload, count, int(entry["bits"])) + int(entry["zero_level"])
        step = params[entry["step"]].value
        target[...] = (step * levels.astype(target.dtype)).reshape(entry["shape"])
    logging.info(f"Loaded {manifest['storage_mode']} checkpoint from {directory} ({format_bytes(len(blob))})")
    return net

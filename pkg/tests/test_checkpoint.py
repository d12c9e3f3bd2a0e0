import json

import numpy as np
import pytest

from bitswitcher.checkpoint import BLOB_NAME, MANIFEST_NAME, export_aligned, load_checkpoint, save_checkpoint
from bitswitcher.errors import CorruptionError
from bitswitcher.quantization import QuantMode
from bitswitcher.supernet import enumerate_configs


def test_round_trip_is_bit_exact_for_every_config(tiny_net, tiny_data, tmp_path):
    save_checkpoint(tiny_net, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    x = tiny_data[1].images
    for cfg in enumerate_configs(tiny_net.bitset, tiny_net.num_quant_layers):
        np.testing.assert_array_equal(loaded.predict(x, cfg), tiny_net.predict(x, cfg))
    for name, value in tiny_net.named_buffers().items():
        np.testing.assert_array_equal(loaded.named_buffers()[name], value)


def test_storage_does_not_grow_with_the_config_space(tiny_net, tmp_path):
    checkpoint = save_checkpoint(tiny_net, tmp_path / "ckpt")
    elements = sum(p.value.size for p in tiny_net.parameters())
    elements += sum(v.size for v in tiny_net.named_buffers().values())
    assert checkpoint.blob_size == 4 * elements
    assert (tmp_path / "ckpt" / BLOB_NAME).stat().st_size == checkpoint.blob_size
    # one entry per quantizable master weight, whatever the number of bit-widths
    names = [e["name"] for e in checkpoint.manifest["tensors"] if e["quantizable"]]
    assert sorted(names) == sorted(tiny_net.quantizable_weight_names())


def test_aligned_payload_is_an_eighth_of_float(tiny_net, tmp_path):
    full = save_checkpoint(tiny_net, tmp_path / "full")
    aligned = export_aligned(tiny_net, tmp_path / "aligned")
    assert aligned.storage_mode is QuantMode.WEIGHTS_ALIGNED
    # 4-bit codes against 32-bit floats
    assert aligned.quantizable_weight_bytes() * 8 == full.quantizable_weight_bytes()
    assert aligned.blob_size < full.blob_size


def test_aligned_checkpoint_reproduces_aligned_forward(tiny_net, tiny_data, tmp_path):
    export_aligned(tiny_net, tmp_path / "aligned")
    loaded = load_checkpoint(tmp_path / "aligned")
    x = tiny_data[1].images[:10]
    for cfg in enumerate_configs(tiny_net.bitset, tiny_net.num_quant_layers):
        np.testing.assert_array_equal(loaded.predict(x, cfg),
                                      tiny_net.predict(x, cfg, quant_mode=QuantMode.WEIGHTS_ALIGNED))


def _rewrite_manifest(directory, change):
    path = directory / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    change(manifest)
    path.write_text(json.dumps(manifest))


def test_corrupted_offset_names_the_tensor(tiny_net, tmp_path):
    directory = tmp_path / "ckpt"
    save_checkpoint(tiny_net, directory)
    victim = json.loads((directory / MANIFEST_NAME).read_text())["tensors"][3]["name"]

    def shift(manifest):
        manifest["tensors"][3]["offset"] += 4

    _rewrite_manifest(directory, shift)
    with pytest.raises(CorruptionError) as info:
        load_checkpoint(directory)
    assert info.value.tensor_name == victim
    assert victim in str(info.value)


def test_truncated_blob_is_rejected(tiny_net, tmp_path):
    directory = tmp_path / "ckpt"
    save_checkpoint(tiny_net, directory)
    blob = (directory / BLOB_NAME).read_bytes()
    (directory / BLOB_NAME).write_bytes(blob[:-8])
    with pytest.raises(CorruptionError):
        load_checkpoint(directory)


def test_trailing_bytes_are_rejected(tiny_net, tmp_path):
    directory = tmp_path / "ckpt"
    save_checkpoint(tiny_net, directory)
    with open(directory / BLOB_NAME, "ab") as f:
        f.write(b"\0\0\0\0")
    with pytest.raises(CorruptionError) as info:
        load_checkpoint(directory)
    assert info.value.tensor_name == BLOB_NAME


def test_shape_mismatch_is_rejected(tiny_net, tmp_path):
    directory = tmp_path / "ckpt"
    save_checkpoint(tiny_net, directory)

    def reshape(manifest):
        entry = manifest["tensors"][0]
        entry["shape"] = [int(np.prod(entry["shape"]))]

    _rewrite_manifest(directory, reshape)
    with pytest.raises(CorruptionError):
        load_checkpoint(directory)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "nothing")

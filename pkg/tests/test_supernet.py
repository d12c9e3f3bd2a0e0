import numpy as np
import pytest

from bitswitcher import quantization
from bitswitcher.errors import ConfigSpaceError, DimensionError, DomainError
from bitswitcher.quantization import FULL_PRECISION, BitSet, QuantKind, QuantMode, bounds_for, lsq_grad_scale
from bitswitcher.supernet import BitConfig, NetSpec, SuperNet, enumerate_configs, sample_random_config
from bitswitcher.tensor import RngStreams, finite_difference_check, softmax_cross_entropy

from .conftest import TINY_SPEC


def test_bit_config_parse_and_str():
    cfg = BitConfig.parse("4,3,2,2")
    assert cfg == BitConfig.parse("4-3-2-2")
    assert str(cfg) == "4-3-2-2"
    assert not cfg.is_uniform
    assert BitConfig.uniform(3, 4).is_uniform


def test_reference_net_shapes(reference_net):
    x = np.zeros((2, 1, 28, 28), dtype=np.float32)
    result = reference_net.forward(x, reference_net.uniform(4), "eval", capture=True)
    assert result.logits.shape == (2, 10)
    assert [s.shape[1] for s in result.snapshots] == [16, 32, 32, 64]
    assert reference_net.num_quant_layers == 4


def test_reference_geometry(reference_net):
    sizes = [(g.out_height, g.out_width, g.out_channels) for g in reference_net.layer_geometries()]
    assert sizes == [(14, 14, 32), (14, 14, 32), (7, 7, 64), (7, 7, 64)]


def test_config_checks(tiny_net):
    with pytest.raises(DimensionError):
        tiny_net.check_config(BitConfig((4, 4, 4)))
    with pytest.raises(DomainError):
        tiny_net.check_config(BitConfig((4, 5)))


def test_weight_sharing_one_master_per_layer(reference_net):
    names = reference_net.quantizable_weight_names()
    assert len(names) == 4
    assert len(set(id(layer.weight.value) for layer in reference_net.layers)) == 4
    # parameter count does not depend on how many configurations exist
    assert sum(layer.weight.value.size for layer in reference_net.layers) == \
        32 * 16 * 9 + 32 * 32 * 9 + 64 * 32 * 9 + 64 * 64 * 9


def test_eval_forward_is_side_effect_free(tiny_net, tiny_data):
    before = {k: v.copy() for k, v in tiny_net.named_buffers().items()}
    tiny_net.predict(tiny_data[1].images, tiny_net.uniform(3))
    for name, value in tiny_net.named_buffers().items():
        np.testing.assert_array_equal(value, before[name])


def test_train_forward_updates_only_active_bn(tiny_net, tiny_data):
    counts = tiny_net.bn_update_counts()
    tiny_net.forward(tiny_data[0].images[:8], BitConfig((4, 2)), "train")
    after = tiny_net.bn_update_counts()
    changed = {name for name in counts if after[name] != counts[name]}
    assert changed == {"stem.bn", "layer1.bn@4", "layer2.bn@2"}


def test_bits_change_the_output(tiny_net, tiny_data):
    x = tiny_data[1].images[:4]
    high = tiny_net.forward(x, tiny_net.uniform(4), "eval").logits
    low = tiny_net.forward(x, tiny_net.uniform(2), "eval").logits
    assert not np.allclose(high, low)


def test_full_precision_forward_bypasses_quantizers(tiny_net, tiny_data):
    logits = tiny_net.forward(tiny_data[1].images[:4], None, "eval").logits
    assert logits.shape == (4, 3)
    assert np.all(np.isfinite(logits))
    h, _ = tiny_net.forward_layer(0, np.ones((1, 4, 8, 8), dtype=np.float32), FULL_PRECISION)
    assert h.shape == (1, 4, 4, 4)


def test_backward_matches_finite_differences(tiny_data):
    net = SuperNet(TINY_SPEC, RngStreams(0).get("init"), dtype=np.float64)
    x = tiny_data[0].images[:6].astype(np.float64)
    y = tiny_data[0].labels[:6]
    net.calibrate(x)
    cfg = BitConfig((3, 2))
    weight = net.head_weight

    def loss(value):
        saved = weight.value.copy()
        weight.value[...] = value
        out = softmax_cross_entropy(net.forward(x, cfg, "train", track_stats=False).logits, y)[0]
        weight.value[...] = saved
        return out

    def grad(value):
        saved = weight.value.copy()
        weight.value[...] = value
        net.zero_grad()
        result = net.forward(x, cfg, "train", track_stats=False)
        net.backward(result, softmax_cross_entropy(result.logits, y)[1])
        weight.value[...] = saved
        return weight.grad.copy()

    assert finite_difference_check(loss, grad, weight.value) < 1e-4


def _freeze_rounding(monkeypatch):
    """
    Replaces quantize_round with its clip-linear surrogate.

    The first forward records round(v) - v for every quantizer call; later
    forwards reuse those offsets, so the loss is smooth in every parameter
    and its gradient is the STE/LSQ rule. Reset ``calls[0]`` before each forward.
    """
    offsets = []
    calls = [0]

    def frozen(t, s, bounds):
        s = np.asarray(s, dtype=t.dtype)
        v = np.clip(t / s, bounds.lower, bounds.upper)
        i = calls[0]
        calls[0] += 1
        if i == len(offsets):
            offsets.append(quantization.round_half_away(v) - v)
        return s * (v + offsets[i])

    monkeypatch.setattr(quantization, "quantize_round", frozen)
    return calls


def test_full_backward_matches_surrogate_finite_differences(tiny_data, monkeypatch):
    net = SuperNet(TINY_SPEC, RngStreams(0).get("init"), dtype=np.float64)
    x = tiny_data[0].images[:4].astype(np.float64)
    y = tiny_data[0].labels[:4]
    net.calibrate(x)
    cfg = BitConfig((3, 2))
    calls = _freeze_rounding(monkeypatch)

    def loss():
        calls[0] = 0
        return softmax_cross_entropy(net.forward(x, cfg, "train", track_stats=False).logits, y)[0]

    loss()
    calls[0] = 0
    net.zero_grad()
    result = net.forward(x, cfg, "train", track_stats=False, capture=True)
    net.backward(result, softmax_cross_entropy(result.logits, y)[1])

    layer1, layer2 = net.layers
    weights, activations = QuantKind.WEIGHTS, QuantKind.ACTIVATIONS
    # (parameter, LSQ gradient scale to divide out)
    checked = [
        (net.stem.weight, 1.0), (net.stem.bn.gamma, 1.0), (net.stem.bn.beta, 1.0),
        (layer1.weight, 1.0), (layer1.bn[3].gamma, 1.0), (layer1.bn[3].beta, 1.0),
        (layer2.weight, 1.0), (layer2.bn[2].gamma, 1.0), (layer2.bn[2].beta, 1.0),
        (layer1.steps.weights[3], lsq_grad_scale(layer1.weight.value.size, bounds_for(3, weights))),
        (layer1.steps.activations[3], lsq_grad_scale(result.snapshots[0].size, bounds_for(3, activations))),
        (layer2.steps.weights[2], lsq_grad_scale(layer2.weight.value.size, bounds_for(2, weights))),
        (layer2.steps.activations[2], lsq_grad_scale(result.snapshots[1].size, bounds_for(2, activations))),
        (net.head_weight, 1.0),
    ]
    pick = np.random.default_rng(0)
    eps = 1e-7
    for param, scale in checked:
        analytic = np.asarray(param.grad / scale)
        size = param.value.size
        for flat in pick.choice(size, min(10, size), replace=False):
            index = np.unravel_index(flat, param.value.shape) if param.value.ndim else ()
            saved = float(param.value[index])
            param.value[index] = saved + eps
            upper = loss()
            param.value[index] = saved - eps
            lower = loss()
            param.value[index] = saved
            numeric = (upper - lower) / (2 * eps)
            np.testing.assert_allclose(analytic[index], numeric, rtol=1e-4, atol=1e-7, err_msg=param.name)


def test_backward_reaches_active_steps_only(tiny_net, tiny_data):
    tiny_net.zero_grad()
    result = tiny_net.forward(tiny_data[0].images[:8], BitConfig((4, 2)), "train")
    tiny_net.backward(result, softmax_cross_entropy(result.logits, tiny_data[0].labels[:8])[1])
    layer1, layer2 = tiny_net.layers
    assert float(layer1.steps.weights[3].grad) == 0.0
    assert float(layer2.steps.weights[4].grad) == 0.0
    assert np.any(layer1.weight.grad != 0)


def test_enumerate_configs_order_and_cap():
    configs = list(enumerate_configs(BitSet((4, 3, 2)), 4))
    assert len(configs) == 81
    assert configs[0] == BitConfig((2, 2, 2, 2))
    assert configs[1] == BitConfig((2, 2, 2, 3))
    assert configs[-1] == BitConfig((4, 4, 4, 4))
    assert len(list(enumerate_configs(BitSet((4,)), 1))) == 1
    with pytest.raises(ConfigSpaceError) as info:
        enumerate_configs(BitSet((4, 3, 2)), 4, cap=80)
    assert info.value.count == 81


def test_random_configs_respect_forbidden_set():
    bitset = BitSet((4, 3))
    rng = np.random.default_rng(0)
    forbid = {BitConfig((4, 4)), BitConfig((3, 3))}
    seen = {sample_random_config(bitset, 2, rng, forbid) for _ in range(200)}
    assert seen == {BitConfig((4, 3)), BitConfig((3, 4))}
    with pytest.raises(DomainError):
        sample_random_config(BitSet((4,)), 1, rng, {BitConfig((4,))})


def test_random_config_marginals_are_uniform():
    from scipy import stats

    rng = np.random.default_rng(11)
    draws = np.array([sample_random_config(BitSet((4, 3, 2)), 4, rng).bits for _ in range(100_000)])
    for layer in range(4):
        counts = np.array([int(np.sum(draws[:, layer] == b)) for b in (4, 3, 2)])
        assert stats.chisquare(counts).pvalue > 0.01
        np.testing.assert_allclose(counts / len(draws), 1 / 3, atol=0.01)


def test_forbidden_uniform_config_is_never_drawn():
    rng = np.random.default_rng(12)
    forbid = {BitConfig((2, 2, 2, 2))}
    draws = np.array([sample_random_config(BitSet((4, 3, 2)), 4, rng, forbid).bits for _ in range(100_000)])
    assert not np.any(np.all(draws == 2, axis=1))


def test_load_full_precision_copies_bmax_bn():
    source = SuperNet(TINY_SPEC, RngStreams(1).get("init"))
    source.layers[0].bn[4].gamma.value[...] = 2.5
    target = SuperNet(TINY_SPEC, RngStreams(2).get("init"))
    target.load_full_precision(source)
    np.testing.assert_array_equal(target.layers[0].weight.value, source.layers[0].weight.value)
    for b in (4, 3, 2):
        np.testing.assert_array_equal(target.layers[0].bn[b].gamma.value, 2.5)


def test_calibration_sets_positive_steps(tiny_net):
    for layer in tiny_net.layers:
        for p in layer.steps.parameters():
            assert float(p.value) > 0
        # fewer bits -> coarser grid
        assert float(layer.steps.weights[2].value) > float(layer.steps.weights[4].value)


def test_aligned_mode_matches_round_mode_at_bmax(tiny_net, tiny_data):
    x = tiny_data[1].images[:5]
    cfg = tiny_net.uniform(4)
    np.testing.assert_array_equal(tiny_net.forward(x, cfg, "eval").logits,
                                  tiny_net.forward(x, cfg, "eval", quant_mode=QuantMode.WEIGHTS_ALIGNED).logits)


def test_forward_macs_of_reference(reference_net):
    # stem + four quantizable convolutions + classifier
    expected = (28 * 28 * 16 * 9 + 14 * 14 * 32 * 16 * 9 + 14 * 14 * 32 * 32 * 9
                + 7 * 7 * 64 * 32 * 9 + 7 * 7 * 64 * 64 * 9 + 64 * 10)
    assert reference_net.forward_macs() == expected


def test_netspec_round_trip():
    assert NetSpec.from_dict(TINY_SPEC.to_dict()) == TINY_SPEC


def test_forward_is_deterministic(tiny_net, tiny_data):
    x = tiny_data[1].images[:6]
    cfg = tiny_net.uniform(4)
    np.testing.assert_array_equal(tiny_net.forward(x, cfg, "eval").logits, tiny_net.forward(x, cfg, "eval").logits)


def test_layer_order_causality(tiny_net, tiny_data):
    x = tiny_data[1].images[:6]
    a = tiny_net.forward(x, BitConfig((3, 4)), "eval", capture=True)
    b = tiny_net.forward(x, BitConfig((3, 2)), "eval", capture=True)
    np.testing.assert_array_equal(a.snapshots[0], b.snapshots[0])
    np.testing.assert_array_equal(a.snapshots[1], b.snapshots[1])


def test_singleton_bitset_always_samples_uniform():
    rng = np.random.default_rng(3)
    assert {sample_random_config(BitSet((4,)), 4, rng) for _ in range(50)} == {BitConfig((4, 4, 4, 4))}


def test_deep_config_space_is_refused():
    with pytest.raises(ConfigSpaceError):
        enumerate_configs(BitSet((4, 3, 2)), 34)


def test_mutating_master_weight_changes_every_subnet(tiny_net, tiny_data):
    x = tiny_data[1].images[:4]
    before = {b: tiny_net.forward(x, tiny_net.uniform(b), "eval").logits for b in (4, 3, 2)}
    tiny_net.layers[1].weight.value *= -1
    for b in (4, 3, 2):
        assert not np.array_equal(before[b], tiny_net.forward(x, tiny_net.uniform(b), "eval").logits)

import pytest

from bitswitcher.cost_model import CostTable, LayerGeometry, format_usage, macs_of_layer
from bitswitcher.errors import DomainError
from bitswitcher.quantization import BitSet
from bitswitcher.supernet import BitConfig

REFERENCE_MACS = [903_168, 1_806_336, 903_168, 1_806_336]


def test_macs_examples():
    assert macs_of_layer(LayerGeometry(16, 32, 3, 2, 1, 28, 28)) == 903_168
    assert macs_of_layer(LayerGeometry(1, 1, 1, 1, 0, 1, 1)) == 1
    assert macs_of_layer(LayerGeometry(16, 64, 3, 2, 1, 28, 28)) == 2 * 903_168


def test_reference_table(reference_net):
    costs = CostTable.from_net(reference_net)
    assert costs.macs == REFERENCE_MACS
    assert costs.normalizer == 16 * sum(REFERENCE_MACS)


def test_normalization_and_ratios(reference_net):
    costs = CostTable.from_net(reference_net)
    assert costs.total_normalized_cost(BitConfig.uniform(4, 4)) == 1.0
    for i in range(4):
        assert costs.normalized_cost(i, 2) / costs.normalized_cost(i, 4) == pytest.approx(0.25)
    for b in (2, 3, 4):
        assert costs.uniform_bitops(b) == b * b * sum(REFERENCE_MACS)


def test_raising_one_layer_increases_bitops(reference_net):
    costs = CostTable.from_net(reference_net)
    base = costs.network_bitops(BitConfig((2, 2, 2, 2)))
    for i in range(4):
        bits = [2, 2, 2, 2]
        bits[i] = 3
        assert costs.network_bitops(bits) > base


def test_unknown_layer_and_bad_length(reference_net):
    costs = CostTable.from_net(reference_net)
    with pytest.raises(DomainError):
        costs.bitops(4, 2)
    with pytest.raises(DomainError):
        costs.network_bitops([4, 4])


def test_usage_and_savings(reference_net):
    costs = CostTable.from_net(reference_net)
    assert costs.relative_usage(BitConfig.uniform(2, 4), 4) == pytest.approx(25.0)
    assert costs.savings_ratio(BitConfig.uniform(2, 4), 4) == pytest.approx(75.0)
    assert costs.relative_usage(0.772 * costs.uniform_bitops(3), 3) == pytest.approx(77.2)
    assert format_usage(77.2) == "77.2%"


def test_full_precision_layers_are_reported_separately(reference_net):
    costs = CostTable.from_net(reference_net)
    cfg = BitConfig.uniform(2, 4)
    fp = (28 * 28 * 16 * 9 + 64 * 10) * 32 * 32
    assert costs.fp_bitops() == fp
    assert costs.total_including_fp(cfg) == costs.network_bitops(cfg) + fp


def test_report_rows(reference_net):
    rows = CostTable(reference_net.layer_geometries(), BitSet((4, 3, 2))).report_rows()
    assert list(rows[0]) == ["layer", "macs", "bitops@2", "bitops@3", "bitops@4"]
    assert rows[1]["bitops@3"] == 9 * 1_806_336

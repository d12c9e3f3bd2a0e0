"""Desk-scale acceptance runs on MNIST-format data (set BITSWITCHER_MNIST to the IDX directory)."""
import os

import numpy as np
import pytest
from scipy import stats

from bitswitcher.cost_model import CostTable
from bitswitcher.data import load_datasets, stratified_subset
from bitswitcher.policy import AgentConfig, eval_agent, oracle_enumerate, train_agent
from bitswitcher.supernet import SuperNet
from bitswitcher.tensor import RngStreams
from bitswitcher.trainer import (
    TrainConfig, TrainMethod, evaluate, sample_mixed_configs, train_fixed_config, train_supernet,
)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
# top-1 points
ACCURACY_SLACK = 0.3


@pytest.fixture(scope="module")
def mnist():
    path = os.environ.get("BITSWITCHER_MNIST")
    if not path:
        pytest.skip("BITSWITCHER_MNIST is not set")
    return load_datasets("idx", path)


@pytest.fixture(scope="module")
def trained(mnist):
    train, test = mnist
    net = SuperNet.reference(seed=0)
    train_supernet(net, train, test, TrainConfig(epochs=20, seed=0))
    return net


def _uniform_accuracy(net, test):
    return {b: evaluate(net, test, net.uniform(b)).top1 for b in net.bitset}


def test_supernet_quality(mnist):
    train, test = mnist
    u4, u2, mixed = [], [], []
    for seed in SEEDS:
        net = SuperNet.reference(seed=seed)
        train_supernet(net, train, test, TrainConfig(epochs=20, seed=seed))
        accuracy = _uniform_accuracy(net, test)
        u4.append(accuracy[4])
        u2.append(accuracy[2])
        configs = sample_mixed_configs(net, 16, RngStreams(seed).get("sampling"))
        mixed.append(np.mean([evaluate(net, test, c).top1 for c in configs]))
    u4, u2, mixed = np.median(u4), np.median(u2), np.median(mixed)
    assert u4 >= 97.0
    assert u2 >= u4 - 2.0
    assert u2 - 0.5 <= mixed <= u4 + 0.5


def test_training_method_direction(mnist):
    train, test = mnist
    medians = {}
    for method in (TrainMethod.FULL, TrainMethod.KE_ONLY, TrainMethod.RANDOM_SAMPLING):
        scores = []
        for seed in SEEDS:
            net = SuperNet.reference(seed=seed)
            train_supernet(net, train, test, TrainConfig(epochs=20, seed=seed, method=method))
            scores.append(evaluate(net, test, net.uniform(2)).top1)
        medians[method] = np.median(scores)
    assert medians[TrainMethod.FULL] >= medians[TrainMethod.KE_ONLY] >= medians[TrainMethod.RANDOM_SAMPLING]


def test_finetuning_barely_moves_subnets(mnist, trained):
    train, test = mnist
    for cfg in sample_mixed_configs(trained, 5, RngStreams(0).get("sampling")):
        before = evaluate(trained, test, cfg).top1
        tuned = train_fixed_config(trained.clone(), train, cfg, epochs=3, lr=0.001)
        assert abs(evaluate(tuned, test, cfg).top1 - before) <= 0.5


def test_agent_against_static_oracle(mnist, trained):
    train, test = mnist
    subset = stratified_subset(train, 0.1, RngStreams(0).get("data"))
    alpha = AgentConfig.preset_alpha("har")
    costs = CostTable.from_net(trained)
    agent, _ = train_agent(trained, subset, AgentConfig(alpha=alpha, lr=1e-3), costs)
    report = eval_agent(trained, agent, test, alpha, costs)
    oracle = oracle_enumerate(trained, test, alpha, costs)
    assert report.mean_reward >= 0.95 * oracle.best_static()["mean_reward"]
    # no static configuration at or below the agent's cost is clearly more accurate
    static = oracle.best_accuracy_within(report.mean_bitops)
    assert static is not None
    assert report.top1 >= static["top1"] - ACCURACY_SLACK
    # and every static configuration reaching comparable accuracy costs at least as much
    comparable = oracle.cheapest_reaching(report.top1 - ACCURACY_SLACK)
    assert comparable is not None
    assert report.mean_bitops <= comparable["bitops"]


def test_alpha_trades_accuracy_for_bitops(mnist, trained):
    train, test = mnist
    subset = stratified_subset(train, 0.1, RngStreams(0).get("data"))
    alphas = (0.0, 0.05, 0.2, 1.0)
    reports = []
    for alpha in alphas:
        agent, _ = train_agent(trained, subset, AgentConfig(alpha=alpha, lr=1e-3))
        reports.append(eval_agent(trained, agent, test, alpha))
    rho, _ = stats.spearmanr(alphas, [r.mean_bitops for r in reports])
    assert rho < 0
    assert all(r.distinct_configs > 1 for r in reports[1:-1])

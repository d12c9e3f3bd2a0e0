"""
Command-line surface: ``bitswitcher [--config FILE] [--verbose] <command>``.

Every command writes into ``<out.dir>/<command>/`` together with its log
file and the resolved configuration.
"""
import argparse
import logging
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .checkpoint import MANIFEST_NAME, export_aligned, load_checkpoint, save_checkpoint
from .config import RunConfig
from .cost_model import CostTable, format_usage
from .data import Dataset, load_datasets, save_dataset, stratified_subset, summary_rows
from .errors import BitSwitcherError, ConfigError, JobError
from .policy import agent_overhead, eval_agent, load_agent, oracle_enumerate, save_agent, train_agent
from .quantization import FULL_PRECISION, QuantKind, QuantMode, mean_abs_error_report, noise_variance_report
from .reports import CsvReport, write_csv
from .runner import ExperimentQueue
from .supernet import BitConfig, SuperNet
from .tensor import RngStreams
from .trainer import (
    METRICS_COLUMNS, TrainMethod, evaluate, evaluation_rows, sample_mixed_configs, train_fixed_config,
    train_supernet,
)

APP_NAME = "BitSwitcher"
LOG_NAME = "bitswitcher.log"
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
ABLATION_METHODS = (TrainMethod.RANDOM_SAMPLING, TrainMethod.KD_ONLY, TrainMethod.KE_ONLY, TrainMethod.FULL)


@dataclass
class Context:
    config: RunConfig
    out_dir: Path
    args: argparse.Namespace
    show_progress: bool = False


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------

def prepare_output_dir(base: Path, command: str, on_exists: str) -> Path:
    """
    Creates the command's output directory.

    Raises:
        ConfigError: If the directory exists and ``on_exists`` is "refuse".
    """
    path = base / command
    if path.exists():
        if on_exists == "refuse":
            raise ConfigError(f"output directory {path} already exists; remove it or set "
                              f"out.on_exists = timestamp")
        path = base / f"{command}_{datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def configure_logging(out_dir: Path, verbose: bool):
    logging.basicConfig(
        filename=str(out_dir / LOG_NAME),
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        force=True,
    )
    if verbose:
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(console)


def load_data(config: RunConfig) -> Tuple[Dataset, Dataset]:
    return load_datasets(
        config["dataset.kind"], config["dataset.path"], config["dataset.classes"],
        config["dataset.train_samples"], config["dataset.test_samples"], config["dataset.noise"],
        config["dataset.mean"], config["dataset.std"], RngStreams(config["train.seed"]).get("data"),
    )


def checkpoint_dir(config: RunConfig) -> Path:
    explicit = config["net.checkpoint"]
    return Path(explicit) if explicit else Path(config["out.dir"]) / "train-supernet" / "checkpoint"


def load_net(config: RunConfig, directory: Optional[Path] = None) -> SuperNet:
    directory = directory or checkpoint_dir(config)
    if not (directory / MANIFEST_NAME).exists():
        raise ConfigError(f"missing checkpoint {directory}; run train-supernet first or set net.checkpoint")
    net = load_checkpoint(directory)
    if net.bitset != config.bitset:
        raise ConfigError(f"checkpoint bit set {net.bitset} differs from net.bits = {config.bitset}")
    return net


def new_net(config: RunConfig, seed: Optional[int] = None) -> SuperNet:
    return SuperNet.reference(config.bitset.bits, config["dataset.classes"],
                              config["train.seed"] if seed is None else seed)


def save_net(ctx: Context, net: SuperNet, name: str = "checkpoint"):
    save_checkpoint(net, ctx.out_dir / name, QuantMode.ROUND_MASTER)
    if ctx.config.storage_mode is QuantMode.WEIGHTS_ALIGNED:
        export_aligned(net, ctx.out_dir / f"{name}_aligned")


def parse_config_arg(net: SuperNet, text: str) -> BitConfig:
    return net.check_config(BitConfig.parse(text))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prep_data(ctx: Context):
    train, test = load_data(ctx.config)
    save_dataset(train, test, ctx.out_dir / "dataset.npz")
    write_csv(ctx.out_dir / "dataset_summary.csv", summary_rows(train, test))


def cmd_train_supernet(ctx: Context):
    config = ctx.config
    train, test = load_data(config)
    net = new_net(config)
    if ctx.args.init:
        net.load_full_precision(load_checkpoint(Path(ctx.args.init)))
    metrics = CsvReport(ctx.out_dir / "metrics.csv", METRICS_COLUMNS)
    train_supernet(net, train, test, config.train_config(), on_epoch=lambda epoch, rows: metrics.extend(rows),
                   show_progress=ctx.show_progress)
    save_net(ctx, net)


def cmd_train_fixed(ctx: Context):
    config, args = ctx.config, ctx.args
    train, test = load_data(config)
    net = load_net(config) if args.from_supernet else new_net(config)
    if args.full_precision:
        target = None
    elif args.uniform is not None:
        target = net.uniform(args.uniform)
    else:
        target = parse_config_arg(net, args.bit_config)
    if target is not None and not args.from_supernet:
        net.calibrate(train.images[:config["train.batch"]])
    epochs = config["train.epochs"] if args.epochs is None else args.epochs
    lr = config["train.lr"] if args.lr is None else args.lr
    train_fixed_config(net, train, target, epochs, lr, config["train.batch"], config["train.momentum"],
                       config["train.weight_decay"], config["train.seed"], ctx.show_progress)
    result = evaluate(net, test, target)
    label = "fp" if target is None else str(target)
    write_csv(ctx.out_dir / "metrics.csv", [{"epoch": epochs, "mode": "fixed", "bits": label,
                                             "loss": result.loss, "top1": result.top1}], METRICS_COLUMNS)
    save_net(ctx, net)


def cmd_eval(ctx: Context):
    config, args = ctx.config, ctx.args
    net = load_net(config)
    _, test = load_data(config)
    mode = config.storage_mode
    columns = ("mode", "bits", "loss", "top1", "top1_std")
    rows = []
    if args.random is not None:
        rng = RngStreams(config["train.seed"]).get("sampling")
        results = []
        for cfg in sample_mixed_configs(net, args.random, rng):
            result = evaluate(net, test, cfg, quant_mode=mode)
            results.append(result)
            rows.append({"mode": "random", "bits": str(cfg), "loss": result.loss, "top1": result.top1,
                         "top1_std": 0.0})
        top1 = np.array([r.top1 for r in results])
        rows.append({"mode": "mixed", "bits": f"mean of {len(results)}",
                     "loss": float(np.mean([r.loss for r in results])),
                     "top1": float(top1.mean()), "top1_std": float(top1.std())})
        logging.info(f"Mixed accuracy over {len(results)} configs: {top1.mean():.2f} +- {top1.std():.2f}")
    else:
        cfg = net.uniform(args.uniform) if args.uniform is not None else parse_config_arg(net, args.bit_config)
        result = evaluate(net, test, cfg, quant_mode=mode)
        rows.append({"mode": "uniform" if cfg.is_uniform else "config", "bits": str(cfg), "loss": result.loss,
                     "top1": result.top1, "top1_std": 0.0})
    write_csv(ctx.out_dir / "eval.csv", rows, columns)


def cmd_oracle_enumerate(ctx: Context):
    config = ctx.config
    net = load_net(config)
    _, test = load_data(config)
    alpha = config.alpha() if ctx.args.alpha is None else ctx.args.alpha
    oracle = oracle_enumerate(net, test, alpha, cap=config["oracle.cap"], show_progress=ctx.show_progress)
    write_csv(ctx.out_dir / "oracle.csv", oracle.rows)
    write_csv(ctx.out_dir / "oracle_per_sample.csv",
              [{"sample_id": i, "best_reward": r} for i, r in enumerate(oracle.per_sample_best)])
    best = oracle.best_static()
    logging.info(f"Best static configuration {best['config']}: mean reward {best['mean_reward']:.4f}, "
                 f"top1 {best['top1']:.2f}%")


def _agent_subset(config: RunConfig, train: Dataset) -> Dataset:
    return stratified_subset(train, config["agent.subset"], RngStreams(config["agent.seed"]).get("data"))


def cmd_train_agent(ctx: Context):
    config = ctx.config
    net = load_net(config)
    train, _ = load_data(config)
    agent_cfg = config.agent_config()
    agent, curve = train_agent(net, _agent_subset(config, train), agent_cfg, show_progress=ctx.show_progress)
    write_csv(ctx.out_dir / "reward_curve.csv", curve,
              ("episode", "epsilon", "reward", "moving_average", "td_loss"))
    save_agent(agent, ctx.out_dir / "agent.npz")


def agent_summary(net: SuperNet, report, alpha: float, agent) -> Dict:
    costs = CostTable.from_net(net)
    bits = net.bitset
    configs = report.configs
    summary = {
        "alpha": alpha,
        "top1": report.top1,
        "mean_bitops": report.mean_bitops,
        "mean_reward": report.mean_reward,
        "distinct_configs": report.distinct_configs,
        "mean_total_including_fp": float(np.mean([costs.total_including_fp(c) for c in configs])),
    }
    for b in bits:
        summary[f"usage_vs_uniform{b}"] = format_usage(costs.relative_usage(report.mean_bitops, b))
    summary.update(agent_overhead(agent, net))
    return summary


def cmd_eval_agent(ctx: Context):
    config = ctx.config
    net = load_net(config)
    _, test = load_data(config)
    agent_path = Path(ctx.args.agent) if ctx.args.agent else Path(config["out.dir"]) / "train-agent" / "agent.npz"
    if not agent_path.exists():
        raise ConfigError(f"missing agent {agent_path}; run train-agent first or pass --agent")
    agent_cfg = config.agent_config()
    agent = load_agent(net, agent_path, agent_cfg)
    report = eval_agent(net, agent, test, agent_cfg.alpha, workers=agent_cfg.workers)
    write_csv(ctx.out_dir / "agent_eval.csv", report.sample_rows(), ("sample_id", "config", "bitops", "correct"))
    write_csv(ctx.out_dir / "action_hist.csv", report.histogram_rows(), ("layer", "bit", "count"))
    write_csv(ctx.out_dir / "easy_hard.csv", report.decile_rows(), ("group", "sample_id", "config", "bitops"))
    write_csv(ctx.out_dir / "agent_summary.csv", [agent_summary(net, report, agent_cfg.alpha, agent)])


def cmd_report_scales(ctx: Context):
    net = load_net(ctx.config)
    rows = []
    for i, layer in enumerate(net.layers):
        for b in net.bitset:
            for kind in QuantKind:
                rows.append({"layer": i + 1, "bit": b, "kind": kind.value,
                             "step": float(layer.steps.step(b, kind).value)})
    write_csv(ctx.out_dir / "scales.csv", rows, ("layer", "bit", "kind", "step"))


def cmd_report_noise(ctx: Context):
    config = ctx.config
    net = load_net(config)
    _, test = load_data(config)
    calib = net.forward(test.images[:256], net.uniform(net.bitset.b_max), "eval", capture=True)
    rows = []
    for i, layer in enumerate(net.layers):
        for kind, tensor in ((QuantKind.WEIGHTS, layer.weight.value), (QuantKind.ACTIVATIONS, calib.snapshots[i])):
            variance = noise_variance_report(tensor, layer.steps, net.bitset, kind)
            error = mean_abs_error_report(tensor, layer.steps, net.bitset, kind)
            for b in net.bitset:
                rows.append({"layer": i + 1, "kind": kind.value, "bit": b, "noise_variance": variance[b],
                             "mean_abs_error": error[b]})
    write_csv(ctx.out_dir / "noise.csv", rows)


def cmd_report_cost(ctx: Context):
    net = new_net(ctx.config)
    costs = CostTable.from_net(net)
    write_csv(ctx.out_dir / "cost.csv", costs.report_rows())
    rows = []
    for b in net.bitset:
        cfg = net.uniform(b)
        rows.append({"config": str(cfg), "bitops": costs.network_bitops(cfg),
                     "normalized_cost": costs.total_normalized_cost(cfg),
                     "total_including_fp": costs.total_including_fp(cfg),
                     "usage_vs_max": format_usage(costs.relative_usage(cfg, net.bitset.b_max))})
    write_csv(ctx.out_dir / "cost_summary.csv", rows)
    logging.info(f"Reference net forward: {net.forward_macs()} MACs")


def _run_queue(queue: ExperimentQueue) -> Dict:
    results = queue.run_all()
    if queue.errors:
        logging.error(f"{len(queue.errors)} job(s) failed: {', '.join(sorted(queue.errors))}")
    return results


def _check_jobs(queue: ExperimentQueue):
    """Raises once the partial results are written, so the command exits nonzero."""
    if queue.errors:
        raise JobError(queue.errors)


def _finetune_job(net: SuperNet, train: Dataset, test: Dataset, cfg: BitConfig, config: RunConfig) -> Dict:
    before = evaluate(net, test, cfg).top1
    tuned = train_fixed_config(net.clone(), train, cfg, config["train.finetune_epochs"],
                               config["train.finetune_lr"], config["train.batch"], config["train.momentum"],
                               config["train.weight_decay"], config["train.seed"])
    after = evaluate(tuned, test, cfg).top1
    return {"config": str(cfg), "top1_before": before, "top1_after": after, "delta": after - before}


def cmd_finetune_subnets(ctx: Context):
    config = ctx.config
    net = load_net(config)
    train, test = load_data(config)
    rng = RngStreams(config["train.seed"]).get("sampling")
    queue = ExperimentQueue()
    for cfg in sample_mixed_configs(net, config["train.finetune_subnets"], rng):
        queue.add_job(str(cfg), _finetune_job, net=net, train=train, test=test, cfg=cfg, config=config)
    results = _run_queue(queue)
    write_csv(ctx.out_dir / "finetune.csv", list(results.values()),
              ("config", "top1_before", "top1_after", "delta"))
    _check_jobs(queue)


def _supernet_job(config: RunConfig, train: Dataset, test: Dataset, seed: int, **changes) -> List[Dict]:
    net = new_net(config, seed)
    cfg = config.train_config(seed=seed, **changes)
    _, history = train_supernet(net, train, test, cfg)
    return [row for row in history if row["epoch"] == cfg.epochs]


def cmd_sweep_k(ctx: Context):
    config = ctx.config
    train, test = load_data(config)
    queue = ExperimentQueue()
    for k in config.int_list("train.sweep_k"):
        queue.add_job(f"k={k}", _supernet_job, config=config, train=train, test=test,
                      seed=config["train.seed"], k=k)
    results = _run_queue(queue)
    rows = [{"k": int(name[2:]), "bits": row["bits"], "top1": row["top1"]}
            for name, final in results.items() for row in final]
    write_csv(ctx.out_dir / "k_sweep.csv", rows, ("k", "bits", "top1"))
    _check_jobs(queue)


def cmd_ablation(ctx: Context):
    config = ctx.config
    train, test = load_data(config)
    queue = ExperimentQueue()
    seeds = [config["train.seed"] + s for s in range(ctx.args.seeds)]
    for method in ABLATION_METHODS:
        for seed in seeds:
            queue.add_job(f"{method.value}/{seed}", _supernet_job, config=config, train=train, test=test,
                          seed=seed, method=method)
    results = _run_queue(queue)
    rows = []
    for name, final in results.items():
        method, seed = name.split("/")
        rows += [{"method": method, "seed": int(seed), "bits": row["bits"], "top1": row["top1"]} for row in final]
    write_csv(ctx.out_dir / "ablation.csv", rows, ("method", "seed", "bits", "top1"))
    summary = []
    for method in ABLATION_METHODS:
        for bits in sorted({row["bits"] for row in rows}):
            values = [row["top1"] for row in rows if row["method"] == method.value and row["bits"] == bits]
            if values:
                summary.append({"method": method.value, "bits": bits, "median_top1": float(np.median(values)),
                                "seeds": len(values)})
    write_csv(ctx.out_dir / "ablation_summary.csv", summary, ("method", "bits", "median_top1", "seeds"))
    _check_jobs(queue)


def _alpha_job(net: SuperNet, subset: Dataset, test: Dataset, config: RunConfig, alpha: float) -> Dict:
    agent_cfg = config.agent_config(alpha=alpha)
    agent, _ = train_agent(net, subset, agent_cfg)
    report = eval_agent(net, agent, test, alpha, workers=agent_cfg.workers)
    return {"alpha": alpha, "top1": report.top1, "mean_bitops": report.mean_bitops,
            "distinct_configs": report.distinct_configs}


def cmd_sweep_alpha(ctx: Context):
    config = ctx.config
    net = load_net(config)
    train, test = load_data(config)
    subset = _agent_subset(config, train)
    queue = ExperimentQueue()
    for alpha in config.float_list("agent.alphas"):
        queue.add_job(f"alpha={alpha}", _alpha_job, net=net, subset=subset, test=test, config=config, alpha=alpha)
    rows = list(_run_queue(queue).values())
    write_csv(ctx.out_dir / "alpha_sweep.csv", rows, ("alpha", "top1", "mean_bitops", "distinct_configs"))
    if len(rows) >= 2:
        rho, p_value = stats.spearmanr([r["alpha"] for r in rows], [r["mean_bitops"] for r in rows])
        write_csv(ctx.out_dir / "alpha_sweep_summary.csv", [{"spearman_rho": float(rho), "p_value": float(p_value),
                                                             "alphas": len(rows)}])
        logging.info(f"Spearman rank correlation of alpha and mean BitOps: {rho:.3f}")
    _check_jobs(queue)


COMMANDS: Dict[str, Callable[[Context], None]] = {
    "prep-data": cmd_prep_data,
    "train-supernet": cmd_train_supernet,
    "train-fixed": cmd_train_fixed,
    "eval": cmd_eval,
    "oracle-enumerate": cmd_oracle_enumerate,
    "train-agent": cmd_train_agent,
    "eval-agent": cmd_eval_agent,
    "report-scales": cmd_report_scales,
    "report-noise": cmd_report_noise,
    "report-cost": cmd_report_cost,
    "finetune-subnets": cmd_finetune_subnets,
    "sweep-k": cmd_sweep_k,
    "ablation": cmd_ablation,
    "sweep-alpha": cmd_sweep_alpha,
}


def _add_selection(parser: argparse.ArgumentParser, allow_random: bool = False, allow_fp: bool = False):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--uniform", type=int, metavar="B", help="uniform bit-width for every layer")
    group.add_argument("--config", dest="bit_config", metavar="B1,B2,..", help="one bit-width per layer")
    if allow_random:
        group.add_argument("--random", type=int, metavar="N", help="N random mixed configurations")
    if allow_fp:
        group.add_argument("--full-precision", action="store_true", help="bypass quantization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitswitcher", description="Per-sample bit-width switching for "
                                                                      "quantized super-networks")
    parser.add_argument("--config", dest="config_file", metavar="FILE", help="run configuration file")
    parser.add_argument("--verbose", action="store_true", help="debug logging, mirrored to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prep-data", help="generate or read the dataset and write a cache")
    p = sub.add_parser("train-supernet", help="train the weight-shared super-network")
    p.add_argument("--init", metavar="DIR", help="full-precision checkpoint to start from")
    p = sub.add_parser("train-fixed", help="train one fixed configuration")
    _add_selection(p, allow_fp=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--from-supernet", action="store_true", help="start from the trained super-network")
    p = sub.add_parser("eval", help="evaluate configurations of the super-network")
    _add_selection(p, allow_random=True)
    p = sub.add_parser("oracle-enumerate", help="evaluate every configuration")
    p.add_argument("--alpha", type=float)
    sub.add_parser("train-agent", help="train the bit-width agent")
    p = sub.add_parser("eval-agent", help="evaluate the bit-width agent")
    p.add_argument("--agent", metavar="FILE", help="agent file (default: <out.dir>/train-agent/agent.npz)")
    sub.add_parser("report-scales", help="learned step sizes per layer and bit-width")
    sub.add_parser("report-noise", help="quantization noise per layer and bit-width")
    sub.add_parser("report-cost", help="MACs and BitOps per layer")
    sub.add_parser("finetune-subnets", help="fine-tune sampled subnets and report the change")
    sub.add_parser("sweep-k", help="train one super-network per k")
    p = sub.add_parser("ablation", help="compare training methods")
    p.add_argument("--seeds", type=int, default=3)
    sub.add_parser("sweep-alpha", help="train one agent per alpha")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config_file) if args.config_file else RunConfig()
        out_dir = prepare_output_dir(Path(config["out.dir"]), args.command, config["out.on_exists"])
        configure_logging(out_dir, args.verbose)
        logging.info(f"{APP_NAME} {args.command} started, output in {out_dir}")
        config.write_resolved(out_dir)
        ctx = Context(config, out_dir, args, show_progress=args.verbose and sys.stderr.isatty())
        COMMANDS[args.command](ctx)
        logging.info(f"{APP_NAME} {args.command} finished")
        return 0
    except (BitSwitcherError, OSError) as e:
        logging.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logging.exception(f"{args.command} failed unexpectedly: {str(e)}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1

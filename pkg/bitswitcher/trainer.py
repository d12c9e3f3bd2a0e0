"""
Super-network training.

Each mini-batch runs four sub-stages on the shared weights:

    I    uniform b_max, cross-entropy against the labels
    II   uniform mid bit, distilled from the target net's b_max output
    III  k random non-uniform configs, distilled the same way (averaged over k)
    IV   uniform b_min, distilled from the mean of every target logit
         collected in stages I-III

Each stage's backward runs right after its forward, so gradients accumulate
over the batch and a single optimizer step follows. The target network is
moved towards the main network afterwards by EMA (or a hard copy every C
steps); it never receives gradients.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .data import Dataset, iterate_batches
from .errors import DimensionError, DivergenceError, DomainError, PreconditionError
from .quantization import QuantMode
from .supernet import BitConfig, SuperNet
from .tensor import RngStreams, cosine_lr, kl_divergence, sgd_step, softmax, softmax_cross_entropy

EVAL_BATCH = 256
METRICS_COLUMNS = ("epoch", "mode", "bits", "loss", "top1")


class TrainMethod(str, Enum):
    """Training procedures compared by the ablation command."""
    FULL = "full"                        # knowledge ensemble + knowledge slowdown
    KE_ONLY = "ke_only"                  # ensemble of the main net's own detached logits
    KD_ONLY = "kd_only"                  # every subnet distilled from the b_max output only
    RANDOM_SAMPLING = "random_sampling"  # every stage against the hard labels


class TargetUpdate(str, Enum):
    EMA = "ema"
    COPY = "copy"


@dataclass
class TrainConfig:
    """
    Hyperparameters of super-network and fixed-config training.

    Args:
        epochs (int): Passes over the training set.
        batch_size (int): Mini-batch size.
        lr (float): Initial learning rate of the cosine schedule.
        momentum (float): SGD momentum.
        weight_decay (float): L2 penalty on weights (not on BN or step sizes).
        k (int): Random configurations per mini-batch in stage III.
        tau (float): EMA decay of the target network.
        temperature (float): Distillation temperature.
        seed (int): Seed of the shuffle and sampling streams.
        method (TrainMethod): Training procedure.
        target_update (TargetUpdate): EMA or hard copy every ``copy_interval`` steps.
        copy_interval (int): C of the hard-copy update.
        mixed_configs (int): Random configurations averaged in the "mixed" metric.
        storage_mode (QuantMode): Weight derivation rule.
    """
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    k: int = 2
    tau: float = 0.995
    temperature: float = 1.0
    seed: int = 0
    method: TrainMethod = TrainMethod.FULL
    target_update: TargetUpdate = TargetUpdate.EMA
    copy_interval: int = 100
    mixed_configs: int = 16
    storage_mode: QuantMode = QuantMode.ROUND_MASTER

    def __post_init__(self):
        self.method = TrainMethod(self.method)
        self.target_update = TargetUpdate(self.target_update)
        self.storage_mode = QuantMode(self.storage_mode)
        if self.k < 1:
            raise DomainError(f"k must be at least 1, got {self.k}")
        if not 0 < self.tau < 1:
            raise DomainError(f"EMA decay must lie in (0, 1), got {self.tau}")
        if self.temperature <= 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError(f"invalid epochs/batch size {self.epochs}/{self.batch_size}")
        if self.lr <= 0:
            raise DomainError(f"learning rate must be positive, got {self.lr}")
        if self.copy_interval < 1:
            raise DomainError(f"copy interval must be at least 1, got {self.copy_interval}")
        if self.storage_mode is QuantMode.WEIGHTS_ALIGNED:
            raise DomainError("super-network training runs on the float master weights (round_master)")


class SoftLabelBuffer:
    """Detached logits collected during one mini-batch."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._logits: List[np.ndarray] = []

    def clear(self):
        self._logits.clear()

    def push(self, logits: np.ndarray):
        if len(self._logits) >= self.capacity:
            raise PreconditionError(f"soft-label buffer is full ({self.capacity} entries)")
        if self._logits and logits.shape != self._logits[0].shape:
            raise DimensionError(f"logits {logits.shape} do not match buffered {self._logits[0].shape}")
        self._logits.append(np.array(logits, copy=True))

    def __len__(self) -> int:
        return len(self._logits)

    def mean_logits(self) -> np.ndarray:
        if not self._logits:
            raise PreconditionError("soft-label buffer is empty")
        return np.mean(np.stack(self._logits), axis=0)

    def soft_labels(self, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.mean_logits(), temperature)


@dataclass
class StageLosses:
    l_max: float
    l_mid: Optional[float]
    l_rand: float
    l_min: float
    buffer_size: int

    @property
    def total(self) -> float:
        return self.l_max + (self.l_mid or 0.0) + self.l_rand + self.l_min

    def as_dict(self) -> Dict[str, float]:
        return {"l_max": self.l_max, "l_mid": self.l_mid if self.l_mid is not None else float("nan"),
                "l_rand": self.l_rand, "l_min": self.l_min}


def _check_same_shape(target: SuperNet, main: SuperNet):
    if target.spec != main.spec:
        raise DimensionError("target and main networks have different architectures")


def ema_update(target: SuperNet, main: SuperNet, tau: float) -> SuperNet:
    """
    Moves every target parameter and BN statistic: t <- tau * t + (1 - tau) * m.

    Step sizes are parameters and are included.
    """
    if not 0 <= tau <= 1:
        raise DomainError(f"EMA decay must lie in [0, 1], got {tau}")
    _check_same_shape(target, main)
    main_params = main.named_parameters()
    for name, t in target.named_parameters().items():
        m = main_params[name].value
        t.value[...] = m if tau == 0 else tau * t.value + (1 - tau) * m
    main_buffers = main.named_buffers()
    for name, t in target.named_buffers().items():
        m = main_buffers[name]
        t[...] = m if tau == 0 else tau * t + (1 - tau) * m
    return target


def copy_update(target: SuperNet, main: SuperNet) -> SuperNet:
    """Hard copy of the main network into the target."""
    return ema_update(target, main, 0.0)


def _check_loss(value: float, stage: str, step: int) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss in stage {stage} at step {step}")
    return value


def train_step(net: SuperNet, target: SuperNet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator, lr: float, step: int = 0,
               mid_bit: Optional[int] = None) -> StageLosses:
    """
    One mini-batch of four-stage super-network training.

    Args:
        net (SuperNet): Main network, updated in place.
        target (SuperNet): Target network producing soft labels.
        x (np.ndarray): Input batch.
        y (np.ndarray): Integer labels.
        cfg (TrainConfig): Hyperparameters and training method.
        rng (np.random.Generator): Sampling stream (mid bit, random configs).
        lr (float): Learning rate of this step.
        step (int): Global step index, drives the hard-copy target update.
        mid_bit (int, optional): Forces the stage-II bit-width.

    Returns:
        StageLosses: Losses of the four stages.
    """
    bitset = net.bitset
    if len(bitset) < 2:
        raise PreconditionError(f"super-network training needs at least two bit-widths, got {bitset}")
    method = cfg.method
    temperature = cfg.temperature
    u_max, u_min = net.uniform(bitset.b_max), net.uniform(bitset.b_min)
    mids = bitset.mids
    run_mid = bool(mids) or mid_bit is not None
    buffer = SoftLabelBuffer(cfg.k + (2 if run_mid else 1))
    buffer.clear()
    net.zero_grad()

    def teacher_logits(config: BitConfig, main_logits: np.ndarray) -> np.ndarray:
        if method is TrainMethod.FULL:
            return target.forward(x, config, "train", track_stats=False).logits
        return np.array(main_logits, copy=True)

    def distill(config: BitConfig, probs: np.ndarray, scale: float, stage: str):
        result = net.forward(x, config, "train")
        if method is TrainMethod.RANDOM_SAMPLING:
            loss, dlogits = softmax_cross_entropy(result.logits, y)
        else:
            loss, dlogits = kl_divergence(probs, result.logits, temperature)
        _check_loss(loss, stage, step)
        net.backward(result, dlogits * scale)
        return loss, result.logits

    # I: b_max against the labels
    result = net.forward(x, u_max, "train")
    l_max, dlogits = softmax_cross_entropy(result.logits, y)
    _check_loss(l_max, "max", step)
    net.backward(result, dlogits)
    hat_max = teacher_logits(u_max, result.logits)
    buffer.push(hat_max)
    max_probs = softmax(hat_max, temperature)

    # II: one mid bit
    l_mid = None
    if run_mid:
        b = mid_bit if mid_bit is not None else int(mids[rng.integers(len(mids))])
        config = net.uniform(b)
        l_mid, logits = distill(config, max_probs, 1.0, "mid")
        buffer.push(teacher_logits(config, logits))

    # III: k random non-uniform configs
    forbid = {u_max, u_min}
    rand_losses = []
    for _ in range(cfg.k):
        config = net.sample_random_config(rng, forbid)
        loss, logits = distill(config, max_probs, 1.0 / cfg.k, "random")
        rand_losses.append(loss)
        buffer.push(teacher_logits(config, logits))
    l_rand = float(np.mean(rand_losses))

    # IV: b_min from the ensemble
    if method is TrainMethod.KD_ONLY:
        min_probs = max_probs
    else:
        min_probs = buffer.soft_labels(temperature)
    buffer_size = len(buffer)
    l_min, _ = distill(u_min, min_probs, 1.0, "min")

    sgd_step(net.parameters(), lr, cfg.momentum, cfg.weight_decay)
    if method is TrainMethod.FULL:
        if cfg.target_update is TargetUpdate.EMA:
            ema_update(target, net, cfg.tau)
        elif (step + 1) % cfg.copy_interval == 0:
            copy_update(target, net)
    return StageLosses(float(l_max), None if l_mid is None else float(l_mid), l_rand, float(l_min), buffer_size)


@dataclass
class EvalResult:
    loss: float
    top1: float
    correct: np.ndarray = field(repr=False)


def evaluate(net: SuperNet, dataset: Dataset, config: Optional[BitConfig],
             batch_size: int = EVAL_BATCH, quant_mode: QuantMode = QuantMode.ROUND_MASTER) -> EvalResult:
    """
    Eval-mode cross-entropy and top-1 accuracy (in percent) of one configuration.

    Args:
        net (SuperNet): Network to evaluate.
        dataset (Dataset): Labeled samples.
        config (BitConfig): Configuration; None evaluates at full precision.
        batch_size (int): Evaluation batch size.
        quant_mode (QuantMode): Weight derivation rule.
    """
    if len(dataset) == 0:
        raise PreconditionError("cannot evaluate on an empty dataset")
    logits = net.predict(dataset.images, config, batch_size, quant_mode)
    loss, _ = softmax_cross_entropy(logits, dataset.labels)
    correct = logits.argmax(axis=1) == dataset.labels
    return EvalResult(float(loss), 100.0 * float(correct.mean()), correct)


def sample_mixed_configs(net: SuperNet, count: int, rng: np.random.Generator) -> List[BitConfig]:
    """
    ``count`` distinct random non-uniform configurations.

    Fewer are returned when the space holds fewer mixed configurations.
    """
    forbid = {net.uniform(b) for b in net.bitset}
    available = len(net.bitset) ** net.num_quant_layers - len(forbid)
    if count > available:
        logging.warning(f"Only {available} mixed configurations exist, sampling {available} instead of {count}")
        count = available
    configs = []
    for _ in range(count):
        cfg = net.sample_random_config(rng, forbid)
        forbid.add(cfg)
        configs.append(cfg)
    return configs


def evaluation_rows(net: SuperNet, dataset: Dataset, mixed: Sequence[BitConfig], epoch: int,
                    quant_mode: QuantMode = QuantMode.ROUND_MASTER) -> List[Dict]:
    """One row per uniform bit-width plus one aggregate row over ``mixed``."""
    rows = []
    for b in net.bitset:
        result = evaluate(net, dataset, net.uniform(b), quant_mode=quant_mode)
        rows.append({"epoch": epoch, "mode": "uniform", "bits": str(b), "loss": result.loss, "top1": result.top1})
    if mixed:
        results = [evaluate(net, dataset, config, quant_mode=quant_mode) for config in mixed]
        rows.append({"epoch": epoch, "mode": "mixed", "bits": f"mean of {len(mixed)}",
                     "loss": float(np.mean([r.loss for r in results])),
                     "top1": float(np.mean([r.top1 for r in results]))})
    return rows


class SuperNetTrainer:
    """
    Runs super-network training epoch by epoch.

    Args:
        net (SuperNet): Network to train, modified in place.
        cfg (TrainConfig): Hyperparameters.
        train_set (Dataset): Training samples.
        test_set (Dataset): Samples for the per-epoch metrics.
        on_epoch (callable, optional): Called with (epoch, rows) after every epoch.
        show_progress (bool): Show a tqdm progress bar per epoch.
    """

    def __init__(self, net: SuperNet, cfg: TrainConfig, train_set: Dataset, test_set: Dataset,
                 on_epoch: Optional[Callable[[int, List[Dict]], None]] = None, show_progress: bool = False):
        if len(train_set) == 0:
            raise PreconditionError("training set is empty")
        self.net = net
        self.cfg = cfg
        self.train_set = train_set
        self.test_set = test_set
        self.on_epoch = on_epoch
        self.show_progress = show_progress
        self.is_stopped = False
        streams = RngStreams(cfg.seed)
        self.shuffle_rng = streams.get("shuffle")
        self.sampling_rng = streams.get("sampling")
        self.mixed = sample_mixed_configs(net, cfg.mixed_configs, streams.get("data"))
        self.target = net.clone()
        self.global_step = 0
        self.history: List[Dict] = []

    def stop(self):
        self.is_stopped = True

    def steps_per_epoch(self) -> int:
        return -(-len(self.train_set) // self.cfg.batch_size)

    def run(self) -> List[Dict]:
        """Trains for cfg.epochs epochs and returns the metrics rows."""
        total_steps = max(1, self.cfg.epochs * self.steps_per_epoch())
        logging.info(f"Training super-network ({self.cfg.method.value}) on {len(self.train_set)} samples, "
                     f"bits {self.net.bitset}, {self.cfg.epochs} epochs, k={self.cfg.k}")
        for epoch in range(1, self.cfg.epochs + 1):
            if self.is_stopped:
                logging.info(f"Training stopped before epoch {epoch}")
                break
            losses = []
            batches = iterate_batches(self.train_set, self.cfg.batch_size, self.shuffle_rng)
            for x, y in tqdm(batches, total=self.steps_per_epoch(), desc=f"epoch {epoch}/{self.cfg.epochs}",
                             disable=not self.show_progress, leave=False):
                lr = cosine_lr(self.global_step, total_steps, self.cfg.lr)
                losses.append(train_step(self.net, self.target, x, y, self.cfg, self.sampling_rng, lr,
                                         self.global_step))
                self.global_step += 1
            rows = evaluation_rows(self.net, self.test_set, self.mixed, epoch)
            self.history.extend(rows)
            summary = ", ".join(f"{r['mode']} {r['bits']}: {r['top1']:.2f}%" for r in rows)
            logging.info(f"Epoch {epoch}: L_max {np.mean([l.l_max for l in losses]):.4f}, "
                         f"L_min {np.mean([l.l_min for l in losses]):.4f}, "
                         f"lr {cosine_lr(self.global_step, total_steps, self.cfg.lr):.5f}; {summary}")
            if self.on_epoch is not None:
                self.on_epoch(epoch, rows)
        return self.history


def train_supernet(net: SuperNet, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                   calibrate: bool = True, on_epoch=None, show_progress: bool = False):
    """
    Trains a super-network and returns it with its metrics history.

    Args:
        net (SuperNet): Freshly initialized or FP-pretrained network.
        train_set (Dataset): Training samples.
        test_set (Dataset): Samples for the per-epoch metrics.
        cfg (TrainConfig): Hyperparameters.
        calibrate (bool): Initialize step sizes from the first training batch.

    Returns:
        tuple: (net, list of metrics rows with METRICS_COLUMNS).
    """
    if calibrate:
        net.calibrate(train_set.images[:cfg.batch_size])
    trainer = SuperNetTrainer(net, cfg, train_set, test_set, on_epoch, show_progress)
    return net, trainer.run()


def train_fixed_config(net: SuperNet, train_set: Dataset, config: Union[BitConfig, int, None],
                       epochs: int, lr: float, batch_size: int = 64, momentum: float = 0.9,
                       weight_decay: float = 1e-4, seed: int = 0, show_progress: bool = False) -> SuperNet:
    """
    Plain cross-entropy training of one fixed configuration.

    Only the quantizers and BN instances of ``config`` take part; the other
    bit-widths' state is left untouched. Used for independent baselines,
    full-precision pretraining (``config=None``) and subnet fine-tuning.

    Args:
        net (SuperNet): Network, modified in place.
        train_set (Dataset): Training samples.
        config (BitConfig | int | None): Configuration, uniform bit-width, or
            None for full precision.
        epochs (int): Passes over the data; 0 returns the net untouched.
        lr (float): Initial cosine learning rate.

    Returns:
        SuperNet: The trained network.
    """
    if isinstance(config, (int, np.integer)):
        config = net.uniform(int(config))
    if config is not None:
        net.check_config(config)
    if epochs <= 0:
        return net
    if len(train_set) == 0:
        raise PreconditionError("training set is empty")
    for p in net.parameters():
        p.slots.clear()
    rng = RngStreams(seed).get("shuffle")
    steps_per_epoch = -(-len(train_set) // batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    label = "full precision" if config is None else str(config)
    logging.info(f"Training fixed configuration {label} for {epochs} epochs (lr {lr})")
    for epoch in range(1, epochs + 1):
        losses = []
        batches = iterate_batches(train_set, batch_size, rng)
        for x, y in tqdm(batches, total=steps_per_epoch, desc=f"{label} {epoch}/{epochs}",
                         disable=not show_progress, leave=False):
            net.zero_grad()
            result = net.forward(x, config, "train")
            loss, dlogits = softmax_cross_entropy(result.logits, y)
            _check_loss(loss, "fixed", step)
            net.backward(result, dlogits)
            sgd_step(net.parameters(), cosine_lr(step, total_steps, lr), momentum, weight_decay)
            losses.append(loss)
            step += 1
        logging.info(f"Fixed {label} epoch {epoch}: loss {np.mean(losses):.4f}")
    return net

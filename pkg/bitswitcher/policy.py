"""
Per-sample, per-layer bit-width selection with a double-Q agent.

An episode walks the quantizable layers of a frozen super-network for one
input. At layer i the agent sees the pooled input features of that layer
(projected to FEATURE_DIM by a per-layer linear map), the layer position and
its previous action, picks a bit-width, and the layer runs at that width.
Every step costs ``alpha`` times the layer's normalized BitOps; the last step
additionally earns 1 if the resulting prediction is correct.
"""
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .cost_model import CostTable
from .data import Dataset
from .errors import ConfigError, DimensionError, DivergenceError, DomainError, FormatError, PreconditionError
from .supernet import DEFAULT_ENUMERATION_CAP, BitConfig, SuperNet
from .tensor import (
    Parameter, RngStreams, adam_step, check_finite, fully_connected_backward, fully_connected_forward,
    relu_backward, relu_forward, zero_grads,
)

FEATURE_DIM = 64
HIDDEN_WIDTHS = (64, 128, 256, 128)
GAMMA = 1.0
EXPLORATION_FRACTION = 0.6
MOVING_AVERAGE_WINDOW = 100
ALPHA_PRESETS = {"har": 0.05, "ccr": 0.3}
NO_ACTION = -1
# Q-network MACs per episode as a share of one super-network forward
OVERHEAD_BOUND = 0.05


@dataclass
class AgentConfig:
    """
    Hyperparameters of the bit-width agent.

    Args:
        alpha (float): Weight of the BitOps cost in the reward.
        episodes (int): Training episodes (one per sample visit).
        epsilon_start (float): Initial exploration rate.
        epsilon_end (float): Final exploration rate, reached after
            EXPLORATION_FRACTION of the episodes.
        lr (float): Adam learning rate.
        batch_size (int): Replay minibatch size.
        replay_capacity (int): Transitions kept in the replay buffer.
        target_tau (float): EMA decay of the target Q-network.
        subset (float): Fraction of the training set used for the agent.
        seed (int): Seed of the agent's random streams.
        gamma (float): Discount; episodes are finite so 1 is the default.
        rollout_batch (int): Episodes rolled out together between updates.
        workers (int): Threads used by eval_agent.
    """
    alpha: float = 0.1
    episodes: int = 20000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    lr: float = 1e-6
    batch_size: int = 64
    replay_capacity: int = 50000
    target_tau: float = 0.99
    subset: float = 0.1
    seed: int = 0
    gamma: float = GAMMA
    rollout_batch: int = 32
    workers: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError(f"alpha must be non-negative, got {self.alpha}")
        for name in ("epsilon_start", "epsilon_end"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")
        if not 0 <= self.target_tau <= 1:
            raise DomainError(f"target_tau must lie in [0, 1], got {self.target_tau}")
        if self.batch_size < 1 or self.replay_capacity < 1 or self.rollout_batch < 1 or self.workers < 1:
            raise DomainError("batch size, replay capacity, rollout batch and workers must be positive")

    @staticmethod
    def preset_alpha(preset: str) -> float:
        """alpha of a named trade-off preset: "har" (accuracy first) or "ccr" (cost first)."""
        if preset not in ALPHA_PRESETS:
            raise ConfigError(f"unknown agent preset '{preset}', expected one of {sorted(ALPHA_PRESETS)}")
        return ALPHA_PRESETS[preset]


class EpsilonSchedule:
    """Linear decay from start to end over the first ``fraction`` of the episodes, then constant."""

    def __init__(self, start: float, end: float, total: int, fraction: float = EXPLORATION_FRACTION):
        self.start = start
        self.end = end
        self.horizon = max(1, int(total * fraction))

    def value(self, episode: int) -> float:
        progress = min(1.0, episode / self.horizon)
        return self.start + (self.end - self.start) * progress


@dataclass
class State:
    """Agent input before projection: pooled layer input, layer index (0-based), previous action."""
    pooled: np.ndarray
    layer: int
    prev_action: int = NO_ACTION


@dataclass
class Transition:
    state: State
    action: int
    reward: float
    next_state: Optional[State]
    terminal: bool

    def __post_init__(self):
        if self.terminal != (self.next_state is None):
            raise PreconditionError("terminal transitions carry no next state, all others need one")


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self._items: deque = deque(maxlen=capacity)

    def push(self, transition: Transition):
        self._items.append(transition)

    def extend(self, transitions: Sequence[Transition]):
        for t in transitions:
            self.push(t)

    def sample(self, batch_size: int) -> List[Transition]:
        if not self._items:
            raise PreconditionError("cannot sample from an empty replay buffer")
        idx = self.rng.choice(len(self._items), size=min(batch_size, len(self._items)), replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)


def pool_features(feature_map: np.ndarray) -> np.ndarray:
    """Global average pool (N, C, H, W) -> (N, C)."""
    if feature_map.ndim != 4:
        raise DimensionError(f"expected a (N, C, H, W) feature map, got {feature_map.shape}")
    return feature_map.mean(axis=(2, 3))


class QNetwork:
    """
    Per-layer feature projections followed by a 5-layer fully-connected Q head.

    Args:
        layer_channels (Sequence[int]): Input channels of every quantizable layer.
        num_actions (int): |B|.
        rng (np.random.Generator): Initialization stream.
        feature_dim (int): Projected feature length F.
        hidden (Sequence[int]): Hidden widths of the Q head.
    """

    def __init__(self, layer_channels: Sequence[int], num_actions: int, rng: np.random.Generator,
                 feature_dim: int = FEATURE_DIM, hidden: Sequence[int] = HIDDEN_WIDTHS, dtype=np.float64):
        self.layer_channels = list(layer_channels)
        self.num_layers = len(self.layer_channels)
        self.num_actions = num_actions
        self.feature_dim = feature_dim
        self.projections: List[Tuple[Parameter, Parameter]] = []
        for i, c in enumerate(self.layer_channels):
            w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c), (feature_dim, c)).astype(dtype), f"proj{i + 1}.weight")
            b = Parameter(np.zeros(feature_dim, dtype=dtype), f"proj{i + 1}.bias")
            self.projections.append((w, b))
        widths = [self.embedding_size] + list(hidden) + [num_actions]
        self.dense: List[Tuple[Parameter, Parameter]] = []
        for j, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            scale = np.sqrt(2.0 / fan_in) if j < len(widths) - 2 else 0.1 / np.sqrt(fan_in)
            w = Parameter(rng.normal(0.0, scale, (fan_out, fan_in)).astype(dtype), f"fc{j + 1}.weight")
            b = Parameter(np.zeros(fan_out, dtype=dtype), f"fc{j + 1}.bias")
            self.dense.append((w, b))

    @property
    def embedding_size(self) -> int:
        return self.feature_dim + 1 + self.num_actions + 1

    def parameters(self) -> List[Parameter]:
        params = []
        for w, b in self.projections + self.dense:
            params += [w, b]
        return params

    def zero_grad(self):
        zero_grads(self.parameters())

    # -- embedding -----------------------------------------------------------

    def embed_layer(self, layer: int, pooled: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        """Embeddings of a batch of states that all sit at ``layer``."""
        if not 0 <= layer < self.num_layers:
            raise DomainError(f"unknown layer index {layer}")
        if pooled.ndim != 2 or pooled.shape[1] != self.layer_channels[layer]:
            raise DimensionError(f"layer {layer + 1} expects {self.layer_channels[layer]} channels, "
                                 f"got features of shape {pooled.shape}")
        w, b = self.projections[layer]
        n = pooled.shape[0]
        emb = np.zeros((n, self.embedding_size), dtype=w.value.dtype)
        emb[:, :self.feature_dim] = pooled @ w.value.T + b.value
        emb[:, self.feature_dim] = (layer + 1) / self.num_layers
        slots = np.where(np.asarray(prev_actions) < 0, self.num_actions, prev_actions)
        emb[np.arange(n), self.feature_dim + 1 + slots] = 1.0
        return emb

    def embed(self, states: Sequence[State]) -> Tuple[np.ndarray, list]:
        emb = np.zeros((len(states), self.embedding_size), dtype=self.dense[0][0].value.dtype)
        groups = []
        layers = np.array([s.layer for s in states])
        for layer in np.unique(layers):
            rows = np.flatnonzero(layers == layer)
            pooled = np.stack([states[r].pooled for r in rows])
            prev = np.array([states[r].prev_action for r in rows])
            emb[rows] = self.embed_layer(int(layer), pooled, prev)
            groups.append((int(layer), rows, pooled))
        return emb, groups

    # -- Q head --------------------------------------------------------------

    def head_forward(self, emb: np.ndarray) -> Tuple[np.ndarray, list]:
        h = emb
        caches = []
        for j, (w, b) in enumerate(self.dense):
            h, fc_cache = fully_connected_forward(h, w.value, b.value)
            mask = None
            if j < len(self.dense) - 1:
                h, mask = relu_forward(h)
            caches.append((fc_cache, mask))
        return h, caches

    def head_backward(self, dq: np.ndarray, caches: list) -> np.ndarray:
        d = dq
        for (w, b), (fc_cache, mask) in zip(reversed(self.dense), reversed(caches)):
            if mask is not None:
                d = relu_backward(d, mask)
            d, dw, db = fully_connected_backward(d, fc_cache)
            w.grad += dw
            b.grad += db
        return d

    def q_values(self, states: Sequence[State]) -> np.ndarray:
        emb, _ = self.embed(states)
        return self.head_forward(emb)[0]

    def q_values_layer(self, layer: int, pooled: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        return self.head_forward(self.embed_layer(layer, pooled, prev_actions))[0]

    def forward(self, states: Sequence[State]):
        emb, groups = self.embed(states)
        q, caches = self.head_forward(emb)
        return q, (groups, caches)

    def backward(self, dq: np.ndarray, cache):
        groups, caches = cache
        demb = self.head_backward(dq, caches)
        for layer, rows, pooled in groups:
            w, b = self.projections[layer]
            dproj = demb[rows, :self.feature_dim]
            w.grad += dproj.T @ pooled
            b.grad += dproj.sum(axis=0)

    # -- target sync ---------------------------------------------------------

    def clone(self) -> "QNetwork":
        twin = object.__new__(QNetwork)
        twin.__dict__.update(self.__dict__)
        twin.projections = [(_copy_param(w), _copy_param(b)) for w, b in self.projections]
        twin.dense = [(_copy_param(w), _copy_param(b)) for w, b in self.dense]
        return twin

    def ema_from(self, other: "QNetwork", tau: float):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.value[...] = tau * mine.value + (1 - tau) * theirs.value

    def forward_macs(self) -> int:
        """MACs of one decision: the widest projection plus the Q head."""
        projection = self.feature_dim * max(self.layer_channels)
        return projection + sum(w.value.size for w, _ in self.dense)

    def episode_macs(self) -> int:
        """MACs of a whole episode: every projection once, the Q head once per layer."""
        projections = self.feature_dim * sum(self.layer_channels)
        return projections + self.num_layers * sum(w.value.size for w, _ in self.dense)


def _copy_param(p: Parameter) -> Parameter:
    return Parameter(p.value.copy(), p.name, p.decay, p.learnable, p.floor)


class BitWidthAgent:
    """
    Online and target Q-networks for one super-network.

    Args:
        net (SuperNet): The super-network the agent drives.
        cfg (AgentConfig): Hyperparameters.
    """

    def __init__(self, net: SuperNet, cfg: AgentConfig):
        self.cfg = cfg
        self.bitset = net.bitset
        self.num_layers = net.num_quant_layers
        rng = RngStreams(cfg.seed).get("agent_init")
        self.qnet = QNetwork([layer.in_channels for layer in net.layers], len(self.bitset), rng)
        self.target = self.qnet.clone()

    def greedy_actions(self, layer: int, pooled: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        return self.qnet.q_values_layer(layer, pooled, prev_actions).argmax(axis=1)

    def sync_target(self):
        self.target.ema_from(self.qnet, self.cfg.target_tau)


def encode_state(feature_map: np.ndarray, layer: int, prev_action: int, qnet: QNetwork) -> np.ndarray:
    """
    State embedding of one sample at one layer.

    Args:
        feature_map (np.ndarray): Input of the layer, (C, H, W) or (1, C, H, W).
        layer (int): 0-based quantizable layer index.
        prev_action (int): Action index taken at the previous layer, or NO_ACTION.
        qnet (QNetwork): Owner of the layer's projection.

    Returns:
        np.ndarray: Vector of length F + 1 + |B| + 1.
    """
    if feature_map.ndim == 3:
        feature_map = feature_map[None]
    emb = qnet.embed_layer(layer, pool_features(feature_map), np.array([prev_action]))[0]
    return check_finite(emb, f"state embedding of layer {layer + 1}")


def reward(costs: CostTable, alpha: float, layer: int, b: int, is_last: bool,
           correct: Optional[bool] = None) -> float:
    """
    Step reward: -alpha * normalized BitOps, plus 1 for a correct prediction at the last layer.

    Raises:
        PreconditionError: If the task outcome is missing at the last layer or
            given at any other layer.
    """
    if is_last and correct is None:
        raise PreconditionError("the last step needs the task outcome")
    if not is_last and correct is not None:
        raise PreconditionError("the task outcome belongs to the last step only")
    value = -alpha * costs.normalized_cost(layer, b)
    if is_last and correct:
        value += 1.0
    return value


@dataclass
class Rollout:
    """Per-sample episodes of one batch."""
    actions: np.ndarray                  # (N, L) action indices
    configs: List[BitConfig]
    logits: np.ndarray
    correct: np.ndarray
    rewards: np.ndarray                  # (N,) episode returns
    transitions: List[List[Transition]] = field(default_factory=list)


def rollout_batch(net: SuperNet, agent: BitWidthAgent, x: np.ndarray, y: np.ndarray, epsilon: float,
                  rng: Optional[np.random.Generator], costs: CostTable, alpha: float,
                  keep_transitions: bool = True) -> Rollout:
    """
    Runs one episode per sample, layer by layer, in eval mode.

    Samples that chose the same bit-width at a layer are pushed through that
    layer together; eval-mode BN keeps them independent.

    Args:
        net (SuperNet): Frozen super-network.
        agent (BitWidthAgent): Acting agent.
        x (np.ndarray): Inputs (N, C, H, W).
        y (np.ndarray): Labels (N,).
        epsilon (float): Exploration rate.
        rng (np.random.Generator): Exploration stream; unused when epsilon is 0.
        costs (CostTable): BitOps table of ``net``.
        alpha (float): Cost weight of the reward.
        keep_transitions (bool): Build the transition lists.

    Returns:
        Rollout: Actions, configurations, logits, correctness, returns, transitions.
    """
    n = len(x)
    bits = agent.bitset.bits
    num_layers = net.num_quant_layers
    h, _ = net.forward_stem(x, "eval")
    prev = np.full(n, NO_ACTION)
    actions = np.zeros((n, num_layers), dtype=np.int64)
    pooled_per_layer = []
    prev_per_layer = []
    for i in range(num_layers):
        pooled = pool_features(h)
        pooled_per_layer.append(pooled)
        prev_per_layer.append(prev)
        chosen = agent.greedy_actions(i, pooled, prev)
        if epsilon > 0:
            explore = rng.random(n) < epsilon
            chosen = np.where(explore, rng.integers(len(bits), size=n), chosen)
        actions[:, i] = chosen
        h_next = None
        for a in np.unique(chosen):
            rows = np.flatnonzero(chosen == a)
            out, _ = net.forward_layer(i, h[rows], bits[a], "eval")
            if h_next is None:
                h_next = np.zeros((n,) + out.shape[1:], dtype=out.dtype)
            h_next[rows] = out
        h = h_next
        prev = chosen
    logits, _ = net.forward_head(h)
    correct = logits.argmax(axis=1) == y

    step_rewards = np.zeros((n, num_layers))
    for i in range(num_layers):
        for a in range(len(bits)):
            step_rewards[actions[:, i] == a, i] = -alpha * costs.normalized_cost(i, bits[a])
    step_rewards[:, -1] += correct.astype(np.float64)

    transitions = []
    if keep_transitions:
        for s in range(n):
            episode = []
            for i in range(num_layers):
                state = State(pooled_per_layer[i][s].copy(), i, int(prev_per_layer[i][s]))
                last = i == num_layers - 1
                next_state = None if last else State(pooled_per_layer[i + 1][s].copy(), i + 1, int(actions[s, i]))
                episode.append(Transition(state, int(actions[s, i]), float(step_rewards[s, i]), next_state, last))
            transitions.append(episode)
    configs = [BitConfig(tuple(bits[a] for a in row)) for row in actions]
    return Rollout(actions, configs, logits, correct, step_rewards.sum(axis=1), transitions)


def episode_rollout(net: SuperNet, agent: BitWidthAgent, x: np.ndarray, label: int, epsilon: float,
                    rng: Optional[np.random.Generator], costs: CostTable, alpha: float):
    """One episode for a single sample; returns (config, transitions, logits)."""
    if x.ndim == 3:
        x = x[None]
    result = rollout_batch(net, agent, x, np.array([label]), epsilon, rng, costs, alpha)
    return result.configs[0], result.transitions[0], result.logits[0]


def dqn_targets(transitions: Sequence[Transition], qnet: QNetwork, target: QNetwork,
                gamma: float = GAMMA) -> np.ndarray:
    """
    Double-Q targets: r for terminal transitions, otherwise
    r + gamma * Q(s', argmax_a Q(s', a; online); target).
    """
    rewards = np.array([t.reward for t in transitions], dtype=np.float64)
    live = [j for j, t in enumerate(transitions) if not t.terminal]
    targets = rewards.copy()
    if live:
        next_states = [transitions[j].next_state for j in live]
        best = qnet.q_values(next_states).argmax(axis=1)
        evaluated = target.q_values(next_states)[np.arange(len(live)), best]
        targets[live] += gamma * evaluated
    return targets


def dqn_loss(transitions: Sequence[Transition], qnet: QNetwork, target: QNetwork, gamma: float = GAMMA,
             backward: bool = True) -> float:
    """
    Mean squared TD error of a minibatch; accumulates gradients into ``qnet`` only.

    Raises:
        PreconditionError: On an empty batch.
    """
    if not transitions:
        raise PreconditionError("dqn_loss needs a non-empty batch")
    targets = dqn_targets(transitions, qnet, target, gamma)
    q, cache = qnet.forward([t.state for t in transitions])
    rows = np.arange(len(transitions))
    chosen = np.array([t.action for t in transitions])
    td = q[rows, chosen] - targets
    loss = float(np.mean(td ** 2))
    if backward:
        dq = np.zeros_like(q)
        dq[rows, chosen] = 2.0 * td / len(transitions)
        qnet.backward(dq, cache)
    return loss


def dqn_update(agent: BitWidthAgent, batch: Sequence[Transition]) -> float:
    """One Adam step on a replay minibatch followed by the target EMA."""
    agent.qnet.zero_grad()
    loss = dqn_loss(batch, agent.qnet, agent.target, agent.cfg.gamma)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite TD loss")
    adam_step(agent.qnet.parameters(), agent.cfg.lr)
    agent.sync_target()
    return loss


def train_agent(net: SuperNet, data: Dataset, cfg: AgentConfig, costs: Optional[CostTable] = None,
                show_progress: bool = False,
                on_progress: Optional[Callable[[int, float], None]] = None):
    """
    Trains a bit-width agent on a frozen super-network.

    Rollouts of ``cfg.rollout_batch`` episodes fill the replay buffer; after
    each rollout the agent takes one minibatch update per new episode.

    Args:
        net (SuperNet): Trained super-network (not modified).
        data (Dataset): Agent training samples.
        cfg (AgentConfig): Hyperparameters.
        costs (CostTable, optional): Defaults to the table of ``net``.
        show_progress (bool): Show a tqdm bar over episodes.
        on_progress (callable, optional): Called with (episodes done, moving-average reward).

    Returns:
        tuple: (agent, reward curve rows: episode, epsilon, reward, moving_average, td_loss).
    """
    if len(data) == 0:
        raise PreconditionError("agent training set is empty")
    costs = costs or CostTable.from_net(net)
    agent = BitWidthAgent(net, cfg)
    streams = RngStreams(cfg.seed)
    sampling, exploration = streams.get("sampling"), streams.get("exploration")
    replay = ReplayBuffer(cfg.replay_capacity, streams.get("replay"))
    schedule = EpsilonSchedule(cfg.epsilon_start, cfg.epsilon_end, cfg.episodes)
    recent: deque = deque(maxlen=MOVING_AVERAGE_WINDOW)
    curve = []
    done = 0
    logging.info(f"Training agent: alpha {cfg.alpha}, {cfg.episodes} episodes on {len(data)} samples")
    with tqdm(total=cfg.episodes, desc="agent", disable=not show_progress, leave=False) as bar:
        while done < cfg.episodes:
            count = min(cfg.rollout_batch, cfg.episodes - done)
            idx = sampling.integers(len(data), size=count)
            epsilon = schedule.value(done)
            result = rollout_batch(net, agent, data.images[idx], data.labels[idx], epsilon, exploration,
                                   costs, cfg.alpha)
            for episode in result.transitions:
                replay.extend(episode)
            recent.extend(result.rewards.tolist())
            losses = [dqn_update(agent, replay.sample(cfg.batch_size)) for _ in range(count)]
            done += count
            moving = float(np.mean(recent))
            curve.append({"episode": done, "epsilon": epsilon, "reward": float(result.rewards.mean()),
                          "moving_average": moving, "td_loss": float(np.mean(losses))})
            bar.update(count)
            if on_progress is not None:
                on_progress(done, moving)
            if done % (cfg.rollout_batch * 50) < count:
                logging.info(f"Agent episode {done}: epsilon {epsilon:.3f}, moving reward {moving:.4f}, "
                             f"TD loss {np.mean(losses):.5f}")
    return agent, curve


@dataclass
class AgentReport:
    configs: List[BitConfig]
    bitops: np.ndarray
    correct: np.ndarray
    rewards: np.ndarray
    histogram: Dict[int, Dict[int, int]]

    @property
    def top1(self) -> float:
        return 100.0 * float(self.correct.mean())

    @property
    def mean_bitops(self) -> float:
        return float(self.bitops.mean())

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())

    @property
    def distinct_configs(self) -> int:
        return len(set(self.configs))

    def ranking(self) -> np.ndarray:
        """Sample indices by consumed BitOps, cheapest first (stable)."""
        return np.argsort(self.bitops, kind="stable")

    def deciles(self) -> Tuple[np.ndarray, np.ndarray]:
        """(easy, hard): the cheapest and the most expensive tenth of the samples."""
        order = self.ranking()
        size = max(1, len(order) // 10)
        return order[:size], order[-size:]

    def sample_rows(self) -> List[Dict]:
        return [{"sample_id": i, "config": str(c), "bitops": int(b), "correct": bool(ok)}
                for i, (c, b, ok) in enumerate(zip(self.configs, self.bitops, self.correct))]

    def histogram_rows(self) -> List[Dict]:
        return [{"layer": layer + 1, "bit": b, "count": count}
                for layer, counts in sorted(self.histogram.items()) for b, count in sorted(counts.items())]

    def decile_rows(self) -> List[Dict]:
        easy, hard = self.deciles()
        rows = []
        for group, members in (("easy", easy), ("hard", hard)):
            for i in members:
                rows.append({"group": group, "sample_id": int(i), "config": str(self.configs[i]),
                             "bitops": int(self.bitops[i])})
        return rows


def eval_agent(net: SuperNet, agent: BitWidthAgent, data: Dataset, alpha: float,
               costs: Optional[CostTable] = None, workers: int = 1, batch_size: int = 256) -> AgentReport:
    """
    Greedy per-sample evaluation of an agent.

    The test set is split into batches that ``workers`` threads roll out
    against the read-only network; results are merged in sample order.
    """
    if len(data) == 0:
        raise PreconditionError("cannot evaluate the agent on an empty dataset")
    costs = costs or CostTable.from_net(net)
    starts = list(range(0, len(data), batch_size))

    def run(start: int) -> Rollout:
        stop = start + batch_size
        return rollout_batch(net, agent, data.images[start:stop], data.labels[start:stop], 0.0, None,
                             costs, alpha, keep_transitions=False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(start) for start in starts]

    configs = [c for part in parts for c in part.configs]
    actions = np.concatenate([part.actions for part in parts])
    histogram = {}
    for i in range(net.num_quant_layers):
        histogram[i] = {b: int(np.sum(actions[:, i] == a)) for a, b in enumerate(agent.bitset.bits)}
    report = AgentReport(
        configs=configs,
        bitops=np.array([costs.network_bitops(c) for c in configs], dtype=np.int64),
        correct=np.concatenate([part.correct for part in parts]),
        rewards=np.concatenate([part.rewards for part in parts]),
        histogram=histogram,
    )
    logging.info(f"Agent evaluation: top1 {report.top1:.2f}%, mean BitOps {report.mean_bitops:.0f}, "
                 f"{report.distinct_configs} distinct configurations")
    return report


@dataclass
class OracleResult:
    rows: List[Dict]
    per_sample_best: np.ndarray

    def best_static(self) -> Dict:
        """The configuration with the highest mean reward (first in enumeration order on ties)."""
        return max(self.rows, key=lambda row: row["mean_reward"])

    def best_accuracy_within(self, bitops: float) -> Optional[Dict]:
        """Most accurate configuration whose BitOps do not exceed ``bitops``."""
        eligible = [row for row in self.rows if row["bitops"] <= bitops]
        return max(eligible, key=lambda row: row["top1"]) if eligible else None

    def cheapest_reaching(self, top1: float) -> Optional[Dict]:
        """Configuration with the fewest BitOps whose accuracy is at least ``top1``."""
        eligible = [row for row in self.rows if row["top1"] >= top1]
        return min(eligible, key=lambda row: (row["bitops"], -row["top1"])) if eligible else None


def oracle_enumerate(net: SuperNet, data: Dataset, alpha: float, costs: Optional[CostTable] = None,
                     cap: int = DEFAULT_ENUMERATION_CAP, show_progress: bool = False) -> OracleResult:
    """
    Evaluates every configuration on ``data``.

    Returns one row per configuration (config, top1, bitops, normalized_cost,
    mean_reward) and, per sample, the best reward any static configuration
    achieves on it, which bounds every policy from above.
    """
    costs = costs or CostTable.from_net(net)
    configs = list(net.enumerate_configs(cap))
    rows = []
    best = np.full(len(data), -np.inf)
    for config in tqdm(configs, desc="oracle", disable=not show_progress, leave=False):
        logits = net.predict(data.images, config)
        correct = logits.argmax(axis=1) == data.labels
        cost = costs.total_normalized_cost(config)
        rewards = correct.astype(np.float64) - alpha * cost
        best = np.maximum(best, rewards)
        rows.append({"config": str(config), "top1": 100.0 * float(correct.mean()),
                     "bitops": costs.network_bitops(config), "normalized_cost": cost,
                     "mean_reward": float(rewards.mean())})
    logging.info(f"Enumerated {len(rows)} configurations on {len(data)} samples")
    return OracleResult(rows, best)


def qnetwork_macs(agent: BitWidthAgent) -> int:
    """MACs of one Q-network decision."""
    return agent.qnet.forward_macs()


def agent_overhead(agent: BitWidthAgent, net: SuperNet) -> Dict:
    """
    Q-network cost relative to one super-network forward pass.

    ``qnet_overhead`` is the per-episode ratio, one decision per quantizable
    layer; the per-decision ratio is reported next to it. MACs do not depend
    on bit-widths, so the ratio holds at uniform b_min too.
    """
    forward = net.forward_macs()
    decision = qnetwork_macs(agent)
    episode = agent.qnet.episode_macs()
    overhead = episode / forward
    if overhead >= OVERHEAD_BOUND:
        logging.warning(f"Agent overhead {overhead:.2%} per episode exceeds {OVERHEAD_BOUND:.0%} "
                        f"with hidden widths {HIDDEN_WIDTHS}")
    return {
        "qnet_decision_macs": decision,
        "qnet_episode_macs": episode,
        "decision_overhead": decision / forward,
        "qnet_overhead": overhead,
        "overhead_bound": OVERHEAD_BOUND,
        "within_overhead_bound": overhead < OVERHEAD_BOUND,
    }


def save_agent(agent: BitWidthAgent, path) -> None:
    """Writes the online and target Q-network parameters to one npz file."""
    arrays = {f"online/{p.name}": p.value for p in agent.qnet.parameters()}
    arrays.update({f"target/{p.name}": p.value for p in agent.target.parameters()})
    np.savez(path, alpha=np.array(agent.cfg.alpha), **arrays)
    logging.info(f"Saved agent to {path}")


def load_agent(net: SuperNet, path, cfg: AgentConfig) -> BitWidthAgent:
    """
    Restores an agent saved by save_agent for ``net``.

    Raises:
        FormatError: If the file is unreadable or does not fit the network.
    """
    agent = BitWidthAgent(net, cfg)
    try:
        with np.load(path) as stored:
            for prefix, qnet in (("online", agent.qnet), ("target", agent.target)):
                for p in qnet.parameters():
                    value = stored[f"{prefix}/{p.name}"]
                    if value.shape != p.value.shape:
                        raise FormatError(f"agent tensor {p.name} has shape {value.shape}, "
                                          f"expected {p.value.shape}")
                    p.value[...] = value
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"cannot load agent from {path}: {e}") from e
    return agent

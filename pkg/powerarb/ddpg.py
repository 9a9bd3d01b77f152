"""DDPG agents and the cooperative day-ahead / balancing training loop."""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import AgentConfig
from .environment import (
    BM_PRICE_LIMIT,
    DA_MAX_MWH,
    DA_MIN_MWH,
    ArbitrageEnv,
    BmAction,
    DaAction,
    RewardMode,
)
from .errors import (
    DimensionMismatch,
    InsufficientHistory,
    InsufficientReplay,
    InvalidConfig,
    ShapeMismatch,
)
from .market_data import Level, observation_dimension
from .networks import (
    Adam,
    Mlp,
    OutputActivation,
    backward,
    dump_networks,
    forward_with_cache,
    net_gradient,
    parse_networks,
    soft_update,
    squared_loss,
)
from .policies import PnlSeries

logger = logging.getLogger(__name__)

DA_ACTION_BOUNDS = (np.array([DA_MIN_MWH]), np.array([DA_MAX_MWH]))
BM_ACTION_BOUNDS = (np.full(2, -BM_PRICE_LIMIT), np.full(2, BM_PRICE_LIMIT))


@dataclass
class Transition:
    """One stored experience; ``next_observation`` is None when terminal."""

    observation: np.ndarray
    raw_action: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: Optional[np.ndarray] = None

    @property
    def terminal(self) -> bool:
        return self.next_observation is None


@dataclass
class TransitionBatch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        obs_dim = len(transitions[0].observation)
        return cls(
            observations=np.array([t.observation for t in transitions], dtype=np.float64),
            actions=np.array([t.action for t in transitions], dtype=np.float64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_observations=np.array(
                [t.next_observation if not t.terminal else np.zeros(obs_dim) for t in transitions],
                dtype=np.float64,
            ),
            terminals=np.array([t.terminal for t in transitions], dtype=np.float64),
        )


class ReplayBuffer:
    """Fixed-capacity ring of transitions.

    Arrays grow on demand up to ``capacity``. Observations are kept in
    ``observation_dtype`` (float64 unless memory asks for float32); actions and
    rewards are always float64.
    """

    INITIAL_ROWS = 1024

    def __init__(
        self, capacity: int, observation_dim: int, action_dim: int, observation_dtype=np.float64
    ):
        if capacity < 1:
            raise InvalidConfig("Replay capacity must be >= 1", key="agent.replay_capacity")
        self.capacity = capacity
        self.observation_dim = observation_dim
        self.action_dim = action_dim
        rows = min(capacity, self.INITIAL_ROWS)
        self._observations = np.zeros((rows, observation_dim), dtype=observation_dtype)
        self._next_observations = np.zeros((rows, observation_dim), dtype=observation_dtype)
        self._raw_actions = np.zeros((rows, action_dim))
        self._actions = np.zeros((rows, action_dim))
        self._rewards = np.zeros(rows)
        self._terminals = np.zeros(rows)
        self._next = 0
        self._size = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self._size

    def _grow(self) -> None:
        rows = min(self.capacity, 2 * len(self._rewards))
        for name in (
            "_observations",
            "_next_observations",
            "_raw_actions",
            "_actions",
            "_rewards",
            "_terminals",
        ):
            old = getattr(self, name)
            new = np.zeros((rows,) + old.shape[1:], dtype=old.dtype)
            new[: len(old)] = old
            setattr(self, name, new)

    def push(self, transition: Transition) -> None:
        observation = np.asarray(transition.observation, dtype=np.float64)
        if observation.shape != (self.observation_dim,):
            raise DimensionMismatch(
                f"Observation of shape {observation.shape}, buffer holds {self.observation_dim}"
            )
        if np.shape(transition.action) != (self.action_dim,):
            raise DimensionMismatch(
                f"Action of shape {np.shape(transition.action)}, buffer holds {self.action_dim}"
            )
        if not transition.terminal and np.shape(transition.next_observation) != (self.observation_dim,):
            raise DimensionMismatch(
                f"Next observation of shape {np.shape(transition.next_observation)}, "
                f"buffer holds {self.observation_dim}"
            )
        if self._next == len(self._rewards) and self._size < self.capacity:
            self._grow()
        i = self._next
        self._observations[i] = observation
        self._raw_actions[i] = transition.raw_action
        self._actions[i] = transition.action
        self._rewards[i] = transition.reward
        self._terminals[i] = 1.0 if transition.terminal else 0.0
        self._next_observations[i] = 0.0 if transition.terminal else transition.next_observation
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.pushed += 1

    def transitions(self) -> List[Transition]:
        """Stored transitions, oldest first."""
        start = self._next if self._size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self._size)]
        return [
            Transition(
                observation=self._observations[i].astype(np.float64),
                raw_action=self._raw_actions[i].copy(),
                action=self._actions[i].copy(),
                reward=float(self._rewards[i]),
                next_observation=(
                    None if self._terminals[i] else self._next_observations[i].astype(np.float64)
                ),
            )
            for i in order
        ]

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self._size < batch_size:
            raise InsufficientReplay(
                f"Replay holds {self._size} transitions, batch needs {batch_size}"
            )
        idx = rng.integers(0, self._size, size=batch_size)
        return TransitionBatch(
            observations=self._observations[idx].astype(np.float64),
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_observations=self._next_observations[idx].astype(np.float64),
            terminals=self._terminals[idx],
        )


class NoiseSchedule:
    """Linear decay of the raw-space exploration stddev."""

    def __init__(self, start: float, end: float, decay_episodes: int):
        self.start = start
        self.end = end
        self.decay_episodes = max(1, int(decay_episodes))

    @classmethod
    def from_config(cls, config: AgentConfig) -> "NoiseSchedule":
        return cls(
            config.noise_start,
            config.noise_end,
            round(config.noise_decay_fraction * config.episodes),
        )

    def std_at(self, episode: int) -> float:
        progress = min(1.0, episode / self.decay_episodes)
        return self.start + (self.end - self.start) * progress


@dataclass
class UpdateStats:
    critic_loss: float
    actor_objective: float


class DdpgAgent:
    """Actor, critic, their targets, optimizers and replay for one decision level.

    The critic sees the observation concatenated with the action rescaled to
    [-1, 1].
    """

    def __init__(
        self,
        name: str,
        observation_dim: int,
        bounds: Tuple[np.ndarray, np.ndarray],
        config: Optional[AgentConfig] = None,
        seed: Union[int, np.random.SeedSequence] = 0,
        actor: Optional[Mlp] = None,
        critic: Optional[Mlp] = None,
    ):
        config = config or AgentConfig()
        if not 0.0 < config.tau <= 1.0:
            raise InvalidConfig("tau must lie in (0, 1]", key="agent.tau")
        if not 0.0 <= config.gamma <= 1.0:
            raise InvalidConfig("gamma must lie in [0, 1]", key="agent.gamma")
        self.name = name
        self.config = config
        self.observation_dim = observation_dim
        self.low = np.asarray(bounds[0], dtype=np.float64)
        self.high = np.asarray(bounds[1], dtype=np.float64)
        self.action_dim = len(self.low)

        rng = np.random.default_rng(seed)
        hidden = list(config.hidden_sizes)
        self.actor = actor or Mlp.initialize(
            [observation_dim, *hidden, self.action_dim],
            rng,
            OutputActivation.BOUNDED_SQUASH,
            self.low,
            self.high,
        )
        self.critic = critic or Mlp.initialize([observation_dim + self.action_dim, *hidden, 1], rng)
        if self.actor.input_size != observation_dim or self.actor.output_size != self.action_dim:
            raise ShapeMismatch(f"Actor of {name} does not match its observation/action sizes")
        if self.critic.input_size != observation_dim + self.action_dim:
            raise ShapeMismatch(f"Critic of {name} does not match its observation/action sizes")
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_optimizer = Adam(self.actor, config.actor_lr)
        self.critic_optimizer = Adam(self.critic, config.critic_lr)
        self.replay = ReplayBuffer(
            config.replay_capacity,
            observation_dim,
            self.action_dim,
            observation_dtype=np.dtype(config.replay_precision),
        )

    def normalize_action(self, action: np.ndarray) -> np.ndarray:
        return 2.0 * (action - self.low) / (self.high - self.low) - 1.0

    def critic_input(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.hstack([observations, self.normalize_action(actions)])

    def act(
        self, observation, explore: bool = False, rng: Optional[np.random.Generator] = None, noise_std: float = 0.0
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(raw pre-squash action, bounded action) for one observation."""
        observation = np.asarray(observation, dtype=np.float64)
        if observation.shape != (self.observation_dim,):
            raise DimensionMismatch(
                f"{self.name} expects {self.observation_dim} observation values, "
                f"got shape {observation.shape}"
            )
        _, cache = forward_with_cache(self.actor, observation)
        raw = cache.raw_output[0].copy()
        if explore and noise_std > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            raw = raw + rng.normal(0.0, noise_std, size=raw.shape)
        return raw, self.actor.squash(raw)

    def remember(self, transition: Transition) -> None:
        self.replay.push(transition)

    def to_text(self) -> str:
        return dump_networks(
            {
                f"{self.name}.actor": self.actor,
                f"{self.name}.critic": self.critic,
                f"{self.name}.target_actor": self.target_actor,
                f"{self.name}.target_critic": self.target_critic,
            }
        )

    @classmethod
    def from_text(cls, name: str, text: str, config: Optional[AgentConfig] = None) -> "DdpgAgent":
        networks = parse_networks(text)
        try:
            actor = networks[f"{name}.actor"]
            critic = networks[f"{name}.critic"]
        except KeyError as e:
            raise ShapeMismatch(f"Checkpoint lacks network {e}", key=name) from None
        agent = cls(
            name,
            actor.input_size,
            (actor.low, actor.high),
            config,
            actor=actor,
            critic=critic,
        )
        agent.target_actor = networks.get(f"{name}.target_actor", actor.copy())
        agent.target_critic = networks.get(f"{name}.target_critic", critic.copy())
        return agent


def actor_select_action(
    agent: DdpgAgent,
    observation,
    explore: bool = False,
    rng_seed: Union[int, np.random.Generator, None] = None,
    noise_std: Optional[float] = None,
) -> np.ndarray:
    """Bounded action; exploration noise is added before squashing."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    std = agent.config.noise_start if noise_std is None else noise_std
    _, action = agent.act(observation, explore, rng, std)
    return action


def ddpg_update_step(agent: DdpgAgent, batch: TransitionBatch) -> UpdateStats:
    """One critic regression step, one actor ascent step, then target tracking."""
    if len(batch) < agent.config.batch_size:
        raise InsufficientReplay(
            f"Batch of {len(batch)} below configured size {agent.config.batch_size}"
        )
    config = agent.config

    next_actions, _ = forward_with_cache(agent.target_actor, batch.next_observations)
    next_q, _ = forward_with_cache(
        agent.target_critic, agent.critic_input(batch.next_observations, next_actions)
    )
    targets = batch.rewards + config.gamma * (1.0 - batch.terminals) * next_q[:, 0]

    critic_loss, critic_grads = net_gradient(
        agent.critic,
        squared_loss,
        (agent.critic_input(batch.observations, batch.actions), targets[:, np.newaxis]),
    )
    agent.critic_optimizer.step(agent.critic, critic_grads)

    actions, actor_cache = forward_with_cache(agent.actor, batch.observations)
    q, critic_cache = forward_with_cache(agent.critic, agent.critic_input(batch.observations, actions))
    # ascend mean Q: descend on -mean Q
    upstream = backward(agent.critic, critic_cache, np.full_like(q, -1.0 / len(q)))
    grad_actions = upstream.inputs[:, agent.observation_dim :] * 2.0 / (agent.high - agent.low)
    agent.actor_optimizer.step(agent.actor, backward(agent.actor, actor_cache, grad_actions))

    soft_update(agent.target_critic, agent.critic, config.tau)
    soft_update(agent.target_actor, agent.actor, config.tau)
    return UpdateStats(critic_loss=critic_loss, actor_objective=float(np.mean(q)))


@dataclass
class TrainingCurve:
    """Per-episode rewards and their trailing moving average."""

    window: int = 100
    raw_rewards: List[float] = field(default_factory=list)
    shaped_rewards: List[float] = field(default_factory=list)
    moving_average: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.raw_rewards)

    def record(self, raw: float, shaped: float) -> None:
        self.raw_rewards.append(raw)
        self.shaped_rewards.append(shaped)
        recent = self.raw_rewards[-self.window :]
        self.moving_average.append(sum(recent) / len(recent))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "episode": np.arange(len(self.raw_rewards), dtype=np.int64),
                "raw_reward": self.raw_rewards,
                "shaped_reward": self.shaped_rewards,
                "moving_average": self.moving_average,
            }
        )


@dataclass
class TrainingResult:
    da_agent: DdpgAgent
    bm_agent: DdpgAgent
    curve: TrainingCurve
    da_actions: List[float] = field(default_factory=list)


def build_agents(
    env: ArbitrageEnv, config: AgentConfig, seed: int
) -> Tuple[DdpgAgent, DdpgAgent]:
    """Freshly initialized DA and BM agents sized to the environment's observations."""
    observation = env.require_observation()
    resolution = env.observation_table.resolution

    da_dim = observation_dimension(
        len(observation.da_features), Level.DAY_AHEAD, observation.lookback_days, resolution
    )
    bm_dim = observation_dimension(
        len(observation.bm_features), Level.BALANCING, observation.lookback_days, resolution
    ) + 2
    da_seed, bm_seed = np.random.SeedSequence(seed).spawn(2)
    return (
        DdpgAgent("da", da_dim, DA_ACTION_BOUNDS, config, da_seed),
        DdpgAgent("bm", bm_dim, BM_ACTION_BOUNDS, config, bm_seed),
    )


def train_dual_agents(
    env: ArbitrageEnv,
    hours: Sequence[int],
    config: Optional[AgentConfig] = None,
    seed: int = 7,
    on_episode: Optional[Callable[[int], None]] = None,
) -> TrainingResult:
    """Cooperative training over episodes sampled from ``hours``.

    The DA agent learns bandit-style from the hour's summed learning reward;
    the BM agent learns from chained quarter transitions. Every stored
    transition is followed by one update of its agent once replay allows.
    The run is a pure function of (env, hours, config, seed).
    """
    config = config or AgentConfig()
    da_agent, bm_agent = build_agents(env, config, seed)
    curve = TrainingCurve(window=config.curve_window)
    result = TrainingResult(da_agent, bm_agent, curve)
    if config.episodes <= 0:
        return result

    trainable = env.observable_hours(hours)
    if not trainable:
        raise InsufficientHistory("No training hour has enough look-back history")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    schedule = NoiseSchedule.from_config(config)
    scale = config.reward_scale

    for episode in range(config.episodes):
        noise_std = schedule.std_at(episode)
        hour = trainable[int(rng.integers(len(trainable)))]
        state, da_obs = env.reset_episode(hour)
        da_raw, da_action = da_agent.act(da_obs, True, rng, noise_std)
        bm_obs = env.step_day_ahead(state, DaAction(float(da_action[0])))

        done = False
        while not done:
            bm_raw, bm_action = bm_agent.act(bm_obs, True, rng, noise_std)
            step = env.step_balancing(state, BmAction(float(bm_action[0]), float(bm_action[1])))
            done = step.done
            bm_agent.remember(
                Transition(bm_obs, bm_raw, bm_action, step.reward * scale, step.next_observation)
            )
            _maybe_update(bm_agent, rng)
            bm_obs = step.next_observation

        learning_reward = sum(state.shaped_rewards)
        da_agent.remember(Transition(da_obs, da_raw, da_action, learning_reward * scale))
        _maybe_update(da_agent, rng)

        curve.record(state.cumulative_pnl, learning_reward)
        result.da_actions.append(float(state.s_da))
        if on_episode is not None:
            on_episode(episode)

    logger.info(
        f"Trained {config.episodes} episodes over {len(trainable)} hours; "
        f"final moving average {curve.moving_average[-1]:.2f} EUR"
    )
    return result


def _maybe_update(agent: DdpgAgent, rng: np.random.Generator) -> Optional[UpdateStats]:
    if len(agent.replay) < agent.config.batch_size:
        return None
    return ddpg_update_step(agent, agent.replay.sample(agent.config.batch_size, rng))


@dataclass
class EvaluationResult:
    """Greedy out-of-sample play of the dual agent."""

    series: PnlSeries
    da_actions: Dict[int, float]
    bid_prices: List[float]
    ask_prices: List[float]
    trace: List[Dict[str, Any]] = field(default_factory=list)


def evaluate_dual_agents(
    env: ArbitrageEnv,
    hours: Sequence[int],
    da_agent: DdpgAgent,
    bm_agent: DdpgAgent,
    label: str = "agent",
    collect_trace: bool = False,
) -> EvaluationResult:
    """Play every hour with exploration off; reports unshaped P&L."""
    hourly, da_actions, bids, asks, trace = [], {}, [], [], []
    for hour in hours:
        state, da_obs = env.reset_episode(hour)
        _, da_action = da_agent.act(da_obs)
        bm_obs = env.step_day_ahead(state, DaAction(float(da_action[0])))
        done = False
        while not done:
            _, bm_action = bm_agent.act(bm_obs)
            bids.append(float(bm_action[0]))
            asks.append(float(bm_action[1]))
            step = env.step_balancing(
                state, BmAction(float(bm_action[0]), float(bm_action[1])), RewardMode.RAW
            )
            done = step.done
            bm_obs = step.next_observation
        hourly.append(step.hourly_pnl)
        da_actions[hour] = float(state.s_da)
        if collect_trace:
            trace.extend(dict(row, strategy=label) for row in state.trace)
    series = PnlSeries(
        label=label,
        timestamps=pd.DatetimeIndex([env.hour_start(h) for h in hours]),
        hourly=np.array(hourly, dtype=np.float64),
    )
    return EvaluationResult(series, da_actions, bids, asks, trace)

"""Dueling deep-Q traffic-signal agent and its two action spaces.

The agent observes per-phase maximum queue lengths plus the elapsed time
since each phase was last green, and is rewarded by the decrease of the
sum of squared phase queue maxima.  A shared two-hidden-layer trunk feeds
separate state-value and advantage heads combined with mean-advantage
subtraction; a softly-updated target network supplies TD bootstrap
targets and uniform experience replay decorrelates updates.

Two controllers wrap the same agent core: phase selection (pick the next
phase every 10 s) and time extension (nudge one phase's green +-5 s at
each cycle end).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from signalbench.controllers import (
    Controller,
    ControllerDecision,
    MAX_GREEN_S,
    MIN_GREEN_S,
    Observation,
)
from signalbench.geometry import LANES_PER_APPROACH, N_LANES, N_PHASES
from signalbench.nnet import (
    AdamState,
    CheckpointError,
    DenseNet,
    adam_step,
    backward,
    dropout_backward,
    dropout_forward,
    forward,
    huber,
    huber_grad,
    init_dense,
    read_blob,
    write_blob,
)
from signalbench.signals import GREEN, PhasePlan

PHASE_SELECTION = "phase_selection"
TIME_EXTENSION = "time_extension"

STATE_DIM = 2 * N_PHASES

REWARD_QUEUE_DECREASE = "queue_decrease_positive"
REWARD_AS_PRINTED = "as_printed"


@dataclass(frozen=True)
class AgentConfig:
    action_space: str = PHASE_SELECTION
    hidden_sizes: tuple[int, int] = (64, 64)
    dropout_rate: float = 0.2
    learning_rate: float | None = None  # per-action-space default when None
    tau: float | None = None
    gamma: float = 0.95
    batch_size: int = 32
    buffer_capacity: int = 10000
    epsilon_start: float = 0.5
    epsilon_end: float = 0.1
    epsilon_steps: int = 1000
    queue_cap: int = 77
    green_cap_s: float = 300.0
    reward_sign: str = REWARD_QUEUE_DECREASE
    learning_enabled: bool = True
    huber_delta: float = 1.0
    # Reward scaling inside the TD pipeline only: squared-queue rewards span
    # thousands, and the Huber loss needs typical residuals near its delta to
    # keep per-sample gradient magnitudes informative.
    reward_scale: float = 1e-3
    # Gradient updates per decision step; >1 compensates shortened episodes
    # (fewer decisions) at reduced episode lengths.
    train_steps_per_decision: int = 1

    def resolved(self) -> "AgentConfig":
        """Fill action-space-dependent defaults (learning rate, tau)."""
        if self.action_space not in (PHASE_SELECTION, TIME_EXTENSION):
            raise ValueError(f"unknown action space {self.action_space!r}")
        lr = self.learning_rate
        tau = self.tau
        if lr is None:
            lr = 1e-4 if self.action_space == PHASE_SELECTION else 1e-3
        if tau is None:
            tau = 0.005 if self.action_space == PHASE_SELECTION else 0.01
        return replace(self, learning_rate=lr, tau=tau)

    @property
    def n_actions(self) -> int:
        return N_PHASES if self.action_space == PHASE_SELECTION else 2 * N_PHASES + 1


@dataclass
class ObservedState:
    """Agent-facing state: phase queue maxima, elapsed greens, net input."""

    phase_queue_max: np.ndarray
    time_since_green: np.ndarray
    normalized_vector: np.ndarray


def phase_maxima(per_lane_queues: np.ndarray) -> np.ndarray:
    """Max queue over each phase's lane group."""
    q = np.asarray(per_lane_queues, dtype=float)
    if q.shape != (N_LANES,):
        raise ValueError(f"expected {N_LANES} lane readings, got {q.shape}")
    if np.any(q < 0):
        raise ValueError("negative queue reading (failed sensors must read 0)")
    return q.reshape(N_PHASES, LANES_PER_APPROACH).max(axis=1)


def build_state(
    per_lane_queues: np.ndarray,
    time_since_green: np.ndarray,
    *,
    queue_cap: int = 77,
    green_cap_s: float = 300.0,
) -> ObservedState:
    """Aggregate lane queues to per-phase maxima and normalize to [0, 1]."""
    return state_from_maxima(
        phase_maxima(per_lane_queues),
        time_since_green,
        queue_cap=queue_cap,
        green_cap_s=green_cap_s,
    )


def state_from_maxima(
    maxima: np.ndarray,
    time_since_green: np.ndarray,
    *,
    queue_cap: int = 77,
    green_cap_s: float = 300.0,
) -> ObservedState:
    s = np.asarray(maxima, dtype=float)
    g = np.asarray(time_since_green, dtype=float)
    if s.shape != (N_PHASES,) or g.shape != (N_PHASES,):
        raise ValueError("need one queue maximum and one elapsed green per phase")
    if np.any(s < 0) or np.any(g < 0):
        raise ValueError("negative observation component")
    vec = np.concatenate([
        np.clip(s / queue_cap, 0.0, 1.0),
        np.clip(g / green_cap_s, 0.0, 1.0),
    ])
    return ObservedState(phase_queue_max=s, time_since_green=g, normalized_vector=vec)


def compute_reward(prev_maxima, cur_maxima, sign: str = REWARD_QUEUE_DECREASE) -> float:
    """Difference of summed squared phase queue maxima between decisions.

    The default sign is positive when squared queues shrink (the agent
    maximizes return); ``as_printed`` selects the opposite convention.
    """
    prev = np.asarray(prev_maxima, dtype=float)
    cur = np.asarray(cur_maxima, dtype=float)
    if prev.shape != (N_PHASES,) or cur.shape != (N_PHASES,):
        raise ValueError("phase maxima must have one entry per phase")
    if np.any(prev < 0) or np.any(cur < 0):
        raise ValueError("negative phase maxima")
    value = float(np.sum(prev**2) - np.sum(cur**2))
    if sign == REWARD_QUEUE_DECREASE:
        return value
    if sign == REWARD_AS_PRINTED:
        return -value
    raise ValueError(f"unknown reward sign {sign!r}")


def dueling_q(value, advantages) -> np.ndarray:
    """Combine V and A heads: Q_a = V + A_a - mean(A)."""
    v = np.asarray(value, dtype=float)
    a = np.asarray(advantages, dtype=float)
    if a.ndim == 1:
        return float(v) + a - a.mean()
    return v + a - a.mean(axis=1, keepdims=True)


def select_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with ties broken toward the lowest action index."""
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise ValueError("empty action-value vector")
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(0, q.size))
    return int(np.argmax(q))


def epsilon_at(
    step: int, start: float = 0.5, end: float = 0.1, anneal_steps: int = 1000
) -> float:
    """Linear anneal from ``start`` to ``end`` over the first ``anneal_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= anneal_steps:
        return end
    return start + (end - start) * (step / anneal_steps)


class ReplayBuffer:
    """Fixed-capacity transition ring; oldest entries overwritten first."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.write_cursor = 0
        self.size = 0

    def push(self, state, action, reward, next_state, terminal) -> None:
        i = self.write_cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = terminal
        self.write_cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.terminals[idx],
        )


class DuelingAgent:
    """Online/target dueling nets, replay, Adam and the epsilon schedule."""

    def __init__(self, config: AgentConfig, seed: int | np.random.SeedSequence = 0):
        self.cfg = config.resolved()
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, act_ss, drop_ss, replay_ss = ss.spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.action_rng = np.random.default_rng(act_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        self.replay_rng = np.random.default_rng(replay_ss)

        h1, h2 = self.cfg.hidden_sizes
        self.trunk = init_dense(
            [STATE_DIM, h1, h2],
            init_rng,
            hidden_activation="relu",
            output_activation="relu",
            dropout_rate=self.cfg.dropout_rate,
        )
        self.v_head = init_dense([h2, 1], init_rng)
        self.a_head = init_dense([h2, self.cfg.n_actions], init_rng)
        self.t_trunk = copy.deepcopy(self.trunk)
        self.t_v_head = copy.deepcopy(self.v_head)
        self.t_a_head = copy.deepcopy(self.a_head)

        self.adam = AdamState.init_like(self._online_params(), self.cfg.learning_rate)
        self.buffer = ReplayBuffer(self.cfg.buffer_capacity)
        self.decision_steps = 0
        self.train_steps = 0

    # -- forward passes -------------------------------------------------

    def _online_params(self) -> list[np.ndarray]:
        return self.trunk.params() + self.v_head.params() + self.a_head.params()

    def _target_params(self) -> list[np.ndarray]:
        return self.t_trunk.params() + self.t_v_head.params() + self.t_a_head.params()

    def q_values(self, states: np.ndarray) -> np.ndarray:
        """Deterministic eval-mode Q-values; consumes no randomness."""
        q, _ = self._dueling_forward(states, self.trunk, self.v_head, self.a_head, train=False)
        return q

    def target_q_values(self, states: np.ndarray) -> np.ndarray:
        q, _ = self._dueling_forward(states, self.t_trunk, self.t_v_head, self.t_a_head, train=False)
        return q

    def _dueling_forward(self, states, trunk, v_head, a_head, *, train: bool):
        mode = "train" if train else "eval"
        trunk.mode = mode
        v_head.mode = mode
        a_head.mode = mode
        rng = self.dropout_rng if train else None
        h, c_trunk = forward(trunk, states, rng)
        junction_mask = None
        if train and trunk.dropout_rate > 0.0:
            h, junction_mask = dropout_forward(h, trunk.dropout_rate, self.dropout_rng)
        v, c_v = forward(v_head, h, rng)
        a, c_a = forward(a_head, h, rng)
        q = dueling_q(v, a)
        return q, (c_trunk, c_v, c_a, junction_mask)

    # -- acting -----------------------------------------------------------

    def epsilon(self) -> float:
        return epsilon_at(
            self.decision_steps,
            self.cfg.epsilon_start,
            self.cfg.epsilon_end,
            self.cfg.epsilon_steps,
        )

    def act(self, state_vector: np.ndarray) -> int:
        """Epsilon-greedy action for one state; advances the schedule."""
        q = self.q_values(state_vector)
        action = select_action(q, self.epsilon(), self.action_rng)
        self.decision_steps += 1
        return action

    # -- learning -----------------------------------------------------------

    def train_step(self) -> float | None:
        """One replay minibatch update; None when the buffer is too small."""
        cfg = self.cfg
        if self.buffer.size < cfg.batch_size:
            return None
        s, a, r, s2, term = self.buffer.sample(cfg.batch_size, self.replay_rng)
        q_next = self.target_q_values(s2)
        y = r + cfg.gamma * q_next.max(axis=1) * (~term)

        q, (c_trunk, c_v, c_a, junction_mask) = self._dueling_forward(
            s, self.trunk, self.v_head, self.a_head, train=True
        )
        rows = np.arange(cfg.batch_size)
        residual = q[rows, a] - y
        loss = float(huber(residual, cfg.huber_delta).mean())

        dq = np.zeros_like(q)
        dq[rows, a] = huber_grad(residual, cfg.huber_delta) / cfg.batch_size
        # Q = V + A - mean(A): split the output gradient across the heads.
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        g_a, dh_a = backward(c_a, da)
        g_v, dh_v = backward(c_v, dv)
        dh = dh_a + dh_v
        if junction_mask is not None:
            dh = dropout_backward(dh, junction_mask)
        g_trunk, _ = backward(c_trunk, dh)

        params = self._online_params()
        grads = g_trunk + g_v + g_a
        adam_step(params, grads, self.adam)
        for net in (self.trunk, self.v_head, self.a_head):
            net.revision += 1
        self.train_steps += 1
        self.soft_update_target()
        return loss

    def soft_update_target(self) -> None:
        """target <- tau * online + (1 - tau) * target, element-wise."""
        tau = self.cfg.tau
        for o, t in zip(self._online_params(), self._target_params()):
            t *= 1.0 - tau
            t += tau * o

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.cfg
        header = {
            "kind": "signalbench-agent",
            "action_space": cfg.action_space,
            "hidden_sizes": list(cfg.hidden_sizes),
            "dropout_rate": cfg.dropout_rate,
            "learning_rate": cfg.learning_rate,
            "tau": cfg.tau,
            "gamma": cfg.gamma,
            "batch_size": cfg.batch_size,
            "buffer_capacity": cfg.buffer_capacity,
            "epsilon_start": cfg.epsilon_start,
            "epsilon_end": cfg.epsilon_end,
            "epsilon_steps": cfg.epsilon_steps,
            "queue_cap": cfg.queue_cap,
            "green_cap_s": cfg.green_cap_s,
            "reward_sign": cfg.reward_sign,
            "huber_delta": cfg.huber_delta,
            "decision_steps": self.decision_steps,
            "train_steps": self.train_steps,
            "adam_step_count": self.adam.step_count,
            "replay_cursor": self.buffer.write_cursor,
            "replay_size": self.buffer.size,
            "rng_action": self.action_rng.bit_generator.state,
            "rng_dropout": self.dropout_rng.bit_generator.state,
            "rng_replay": self.replay_rng.bit_generator.state,
        }
        arrays = (
            self._online_params()
            + self._target_params()
            + self.adam.m
            + self.adam.v
        )
        write_blob(path, header, arrays)

    @classmethod
    def load(cls, path, **config_overrides) -> "DuelingAgent":
        """Restore an agent bit-exactly (replay contents start empty).

        ``config_overrides`` may adjust behavioural switches such as
        ``learning_enabled``; structural fields cannot be overridden.
        """
        header, arrays = read_blob(path)
        if header.get("kind") != "signalbench-agent":
            raise CheckpointError("not an agent checkpoint")
        for key in ("learning_rate", "action_space", "hidden_sizes"):
            if key not in header:
                raise CheckpointError(f"agent checkpoint missing field {key!r}")
        structural = {"action_space", "hidden_sizes", "dropout_rate"}
        bad = structural & set(config_overrides)
        if bad:
            raise ValueError(f"cannot override structural fields {sorted(bad)}")
        cfg = AgentConfig(
            action_space=header["action_space"],
            hidden_sizes=tuple(header["hidden_sizes"]),
            dropout_rate=header["dropout_rate"],
            learning_rate=header["learning_rate"],
            tau=header["tau"],
            gamma=header["gamma"],
            batch_size=header["batch_size"],
            buffer_capacity=header["buffer_capacity"],
            epsilon_start=header["epsilon_start"],
            epsilon_end=header["epsilon_end"],
            epsilon_steps=header["epsilon_steps"],
            queue_cap=header["queue_cap"],
            green_cap_s=header["green_cap_s"],
            reward_sign=header["reward_sign"],
            huber_delta=header["huber_delta"],
        )
        cfg = replace(cfg, **config_overrides)
        agent = cls(cfg, seed=0)
        n = len(agent._online_params())
        expected = 4 * n
        if len(arrays) != expected:
            raise CheckpointError(f"agent checkpoint has {len(arrays)} arrays, expected {expected}")
        for dst, src in zip(agent._online_params(), arrays[:n]):
            if dst.shape != src.shape:
                raise CheckpointError("checkpoint parameter shapes do not match header")
            dst[...] = src
        for dst, src in zip(agent._target_params(), arrays[n : 2 * n]):
            dst[...] = src
        for dst, src in zip(agent.adam.m, arrays[2 * n : 3 * n]):
            dst[...] = src
        for dst, src in zip(agent.adam.v, arrays[3 * n : 4 * n]):
            dst[...] = src
        agent.adam.step_count = int(header["adam_step_count"])
        agent.decision_steps = int(header["decision_steps"])
        agent.train_steps = int(header["train_steps"])
        agent.action_rng.bit_generator.state = header["rng_action"]
        agent.dropout_rng.bit_generator.state = header["rng_dropout"]
        agent.replay_rng.bit_generator.state = header["rng_replay"]
        return agent


class _LearningControllerBase(Controller):
    """Shared transition-recording logic for both RL action spaces."""

    uses_state_observations = True

    def __init__(self, agent: DuelingAgent):
        self.agent = agent
        self._prev: tuple[np.ndarray, int, np.ndarray] | None = None
        self.episode_losses: list[float] = []
        self.episode_maxima: list[np.ndarray] = []

    def begin_episode(self, episode_index: int) -> None:
        self._prev = None
        self.episode_losses = []
        self.episode_maxima = []

    def _state(self, obs: Observation) -> ObservedState:
        return state_from_maxima(
            obs.phase_queue_max,
            obs.time_since_green,
            queue_cap=self.agent.cfg.queue_cap,
            green_cap_s=self.agent.cfg.green_cap_s,
        )

    def _record_and_act(self, obs: Observation) -> int:
        state = self._state(obs)
        self.episode_maxima.append(state.phase_queue_max.copy())
        if self._prev is not None:
            prev_vec, prev_action, prev_maxima = self._prev
            r = compute_reward(prev_maxima, state.phase_queue_max, self.agent.cfg.reward_sign)
            if self.agent.cfg.learning_enabled:
                self.agent.buffer.push(
                    prev_vec,
                    prev_action,
                    r * self.agent.cfg.reward_scale,
                    state.normalized_vector,
                    False,
                )
                self._train()
        action = self.agent.act(state.normalized_vector)
        self._prev = (state.normalized_vector, action, state.phase_queue_max)
        return action

    def end_episode(self, final_obs: Observation) -> None:
        state = self._state(final_obs)
        self.episode_maxima.append(state.phase_queue_max.copy())
        if self._prev is not None and self.agent.cfg.learning_enabled:
            prev_vec, prev_action, prev_maxima = self._prev
            r = compute_reward(prev_maxima, state.phase_queue_max, self.agent.cfg.reward_sign)
            self.agent.buffer.push(
                prev_vec,
                prev_action,
                r * self.agent.cfg.reward_scale,
                state.normalized_vector,
                True,
            )
            self._train()
        self._prev = None

    def _train(self) -> None:
        for _ in range(self.agent.cfg.train_steps_per_decision):
            loss = self.agent.train_step()
            if loss is not None:
                self.episode_losses.append(loss)

    def episode_stats(self) -> dict:
        losses = self.episode_losses
        return {
            "loss_mean": float(np.mean(losses)) if losses else float("nan"),
            "loss_max": float(np.max(losses)) if losses else float("nan"),
            "epsilon": self.agent.epsilon(),
            "decision_steps": self.agent.decision_steps,
        }


class PhaseSelectionController(_LearningControllerBase):
    """Chooses the phase to serve next at a fixed decision cadence.

    A switch requested before the active green has run ``min_green_s`` is
    executed as a hold (the same minimum-green protection the actuated
    baseline gets); the stored transition carries the executed action so
    the learned values stay consistent with the environment.
    """

    controller_id = "rl_phase_selection"

    def __init__(
        self,
        agent: DuelingAgent,
        *,
        decision_interval_s: float = 10.0,
        dt: float = 0.5,
        min_green_s: float = 10.0,
    ):
        if agent.cfg.action_space != PHASE_SELECTION:
            raise ValueError("agent is not configured for phase selection")
        super().__init__(agent)
        self._interval_ticks = max(1, round(decision_interval_s / dt))
        self.min_green_s = float(min_green_s)

    def wants_decision(self, tick: int, t: float, head) -> bool:
        return tick % self._interval_ticks == 0

    def decide(self, t: float, obs: Observation) -> ControllerDecision:
        action = self._record_and_act(obs)
        target = action + 1
        if target != obs.active_phase and (
            obs.indication != GREEN or obs.phase_elapsed < self.min_green_s
        ):
            target = obs.active_phase
            if self._prev is not None:
                vec, _, maxima = self._prev
                self._prev = (vec, target - 1, maxima)
        if target == obs.active_phase and obs.indication == GREEN:
            return ControllerDecision.hold()
        return ControllerDecision.switch_to(target)


class TimeExtensionController(_LearningControllerBase):
    """Adjusts per-phase greens by +-5 s at the end of every cycle.

    Action 0 keeps the plan; action 2p-1 extends phase p and action 2p
    shortens it, clamped to the actuated green bounds.  Each episode
    restarts from the optimized fixed plan.
    """

    controller_id = "rl_time_extension"
    provides_plan = True

    def __init__(
        self,
        agent: DuelingAgent,
        initial_greens_s,
        *,
        step_s: float = 5.0,
        min_green_s: float = MIN_GREEN_S,
        max_green_s: float = MAX_GREEN_S,
    ):
        if agent.cfg.action_space != TIME_EXTENSION:
            raise ValueError("agent is not configured for time extension")
        super().__init__(agent)
        self._initial = tuple(float(g) for g in initial_greens_s)
        self.greens_s = self._initial
        self.step_s = float(step_s)
        self.min_green_s = float(min_green_s)
        self.max_green_s = float(max_green_s)

    def initial_plan(self) -> PhasePlan:
        return PhasePlan(greens_s=self.greens_s)

    def begin_episode(self, episode_index: int) -> None:
        super().begin_episode(episode_index)
        self.greens_s = self._initial

    def apply_action(self, greens_s: tuple[float, ...], action: int) -> tuple[float, ...]:
        if action == 0:
            return greens_s
        phase = (action - 1) // 2
        delta = self.step_s if (action - 1) % 2 == 0 else -self.step_s
        new = list(greens_s)
        new[phase] = float(np.clip(new[phase] + delta, self.min_green_s, self.max_green_s))
        return tuple(new)

    def wants_decision(self, tick: int, t: float, head) -> bool:
        return head.cycle_completed

    def decide(self, t: float, obs: Observation) -> ControllerDecision:
        action = self._record_and_act(obs)
        self.greens_s = self.apply_action(self.greens_s, action)
        return ControllerDecision.set_cycle_timings(self.greens_s)

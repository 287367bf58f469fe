"""Episode loop and experiment engine.

The environment owns the clock: it advances the signal head and the
simulator tick by tick and calls the controller only at its decision
instants, handing it the (possibly sensor-faulted) observation.  A
malformed decision is replaced by a hold; a controller exception aborts
the episode with a diagnostic and the replication carries on.

Replications are embarrassingly parallel.  Every random stream derives
from the master seed through a documented splitting function
(:func:`derive_rng`), so parallel and sequential execution produce
byte-identical reports.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from signalbench.agent import (
    AgentConfig,
    DuelingAgent,
    PHASE_SELECTION,
    PhaseSelectionController,
    ReplayBuffer,
    TIME_EXTENSION,
    TimeExtensionController,
    phase_maxima,
)
from signalbench.controllers import (
    ActuatedController,
    Controller,
    ControllerDecision,
    FixedTimeController,
    Observation,
    default_fixed_plan,
    validate_decision,
)
from signalbench.geometry import (
    LANES_PER_APPROACH,
    N_LANES,
    N_PHASES,
    IntersectionGeometry,
    lane_phase,
)
from signalbench.microsim import CarFollowingParams, DemandSchedule, Microsim
from signalbench.reporting import EpisodeResult, ExperimentReport, ReplicationResult
from signalbench.scenarios import ScenarioSpec, apply_failures, get_scenario
from signalbench.signals import GREEN, PhasePlan, SignalHead

logger = logging.getLogger("signalbench")

CONTROLLER_KINDS = ("fixed", "actuated", "rl_phase_selection", "rl_time_extension")

# Roles of the derived random streams (part of the seed-splitting contract).
ROLE_SIM = 0
ROLE_WARMUP = 1
ROLE_DEMAND = 2
ROLE_FAILURE = 3
ROLE_AGENT = 4

MAX_EPISODES = 80


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Child generator for (replication, role, phase, episode) coordinates.

    ``SeedSequence(master, spawn_key=key)`` guarantees independent streams
    that do not depend on creation order, which is what makes parallel and
    sequential replication execution identical.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


@dataclass(frozen=True)
class RunParams:
    """Everything an episode run needs beyond scenario and controller."""

    dt_s: float = 0.5
    episode_length_s: float | None = None  # None: the scenario's nominal length
    warmup_s: float | None = None
    decision_interval_s: float = 10.0
    yellow_s: float = 3.0
    all_red_s: float = 1.0
    min_green_s: float = 10.0
    max_green_s: float = 60.0
    passage_gap_s: float = 3.0
    geometry: IntersectionGeometry = field(default_factory=IntersectionGeometry)
    carfollowing: CarFollowingParams = field(default_factory=CarFollowingParams)
    audit: bool = False
    log_events: bool = False
    collect_maxima: bool = False

    def resolve_times(self, scenario: ScenarioSpec) -> tuple[float, float]:
        length = self.episode_length_s or scenario.episode_length_s
        warmup = scenario.warmup_s if self.warmup_s is None else self.warmup_s
        return length, warmup


@dataclass(frozen=True)
class ControllerSetup:
    """Recipe for building a controller inside a replication worker."""

    kind: str
    agent_overrides: dict = field(default_factory=dict)
    fixed_greens_s: tuple[float, ...] | None = None
    checkpoint_in: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(
                f"unknown controller {self.kind!r}; choose from {CONTROLLER_KINDS}"
            )


def make_controller(
    setup: ControllerSetup,
    params: RunParams,
    agent_seed: np.random.SeedSequence | int = 0,
) -> Controller:
    if setup.kind == "fixed":
        return FixedTimeController(default_fixed_plan(setup.fixed_greens_s))
    if setup.kind == "actuated":
        return ActuatedController(
            min_green_s=params.min_green_s,
            max_green_s=params.max_green_s,
            passage_gap_s=params.passage_gap_s,
        )
    if setup.kind == "rl_phase_selection":
        agent = _build_agent(setup, PHASE_SELECTION, agent_seed)
        return PhaseSelectionController(
            agent,
            decision_interval_s=params.decision_interval_s,
            dt=params.dt_s,
            min_green_s=params.min_green_s,
        )
    agent = _build_agent(setup, TIME_EXTENSION, agent_seed)
    greens = setup.fixed_greens_s or default_fixed_plan().greens_s
    return TimeExtensionController(
        agent,
        greens,
        min_green_s=params.min_green_s,
        max_green_s=params.max_green_s,
    )


def _build_agent(setup: ControllerSetup, action_space: str, seed) -> DuelingAgent:
    if setup.checkpoint_in:
        agent = DuelingAgent.load(setup.checkpoint_in, **setup.agent_overrides)
        if agent.cfg.action_space != action_space:
            raise ValueError(
                f"checkpoint holds a {agent.cfg.action_space} agent, "
                f"but the controller needs {action_space}"
            )
        return agent
    cfg = AgentConfig(action_space=action_space, **setup.agent_overrides)
    return DuelingAgent(cfg, seed=seed)


# ---------------------------------------------------------------------------
# Episode execution


def run_episode(
    scenario: ScenarioSpec,
    controller: Controller,
    *,
    master_seed: int,
    params: RunParams = RunParams(),
    replication: int = 0,
    phase_tag: int = 0,
    episode_index: int = 0,
) -> EpisodeResult:
    """Run one episode; metrics exclude the warm-up window."""
    length_s, warmup_s = params.resolve_times(scenario)
    dt = params.dt_s
    key = (replication, phase_tag, episode_index)
    sim_rng = derive_rng(master_seed, replication, ROLE_SIM, phase_tag, episode_index)
    warm_rng = derive_rng(master_seed, replication, ROLE_WARMUP, phase_tag, episode_index)
    demand_rng = derive_rng(master_seed, replication, ROLE_DEMAND, phase_tag, episode_index)
    failure_rng = derive_rng(master_seed, replication, ROLE_FAILURE, phase_tag, episode_index)

    schedule = scenario.build_schedule(demand_rng, length_s, warmup_s)
    incidents = scenario.materialized_incidents(length_s, warmup_s)
    fproc = scenario.build_failure_process(failure_rng, length_s, warmup_s)
    sim = Microsim(
        params.geometry,
        schedule,
        incidents,
        dt=dt,
        warmup_s=warmup_s,
        arrival_rng=sim_rng,
        warmup_rng=warm_rng,
        params=params.carfollowing,
        audit=params.audit,
        log_events=params.log_events,
    )
    head = SignalHead(yellow_s=params.yellow_s, all_red_s=params.all_red_s)
    controller.begin_episode(episode_index)
    plan = controller.initial_plan()
    if plan is not None:
        head.set_plan(replace(plan, yellow_s=params.yellow_s, all_red_s=params.all_red_s))

    lane_phases = np.array([lane_phase(l) for l in range(N_LANES)])
    presence_zone = params.geometry.desired_speed_ms * params.passage_gap_s
    total_ticks = round((warmup_s + length_s) / dt)
    warmup_ticks = round(warmup_s / dt)
    window_ticks = max(1, round(5.0 / dt))
    n_windows = int(np.ceil((total_ticks - warmup_ticks) / window_ticks))
    series = np.zeros((3, max(n_windows, 1)))
    vehicle_m = 0.0
    completed = 0
    malformed = 0
    aborted = False
    diagnostic = ""
    spawned_at_warmup = 0

    def build_observation(t: float) -> Observation:
        raw_q = sim.measure_queues()
        proc = fproc if controller.uses_state_observations else None
        if proc is not None:
            proc.step(t)
        lanes, maxima = apply_failures(raw_q, phase_maxima(raw_q), proc)
        pres = sim.presence(presence_zone).reshape(N_PHASES, LANES_PER_APPROACH).any(axis=1)
        return Observation(
            t=t,
            lane_queues=lanes,
            phase_queue_max=maxima,
            time_since_green=head.time_since_green.copy(),
            active_phase=head.phase,
            indication=head.indication,
            phase_elapsed=head.phase_elapsed,
            phase_presence=pres,
        )

    for tick in range(total_ticks):
        t = tick * dt
        if tick == warmup_ticks:
            spawned_at_warmup = sim.spawned_total
        if controller.wants_decision(tick, t, head):
            obs = build_observation(t)
            try:
                decision = controller.decide(t, obs)
            except Exception as exc:  # noqa: BLE001 - contract: abort + diagnose
                aborted = True
                diagnostic = f"controller raised at t={t:.1f}s: {exc!r}"
                logger.warning("episode %d aborted: %s", episode_index, diagnostic)
                break
            reason = validate_decision(decision, params.min_green_s, params.max_green_s)
            if reason is not None:
                logger.warning(
                    "rejecting decision from %s at t=%.1f (%s); holding",
                    controller.controller_id,
                    t,
                    reason,
                )
                malformed += 1
                decision = ControllerDecision.hold()
            _apply_decision(decision, head, params)
        head.step(dt)
        codes = head.lane_signal(lane_phases)
        m = sim.step(codes)
        if tick >= warmup_ticks:
            w = (tick - warmup_ticks) // window_ticks
            series[0, w] += m.window_travel_time
            series[1, w] += m.window_delay
            series[2, w] += m.window_stop_time
            vehicle_m += m.distance_m
            completed += m.vehicles_out

    if not aborted:
        try:
            controller.end_episode(build_observation(total_ticks * dt))
        except Exception as exc:  # noqa: BLE001
            aborted = True
            diagnostic = f"controller raised at episode end: {exc!r}"
            logger.warning("episode %d aborted: %s", episode_index, diagnostic)

    stats = controller.episode_stats()
    maxima_log = None
    if params.collect_maxima and hasattr(controller, "episode_maxima"):
        maxima_log = np.array(controller.episode_maxima)
    return EpisodeResult(
        episode_index=episode_index,
        controller_id=controller.controller_id,
        seed_key=(master_seed, *key),
        series_travel=series[0],
        series_delay=series[1],
        series_stop=series[2],
        vehicle_km=vehicle_m / 1000.0,
        vehicles_completed=completed,
        vehicles_spawned=sim.spawned_total - spawned_at_warmup,
        loss_mean=stats.get("loss_mean", float("nan")),
        loss_max=stats.get("loss_max", float("nan")),
        epsilon=stats.get("epsilon", float("nan")),
        failed_fraction=fproc.failed_fraction()
        if (fproc is not None and controller.uses_state_observations)
        else float("nan"),
        aborted=aborted,
        diagnostic=diagnostic,
        malformed_decisions=malformed,
        observed_phase_maxima=maxima_log,
        events=sim.events if params.log_events else None,
    )


def _apply_decision(decision: ControllerDecision, head: SignalHead, params: RunParams) -> None:
    if decision.kind == "switch_to":
        if not head.request_switch(decision.phase):
            logger.debug("switch request ignored during transition")
    elif decision.kind == "set_cycle_timings":
        head.set_plan(
            PhasePlan(
                greens_s=decision.greens_s,
                yellow_s=params.yellow_s,
                all_red_s=params.all_red_s,
            )
        )


# ---------------------------------------------------------------------------
# Replications and experiments


def run_replication(
    scenario: ScenarioSpec,
    setup: ControllerSetup,
    *,
    episodes: int,
    replication: int,
    master_seed: int,
    params: RunParams = RunParams(),
    phase_tag: int = 0,
    checkpoint_out: str | None = None,
) -> ReplicationResult:
    """Train/run one controller across its episode sequence."""
    agent_seed = np.random.SeedSequence(
        master_seed, spawn_key=(replication, ROLE_AGENT, phase_tag)
    )
    controller = make_controller(setup, params, agent_seed)
    result = ReplicationResult(replication=replication)
    for ep in range(episodes):
        result.episodes.append(
            run_episode(
                scenario,
                controller,
                master_seed=master_seed,
                params=params,
                replication=replication,
                phase_tag=phase_tag,
                episode_index=ep,
            )
        )
    if checkpoint_out is not None and hasattr(controller, "agent"):
        controller.agent.save(checkpoint_out)
    return result


def _replication_worker(args) -> ReplicationResult:
    scenario, setup, episodes, replication, master_seed, params, phase_tag, ckpt = args
    return run_replication(
        scenario,
        setup,
        episodes=episodes,
        replication=replication,
        master_seed=master_seed,
        params=params,
        phase_tag=phase_tag,
        checkpoint_out=ckpt,
    )


def run_experiment(
    scenario: ScenarioSpec | str,
    setup: ControllerSetup,
    *,
    episodes: int,
    replications: int,
    master_seed: int,
    params: RunParams = RunParams(),
    parallelism: int = 1,
    phase_tag: int = 0,
    checkpoint_paths: list[str] | None = None,
    on_replication=None,
) -> ExperimentReport:
    """Run independent replications and assemble the report.

    Replications execute in parallel when ``parallelism > 1`` but are
    always delivered in index order, so reports are identical either way.
    A failed replication is recorded and does not invalidate the others.
    """
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    if not (1 <= episodes <= MAX_EPISODES):
        raise ValueError(f"episodes must be within [1, {MAX_EPISODES}]")
    if replications < 1:
        raise ValueError("need at least one replication")
    jobs = []
    for rep in range(replications):
        ckpt = checkpoint_paths[rep] if checkpoint_paths else None
        rep_setup = setup
        if setup.checkpoint_in and "{rep}" in setup.checkpoint_in:
            rep_setup = replace(setup, checkpoint_in=setup.checkpoint_in.format(rep=rep))
        jobs.append(
            (scenario, rep_setup, episodes, rep, master_seed, params, phase_tag, ckpt)
        )

    results: list[ReplicationResult] = []

    def deliver(res: ReplicationResult) -> None:
        results.append(res)
        if on_replication is not None:
            on_replication(res)

    if parallelism > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_replication_worker, job) for job in jobs]
            for rep, fut in enumerate(futures):
                try:
                    deliver(fut.result())
                except Exception as exc:  # noqa: BLE001 - isolate per replication
                    logger.error("replication %d failed: %r", rep, exc)
                    deliver(ReplicationResult(replication=rep, failed=True, error=repr(exc)))
    else:
        for rep, job in enumerate(jobs):
            try:
                deliver(_replication_worker(job))
            except Exception as exc:  # noqa: BLE001
                logger.error("replication %d failed: %r", rep, exc)
                deliver(ReplicationResult(replication=rep, failed=True, error=repr(exc)))

    return ExperimentReport(
        scenario=scenario.name, controller=setup.kind, replications=results
    )


# ---------------------------------------------------------------------------
# Transfer learning


@dataclass
class TransferReport:
    pretrain: ExperimentReport
    transfer: ExperimentReport
    scratch: ExperimentReport


def _transfer_worker(args):
    (
        pretrain_scenario,
        target_scenario,
        setup,
        pretrain_episodes,
        target_episodes,
        replication,
        master_seed,
        params,
    ) = args
    agent_seed = np.random.SeedSequence(master_seed, spawn_key=(replication, ROLE_AGENT, 0))
    pre_result = ReplicationResult(replication=replication)
    if setup.checkpoint_in:
        controller = make_controller(setup, params, agent_seed)
    else:
        controller = make_controller(replace(setup, checkpoint_in=None), params, agent_seed)
        for ep in range(pretrain_episodes):
            pre_result.episodes.append(
                run_episode(
                    pretrain_scenario,
                    controller,
                    master_seed=master_seed,
                    params=params,
                    replication=replication,
                    phase_tag=0,
                    episode_index=ep,
                )
            )
    # Scenario switch: learned parameters carry over, replay restarts empty
    # (matching the checkpoint format, which never persists replay contents).
    agent = controller.agent
    agent.buffer = ReplayBuffer(agent.cfg.buffer_capacity)
    transfer_result = ReplicationResult(replication=replication)
    for ep in range(target_episodes):
        transfer_result.episodes.append(
            run_episode(
                target_scenario,
                controller,
                master_seed=master_seed,
                params=params,
                replication=replication,
                phase_tag=1,
                episode_index=ep,
            )
        )

    scratch_seed = np.random.SeedSequence(master_seed, spawn_key=(replication, ROLE_AGENT, 1))
    scratch_controller = make_controller(replace(setup, checkpoint_in=None), params, scratch_seed)
    scratch_result = ReplicationResult(replication=replication)
    for ep in range(target_episodes):
        scratch_result.episodes.append(
            run_episode(
                target_scenario,
                scratch_controller,
                master_seed=master_seed,
                params=params,
                replication=replication,
                phase_tag=1,
                episode_index=ep,
            )
        )
    return pre_result, transfer_result, scratch_result


def run_transfer(
    pretrain_scenario: ScenarioSpec | str,
    target_scenario: ScenarioSpec | str,
    setup: ControllerSetup,
    *,
    pretrain_episodes: int = 40,
    target_episodes: int = 20,
    replications: int = 3,
    master_seed: int = 0,
    params: RunParams = RunParams(),
    parallelism: int = 1,
) -> TransferReport:
    """Paired transfer-vs-from-scratch curves on the target scenario.

    Both arms replay the same target-episode seeds; the transferred agent
    continues from the pretrained parameters (or ``setup.checkpoint_in``,
    which skips the pretraining phase entirely).
    """
    if setup.kind not in ("rl_phase_selection", "rl_time_extension"):
        raise ValueError("transfer learning needs an RL controller")
    if isinstance(pretrain_scenario, str):
        pretrain_scenario = get_scenario(pretrain_scenario)
    if isinstance(target_scenario, str):
        target_scenario = get_scenario(target_scenario)
    if pretrain_episodes < 0 or not (1 <= target_episodes <= MAX_EPISODES):
        raise ValueError("bad episode counts for transfer run")

    jobs = [
        (
            pretrain_scenario,
            target_scenario,
            setup,
            pretrain_episodes,
            target_episodes,
            rep,
            master_seed,
            params,
        )
        for rep in range(replications)
    ]
    if parallelism > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            triples = [f.result() for f in [pool.submit(_transfer_worker, j) for j in jobs]]
    else:
        triples = [_transfer_worker(j) for j in jobs]

    return TransferReport(
        pretrain=ExperimentReport(
            scenario=pretrain_scenario.name,
            controller=setup.kind,
            replications=[t[0] for t in triples],
        ),
        transfer=ExperimentReport(
            scenario=target_scenario.name,
            controller=setup.kind,
            replications=[t[1] for t in triples],
        ),
        scratch=ExperimentReport(
            scenario=target_scenario.name,
            controller=setup.kind,
            replications=[t[2] for t in triples],
        ),
    )


# ---------------------------------------------------------------------------
# Fixed-plan objective evaluation (used by the grid search)


def evaluate_plan_objective(
    scenario_name: str,
    greens_s,
    space,
    parallelism: int = 1,
) -> float:
    """Mean travel time (s/km) of a cycle plan over the search's seeded episodes."""
    scenario = get_scenario(scenario_name)
    params = RunParams(
        episode_length_s=space.eval_length_s,
        warmup_s=space.eval_warmup_s,
    )
    values = []
    for seed in space.seeds:
        controller = FixedTimeController(PhasePlan(greens_s=tuple(greens_s)))
        result = run_episode(
            scenario,
            controller,
            master_seed=int(seed),
            params=params,
        )
        values.append(result.travel_time_s_per_km)
    return float(np.mean(values))


def _plan_eval_worker(args):
    scenario_name, greens, space = args
    return evaluate_plan_objective(scenario_name, greens, space)


def evaluate_plans(combos, scenario_name: str, space, parallelism: int = 1):
    """Objectives for many grid points, optionally across processes."""
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(_plan_eval_worker, [(scenario_name, g, space) for g in combos], chunksize=8))
    return [_plan_eval_worker((scenario_name, g, space)) for g in combos]

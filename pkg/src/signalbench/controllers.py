"""Controller callback contract and the two classical baselines.

Every controller is polled by the episode loop and answers with a
``ControllerDecision``: hold the current green, switch to another phase,
or adopt per-phase cycle timings.  The loop never lets a controller
advance simulation time; a malformed decision is rejected and replaced
with a hold.

The fixed-time baseline serves an optimized cycle plan found by
exhaustive grid search over per-phase greens (see
:func:`build_fixed_plan`); the optimized plan for the base demand ships
as a small versioned text artifact so runs do not repeat the search.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace

import numpy as np

from signalbench.geometry import N_PHASES
from signalbench.signals import GREEN, PhasePlan, SignalHead

HOLD = "hold"
SWITCH_TO = "switch_to"
SET_CYCLE_TIMINGS = "set_cycle_timings"

MIN_GREEN_S = 10.0
MAX_GREEN_S = 60.0
PASSAGE_GAP_S = 3.0


@dataclass(frozen=True)
class ControllerDecision:
    kind: str
    phase: int | None = None
    greens_s: tuple[float, ...] | None = None

    @staticmethod
    def hold() -> "ControllerDecision":
        return ControllerDecision(HOLD)

    @staticmethod
    def switch_to(phase: int) -> "ControllerDecision":
        return ControllerDecision(SWITCH_TO, phase=phase)

    @staticmethod
    def set_cycle_timings(greens_s) -> "ControllerDecision":
        return ControllerDecision(SET_CYCLE_TIMINGS, greens_s=tuple(float(g) for g in greens_s))


def validate_decision(
    dec: ControllerDecision,
    min_green: float = MIN_GREEN_S,
    max_green: float = MAX_GREEN_S,
) -> str | None:
    """Return a rejection reason, or None for a well-formed decision."""
    if dec.kind == HOLD:
        return None
    if dec.kind == SWITCH_TO:
        if dec.phase is None or not (1 <= dec.phase <= N_PHASES):
            return f"switch_to targets invalid phase {dec.phase}"
        return None
    if dec.kind == SET_CYCLE_TIMINGS:
        if dec.greens_s is None or len(dec.greens_s) != N_PHASES:
            return "set_cycle_timings needs one green per phase"
        for g in dec.greens_s:
            if not (min_green <= g <= max_green):
                return f"green {g} outside [{min_green}, {max_green}]"
        return None
    return f"unknown decision kind {dec.kind!r}"


@dataclass
class Observation:
    """What a controller may see at a decision instant.

    Queue readings pass through the scenario's sensor-failure pipeline, so
    they can differ from simulator ground truth; the elapsed-green clocks
    and presence flags do not fail.
    """

    t: float
    lane_queues: np.ndarray
    phase_queue_max: np.ndarray
    time_since_green: np.ndarray
    active_phase: int
    indication: str
    phase_elapsed: float
    phase_presence: np.ndarray = field(default_factory=lambda: np.zeros(N_PHASES, dtype=bool))


class Controller:
    """Base callback interface driven by the episode loop."""

    controller_id = "base"
    provides_plan = False
    uses_state_observations = False

    def initial_plan(self) -> PhasePlan | None:
        return None

    def begin_episode(self, episode_index: int) -> None:
        pass

    def wants_decision(self, tick: int, t: float, head: SignalHead) -> bool:
        raise NotImplementedError

    def decide(self, t: float, obs: Observation) -> ControllerDecision:
        raise NotImplementedError

    def end_episode(self, final_obs: Observation) -> None:
        pass

    def episode_stats(self) -> dict:
        return {}


class FixedTimeController(Controller):
    """Open-loop cycle plan; the decision ignores the observation."""

    controller_id = "fixed"
    provides_plan = True

    def __init__(self, plan: PhasePlan):
        self.plan = plan

    def initial_plan(self) -> PhasePlan:
        return self.plan

    def wants_decision(self, tick: int, t: float, head: SignalHead) -> bool:
        return head.cycle_completed

    def decide(self, t: float, obs: Observation) -> ControllerDecision:
        return ControllerDecision.set_cycle_timings(self.plan.greens_s)


class ActuatedController(Controller):
    """Single-ring gap-out control over the four sequential phases.

    Green holds at least ``min_green_s`` and at most ``max_green_s``;
    between those bounds it terminates as soon as the active phase's
    lanes have shown no presence for ``passage_gap_s``.
    """

    controller_id = "actuated"

    def __init__(
        self,
        min_green_s: float = MIN_GREEN_S,
        max_green_s: float = MAX_GREEN_S,
        passage_gap_s: float = PASSAGE_GAP_S,
    ):
        self.min_green_s = float(min_green_s)
        self.max_green_s = float(max_green_s)
        self.passage_gap_s = float(passage_gap_s)
        self._green_serial = -1
        self._last_presence_t = 0.0

    def begin_episode(self, episode_index: int) -> None:
        self._green_serial = -1
        self._last_presence_t = 0.0

    def wants_decision(self, tick: int, t: float, head: SignalHead) -> bool:
        return head.indication == GREEN

    def decide(self, t: float, obs: Observation) -> ControllerDecision:
        if obs.indication != GREEN:
            return ControllerDecision.hold()
        serial = (obs.active_phase, round(t - obs.phase_elapsed, 6))
        if serial != self._green_serial:
            self._green_serial = serial
            self._last_presence_t = t
        if obs.phase_presence[obs.active_phase - 1]:
            self._last_presence_t = t
        nxt = obs.active_phase % N_PHASES + 1
        if obs.phase_elapsed >= self.max_green_s:
            return ControllerDecision.switch_to(nxt)
        if obs.phase_elapsed >= self.min_green_s and (
            t - self._last_presence_t
        ) >= self.passage_gap_s:
            return ControllerDecision.switch_to(nxt)
        return ControllerDecision.hold()


# ---------------------------------------------------------------------------
# Fixed-plan optimization


@dataclass(frozen=True)
class PlanSearchSpace:
    """Grid-search configuration for :func:`build_fixed_plan`."""

    grid_step_s: float = 5.0
    min_green_s: float = MIN_GREEN_S
    max_green_s: float = MAX_GREEN_S
    cycle_min_s: float = 40.0
    cycle_max_s: float = 120.0
    eval_length_s: float = 600.0
    eval_warmup_s: float = 120.0
    seeds: tuple[int, ...] = (1001, 1002, 1003)

    def grid(self) -> list[tuple[float, float, float, float]]:
        lost = N_PHASES * (3.0 + 1.0)
        values = np.arange(self.min_green_s, self.max_green_s + 1e-9, self.grid_step_s)
        combos = []
        for g1 in values:
            for g2 in values:
                for g3 in values:
                    for g4 in values:
                        cycle = g1 + g2 + g3 + g4 + lost
                        if self.cycle_min_s <= cycle <= self.cycle_max_s:
                            combos.append((float(g1), float(g2), float(g3), float(g4)))
        return combos


@dataclass(frozen=True)
class FixedPlanArtifact:
    greens_s: tuple[float, float, float, float]
    objective: float
    space: PlanSearchSpace
    scenario: str = "base"


def build_fixed_plan(
    scenario_name: str = "base",
    space: PlanSearchSpace = PlanSearchSpace(),
    *,
    parallelism: int = 1,
    progress: bool = False,
) -> FixedPlanArtifact:
    """Exhaustive grid search minimizing mean travel time over seeded episodes.

    Every grid point is evaluated on the same short seeded episodes of the
    given scenario; ties break toward the lexicographically smallest green
    tuple (lowest phase index first).
    """
    from signalbench.harness import evaluate_plans

    combos = space.grid()
    if not combos:
        raise ValueError("plan search grid is empty; widen cycle bounds")
    objectives = evaluate_plans(combos, scenario_name, space, parallelism=parallelism)
    best: tuple[float, tuple[float, ...]] | None = None
    for i, (greens, obj) in enumerate(zip(combos, objectives)):
        if best is None or (obj, greens) < best:
            best = (obj, greens)
        if progress and i % 200 == 0:
            print(f"plan search {i}/{len(combos)} best={best[0]:.3f} {best[1]}", flush=True)
    assert best is not None
    return FixedPlanArtifact(
        greens_s=tuple(best[1]), objective=best[0], space=space, scenario=scenario_name
    )


_ARTIFACT_VERSION = "signalbench-fixed-plan v1"


def save_plan_artifact(artifact: FixedPlanArtifact, path) -> None:
    s = artifact.space
    lines = [
        f"# {_ARTIFACT_VERSION}",
        f"scenario: {artifact.scenario}",
        "greens_s: " + " ".join(f"{g:g}" for g in artifact.greens_s),
        f"objective_s_per_km: {artifact.objective:.6f}",
        f"grid_step_s: {s.grid_step_s:g}",
        f"min_green_s: {s.min_green_s:g}",
        f"max_green_s: {s.max_green_s:g}",
        f"cycle_min_s: {s.cycle_min_s:g}",
        f"cycle_max_s: {s.cycle_max_s:g}",
        f"eval_length_s: {s.eval_length_s:g}",
        f"eval_warmup_s: {s.eval_warmup_s:g}",
        "seeds: " + " ".join(str(x) for x in s.seeds),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_plan_artifact(path_or_text) -> FixedPlanArtifact:
    if hasattr(path_or_text, "splitlines"):
        text = path_or_text
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"# {_ARTIFACT_VERSION}":
        raise ValueError(f"unrecognized fixed-plan artifact (expected '{_ARTIFACT_VERSION}')")
    fields: dict[str, str] = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(":")
        fields[key.strip()] = value.strip()
    greens = tuple(float(x) for x in fields["greens_s"].split())
    if len(greens) != N_PHASES:
        raise ValueError("fixed-plan artifact must list one green per phase")
    space = PlanSearchSpace(
        grid_step_s=float(fields["grid_step_s"]),
        min_green_s=float(fields["min_green_s"]),
        max_green_s=float(fields["max_green_s"]),
        cycle_min_s=float(fields["cycle_min_s"]),
        cycle_max_s=float(fields["cycle_max_s"]),
        eval_length_s=float(fields["eval_length_s"]),
        eval_warmup_s=float(fields["eval_warmup_s"]),
        seeds=tuple(int(x) for x in fields["seeds"].split()),
    )
    return FixedPlanArtifact(
        greens_s=greens,
        objective=float(fields["objective_s_per_km"]),
        space=space,
        scenario=fields.get("scenario", "base"),
    )


def bundled_base_plan() -> FixedPlanArtifact:
    """The pre-optimized plan for the base demand shipped with the package."""
    text = (
        importlib.resources.files("signalbench")
        .joinpath("data/base_fixed_plan.txt")
        .read_text(encoding="utf-8")
    )
    return load_plan_artifact(text)


def default_fixed_plan(greens_s=None) -> PhasePlan:
    if greens_s is not None:
        return PhasePlan(greens_s=tuple(float(g) for g in greens_s))
    return PhasePlan(greens_s=bundled_base_plan().greens_s)

"""Scenario library: demand surges, incidents and sensor-failure processes.

A scenario is declarative: windowed demand multipliers, incidents, and an
optional failure process, all expressed against a nominal episode (4 h
after a 10 min warm-up).  Running at a different episode length rescales
every window proportionally.  Sensor failures perturb only what
controllers observe; simulator ground truth and evaluation metrics are
never touched.

Failure injection happens either per lane sensor before the per-phase max
aggregation, or per phase group after it; faulty sensors read zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from signalbench.geometry import (
    ALL_OD_PAIRS,
    N_LANES,
    N_PHASES,
    lane_index,
)
from signalbench.microsim import DemandSchedule, IncidentSpec

NOMINAL_EPISODE_S = 4 * 3600.0
NOMINAL_WARMUP_S = 600.0
NOMINAL_INTERVAL_S = 1800.0

BEFORE_MAX = "before_max"
AFTER_MAX = "after_max"

# Average 30-min OD counts (mean, std) observed at the reference
# intersection over the AM peak; diagonal (U-turn) pairs carry no demand.
BASE_DEMAND: dict[tuple[int, int], tuple[float, float]] = {
    (1, 2): (109.7, 47.0),
    (1, 3): (14.8, 6.1),
    (1, 4): (12.8, 6.2),
    (2, 1): (167.4, 68.5),
    (2, 3): (88.7, 35.3),
    (2, 4): (219.2, 84.9),
    (3, 1): (89.3, 36.1),
    (3, 2): (66.3, 27.7),
    (3, 4): (152.6, 62.5),
    (4, 1): (32.2, 15.5),
    (4, 2): (64.2, 27.1),
    (4, 3): (154.2, 71.0),
}


@dataclass(frozen=True)
class DemandTransform:
    """Multiply a set of OD rates inside a post-warm-up time window."""

    od_pairs: tuple[tuple[int, int], ...]
    multiplier: float
    window_s: tuple[float, float] | None = None  # None = the whole episode

    def __post_init__(self) -> None:
        if self.multiplier < 0:
            raise ValueError("demand multiplier must be non-negative")
        if self.window_s is not None and not self.window_s[0] < self.window_s[1]:
            raise ValueError("transform window must have start < end")


@dataclass(frozen=True)
class FailureSpec:
    """Sensor-failure process attached to the agent's observations.

    ``markov`` failures flip each sensor independently between OK and
    failed (bursty outages); ``fixed_window`` zeroes one chosen sensor for
    a time window.  ``target`` indexes a lane (before-max) or a phase
    group (after-max); None picks the busiest one.
    """

    injection: str = BEFORE_MAX
    kind: str = "markov"  # markov | fixed_window
    p_fail: float = 0.0
    p_recover: float = 0.0
    window_s: tuple[float, float] | None = None
    target: int | None = None
    failed_value: float = 0.0

    def __post_init__(self) -> None:
        if self.injection not in (BEFORE_MAX, AFTER_MAX):
            raise ValueError(f"unknown injection point {self.injection!r}")
        if self.kind == "markov":
            if not (0.0 <= self.p_fail <= 1.0 and 0.0 <= self.p_recover <= 1.0):
                raise ValueError("markov probabilities must be in [0, 1]")
            if self.window_s is not None:
                raise ValueError("markov failures do not take a window")
        elif self.kind == "fixed_window":
            if self.window_s is None:
                raise ValueError("fixed_window failures need a window")
        else:
            raise ValueError(f"unknown failure kind {self.kind!r}")

    def default_target(self) -> int:
        # Busiest sensor per the base demand table: lane l_{2,4} before the
        # aggregation, phase group 2 after it.
        return lane_index(2, 4) if self.injection == BEFORE_MAX else 2


@dataclass(frozen=True)
class ScenarioSpec:
    """One named benchmark scenario over the nominal episode timeline."""

    name: str
    description: str = ""
    demand: dict[tuple[int, int], tuple[float, float]] = field(
        default_factory=lambda: dict(BASE_DEMAND)
    )
    transforms: tuple[DemandTransform, ...] = ()
    incidents: tuple[IncidentSpec, ...] = ()
    failure: FailureSpec | None = None
    episode_length_s: float = NOMINAL_EPISODE_S
    warmup_s: float = NOMINAL_WARMUP_S

    def __post_init__(self) -> None:
        for tr in self.transforms:
            if tr.window_s is not None and tr.window_s[1] > self.episode_length_s + 1e-9:
                raise ValueError(f"transform window exceeds the episode in {self.name!r}")
        for inc in self.incidents:
            if inc.end_s > self.episode_length_s + 1e-9:
                raise ValueError(f"incident window exceeds the episode in {self.name!r}")

    # -- materialization ------------------------------------------------

    def time_scale(self, episode_length_s: float) -> float:
        return episode_length_s / self.episode_length_s

    def build_schedule(
        self,
        demand_rng: np.random.Generator,
        episode_length_s: float | None = None,
        warmup_s: float | None = None,
    ) -> DemandSchedule:
        """Draw per-interval demand counts and assemble the rate schedule.

        Interval counts are drawn from the per-OD normal (truncated at 0)
        so day-to-day variability survives; at a scaled episode length the
        intervals shrink with the same factor, keeping rates unchanged.
        """
        episode_length_s = episode_length_s or self.episode_length_s
        warmup_s = self.warmup_s if warmup_s is None else warmup_s
        scale = self.time_scale(episode_length_s)
        n_intervals = max(1, int(np.ceil(self.episode_length_s / NOMINAL_INTERVAL_S - 1e-9)))
        means = np.array([self.demand.get(od, (0.0, 0.0))[0] for od in ALL_OD_PAIRS])
        stds = np.array([self.demand.get(od, (0.0, 0.0))[1] for od in ALL_OD_PAIRS])
        draws = demand_rng.normal(means, stds, size=(n_intervals, len(ALL_OD_PAIRS)))
        counts = np.maximum(draws, 0.0) * scale
        multipliers = []
        for tr in self.transforms:
            mask = np.array([od in tr.od_pairs for od in ALL_OD_PAIRS])
            if tr.window_s is None:
                start, end = 0.0, warmup_s + episode_length_s
            else:
                start = warmup_s + tr.window_s[0] * scale
                end = warmup_s + tr.window_s[1] * scale
            multipliers.append((mask, tr.multiplier, start, end))
        return DemandSchedule(
            counts, NOMINAL_INTERVAL_S * scale, warmup_s, tuple(multipliers)
        )

    def materialized_incidents(
        self, episode_length_s: float | None = None, warmup_s: float | None = None
    ) -> tuple[IncidentSpec, ...]:
        """Incidents with windows rescaled and shifted to absolute time."""
        episode_length_s = episode_length_s or self.episode_length_s
        warmup_s = self.warmup_s if warmup_s is None else warmup_s
        scale = self.time_scale(episode_length_s)
        return tuple(
            replace(
                inc,
                start_s=warmup_s + inc.start_s * scale,
                end_s=warmup_s + inc.end_s * scale,
            )
            for inc in self.incidents
        )

    def build_failure_process(
        self,
        rng: np.random.Generator,
        episode_length_s: float | None = None,
        warmup_s: float | None = None,
    ) -> "FailureProcess | None":
        if self.failure is None:
            return None
        episode_length_s = episode_length_s or self.episode_length_s
        warmup_s = self.warmup_s if warmup_s is None else warmup_s
        scale = self.time_scale(episode_length_s)
        return FailureProcess(self.failure, rng, warmup_s=warmup_s, time_scale=scale)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "demand": {f"{o}-{d}": list(v) for (o, d), v in self.demand.items()},
            "transforms": [
                {
                    "od_pairs": [f"{o}-{d}" for o, d in tr.od_pairs],
                    "multiplier": tr.multiplier,
                    "window_s": list(tr.window_s) if tr.window_s else None,
                }
                for tr in self.transforms
            ],
            "incidents": [
                {
                    "kind": inc.kind,
                    "direction": inc.direction,
                    "blocked_lanes": list(inc.blocked_lanes),
                    "blockage_length_m": inc.blockage_length_m,
                    "start_s": inc.start_s,
                    "end_s": inc.end_s,
                }
                for inc in self.incidents
            ],
            "failure": None
            if self.failure is None
            else {
                "injection": self.failure.injection,
                "kind": self.failure.kind,
                "p_fail": self.failure.p_fail,
                "p_recover": self.failure.p_recover,
                "window_s": list(self.failure.window_s) if self.failure.window_s else None,
                "target": self.failure.target,
                "failed_value": self.failure.failed_value,
            },
            "episode_length_s": self.episode_length_s,
            "warmup_s": self.warmup_s,
        }

    @staticmethod
    def from_dict(data: dict) -> "ScenarioSpec":
        def parse_od(s: str) -> tuple[int, int]:
            o, _, d = s.partition("-")
            return int(o), int(d)

        failure = None
        if data.get("failure"):
            f = data["failure"]
            failure = FailureSpec(
                injection=f["injection"],
                kind=f["kind"],
                p_fail=f.get("p_fail", 0.0),
                p_recover=f.get("p_recover", 0.0),
                window_s=tuple(f["window_s"]) if f.get("window_s") else None,
                target=f.get("target"),
                failed_value=f.get("failed_value", 0.0),
            )
        return ScenarioSpec(
            name=data["name"],
            description=data.get("description", ""),
            demand={parse_od(k): tuple(v) for k, v in data["demand"].items()},
            transforms=tuple(
                DemandTransform(
                    od_pairs=tuple(parse_od(s) for s in tr["od_pairs"]),
                    multiplier=tr["multiplier"],
                    window_s=tuple(tr["window_s"]) if tr.get("window_s") else None,
                )
                for tr in data.get("transforms", ())
            ),
            incidents=tuple(
                IncidentSpec(
                    kind=inc["kind"],
                    direction=inc["direction"],
                    blocked_lanes=tuple(inc.get("blocked_lanes", ())),
                    blockage_length_m=inc.get("blockage_length_m", 0.0),
                    start_s=inc["start_s"],
                    end_s=inc["end_s"],
                )
                for inc in data.get("incidents", ())
            ),
            failure=failure,
            episode_length_s=data.get("episode_length_s", NOMINAL_EPISODE_S),
            warmup_s=data.get("warmup_s", NOMINAL_WARMUP_S),
        )


class FailureProcess:
    """Evolving per-sensor OK/failed states, stepped once per observation."""

    def __init__(
        self,
        spec: FailureSpec,
        rng: np.random.Generator,
        *,
        warmup_s: float = 0.0,
        time_scale: float = 1.0,
        n_sensors: int | None = None,
    ):
        self.spec = spec
        self.rng = rng
        if n_sensors is None:
            n_sensors = N_LANES if spec.injection == BEFORE_MAX else N_PHASES
        self.n_sensors = n_sensors
        self.failed = np.zeros(n_sensors, dtype=bool)
        self.target = spec.target if spec.target is not None else spec.default_target()
        if self.spec.kind == "fixed_window":
            w = spec.window_s
            self.window_abs = (warmup_s + w[0] * time_scale, warmup_s + w[1] * time_scale)
            if not (0 <= self.target < n_sensors):
                raise ValueError(f"failure target {self.target} out of range")
        # Statistics for reporting and verification.
        self.observation_steps = 0
        self.failed_sensor_steps = 0
        self._run_lengths = np.zeros(n_sensors, dtype=np.int64)
        self.completed_sojourns = 0
        self.completed_sojourn_steps = 0

    def step(self, t: float = 0.0) -> None:
        """Advance every sensor one observation step."""
        spec = self.spec
        if spec.kind == "markov":
            u = self.rng.random(self.n_sensors)
            new_failed = np.where(self.failed, u >= spec.p_recover, u < spec.p_fail)
        else:
            new_failed = np.zeros(self.n_sensors, dtype=bool)
            start, end = self.window_abs
            if start <= t < end:
                new_failed[self.target] = True
        recovered = self.failed & ~new_failed
        if recovered.any():
            self.completed_sojourns += int(recovered.sum())
            self.completed_sojourn_steps += int(self._run_lengths[recovered].sum())
            self._run_lengths[recovered] = 0
        self._run_lengths[new_failed] += 1
        self.failed = new_failed
        self.observation_steps += 1
        self.failed_sensor_steps += int(new_failed.sum())

    # -- statistics --------------------------------------------------------

    def failed_fraction(self) -> float:
        total = self.observation_steps * self.n_sensors
        return self.failed_sensor_steps / total if total else 0.0

    def mean_sojourn_steps(self) -> float:
        if self.completed_sojourns == 0:
            return float("nan")
        return self.completed_sojourn_steps / self.completed_sojourns


def apply_failures(
    raw_queues: np.ndarray,
    phase_max: np.ndarray,
    proc: FailureProcess | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fault an observation: returns (lane readings, phase maxima).

    Before-max injection zeroes failed lane sensors ahead of the phase
    aggregation; after-max injection zeroes whole aggregated phase
    readings.  Ground truth is never modified.
    """
    from signalbench.agent import phase_maxima as aggregate

    lanes = np.asarray(raw_queues, dtype=float)
    if proc is None:
        return lanes, np.asarray(phase_max, dtype=float)
    if proc.spec.injection == BEFORE_MAX:
        faulted = np.where(proc.failed, proc.spec.failed_value, lanes)
        return faulted, aggregate(faulted)
    maxima = np.where(proc.failed, proc.spec.failed_value, np.asarray(phase_max, dtype=float))
    return lanes, maxima


# ---------------------------------------------------------------------------
# The built-in library

_EVENT_WINDOW = (3600.0, 10800.0)  # hours 2-3 of the nominal 4 h episode


def _specs() -> list[ScenarioSpec]:
    north_bound = ((1, 4), (2, 4), (3, 4))
    from_north = ((4, 1), (4, 2), (4, 3))
    return [
        ScenarioSpec(
            name="base",
            description="reference AM-peak demand, no disruptions",
        ),
        ScenarioSpec(
            name="low_demand",
            description="all OD demand reduced by 30%",
            transforms=(DemandTransform(tuple(ALL_OD_PAIRS), 0.7),),
        ),
        ScenarioSpec(
            name="before_event",
            description="north-bound demand doubled during hours 2-3",
            transforms=(DemandTransform(north_bound, 2.0, _EVENT_WINDOW),),
        ),
        ScenarioSpec(
            name="after_event",
            description="demand from the north x2.5 for 2 h mid-episode",
            transforms=(DemandTransform(from_north, 2.5, _EVENT_WINDOW),),
        ),
        ScenarioSpec(
            name="incident_a",
            description="east inflow (d=1) cut to zero for 2 h mid-episode",
            incidents=(
                IncidentSpec(
                    kind="demand_cut",
                    direction=1,
                    start_s=_EVENT_WINDOW[0],
                    end_s=_EVENT_WINDOW[1],
                ),
            ),
        ),
        ScenarioSpec(
            name="incident_b",
            description="50 m blockage of the two left-most d=1 lanes, hours 2-3",
            incidents=(
                IncidentSpec(
                    kind="lane_blockage",
                    direction=1,
                    blocked_lanes=(lane_index(1, 1), lane_index(1, 2)),
                    blockage_length_m=50.0,
                    start_s=_EVENT_WINDOW[0],
                    end_s=_EVENT_WINDOW[1],
                ),
            ),
        ),
        ScenarioSpec(
            name="failure_a",
            description="bursty sensor failures: 1% fail, 5% recover per step",
            failure=FailureSpec(kind="markov", p_fail=0.01, p_recover=0.05),
        ),
        ScenarioSpec(
            name="failure_b",
            description="same failed fraction, bursts 10x longer",
            failure=FailureSpec(kind="markov", p_fail=0.001, p_recover=0.005),
        ),
        ScenarioSpec(
            name="failure_c",
            description="one sensor (or sensor group) zeroed for 2 h mid-episode",
            failure=FailureSpec(kind="fixed_window", window_s=_EVENT_WINDOW),
        ),
    ]


def library() -> dict[str, ScenarioSpec]:
    """The nine named benchmark scenarios."""
    return {spec.name: spec for spec in _specs()}


def get_scenario(
    name: str,
    failure_injection: str | None = None,
    failure_target: int | None = None,
) -> ScenarioSpec:
    """Look up a scenario, optionally re-pointing its failure process."""
    lib = library()
    if name not in lib:
        known = ", ".join(sorted(lib))
        raise KeyError(f"unknown scenario {name!r}; available: {known}")
    spec = lib[name]
    if failure_injection is not None or failure_target is not None:
        if spec.failure is None:
            raise ValueError(f"scenario {name!r} has no failure process to configure")
        failure = spec.failure
        if failure_injection is not None:
            failure = replace(failure, injection=failure_injection)
        if failure_target is not None:
            failure = replace(failure, target=failure_target)
        spec = replace(spec, failure=failure)
    return spec

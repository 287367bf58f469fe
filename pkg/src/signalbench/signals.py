"""Signal-head state machine shared by every controller.

The head shows green on exactly one phase at a time.  A switch request
runs the fixed transition sequence (3 s yellow on the outgoing phase,
then an all-red clearance) before the target phase turns green.  The head
can also run a repeating cycle plan (per-phase green durations served in
ring order), which is how the fixed-time and time-extension controllers
operate; they are notified at each cycle boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from signalbench.geometry import N_PHASES

GREEN = "green"
YELLOW = "yellow"
ALL_RED = "all_red"

YELLOW_S = 3.0
DEFAULT_ALL_RED_S = 1.0


@dataclass(frozen=True)
class PhasePlan:
    """Per-phase green durations served in ring order 1..4."""

    greens_s: tuple[float, float, float, float]
    yellow_s: float = YELLOW_S
    all_red_s: float = DEFAULT_ALL_RED_S

    def __post_init__(self) -> None:
        if len(self.greens_s) != N_PHASES:
            raise ValueError("plan needs one green per phase")
        if any(g <= 0 for g in self.greens_s):
            raise ValueError("green durations must be positive")

    @property
    def cycle_s(self) -> float:
        return sum(self.greens_s) + N_PHASES * (self.yellow_s + self.all_red_s)


class SignalHead:
    """Phase indication state, elapsed-green bookkeeping and transitions.

    ``time_since_green[p-1]`` is the elapsed time since phase ``p`` last
    showed green (zero while it is green; all phases start at zero).
    """

    def __init__(
        self,
        yellow_s: float = YELLOW_S,
        all_red_s: float = DEFAULT_ALL_RED_S,
        start_phase: int = 1,
    ):
        self.yellow_s = float(yellow_s)
        self.all_red_s = float(all_red_s)
        self.phase = int(start_phase)
        self.indication = GREEN
        self.phase_elapsed = 0.0
        self.time_since_green = np.zeros(N_PHASES)
        self._pending_target: int | None = None
        self._plan: PhasePlan | None = None
        self.cycle_completed = False
        self.green_starts = 0

    # -- control inputs -------------------------------------------------

    def set_plan(self, plan: PhasePlan) -> None:
        """Adopt a cycle plan; takes effect from the next phase boundary."""
        self._plan = plan

    @property
    def plan(self) -> PhasePlan | None:
        return self._plan

    def request_switch(self, target: int) -> bool:
        """Begin the transition toward ``target``.

        Returns False (and does nothing) when a transition is already in
        progress or the head is not showing green; a request for the
        active phase is an accepted no-op.
        """
        if not (1 <= target <= N_PHASES):
            raise ValueError(f"invalid phase {target}")
        if self.indication != GREEN or self._pending_target is not None:
            return False
        if target == self.phase:
            return True
        self._pending_target = target
        self.indication = YELLOW
        self.phase_elapsed = 0.0
        return True

    # -- time advance ----------------------------------------------------

    def step(self, dt: float) -> None:
        """Advance one tick; the indication set on exit is what vehicles see.

        Transitions fire once the previous indication has had its full
        exposure, so a 3 s yellow is visible for exactly 3 s of simulation.
        """
        self.cycle_completed = False
        if self.indication == YELLOW and self.phase_elapsed >= self.yellow_s - 1e-9:
            self.indication = ALL_RED
            self.phase_elapsed = 0.0
        elif self.indication == ALL_RED and self.phase_elapsed >= self.all_red_s - 1e-9:
            assert self._pending_target is not None
            self.phase = self._pending_target
            self._pending_target = None
            self.indication = GREEN
            self.phase_elapsed = 0.0
            self.green_starts += 1
        if (
            self.indication == GREEN
            and self._plan is not None
            and self.phase_elapsed >= self._plan.greens_s[self.phase - 1] - 1e-9
        ):
            if self.phase == N_PHASES:
                self.cycle_completed = True
            self._pending_target = self.phase % N_PHASES + 1
            self.indication = YELLOW
            self.phase_elapsed = 0.0

        self.phase_elapsed += dt
        self.time_since_green += dt
        if self.indication == GREEN:
            self.time_since_green[self.phase - 1] = 0.0

    # -- views ------------------------------------------------------------

    def lane_signal(self, lane_phases: np.ndarray) -> np.ndarray:
        """Per-lane indication codes: 0 red, 1 yellow, 2 green.

        ``lane_phases`` holds each lane's 1-based phase.  Lanes of every
        phase other than the active one read red.
        """
        codes = np.zeros(lane_phases.shape, dtype=np.int8)
        if self.indication == GREEN:
            codes[lane_phases == self.phase] = 2
        elif self.indication == YELLOW:
            codes[lane_phases == self.phase] = 1
        return codes

    def in_transition(self) -> bool:
        return self.indication != GREEN

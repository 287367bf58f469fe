"""Intersection layout: approaches, lanes, movements and phase groups.

The benchmark intersection has four approaches (directions 1..4), four
lanes per approach, and one movement per lane.  Lane ``j`` of approach
``d`` carries the movement from ``d`` toward destination ``j``; the lane
with ``j == d`` is a U-turn lane that never receives demand, so twelve of
the sixteen lanes carry traffic.  Phase ``p`` gives green to all four
lanes of approach ``p`` (split phasing), so lanes never belong to more
than one phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

N_APPROACHES = 4
LANES_PER_APPROACH = 4
N_LANES = N_APPROACHES * LANES_PER_APPROACH
N_PHASES = 4


def lane_index(direction: int, dest: int) -> int:
    """Flat lane id for the lane of ``direction`` serving ``dest`` (both 1-based)."""
    if not (1 <= direction <= N_APPROACHES and 1 <= dest <= LANES_PER_APPROACH):
        raise ValueError(f"invalid lane l_{{{direction},{dest}}}")
    return (direction - 1) * LANES_PER_APPROACH + (dest - 1)


def lane_movement(lane: int) -> tuple[int, int]:
    """Origin/destination pair (1-based) of the movement carried by ``lane``."""
    if not (0 <= lane < N_LANES):
        raise ValueError(f"invalid lane id {lane}")
    return lane // LANES_PER_APPROACH + 1, lane % LANES_PER_APPROACH + 1


def lane_phase(lane: int) -> int:
    """Phase (1-based) that serves ``lane``: the phase of its origin approach."""
    return lane // LANES_PER_APPROACH + 1


ALL_OD_PAIRS: tuple[tuple[int, int], ...] = tuple(
    (o, d)
    for o in range(1, N_APPROACHES + 1)
    for d in range(1, N_APPROACHES + 1)
    if o != d
)


@dataclass(frozen=True)
class IntersectionGeometry:
    """Static description of the four-leg intersection.

    ``lane_length_m`` is the approach link length; the stop line sits at
    position ``lane_length_m``, lane entry at position 0.  The queue
    detection region spans the full lane.
    """

    lane_length_m: float = 500.0
    desired_speed_ms: float = 50.0 / 3.6
    jam_spacing_m: float = 6.5
    queue_speed_ms: float = 4.0 / 3.6

    movement_map: tuple[tuple[int, int], ...] = field(
        default=tuple(lane_movement(l) for l in range(N_LANES))
    )
    movement_phase_map: tuple[int, ...] = field(
        default=tuple(lane_phase(l) for l in range(N_LANES))
    )

    def __post_init__(self) -> None:
        if self.lane_length_m <= 0 or self.desired_speed_ms <= 0:
            raise ValueError("lane length and desired speed must be positive")
        if self.jam_spacing_m <= 0:
            raise ValueError("jam spacing must be positive")
        if len(self.movement_map) != N_LANES:
            raise ValueError("movement map must cover all 16 lanes")
        if len(set(self.movement_map)) != N_LANES:
            raise ValueError("every lane must carry a distinct movement")

    @property
    def detection_capacity(self) -> int:
        """Maximum vehicles one lane's detection region can hold at jam spacing."""
        return int(self.lane_length_m / self.jam_spacing_m) + 1

    def phase_lanes(self, phase: int) -> tuple[int, ...]:
        """Flat lane ids served by ``phase`` (1-based)."""
        if not (1 <= phase <= N_PHASES):
            raise ValueError(f"invalid phase {phase}")
        base = (phase - 1) * LANES_PER_APPROACH
        return tuple(range(base, base + LANES_PER_APPROACH))

    def od_lane(self, origin: int, dest: int) -> int:
        """Lane that receives vehicles for the OD pair (1-based directions)."""
        if origin == dest:
            raise ValueError("U-turn movements receive no demand")
        return lane_index(origin, dest)

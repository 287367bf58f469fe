"""Deterministic microscopic simulation of the four-leg intersection.

Vehicles follow a simplified Gipps-style law: each tick a vehicle's speed
is the minimum of its accelerated speed, its desired speed and a braking
safe speed with respect to its leader; a stop-line "wall" acts as a
stationary virtual leader whenever the lane's phase is not green (on
yellow only for vehicles that can still brake to a stop).  Positions are
finally passed through a per-lane prefix clamp that enforces the jam
spacing exactly, so the no-collision and red-compliance invariants hold
by construction rather than by tolerance.

Lane state lives in padded per-lane arrays (column 0 is the lane's front
vehicle) so a tick is a fixed set of vectorised array operations.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from signalbench.geometry import (
    ALL_OD_PAIRS,
    N_LANES,
    IntersectionGeometry,
)

_INITIAL_CAPACITY = 96
_FAR_AWAY = 1.0e9


@dataclass(frozen=True)
class CarFollowingParams:
    accel_ms2: float = 2.0
    decel_ms2: float = 4.0
    # Headway used inside the braking safe-speed term; governs saturation
    # flow (queue discharge headway ~ jam/v + safe_headway).
    safe_headway_s: float = 1.0


@dataclass(frozen=True)
class IncidentSpec:
    """A supply disruption: OD demand cut or physical lane blockage.

    Times are simulation-absolute seconds.  A blockage occupies
    ``blockage_length_m`` at the stop-line end of each blocked lane;
    vehicles already inside that span when it starts are held in place
    until it ends, so no vehicle discharges from a blocked lane.
    """

    kind: str  # "demand_cut" | "lane_blockage"
    direction: int
    blocked_lanes: tuple[int, ...] = ()
    blockage_length_m: float = 0.0
    start_s: float = 0.0
    end_s: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("demand_cut", "lane_blockage"):
            raise ValueError(f"unknown incident kind {self.kind!r}")
        if not self.start_s < self.end_s:
            raise ValueError("incident must have start < end")
        if self.kind == "lane_blockage":
            if self.blockage_length_m <= 0:
                raise ValueError("blockage length must be positive")
            if not self.blocked_lanes:
                raise ValueError("blockage must name at least one lane")
            for lane in self.blocked_lanes:
                if not (0 <= lane < N_LANES):
                    raise ValueError(f"blockage references nonexistent lane {lane}")
        if not (1 <= self.direction <= 4):
            raise ValueError(f"invalid direction {self.direction}")

    def active(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass
class TickMetrics:
    """Flow-accumulated measurements for one simulation tick (veh*s)."""

    window_travel_time: float = 0.0
    window_delay: float = 0.0
    window_stop_time: float = 0.0
    vehicles_in: int = 0
    vehicles_out: int = 0
    distance_m: float = 0.0
    per_lane_queue: np.ndarray = field(default_factory=lambda: np.zeros(N_LANES, dtype=np.int64))


@dataclass
class Vehicle:
    """Introspection view of one simulated vehicle (tests and event logs)."""

    id: int
    lane: int
    position: float
    speed: float
    desired_speed: float
    entry_time: float
    movement: tuple[int, int]
    cumulative_stop_time: float


class DemandSchedule:
    """Piecewise-constant arrival rates per OD pair.

    ``counts`` holds the realised vehicle count per interval and OD (one
    row per interval, columns ordered as ``ALL_OD_PAIRS``); rates are
    counts / interval length.  Intervals are anchored at the end of the
    warm-up window, with earlier times served by the first interval, so
    the post-warm-up demand profile is independent of warm-up length.
    Time-windowed multipliers modulate the rates on top.
    """

    def __init__(
        self,
        counts: np.ndarray,
        interval_s: float,
        warmup_s: float,
        multipliers: tuple[tuple[np.ndarray, float, float, float], ...] = (),
    ):
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 2 or counts.shape[1] != len(ALL_OD_PAIRS):
            raise ValueError("counts must be (n_intervals, 12)")
        if np.any(counts < 0):
            raise ValueError("interval counts must be non-negative")
        self.counts = counts
        self.interval_s = float(interval_s)
        self.warmup_s = float(warmup_s)
        # (od mask, multiplier, abs start, abs end)
        self.multipliers = multipliers

    def rates(self, t: float) -> np.ndarray:
        idx = int(max(0.0, t - self.warmup_s) // self.interval_s)
        idx = min(idx, self.counts.shape[0] - 1)
        r = self.counts[idx] / self.interval_s
        for mask, factor, start, end in self.multipliers:
            if start <= t < end:
                r = np.where(mask, r * factor, r)
        return r

    @staticmethod
    def constant(rates_per_s: np.ndarray, horizon_s: float, warmup_s: float = 0.0) -> "DemandSchedule":
        """Single-interval schedule with fixed rates (veh/s per OD)."""
        counts = np.asarray(rates_per_s, dtype=float)[None, :] * horizon_s
        return DemandSchedule(counts, horizon_s, warmup_s)


def safe_speed(gap_m, leader_speed_ms, decel_ms2: float, headway_s: float):
    """Braking-aware safe speed toward a leader ``gap_m`` ahead.

    Guarantees the follower can stop behind the leader if the leader
    brakes at ``decel_ms2``; the classic Gipps-style braking term.
    """
    bt = decel_ms2 * headway_s
    gap = np.maximum(gap_m, 0.0)
    return np.sqrt(bt * bt + leader_speed_ms * leader_speed_ms + 2.0 * decel_ms2 * gap) - bt


class Microsim:
    """State and tick update for the whole intersection.

    The caller owns the clock: each :meth:`step` advances ``dt`` seconds
    using the per-lane signal codes (0 red, 1 yellow, 2 green) supplied
    for that tick.  Arrival randomness is drawn from ``warmup_rng`` until
    ``warmup_s`` and from ``arrival_rng`` afterwards, so warm-up length
    never perturbs post-warm-up draws.
    """

    def __init__(
        self,
        geometry: IntersectionGeometry,
        schedule: DemandSchedule,
        incidents: tuple[IncidentSpec, ...] = (),
        *,
        dt: float = 0.5,
        warmup_s: float = 0.0,
        arrival_rng: np.random.Generator | None = None,
        warmup_rng: np.random.Generator | None = None,
        params: CarFollowingParams = CarFollowingParams(),
        audit: bool = False,
        log_events: bool = False,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.geom = geometry
        self.schedule = schedule
        self.params = params
        self.dt = float(dt)
        self.warmup_s = float(warmup_s)
        self.arrival_rng = arrival_rng or np.random.default_rng(0)
        self.warmup_rng = warmup_rng or np.random.default_rng(1)
        self.audit = audit
        self.log_events = log_events
        self.events: list[tuple[float, str, int, int, str]] = []

        self.incidents: list[IncidentSpec] = []
        for spec in incidents:
            self.add_incident(spec)

        cap = _INITIAL_CAPACITY
        self.pos = np.zeros((N_LANES, cap))
        self.speed = np.zeros((N_LANES, cap))
        self.entry_t = np.zeros((N_LANES, cap))
        self.stop_t = np.zeros((N_LANES, cap))
        self.vid = np.zeros((N_LANES, cap), dtype=np.int64)
        self.counts = np.zeros(N_LANES, dtype=np.int64)
        self._cols = np.arange(cap)

        self.t = 0.0
        self._next_id = 0
        self.spawned_total = 0
        self.inserted_total = 0
        self.discharged_total = 0
        self.discharged_per_lane = np.zeros(N_LANES, dtype=np.int64)
        # Entry queues hold vehicle ids spawned but not yet admitted.
        self.entry_queues: list[deque[int]] = [deque() for _ in ALL_OD_PAIRS]
        self.virtual_count = 0

        self._od_lanes = np.array(
            [geometry.od_lane(o, d) for o, d in ALL_OD_PAIRS], dtype=np.int64
        )
        self._lane_od_label = {}
        for k, (o, d) in enumerate(ALL_OD_PAIRS):
            self._lane_od_label[int(self._od_lanes[k])] = f"{o}-{d}"

    # ------------------------------------------------------------------
    # construction helpers

    def add_incident(self, spec: IncidentSpec) -> None:
        """Register an incident; lane references are validated here."""
        if spec.kind == "lane_blockage":
            for lane in spec.blocked_lanes:
                if not (0 <= lane < N_LANES):
                    raise ValueError(f"blockage references nonexistent lane {lane}")
        self.incidents.append(spec)

    def add_vehicle(self, lane: int, position: float, speed: float, entry_time: float | None = None) -> int:
        """Insert a vehicle directly (state construction for tests).

        The vehicle must fit the lane's ordering and jam spacing.
        """
        if not (0 <= lane < N_LANES):
            raise ValueError(f"invalid lane {lane}")
        if not (0.0 <= position <= self.geom.lane_length_m):
            raise ValueError("position outside lane")
        n = int(self.counts[lane])
        if n > 0 and position > self.pos[lane, n - 1] - self.geom.jam_spacing_m:
            raise ValueError("vehicle would violate jam spacing")
        self._ensure_capacity(n + 1)
        self.pos[lane, n] = position
        self.speed[lane, n] = float(speed)
        self.entry_t[lane, n] = self.t if entry_time is None else entry_time
        self.stop_t[lane, n] = 0.0
        vid = self._next_id
        self.vid[lane, n] = vid
        self._next_id += 1
        self.counts[lane] += 1
        self.spawned_total += 1
        self.inserted_total += 1
        return vid

    def vehicles_in_lane(self, lane: int) -> list[Vehicle]:
        out = []
        for i in range(int(self.counts[lane])):
            out.append(
                Vehicle(
                    id=int(self.vid[lane, i]),
                    lane=lane,
                    position=float(self.pos[lane, i]),
                    speed=float(self.speed[lane, i]),
                    desired_speed=self.geom.desired_speed_ms,
                    entry_time=float(self.entry_t[lane, i]),
                    movement=self.geom.movement_map[lane],
                    cumulative_stop_time=float(self.stop_t[lane, i]),
                )
            )
        return out

    # ------------------------------------------------------------------
    # measurement

    def measure_queues(self) -> np.ndarray:
        """Queued-vehicle count per lane (speed below the queued threshold)."""
        valid = self._cols[None, :] < self.counts[:, None]
        queued = valid & (self.speed < self.geom.queue_speed_ms)
        return queued.sum(axis=1)

    def presence(self, zone_m: float) -> np.ndarray:
        """Per-lane flag: any vehicle within ``zone_m`` of the stop line."""
        valid = self._cols[None, :] < self.counts[:, None]
        near = valid & (self.pos >= self.geom.lane_length_m - zone_m)
        return near.any(axis=1)

    def network_count(self) -> int:
        return int(self.counts.sum())

    # ------------------------------------------------------------------
    # tick update

    def step(self, signal_codes: np.ndarray) -> TickMetrics:
        """Advance one tick under the given per-lane signal codes (0 red, 1 yellow, 2 green)."""
        dt = self.dt
        geom = self.geom
        p = self.params
        L = geom.lane_length_m
        jam = geom.jam_spacing_m

        inserted = self._spawn_and_insert()

        counts = self.counts
        valid = self._cols[None, :] < counts[:, None]
        pos = self.pos
        v = self.speed

        # Candidate speed: accelerate toward desired, capped by leader safety.
        cand_v = np.minimum(v + p.accel_ms2 * dt, geom.desired_speed_ms)
        lead_pos = np.empty_like(pos)
        lead_v = np.empty_like(v)
        lead_pos[:, 1:] = pos[:, :-1]
        lead_v[:, 1:] = v[:, :-1]
        lead_pos[:, 0] = _FAR_AWAY
        lead_v[:, 0] = 0.0
        gap = lead_pos - jam - pos
        v_follow = safe_speed(gap, lead_v, p.decel_ms2, p.safe_headway_s)
        new_v = np.minimum(cand_v, v_follow)

        # Active lane blockages: vehicles caught inside the blocked span are
        # held in place, vehicles upstream brake for the blockage rear.
        frozen = None
        cap_pos = None
        for inc in self.incidents:
            if inc.kind != "lane_blockage" or not inc.active(self.t):
                continue
            x_obs = L - inc.blockage_length_m
            rows = np.zeros(N_LANES, dtype=bool)
            rows[list(inc.blocked_lanes)] = True
            inside = rows[:, None] & valid & (pos >= x_obs)
            behind = rows[:, None] & valid & (pos < x_obs)
            frozen = inside if frozen is None else (frozen | inside)
            if behind.any():
                v_obs = safe_speed(x_obs - pos, 0.0, p.decel_ms2, p.safe_headway_s)
                new_v = np.where(behind, np.minimum(new_v, v_obs), new_v)
                col_cap = np.where(behind, x_obs, _FAR_AWAY)
                cap_pos = col_cap if cap_pos is None else np.minimum(cap_pos, col_cap)

        # Stop-line wall: red/all-red always; yellow only when the lane's
        # front vehicle can still stop at full braking (others pass).
        front_v = v[:, 0]
        front_pos = pos[:, 0]
        can_stop = front_v * front_v <= 2.0 * p.decel_ms2 * (L - front_pos)
        has_front = counts > 0
        wall = (signal_codes == 0) | ((signal_codes == 1) & (can_stop | ~has_front))
        if wall.any():
            v_wall = safe_speed(L - pos, 0.0, p.decel_ms2, p.safe_headway_s)
            new_v = np.where(wall[:, None], np.minimum(new_v, v_wall), new_v)

        np.maximum(new_v, 0.0, out=new_v)
        if frozen is not None:
            new_v[frozen] = 0.0

        cand_pos = pos + new_v * dt
        if cap_pos is not None:
            np.minimum(cand_pos, cap_pos, out=cand_pos)
        if wall.any():
            cand_pos[wall] = np.minimum(cand_pos[wall], L)
        # Exact jam-spacing chain: new_pos[i] <= new_pos[i-1] - jam.
        shifted = cand_pos + jam * self._cols[None, :]
        np.minimum.accumulate(shifted, axis=1, out=shifted)
        chained = shifted - jam * self._cols[None, :]
        new_pos = np.where(valid & (chained < cand_pos), chained, cand_pos)
        new_pos = np.where(valid, new_pos, pos)
        # Reconstruct speed only where the chain clamp actually bound, so an
        # unconstrained vehicle keeps its speed bit-exactly.
        new_v = np.where(new_pos < cand_pos, (new_pos - pos) / dt, new_v)
        new_v = np.where(valid, new_v, 0.0)

        moved = float((new_pos - pos)[valid].sum())

        self.pos = new_pos
        self.speed = new_v

        # Discharge: vehicles crossing the stop line on a lane without a
        # wall leave the network (single intersection, no downstream link).
        crossed = valid & (new_pos >= L) & ~wall[:, None]
        out_count = 0
        if crossed.any():
            moved -= float((new_pos[crossed] - L).sum())
            out_count = self._discharge(crossed)

        self.t += dt

        valid = self._cols[None, :] < self.counts[:, None]
        slow = valid & (self.speed < geom.queue_speed_ms)
        self.stop_t[slow] += dt
        n_all = int(self.counts.sum()) + out_count + self.virtual_count
        travel = n_all * dt
        delay = travel - moved / geom.desired_speed_ms
        stop = (int(slow.sum()) + self.virtual_count) * dt

        metrics = TickMetrics(
            window_travel_time=travel,
            window_delay=delay,
            window_stop_time=stop,
            vehicles_in=inserted,
            vehicles_out=out_count,
            distance_m=moved,
            per_lane_queue=slow.sum(axis=1),
        )

        if self.audit:
            self._audit(valid)
        return metrics

    # ------------------------------------------------------------------
    # internals

    def _ensure_capacity(self, needed: int) -> None:
        cap = self.pos.shape[1]
        if needed <= cap:
            return
        new_cap = max(needed, cap * 2)
        pad = new_cap - cap
        self.pos = np.pad(self.pos, ((0, 0), (0, pad)))
        self.speed = np.pad(self.speed, ((0, 0), (0, pad)))
        self.entry_t = np.pad(self.entry_t, ((0, 0), (0, pad)))
        self.stop_t = np.pad(self.stop_t, ((0, 0), (0, pad)))
        self.vid = np.pad(self.vid, ((0, 0), (0, pad)))
        self._cols = np.arange(new_cap)

    def _cut_dirs(self) -> frozenset[int]:
        """Origin directions whose demand is currently cut by an incident."""
        return frozenset(
            inc.direction
            for inc in self.incidents
            if inc.kind == "demand_cut" and inc.active(self.t)
        )

    def _spawn_and_insert(self) -> int:
        rng = self.warmup_rng if self.t < self.warmup_s else self.arrival_rng
        rates = self.schedule.rates(self.t)
        cut = self._cut_dirs()
        if cut:
            rates = rates.copy()
            for k, (o, _d) in enumerate(ALL_OD_PAIRS):
                if o in cut:
                    rates[k] = 0.0
        draws = rng.poisson(rates * self.dt)
        total = int(draws.sum())
        if total:
            self.spawned_total += total
            self.virtual_count += total
            for k in np.nonzero(draws)[0]:
                for _ in range(int(draws[k])):
                    vid = self._next_id
                    self._next_id += 1
                    self.entry_queues[int(k)].append(vid)
                    if self.log_events:
                        lane = int(self._od_lanes[k])
                        self.events.append(
                            (self.t, "spawn", vid, lane, self._lane_od_label[lane])
                        )

        inserted = 0
        geom = self.geom
        p = self.params
        for k, q in enumerate(self.entry_queues):
            if not q:
                continue
            lane = int(self._od_lanes[k])
            n = int(self.counts[lane])
            if n > 0:
                gap = self.pos[lane, n - 1] - geom.jam_spacing_m
                if gap < 0:
                    continue
                v_ok = safe_speed(gap, self.speed[lane, n - 1], p.decel_ms2, p.safe_headway_s)
                if v_ok < geom.desired_speed_ms:
                    continue
            self._ensure_capacity(n + 1)
            vid = q.popleft()
            self.pos[lane, n] = 0.0
            self.speed[lane, n] = geom.desired_speed_ms
            self.entry_t[lane, n] = self.t
            self.stop_t[lane, n] = 0.0
            self.vid[lane, n] = vid
            self.counts[lane] += 1
            self.virtual_count -= 1
            self.inserted_total += 1
            inserted += 1
            if self.log_events:
                self.events.append((self.t, "arrival", vid, lane, self._lane_od_label[lane]))
        return inserted

    def _discharge(self, crossed: np.ndarray) -> int:
        total = 0
        for lane in np.nonzero(crossed.any(axis=1))[0]:
            lane = int(lane)
            k = int(crossed[lane].sum())
            n = int(self.counts[lane])
            if self.log_events:
                label = self._lane_od_label.get(lane, "u-turn")
                for i in range(k):
                    self.events.append(
                        (self.t + self.dt, "discharge", int(self.vid[lane, i]), lane, label)
                    )
            for arr in (self.pos, self.speed, self.entry_t, self.stop_t, self.vid):
                arr[lane, : n - k] = arr[lane, k:n]
            self.counts[lane] -= k
            self.discharged_per_lane[lane] += k
            self.discharged_total += k
            total += k
        return total

    def _audit(self, valid: np.ndarray) -> None:
        jam = self.geom.jam_spacing_m
        pair_ok = valid[:, 1:]
        spacing = self.pos[:, :-1] - self.pos[:, 1:]
        if np.any(pair_ok & (spacing < jam - 1e-9)):
            raise AssertionError("jam-spacing violated")
        in_net = int(self.counts.sum())
        if self.spawned_total != in_net + self.virtual_count + self.discharged_total:
            raise AssertionError(
                f"conservation violated: spawned={self.spawned_total} "
                f"net={in_net} virtual={self.virtual_count} out={self.discharged_total}"
            )
        if np.any(valid & (self.pos > self.geom.lane_length_m + 1e-9)):
            raise AssertionError("vehicle beyond stop line retained in lane")

"""Experiment result types, aggregation and the versioned CSV formats.

Three delimited outputs per run directory, each with a schema-version
comment on its first line:

* ``raw.csv``       -- (replication, episode, metric, value)
* ``aggregate.csv`` -- (scenario, controller, window, metric, mean, std)
* ``loss.csv``      -- (replication, phase, episode, loss_mean, loss_max)

Aggregates are a pure function of the raw rows (see
:func:`aggregate_from_raw`), so a report can always be recomputed from
its raw file.  Aggregate means/stds are taken across replications of the
per-replication window means.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

RAW_SCHEMA = "# signalbench-raw v1"
AGGREGATE_SCHEMA = "# signalbench-aggregate v1"
LOSS_SCHEMA = "# signalbench-loss v1"
EVENTS_SCHEMA = "# signalbench-events v1"

WINDOWS = {"last30": 30, "last10": 10}

EPISODE_METRICS = (
    "travel_time_s_per_km",
    "delay_s_per_km",
    "stop_time_s_per_km",
    "total_travel_time_veh_s",
    "total_delay_veh_s",
    "total_stop_time_veh_s",
    "vehicle_km",
    "vehicles_completed",
    "vehicles_spawned",
    "loss_mean",
    "loss_max",
    "epsilon",
    "failed_fraction",
    "aborted",
)

AGGREGATE_METRICS = ("travel_time_s_per_km", "delay_s_per_km", "stop_time_s_per_km")


def _fmt(value: float) -> str:
    return f"{value:.10g}"


@dataclass
class EpisodeResult:
    """Everything measured over one episode (warm-up excluded)."""

    episode_index: int
    controller_id: str
    seed_key: tuple[int, ...]
    series_travel: np.ndarray
    series_delay: np.ndarray
    series_stop: np.ndarray
    vehicle_km: float
    vehicles_completed: int
    vehicles_spawned: int
    loss_mean: float = float("nan")
    loss_max: float = float("nan")
    epsilon: float = float("nan")
    failed_fraction: float = float("nan")
    aborted: bool = False
    diagnostic: str = ""
    malformed_decisions: int = 0
    observed_phase_maxima: np.ndarray | None = None
    events: list[tuple[float, str, int, int, str]] | None = None

    @property
    def total_travel_time(self) -> float:
        return float(np.sum(self.series_travel))

    @property
    def total_delay(self) -> float:
        return float(np.sum(self.series_delay))

    @property
    def total_stop_time(self) -> float:
        return float(np.sum(self.series_stop))

    def _normalized(self, total: float) -> float:
        if self.vehicle_km > 0:
            return total / self.vehicle_km
        return 0.0 if total == 0.0 else float("inf")

    @property
    def travel_time_s_per_km(self) -> float:
        return self._normalized(self.total_travel_time)

    @property
    def delay_s_per_km(self) -> float:
        return self._normalized(self.total_delay)

    @property
    def stop_time_s_per_km(self) -> float:
        return self._normalized(self.total_stop_time)

    def metric(self, name: str) -> float:
        values = {
            "travel_time_s_per_km": self.travel_time_s_per_km,
            "delay_s_per_km": self.delay_s_per_km,
            "stop_time_s_per_km": self.stop_time_s_per_km,
            "total_travel_time_veh_s": self.total_travel_time,
            "total_delay_veh_s": self.total_delay,
            "total_stop_time_veh_s": self.total_stop_time,
            "vehicle_km": self.vehicle_km,
            "vehicles_completed": float(self.vehicles_completed),
            "vehicles_spawned": float(self.vehicles_spawned),
            "loss_mean": self.loss_mean,
            "loss_max": self.loss_max,
            "epsilon": self.epsilon,
            "failed_fraction": self.failed_fraction,
            "aborted": float(self.aborted),
        }
        return values[name]


@dataclass
class ReplicationResult:
    replication: int
    episodes: list[EpisodeResult] = field(default_factory=list)
    failed: bool = False
    error: str = ""


@dataclass
class ExperimentReport:
    scenario: str
    controller: str
    replications: list[ReplicationResult]

    def episode_matrix(self, metric: str) -> np.ndarray:
        """(replications, episodes) values; NaN for missing episodes."""
        n_eps = max((len(r.episodes) for r in self.replications), default=0)
        out = np.full((len(self.replications), n_eps), np.nan)
        for i, rep in enumerate(self.replications):
            for j, ep in enumerate(rep.episodes):
                out[i, j] = ep.metric(metric)
        return out

    def percentile_bands(self, metric: str, lo: float = 10.0, hi: float = 90.0):
        """Across-replication mean and percentile band per episode."""
        m = self.episode_matrix(metric)
        return (
            np.nanmean(m, axis=0),
            np.nanpercentile(m, lo, axis=0),
            np.nanpercentile(m, hi, axis=0),
        )

    def window_mean(self, metric: str, last_k: int) -> tuple[float, float]:
        """Across-replication mean/std of per-replication window means."""
        m = self.episode_matrix(metric)
        k = min(last_k, m.shape[1])
        per_rep = np.nanmean(m[:, m.shape[1] - k :], axis=1)
        return float(np.mean(per_rep)), float(np.std(per_rep))


# ---------------------------------------------------------------------------
# CSV emission


def raw_rows(report: ExperimentReport) -> list[tuple[int, int, str, float]]:
    rows = []
    for rep in report.replications:
        for ep in rep.episodes:
            for name in EPISODE_METRICS:
                rows.append((rep.replication, ep.episode_index, name, ep.metric(name)))
    return rows


def write_raw_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(RAW_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["replication", "episode", "metric", "value"])
        for rep, ep, name, value in raw_rows(report):
            w.writerow([rep, ep, name, _fmt(value)])


def read_raw_csv(path) -> list[tuple[int, int, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != RAW_SCHEMA:
            raise ValueError(f"unexpected raw schema {first!r} (wanted {RAW_SCHEMA!r})")
        rows = []
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["replication", "episode", "metric", "value"]:
            raise ValueError("raw CSV columns do not match the v1 schema")
        for rec in reader:
            rows.append((int(rec[0]), int(rec[1]), rec[2], float(rec[3])))
    return rows


def aggregate_from_raw(
    rows: list[tuple[int, int, str, float]],
    scenario: str,
    controller: str,
) -> list[tuple[str, str, str, str, float, float]]:
    """Recompute the aggregate block from raw rows (pure function)."""
    by_metric: dict[str, dict[int, dict[int, float]]] = {}
    for rep, ep, name, value in rows:
        by_metric.setdefault(name, {}).setdefault(rep, {})[ep] = value
    out = []
    for window, last_k in WINDOWS.items():
        for metric in AGGREGATE_METRICS:
            reps = by_metric.get(metric, {})
            per_rep = []
            for rep in sorted(reps):
                eps = reps[rep]
                order = sorted(eps)
                k = min(last_k, len(order))
                vals = [eps[e] for e in order[len(order) - k :]]
                per_rep.append(float(np.mean(vals)))
            if not per_rep:
                continue
            out.append(
                (
                    scenario,
                    controller,
                    window,
                    metric,
                    float(np.mean(per_rep)),
                    float(np.std(per_rep)),
                )
            )
    return out


def write_aggregate_csv(
    rows: list[tuple[str, str, str, str, float, float]], path
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(AGGREGATE_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["scenario", "controller", "window", "metric", "mean", "std"])
        for scenario, controller, window, metric, mean, std in rows:
            w.writerow([scenario, controller, window, metric, _fmt(mean), _fmt(std)])


def read_aggregate_csv(path) -> list[tuple[str, str, str, str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != AGGREGATE_SCHEMA:
            raise ValueError(
                f"unexpected aggregate schema {first!r} (wanted {AGGREGATE_SCHEMA!r})"
            )
        reader = csv.reader(fh)
        next(reader)
        return [
            (rec[0], rec[1], rec[2], rec[3], float(rec[4]), float(rec[5]))
            for rec in reader
        ]


def write_loss_csv(phases: dict[str, ExperimentReport], path) -> None:
    """Loss series for learning runs; one phase label per training arm."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(LOSS_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["replication", "phase", "episode", "loss_mean", "loss_max"])
        for phase, report in phases.items():
            for rep in report.replications:
                for ep in rep.episodes:
                    w.writerow(
                        [
                            rep.replication,
                            phase,
                            ep.episode_index,
                            _fmt(ep.loss_mean),
                            _fmt(ep.loss_max),
                        ]
                    )


def read_loss_csv(path) -> list[tuple[int, str, int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != LOSS_SCHEMA:
            raise ValueError(f"unexpected loss schema {first!r} (wanted {LOSS_SCHEMA!r})")
        reader = csv.reader(fh)
        next(reader)
        return [
            (int(rec[0]), rec[1], int(rec[2]), float(rec[3]), float(rec[4]))
            for rec in reader
        ]


def write_events_csv(events: list[tuple[float, str, int, int, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(EVENTS_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["time_s", "event", "vehicle_id", "lane", "od"])
        for t, kind, vid, lane, od in events:
            w.writerow([_fmt(t), kind, vid, lane, od])


def format_comparison_table(
    rows: list[tuple[str, str, str, str, float, float]]
) -> str:
    """Aligned text block (scenario x controller x window x metric)."""
    header = ("scenario", "controller", "window", "metric", "mean", "std")
    cells = [header] + [
        (s, c, w, m, _fmt(mean), _fmt(std)) for s, c, w, m, mean, std in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = io.StringIO()
    for r in cells:
        out.write("  ".join(val.ljust(widths[i]) for i, val in enumerate(r)).rstrip())
        out.write("\n")
    return out.getvalue()

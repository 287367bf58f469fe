"""Command-line front end.

Subcommands: ``run`` (one scenario/controller experiment), ``transfer``
(pretrain, transfer and from-scratch curves), ``compare`` (merge report
directories into one table), ``scenarios`` (list/export the library) and
``report`` (render figures from a run directory's CSVs).

Exit codes: 0 success, 1 configuration/validation error, 2 runtime
failure (raw CSV rows written so far are flushed before exiting).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from dataclasses import replace as _dc_replace

from signalbench.config import (
    ConfigError,
    build_run_params,
    build_setup,
    default_output_dir,
    dump_config,
    effective_config,
    load_config_file,
    resolve_scenario,
    validate_config,
)
from signalbench.harness import run_experiment, run_transfer
from signalbench.reporting import (
    ExperimentReport,
    aggregate_from_raw,
    format_comparison_table,
    raw_rows,
    read_aggregate_csv,
    read_raw_csv,
    write_aggregate_csv,
    write_events_csv,
    write_loss_csv,
    write_raw_csv,
    RAW_SCHEMA,
)
from signalbench.scenarios import library


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signalbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--scenario", help="scenario name from the library")
        p.add_argument("--controller", help="fixed | actuated | rl_phase_selection | rl_time_extension")
        p.add_argument("--episodes", type=int)
        p.add_argument("--replications", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--parallelism", type=int)
        p.add_argument("--out", dest="output_dir")
        p.add_argument("--episode-length", dest="episode_length_s", type=float,
                       help="post-warm-up episode length in seconds (scales scenario windows)")
        p.add_argument("--warmup", dest="warmup_s", type=float)
        p.add_argument("--failure-injection", choices=("before_max", "after_max"))
        p.add_argument("--failure-target", type=int)
        p.add_argument("--checkpoint-in", help="checkpoint file, directory, or template with {rep}")
        p.add_argument("--checkpoint-out", action="store_true", default=None,
                       help="write one checkpoint per replication into the run directory")
        p.add_argument("--emit-events", action="store_true", default=None,
                       help="write per-episode arrival/discharge event CSVs")
        p.add_argument("--plots", action="store_true", default=None,
                       help="render figures next to the CSV outputs")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config field, e.g. agent.dropout_rate=0.0")
        p.add_argument("--dump-config", action="store_true",
                       help="print the effective config document and exit")

    p_run = sub.add_parser("run", help="run one scenario under one controller")
    add_common(p_run)

    p_tr = sub.add_parser("transfer", help="pretrain, transfer, and from-scratch curves")
    add_common(p_tr)
    p_tr.add_argument("--pretrain-scenario")
    p_tr.add_argument("--pretrain-episodes", type=int)

    p_cmp = sub.add_parser("compare", help="merge completed report directories")
    p_cmp.add_argument("reports", nargs="+", help="run directories with aggregate.csv + config.json")
    p_cmp.add_argument("--out", help="write the merged table as CSV here")
    p_cmp.add_argument("--plots", action="store_true")

    p_sc = sub.add_parser("scenarios", help="inspect the scenario library")
    p_sc.add_argument("action", choices=("list", "export"))
    p_sc.add_argument("name", nargs="?", help="scenario to export (default: all)")

    p_rep = sub.add_parser("report", help="render figures from a run directory")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("--out", help="directory for the figures (default: the run dir)")

    return parser


def _parse_set_overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set needs SECTION.KEY=VALUE, got {pair!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return out


_FLAG_KEYS = (
    "scenario",
    "controller",
    "episodes",
    "replications",
    "seed",
    "parallelism",
    "output_dir",
    "episode_length_s",
    "warmup_s",
    "failure_injection",
    "failure_target",
    "checkpoint_in",
    "checkpoint_out",
    "emit_events",
    "plots",
)


def _assemble_config(args, transfer: bool = False) -> dict:
    file_cfg = load_config_file(args.config) if args.config else {}
    overrides: dict = {}
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if transfer:
        if getattr(args, "pretrain_scenario", None) is not None:
            overrides["pretrain_scenario"] = args.pretrain_scenario
        if getattr(args, "pretrain_episodes", None) is not None:
            overrides["pretrain_episodes"] = args.pretrain_episodes
    cfg = effective_config(file_cfg, overrides)
    cfg = effective_config(cfg, _parse_set_overrides(args.set))
    return cfg


def _resolve_checkpoint_in(path: str | None) -> str | None:
    if path is None:
        return None
    if os.path.isdir(path):
        return os.path.join(path, "rep{rep}.ckpt")
    return path


class _RawStreamer:
    """Writes raw.csv incrementally so a crash still leaves a valid prefix."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.fh.write(RAW_SCHEMA + "\n")
        self.fh.write("replication,episode,metric,value\n")

    def __call__(self, rep_result) -> None:
        report = ExperimentReport("", "", [rep_result])
        for rep, ep, name, value in raw_rows(report):
            self.fh.write(f"{rep},{ep},{name},{value:.10g}\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _write_common_outputs(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def _finalize_aggregate(raw_path: str, scenario: str, controller: str, agg_path: str) -> None:
    rows = read_raw_csv(raw_path)
    write_aggregate_csv(aggregate_from_raw(rows, scenario, controller), agg_path)


def _emit_events(report: ExperimentReport, out_dir: str) -> None:
    events_dir = os.path.join(out_dir, "events")
    os.makedirs(events_dir, exist_ok=True)
    for rep in report.replications:
        for ep in rep.episodes:
            if ep.events is not None:
                write_events_csv(
                    ep.events,
                    os.path.join(events_dir, f"rep{rep.replication}_ep{ep.episode_index}.csv"),
                )


def cmd_run(args) -> int:
    cfg = _assemble_config(args)
    if args.dump_config:
        validate_config(cfg, require_seed=False)
        sys.stdout.write(dump_config(cfg))
        return 0
    validate_config(cfg)
    scenario = resolve_scenario(cfg)
    params = build_run_params(cfg)
    setup = build_setup(cfg)
    setup = _dc_replace(setup, checkpoint_in=_resolve_checkpoint_in(setup.checkpoint_in))
    out_dir = cfg["output_dir"] or default_output_dir(cfg)
    _write_common_outputs(cfg, out_dir)

    checkpoint_paths = None
    if cfg["checkpoint_out"]:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        checkpoint_paths = [
            os.path.join(ckpt_dir, f"rep{r}.ckpt") for r in range(cfg["replications"])
        ]

    raw_path = os.path.join(out_dir, "raw.csv")
    streamer = _RawStreamer(raw_path)
    try:
        report = run_experiment(
            scenario,
            setup,
            episodes=cfg["episodes"],
            replications=cfg["replications"],
            master_seed=cfg["seed"],
            params=params,
            parallelism=cfg["parallelism"],
            checkpoint_paths=checkpoint_paths,
            on_replication=streamer,
        )
    finally:
        streamer.close()

    _finalize_aggregate(raw_path, scenario.name, cfg["controller"], os.path.join(out_dir, "aggregate.csv"))
    if cfg["controller"].startswith("rl_"):
        write_loss_csv({"train": report}, os.path.join(out_dir, "loss.csv"))
    if cfg["emit_events"]:
        _emit_events(report, out_dir)

    agg = read_aggregate_csv(os.path.join(out_dir, "aggregate.csv"))
    sys.stdout.write(format_comparison_table(agg))
    failed = [r.replication for r in report.replications if r.failed]
    if failed:
        print(f"warning: replications failed: {failed}", file=sys.stderr)
    if cfg["plots"]:
        from signalbench.figures import render_run_directory

        for path in render_run_directory(out_dir):
            print(f"figure: {path}")
    print(f"report written to {out_dir}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _assemble_config(args, transfer=True)
    if args.dump_config:
        validate_config(cfg, require_seed=False, transfer=True)
        sys.stdout.write(dump_config(cfg))
        return 0
    validate_config(cfg, transfer=True)
    scenario = resolve_scenario(cfg)
    params = build_run_params(cfg)
    setup = build_setup(cfg)
    setup = _dc_replace(setup, checkpoint_in=_resolve_checkpoint_in(setup.checkpoint_in))
    out_dir = cfg["output_dir"] or default_output_dir(cfg, suffix="-transfer")
    _write_common_outputs(cfg, out_dir)

    result = run_transfer(
        cfg["pretrain_scenario"],
        scenario,
        setup,
        pretrain_episodes=cfg["pretrain_episodes"],
        target_episodes=cfg["episodes"],
        replications=cfg["replications"],
        master_seed=cfg["seed"],
        params=params,
        parallelism=cfg["parallelism"],
    )

    arms = {"transfer": result.transfer, "scratch": result.scratch}
    if any(rep.episodes for rep in result.pretrain.replications):
        arms["pretrain"] = result.pretrain
    for name, report in arms.items():
        raw_path = os.path.join(out_dir, f"{name}_raw.csv")
        write_raw_csv(report, raw_path)
        _finalize_aggregate(
            raw_path, report.scenario, cfg["controller"], os.path.join(out_dir, f"{name}_aggregate.csv")
        )
    write_loss_csv(arms, os.path.join(out_dir, "loss.csv"))
    if cfg["plots"]:
        from signalbench.figures import render_run_directory

        for path in render_run_directory(out_dir):
            print(f"figure: {path}")
    print(f"transfer report written to {out_dir}")
    return 0


_COMPARABLE_FACTORS = (
    ("episode_length_s", lambda c: c.get("episode_length_s")),
    ("warmup_s", lambda c: c.get("warmup_s")),
    ("sim.dt_s", lambda c: c.get("sim", {}).get("dt_s")),
    ("sim.lane_length_m", lambda c: c.get("sim", {}).get("lane_length_m")),
)


def cmd_compare(args) -> int:
    if len(args.reports) < 1:
        raise ConfigError("compare needs at least one report directory")
    merged = []
    factor_values: dict[str, set] = {name: set() for name, _ in _COMPARABLE_FACTORS}
    for run_dir in args.reports:
        agg_path = os.path.join(run_dir, "aggregate.csv")
        cfg_path = os.path.join(run_dir, "config.json")
        if not os.path.exists(agg_path):
            candidates = [
                os.path.join(run_dir, f"{arm}_aggregate.csv") for arm in ("transfer", "scratch")
            ]
            found = [p for p in candidates if os.path.exists(p)]
            if not found:
                raise ConfigError(f"{run_dir} holds no aggregate.csv")
            for p in found:
                merged.extend(read_aggregate_csv(p))
        else:
            merged.extend(read_aggregate_csv(agg_path))
        if not os.path.exists(cfg_path):
            raise ConfigError(f"{run_dir} holds no config.json")
        with open(cfg_path, encoding="utf-8") as fh:
            run_cfg = json.load(fh)
        for name, getter in _COMPARABLE_FACTORS:
            factor_values[name].add(json.dumps(getter(run_cfg)))
    for name, values in factor_values.items():
        if len(values) > 1:
            raise ConfigError(
                f"refusing to merge reports with mismatched {name}: "
                + ", ".join(sorted(values))
            )
    merged.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    sys.stdout.write(format_comparison_table(merged))
    if args.out:
        write_aggregate_csv(merged, args.out)
        if args.plots:
            from signalbench.figures import plot_comparison

            plot_comparison(merged, os.path.splitext(args.out)[0] + ".png")
    return 0


def cmd_scenarios(args) -> int:
    lib = library()
    if args.action == "list":
        width = max(len(name) for name in lib)
        for name in sorted(lib):
            print(f"{name.ljust(width)}  {lib[name].description}")
        return 0
    if args.name:
        if args.name not in lib:
            raise ConfigError(f"unknown scenario {args.name!r}")
        specs = {args.name: lib[args.name]}
    else:
        specs = lib
    out = {name: spec.to_dict() for name, spec in specs.items()}
    sys.stdout.write(json.dumps(out, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_report(args) -> int:
    from signalbench.figures import render_run_directory

    if not os.path.isdir(args.run_dir):
        raise ConfigError(f"no such run directory: {args.run_dir}")
    produced = render_run_directory(args.run_dir, args.out)
    if not produced:
        raise ConfigError(f"{args.run_dir} holds no renderable CSVs")
    for path in produced:
        print(f"figure: {path}")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "transfer": cmd_transfer,
    "compare": cmd_compare,
    "scenarios": cmd_scenarios,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

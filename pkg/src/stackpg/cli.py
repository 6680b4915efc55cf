"""Command line entry points: train, verify, plot, sweep.

Exit codes: 0 on success, 1 when a run or check produced failing results,
2 for configuration and usage errors.  Run artifacts are deterministic for
a fixed configuration and seed; the manifest records content digests so
reruns can be compared byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .config import VARIANT_NAMES, ConfigError, load_config
from .maps import save_map
from .plant import build_bglp
from .plots import (
    EPISODE_COLUMNS,
    WINDOW_COLUMNS,
    TraceFormatError,
    read_trace,
    render_all,
)
from .trainer import RunResult, aggregate_metrics, run_training, sweep
from .verify import report_to_json, run_verification


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_csv(path: Path, header: tuple[str, ...], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_run(result: RunResult, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    episodes_csv = out / "episodes.csv"
    _write_csv(
        episodes_csv,
        EPISODE_COLUMNS,
        [
            [
                result.plan.variant,
                m.episode,
                m.phase,
                m.windows,
                m.mean_potential,
                m.last_potential,
                m.mean_power_kw,
                m.delivered_l,
                m.requested_l,
                m.demand_fraction,
                m.spilled_l,
                m.unmet_l,
            ]
            for m in result.episodes
        ],
    )
    windows_csv = out / "windows.csv"
    _write_csv(
        windows_csv,
        WINDOW_COLUMNS,
        [
            [result.plan.variant, i, phi, pw]
            for i, (phi, pw) in enumerate(zip(result.window_potential, result.window_power_kw))
        ],
    )
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    map_files = []
    for player in result.players:
        for name, m in result.learners[player].named_maps():
            path = maps_dir / f"{name}.spgm"
            save_map(m, path)
            map_files.append(path)
    files = {
        str(p.relative_to(out)): _sha256(p) for p in [episodes_csv, windows_csv, *map_files]
    }
    manifest = {
        "package_version": __version__,
        "variant": result.plan.variant,
        "seed": result.plan.seed,
        "config_hash": result.config_hash,
        "episodes": result.plan.episodes,
        "horizon_seconds": result.plan.horizon_seconds,
        "eval_episodes": result.plan.eval_episodes,
        "eval_horizon_seconds": result.plan.eval_horizon_seconds,
        "threads": result.plan.threads,
        "players": list(result.players),
        "eval_summary": aggregate_metrics(result.eval_metrics()),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    result = run_training(
        cfg,
        args.variant,
        seed=args.seed,
        episodes=args.episodes,
        horizon_seconds=args.horizon,
    )
    out = Path(args.out) if args.out else Path("runs") / args.variant
    manifest = _write_run(result, out)
    summary = manifest["eval_summary"]
    print(
        f"{args.variant}: eval potential {summary['mean_potential']:.6f}, "
        f"power {summary['mean_power_kw'] * 1000:.1f} W, "
        f"demand {summary['demand_fraction'] * 100:.2f}%, "
        f"spilled {summary['spilled_l']:.4f} L"
    )
    print(f"wrote {out}/manifest.json")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    plant = build_bglp(cfg.plant_params())
    reports = run_verification(
        plant,
        seed=args.seed if args.seed is not None else int(cfg.training["seed"]),
        samples=args.samples,
    )
    for report in reports:
        print(report.line())
    payload = report_to_json(reports)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        print(f"wrote {out}")
    return 0 if payload["all_passed"] else 1


def cmd_plot(args: argparse.Namespace) -> int:
    episode_rows: list[dict] = []
    window_rows: list[dict] = []
    for run_dir in args.run:
        run = Path(run_dir)
        episode_rows.extend(read_trace(run / "episodes.csv", EPISODE_COLUMNS))
        window_rows.extend(read_trace(run / "windows.csv", WINDOW_COLUMNS))
    paths = render_all(episode_rows, window_rows, args.out)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    trials = sweep(cfg, args.variant, args.trials, seed=args.seed)
    payload = [
        {"rank": rank, "index": t.index, "score": t.score, "params": t.params}
        for rank, t in enumerate(trials)
    ]
    for entry in payload[: min(5, len(payload))]:
        print(f"#{entry['rank']} trial {entry['index']}: score {entry['score']:.6f} {entry['params']}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stackpg",
        description="Leader-follower potential-game training on a bulk-goods line",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one configuration entry (repeatable)",
        )

    p_train = sub.add_parser("train", help="train one variant and write run artifacts")
    add_config_opts(p_train)
    p_train.add_argument("--variant", choices=VARIANT_NAMES, required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--episodes", type=int)
    p_train.add_argument("--horizon", type=float, help="training episode length in seconds")
    p_train.add_argument("--out", help="run directory (default runs/<variant>)")
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify", help="run the structural and gradient checks")
    add_config_opts(p_verify)
    p_verify.add_argument("--seed", type=int)
    p_verify.add_argument("--samples", type=int, default=200)
    p_verify.add_argument("--out", help="write the JSON report here")
    p_verify.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot", help="render SVG charts from run traces")
    p_plot.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p_plot.add_argument("--out", required=True, help="chart output directory")
    p_plot.set_defaults(func=cmd_plot)

    p_sweep = sub.add_parser("sweep", help="random search over learning parameters")
    add_config_opts(p_sweep)
    p_sweep.add_argument("--variant", choices=VARIANT_NAMES, required=True)
    p_sweep.add_argument("--trials", type=int, default=10)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--out", help="write ranked trials as JSON here")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

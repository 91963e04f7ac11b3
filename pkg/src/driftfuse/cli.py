"""Command-line surface: gen | train | eval | ablate | sweep | inspect.

Exit codes: 0 ok, 2 config error, 3 data-format error, 4 numerical
failure, 1 other I/O failure. The DRIFTFUSE_THREADS environment variable
caps the sweep/ablate worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .config import ConfigError, apply_overrides, default_config_text, load_config
from .data import (
    DataFormatError,
    DomainStream,
    generate_synthetic,
    load_stream,
    read_features,
    read_features_csv,
    write_features,
    write_manifest,
)
from .reporting import (
    render_ablation_figure,
    render_accuracy_figure,
    render_sweep_figure,
    write_metrics_csv,
    write_report_json,
    write_rows_csv,
)
from .trainer import (
    NumericalError,
    TrainConfig,
    ablate,
    evaluate,
    load_checkpoint,
    resolve_workers,
    run_sequence,
    sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a key=value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N and data.seed=N")


def _load_configs(args):
    synth, train = load_config(args.config)
    synth, train = apply_overrides(synth, train, args.overrides)
    if getattr(args, "seed", None) is not None:
        synth, train = apply_overrides(
            synth, train, [f"data.seed={args.seed}", f"train.seed={args.seed}"]
        )
    return synth, train


def cmd_gen(args) -> int:
    synth, _ = _load_configs(args)
    stream = generate_synthetic(synth)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, (train, test) in zip(stream.domain_names, stream.tasks):
        write_features(os.path.join(args.out_dir, f"{name}.difz"), [train, test], stream.num_classes)
    for name, test in zip(stream.domain_names[stream.num_tasks :], stream.unseen):
        write_features(os.path.join(args.out_dir, f"{name}.difz"), test, stream.num_classes)
    write_manifest(
        os.path.join(args.out_dir, "manifest.txt"),
        stream.domain_names,
        comments=[f"generated with data seed {synth.seed}"],
    )
    print(f"wrote {len(stream.domain_names)} domain files to {args.out_dir}")
    return EXIT_OK


def _stream_from_dir(data_dir: str, train_records: int) -> DomainStream:
    return load_stream(data_dir, train_records)


def cmd_train(args) -> int:
    synth, cfg = _load_configs(args)
    if args.replay:
        with open(args.replay, "r", encoding="utf-8") as fh:
            echo = json.load(fh)
        try:
            cfg = TrainConfig(**echo["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.replay}: not a usable report echo ({exc})") from exc
    stream = _stream_from_dir(args.data_dir, synth.samples_per_domain)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.bin")
    matrix, report = run_sequence(
        stream,
        cfg,
        checkpoint_path=ckpt,
        resume=args.resume,
        stop_after_task=args.stop_after_task,
    )
    write_metrics_csv(os.path.join(args.out_dir, "metrics.csv"), matrix, stream.domain_names)
    payload = report.to_dict()
    payload["data_dir"] = os.path.abspath(args.data_dir)
    payload["data_config"] = asdict(synth)
    write_report_json(os.path.join(args.out_dir, "report.json"), payload)
    if args.plots:
        render_accuracy_figure(os.path.join(args.out_dir, "accuracy.svg"), matrix, stream.domain_names)
    print(
        f"avg={report.avg:.4f} last={report.last:.4f}"
        + (f" unseen={report.unseen_acc:.4f}" if report.unseen_acc is not None else "")
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.data.endswith(".csv"):
        ff = read_features_csv(args.data)
    else:
        ff = read_features(args.data)
    acc = evaluate(state["model"], ff.batch)
    print(f"accuracy={acc:.17g} over {len(ff.batch)} records")
    if args.json:
        write_report_json(args.json, {"accuracy": acc, "records": len(ff.batch), "data": os.path.abspath(args.data)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    synth, cfg = _load_configs(args)
    stream = _stream_from_dir(args.data_dir, synth.samples_per_domain)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = ablate(stream, cfg, seeds)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "ablation.csv")
    write_rows_csv(out, rows, ["row", "disentangle_on", "fusion_on", "swap_on", "seed", "avg", "last"])
    if args.plots:
        render_ablation_figure(os.path.join(args.out_dir, "ablation.svg"), rows)
    for label in dict.fromkeys(r["row"] for r in rows):
        vals = [r["avg"] for r in rows if r["row"] == label]
        print(f"{label:>14}: mean Avg = {float(np.mean(vals)):.4f} over {len(vals)} seed(s)")
    return EXIT_OK


def _parse_grid(arg: str | None, default: tuple[float, ...]) -> tuple[float, ...]:
    if arg is None:
        return default
    try:
        return tuple(float(v) for v in arg.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad grid value in {arg!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    synth, cfg = _load_configs(args)
    stream = _stream_from_dir(args.data_dir, synth.samples_per_domain)
    q_values = _parse_grid(args.q_values, (0.1, 0.3, 0.5, 0.9))
    lam_values = _parse_grid(args.lam_values, (1.0, 3.0, 5.0, 7.0, 9.0))
    if not q_values and not lam_values:
        raise ConfigError("sweep grid is empty")
    rows = sweep(
        stream,
        cfg,
        q_values=q_values,
        lam_values=lam_values,
        fixed_q=args.fixed_q,
        fixed_lam=args.fixed_lam,
        workers=resolve_workers(args.workers),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    write_rows_csv(os.path.join(args.out_dir, "sweep.csv"), rows, ["q", "lam", "avg", "last", "seed"])
    if args.plots:
        render_sweep_figure(os.path.join(args.out_dir, "sweep.svg"), rows, args.fixed_q, args.fixed_lam)
    print(f"swept {len(rows)} grid points -> {os.path.join(args.out_dir, 'sweep.csv')}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.path
    if path.endswith(".difz"):
        ff = read_features(path)
        domains, counts = np.unique(ff.batch.domain_ids, return_counts=True)
        print(f"DIFZ v{ff.version}: {len(ff.batch)} records, dim={ff.feature_dim}, classes={ff.num_classes}")
        for d, c in zip(domains, counts):
            print(f"  domain {d}: {c} records")
    elif path.endswith(".csv"):
        ff = read_features_csv(path)
        print(f"CSV: {len(ff.batch)} records, dim={ff.feature_dim}, classes={ff.num_classes}")
    else:
        state = load_checkpoint(path)
        print(
            f"checkpoint: {state['completed_tasks']} task(s) done, "
            f"global_step={state['global_step']}, seed={state['config']['seed']}"
        )
    return EXIT_OK


def cmd_write_config(args) -> int:
    text = default_config_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftfuse",
        description="Domain-incremental learning engine over backbone feature files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic feature files")
    _common_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the domain sequence from feature files")
    _common_config_args(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plots", action="store_true", help="render accuracy curves as SVG")
    p.add_argument("--resume", action="store_true", help="continue from out-dir/checkpoint.bin")
    p.add_argument("--stop-after-task", type=int, default=None)
    p.add_argument("--replay", help="take the training config from a report.json echo")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".difz or .csv feature file")
    p.add_argument("--json", help="also write the accuracy to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four component rows")
    _common_config_args(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", help="comma-separated seeds shared across rows")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity grid over q and lambda")
    _common_config_args(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--q-values", help="comma-separated q grid (default 0.1,0.3,0.5,0.9)")
    p.add_argument("--lam-values", help="comma-separated lambda grid (default 1,3,5,7,9)")
    p.add_argument("--fixed-q", type=float, default=0.7)
    p.add_argument("--fixed-lam", type=float, default=5.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="describe a feature file or checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("write-config", help="print or write the default config template")
    p.add_argument("--out")
    p.set_defaults(func=cmd_write_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: train, sweep, verify, analyze, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import load_config, parse_assignment, write_resolved
from .errors import (
    ConfigError,
    ConvergenceError,
    DomainError,
    NotPositiveDefiniteError,
    NumericError,
    PretrainError,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "strategy": "strategy",
    "epsilon": "mixture.epsilon",
    "kl_weight": "mixture.kl_weight",
    "n_components": "mixture.n_components",
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "steps": "train.steps",
    "optimizer": "train.optimizer",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--out", default="mclora-out", help="output directory")
    p.add_argument("--seed", type=int, help="global seed (overrides MCLORA_SEED)")
    p.add_argument("--strategy", help="full | lora | monteclora | monteclora-sparse | monteclora-posthoc")
    p.add_argument("--epsilon", type=float, help="sample scaler")
    p.add_argument("--kl-weight", type=float, help="KL weight")
    p.add_argument("--n-components", type=int, help="mixture components")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--optimizer", help="adam | sgd")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set task.shift=0.5 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mclora", description="Monte Carlo mixture LoRA toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "fine-tune one model on the shifted task"),
        ("sweep", "run the strategy x learning-rate x batch-size x seed grid"),
        ("verify", "run the property checks and print PASS/FAIL per check"),
        ("analyze", "run the smoothing and estimator experiments"),
        ("bench", "time the samplers and the noise buffer"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel workers")
            p.add_argument("--no-plots", action="store_true")
        if name in ("analyze", "bench", "verify"):
            p.add_argument("--quick", action="store_true", help="smaller sample counts")
    return parser


def resolve(args) -> "Config":
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    for text in args.set:
        key, value = parse_assignment(text)
        overrides[key] = value
    return load_config(args.config, overrides)


# -- subcommands ----------------------------------------------------------------------


def cmd_train(cfg, out: Path, args) -> int:
    from .layer import save_checkpoint
    from .sweep import Cell, build_cell_model, cell_config, prepare
    from .trainer import train

    grid = cfg.grid(single=True)
    prepared = prepare(grid)
    cell = Cell(cfg.strategy, float(cfg.train.learning_rate), int(cfg.train.batch_size), int(cfg.seed))
    model = build_cell_model(grid, prepared.base, cell)
    record = train(model, prepared.target, cfg.train_config(), config_snapshot=cell_config(grid, cell))
    (out / "record.json").write_text(record.to_json() + "\n")
    with open(out / "runs.log", "a") as log:
        log.write(record.to_json(include_timing=True) + "\n")
    if model.adapters():
        save_checkpoint(out / "adapters.npz", model.adapters(), extra={"strategy": cfg.strategy})
    print(f"train status=ok strategy={cfg.strategy} val_acc={record.val_acc:.4f} val_nll={record.val_nll:.4f} "
          f"diverged={int(record.diverged)} steps={record.steps} wall_s={record.wall_s:.2f}")
    return EXIT_OK


def cmd_sweep(cfg, out: Path, args) -> int:
    from .sweep import emit_report, run_sweep

    result = run_sweep(cfg.grid(), out_dir=out, jobs=args.jobs)
    if all(r.failed for r in result):
        print(f"sweep status=failed cells={len(result)} failed={result.failed}", file=sys.stderr)
        return EXIT_NUMERIC
    emit_report(result, out, plots=not args.no_plots)
    print(f"sweep status=ok cells={len(result)} trained={result.trained} skipped={result.skipped} "
          f"failed={result.failed}")
    return EXIT_OK


def cmd_verify(cfg, out: Path, args) -> int:
    from .verify import run_checks

    results = run_checks(quick=args.quick, seed=cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r for r in results if not r.passed]
    (out / "verify.json").write_text(json.dumps([r._asdict() for r in results], indent=2) + "\n")
    print(f"verify status={'ok' if not failed else 'failed'} checks={len(results)} failed={len(failed)}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_analyze(cfg, out: Path, args) -> int:
    from .analysis import run_analysis

    tables = run_analysis(out, quick=args.quick, seed=cfg.seed, mixture=cfg.mixture)
    print(f"analyze status=ok experiments={len(tables)} out={out}")
    return EXIT_OK


def cmd_bench(cfg, out: Path, args) -> int:
    from .bench import bench_summary

    summary = bench_summary(out, quick=args.quick)
    print("bench status=ok " + " ".join(f"{k}={v:.3g}" for k, v in summary.items()))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "verify": cmd_verify, "analyze": cmd_analyze,
            "bench": cmd_bench}


def dispatch(command: str, cfg, args) -> int:
    if command not in COMMANDS:
        raise ValueError(f"unknown subcommand {command!r}")
    out = Path(args.out)
    write_resolved(cfg, out)
    return COMMANDS[command](cfg, out, args)


def _fail(kind: str, exc: BaseException, code: int, key=None) -> int:
    extra = f" key={key}" if key is not None else ""
    message = str(exc).replace("\n", " ")
    print(f"error kind={kind}{extra} message={message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return dispatch(args.command, cfg, args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG, exc.key)
    except (NumericError, ConvergenceError, NotPositiveDefiniteError, DomainError, PretrainError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors (including bad
arguments), 3 for runtime errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness.config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _truncate_log(path: Path, epoch: int) -> None:
    """Keep only records up to ``epoch`` so a resumed run continues the same file."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines(keepends=True)
            if ln.strip() and json.loads(ln)["epoch"] <= epoch]
    path.write_text("".join(keep))


def cmd_train(args) -> int:
    from .harness.runner import Trainer

    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train.jsonl"
    if args.resume:
        tr = Trainer.load(args.resume)
        mine, theirs = cfg.to_dict(), tr.cfg.to_dict()
        mine.pop("output_dir"), theirs.pop("output_dir")
        if mine != theirs:
            raise ConfigError("--resume checkpoint was written under a different config")
        _truncate_log(log, tr.epoch)
    else:
        tr = Trainer(cfg)
        log.unlink(missing_ok=True)
    epochs = range(1, cfg.train.epochs + 1)
    res = tr.run(log_path=log, checkpoint_dir=out / "checkpoints", checkpoint_epochs=epochs)
    tr.save(out / "model.ckpt")
    _print({"val_acc": res.val_acc, "test_acc": res.test_acc, "log": str(log), "model": str(out / "model.ckpt")})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness.experiments import interior_maximum, run_sweep

    cfg = load_config(args.config)
    if cfg.controller is not None:
        raise ConfigError("sweep runs pin the threshold scale; set controller to null")
    rows = run_sweep(cfg, cfg.output_dir)
    ok, best = interior_maximum(rows)
    _print({"rows": len(rows), "best": best, "interior_maximum": ok,
            "csv": str(Path(cfg.output_dir) / "sweep.csv")})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness.experiments import run_ablation

    cfg = load_config(args.config)
    _print(run_ablation(cfg, cfg.output_dir, args.variant))
    return EXIT_OK


def cmd_ood(args) -> int:
    from .harness.experiments import run_ood

    cfg = load_config(args.config)
    res = run_ood(cfg, args.model, cfg.output_dir)
    _print({k: v for k, v in res.items() if k != "entropy_histograms"})
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .harness.experiments import run_analyze

    cfg = load_config(args.config)
    rows = run_analyze(cfg, cfg.output_dir)
    _print([dict(zip(("theta", "rate", "neg_rate_slope", "gate", "gate_stderr"), r)) for r in rows])
    return EXIT_OK


def cmd_plot_data(args) -> int:
    from .harness.logio import emit_plot_csv

    out = args.out or str(Path(args.log).with_name(f"{args.figure}.csv"))
    n = emit_plot_csv(args.log, args.figure, out)
    _print({"csv": out, "rows": n})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snnreg", description="Spiking network training with adaptive threshold homeostasis.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="fixed threshold-scale sweep")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", help="race baseline, full AHSAR and one variant")
    s.add_argument("--config", required=True)
    s.add_argument("--variant", choices=("full", "no_rt", "no_dh"), default="full")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("ood", help="entropy-based OOD evaluation of a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(fn=cmd_ood)

    s = sub.add_parser("analyze", help="gate identity table under the OU membrane model")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("plot-data", help="emit the CSV behind one figure from a log")
    s.add_argument("--log", required=True)
    s.add_argument("--figure", required=True, choices=("sweep", "rates", "scales", "gain"))
    s.add_argument("--out")
    s.set_defaults(fn=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

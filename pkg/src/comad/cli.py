"""Command-line entry points.

    comad init-teachers --config cfg.toml --out-dir teachers/ --mode toy-pretrain
    comad distill --config cfg.toml --teachers-dir teachers/ --out-dir run/
    comad verify [--fault flip-kl-sign]
    comad inspect-gating --config cfg.toml --checkpoint run/final.ckpt --out alpha.jsonl
    comad probe --config cfg.toml --checkpoint run/final.ckpt

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, dump_config, load_config
from .errors import CheckpointError, ComadError
from .training import (
    CoMADModel,
    Trainer,
    build_teachers,
    linear_probe,
    load_dataset,
    load_teachers,
    save_teacher,
    toy_pretrain,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "steps", None) is not None and args.command == "distill":
        overrides["train.steps"] = args.steps
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_init_teachers(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out_dir)
    teachers = build_teachers(cfg)
    dataset = load_dataset(cfg) if args.mode == "toy-pretrain" else None
    for m, teacher in enumerate(teachers):
        mode = args.mode
        if m in cfg.teachers.noise:
            mode = "noise"
        elif args.mode == "toy-pretrain":
            res = toy_pretrain(teacher, dataset, steps=args.pretrain_steps, seed=cfg.teachers.init_seed + m)
            print(
                f"teacher {m}: reconstruction loss {res.initial_loss:.4f} -> {res.final_loss:.4f} "
                f"({100 * res.reduction:.1f}% lower)"
            )
        path = out / f"teacher_{m}.ckpt"
        save_teacher(path, teacher, cfg, m, mode)
        print(f"teacher {m}: wrote {path} ({mode}, checksum {teacher.checksum()[:12]})")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out_dir)
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, cfg)
        print(f"resumed from {args.resume} at step {trainer.step}")
    else:
        teachers = load_teachers(args.teachers_dir, cfg) if args.teachers_dir else None
        trainer = Trainer(cfg, model=CoMADModel(cfg, teachers))
    metrics = out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    every = max(1, trainer.total_steps // 10)

    def show(step, rep):
        if (step + 1) % every == 0 or step + 1 == trainer.total_steps:
            alpha = ", ".join(f"{a:.3f}" for a in rep.alpha_mean)
            print(f"step {step + 1:5d}/{trainer.total_steps}  total {rep.total:.5f}  alpha [{alpha}]", flush=True)

    trainer.run(metrics_path=metrics, on_step=show)
    ckpt = out / "final.ckpt"
    trainer.save(ckpt)
    print(f"wrote {ckpt} and {metrics}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    def show(res):
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] {res.name:16s} {res.detail} ({res.seconds:.1f}s)", flush=True)

    results = run_checks(fault=args.fault, report=show)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else 1


def cmd_inspect_gating(args) -> int:
    from .diagnostics import inspect_gating

    cfg = _config(args)
    stats = inspect_gating(args.checkpoint, cfg, n_batches=args.n_batches, out_path=args.out)
    for s in stats:
        print(f"teacher {s.teacher}: mean {s.mean:.4f} std {s.std:.4f} min {s.min:.4f} max {s.max:.4f} over {s.count} tokens")
    if args.out:
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(cfg, labeled=True)
    if args.checkpoint:
        student = Trainer.from_checkpoint(args.checkpoint, cfg, dataset=dataset).model.student
        what = args.checkpoint
    else:
        student = CoMADModel(cfg).student
        what = "untrained student"
    p = cfg.probe
    res = linear_probe(
        student, dataset, p.epochs, p.lr, p.weight_decay, cfg.data.holdout_fraction, cfg.data.seed
    )
    print(
        f"{what}: probe accuracy {res.accuracy:.4f} on {res.test_count} held-out images "
        f"(train {res.train_accuracy:.4f}, chance {res.chance:.4f})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comad", description="Multi-teacher masked distillation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        return p

    p = with_config(sub.add_parser("init-teachers", help="write one checkpoint per teacher"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("random", "toy-pretrain"), default="random")
    p.add_argument("--pretrain-steps", type=int, default=300)
    p.set_defaults(func=cmd_init_teachers)

    p = with_config(sub.add_parser("distill", help="train the student against the teachers"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--teachers-dir", help="directory holding teacher_{m}.ckpt (random teachers when omitted)")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides train.steps)")
    p.add_argument("--resume", help="distillation checkpoint to continue from")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("verify", help="run the property and gradient-check suite in f64")
    p.add_argument("--fault", choices=("flip-kl-sign",), help="inject a known bug (negative control)")
    p.set_defaults(func=cmd_verify)

    p = with_config(sub.add_parser("inspect-gating", help="per-teacher gating weight statistics"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-batches", type=int, default=4)
    p.add_argument("--out", help="JSON-lines output file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inspect_gating)

    p = with_config(sub.add_parser("probe", help="linear probe on the student's class token"))
    p.add_argument("--checkpoint", help="distillation checkpoint (untrained student when omitted)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except ComadError as exc:
        print(f"comad {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"comad {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

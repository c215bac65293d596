"""Operator surface: train / eval / predict / ablate / inspect.

Every subcommand validates its full configuration before touching the
filesystem. Failures exit nonzero with a single `error: ...` line on
stderr.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_run_config


def _cmd_train(args) -> None:
    from .train import train

    run = load_run_config(args.config)
    result = train(run, args.out)
    print(f"trained {result.iterations} iterations, final loss {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path}")


def _cmd_eval(args) -> None:
    from .train import evaluate

    run = load_run_config(args.config)
    report, text_path, kv_path = evaluate(run, args.checkpoint, args.out)
    print(f"mIoU {100 * report.m_iou:.2f}%  mFsc {100 * report.m_fsc:.2f}%  "
          f"aAcc {100 * report.a_acc:.2f}%")
    print(f"reports: {text_path} {kv_path}")


def _cmd_predict(args) -> None:
    from .train import predict

    run = load_run_config(args.config)
    written = predict(run, args.checkpoint, args.rgb, args.depth, args.out,
                      allow_pad=args.pad)
    print(f"wrote {len(written)} files to {args.out}")


def _cmd_ablate(args) -> None:
    from .train import ablate, ablation_table

    run = load_run_config(args.config)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes must list at least one mode")
    rows, table_path = ablate(run, modes, args.out)
    print(ablation_table(rows), end="")
    print(f"report: {table_path}")


def _cmd_inspect(args) -> None:
    from .train import inspect_checkpoint

    print(inspect_checkpoint(args.checkpoint), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfit",
        description="RGB-depth scene parsing with a frozen ViT and a trainable side adapter",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the adapter")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override train.out_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="segment one RGB-depth pair")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pad", action="store_true",
                   help="pad inputs to a multiple of 32 and crop the outputs back")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="train and evaluate ablation modes")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", required=True, help="comma-separated mode list")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("inspect", help="parameter counts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError, AssertionError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synthesis, validation, training, evaluation, scoring.

Exit codes: 0 success, 2 configuration/data/format problems, 3 numerical
failure during training, 4 failed verification (gradcheck above tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bundle import SyntheticSpec, generate_synthetic, load_bundle, write_bundle
from .config import TrainConfig, config_hash
from .detector import dump_scores, evaluate
from .errors import ConfigError, DataError, NumericalError
from .objective import finite_difference_check
from .trainer import load_checkpoint, save_checkpoint, train

__all__ = ["main"]

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"
RUN_CONFIG_NAME = "run_config.json"
REPORT_NAME = "report.json"
SCORES_NAME = "scores.jsonl"
GRADCHECK_TOLERANCE = 1e-5

_ABLATION_FLAGS = (
    "disable_ood_loss",
    "disable_entropy_gain_selection",
    "disable_cross_scale_fusion",
    "disable_lower_scale_propagation",
)


def _spec_from_dict(data: dict) -> SyntheticSpec:
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown synthesis keys: {unknown}")
    return SyntheticSpec(**data)


def _bundle_summary(bundle) -> str:
    manifest = bundle.manifest
    labeled = sum(1 for item in manifest.items if item.label >= 0)
    outliers = len(manifest.items) - labeled
    return (
        f"{len(manifest.items)} items ({labeled} labeled, {outliers} outliers), "
        f"d={manifest.d}, n={manifest.n}, classes={manifest.num_classes}"
    )


def _cmd_synth(args: argparse.Namespace) -> int:
    data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = _spec_from_dict(data)
    bundle = generate_synthetic(spec, seed=args.seed)
    write_bundle(bundle, args.out)
    print(f"wrote bundle to {args.out}: {_bundle_summary(bundle)}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    print(f"OK: {args.bundle}: {_bundle_summary(bundle)}")
    return 0


def _train_config(args: argparse.Namespace, bundle) -> TrainConfig:
    data = (
        json.loads(Path(args.config).read_text(encoding="utf-8"))
        if args.config
        else {}
    )
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    for name in ("seed", "epochs", "batch_size", "k", "lr", "tau", "lambda_ood"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    for flag in _ABLATION_FLAGS:
        if getattr(args, flag):
            data.setdefault("ablations", {})[flag] = True
    if "n" not in data:
        data["n"] = bundle.manifest.n
    return TrainConfig.from_dict(data)


def _cmd_train(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _train_config(args, bundle)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME
    if args.resume is None and log_path.exists():
        log_path.unlink()
    result = train(
        bundle,
        cfg,
        log_path=log_path,
        stop_after=args.stop_after,
        resume=args.resume,
    )
    checkpoint_path = out_dir / CHECKPOINT_NAME
    save_checkpoint(checkpoint_path, result.state, cfg)
    run_config = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "bundle": str(args.bundle),
        "epochs_completed": result.state.epoch,
        "steps_completed": result.state.step,
    }
    (out_dir / RUN_CONFIG_NAME).write_text(
        json.dumps(run_config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for record in result.log:
        print(
            f"epoch {record.epoch}: lr={record.lr:.6g} l_id={record.l_id:.6f} "
            f"l_ood={record.l_ood:.6f} total={record.total:.6f}"
        )
    print(
        f"saved checkpoint to {checkpoint_path} "
        f"(epoch {result.state.epoch}, step {result.state.step}, "
        f"config {config_hash(cfg)})"
    )
    return 0


def _load_eval_inputs(args: argparse.Namespace):
    state, cfg = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    manifest = bundle.manifest
    d, num_classes = state.params.b0.shape
    if (manifest.d, manifest.num_classes) != (d, num_classes):
        raise ConfigError(
            f"checkpoint is for d={d}, classes={num_classes} but the bundle "
            f"has d={manifest.d}, classes={manifest.num_classes}"
        )
    if manifest.n != cfg.n:
        raise ConfigError(
            f"checkpoint config n={cfg.n} does not match the bundle's n={manifest.n}"
        )
    return state, cfg, bundle


def _print_report(report) -> None:
    acc = "n/a" if report.acc is None else f"{report.acc:.4f}"
    print(f"acc {acc} ({report.num_id} labeled, {report.num_ood} outliers)")
    if report.ood_metrics_available:
        print(f"auroc {report.auroc:.4f}")
        print(f"fpr95 {report.fpr95:.4f} (threshold {report.threshold_used:.6g})")
    else:
        print("auroc n/a (need both labeled and outlier items)")
    print(f"config {report.config_hash}")


def _cmd_eval(args: argparse.Namespace) -> int:
    state, cfg, bundle = _load_eval_inputs(args)
    report, scored = evaluate(bundle, state.params, cfg)
    _print_report(report)
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_NAME).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        dump_scores(out_dir / SCORES_NAME, scored)
        print(f"wrote {REPORT_NAME} and {SCORES_NAME} to {out_dir}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    state, cfg, bundle = _load_eval_inputs(args)
    _, scored = evaluate(bundle, state.params, cfg)
    dump_scores(args.out, scored)
    print(f"wrote {len(scored)} scores to {args.out}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = finite_difference_check(
        d=args.d,
        num_classes=args.num_classes,
        n=args.n,
        batch_size=args.batch,
        k=args.k,
        seeds=args.seeds,
        corrupt=args.corrupt,
    )
    print(
        f"max relative error {worst:.3e} over {args.seeds} seeds "
        f"(tolerance {GRADCHECK_TOLERANCE:.1e})"
    )
    if worst <= GRADCHECK_TOLERANCE:
        print("OK")
        return 0
    print("FAIL")
    return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msood",
        description=(
            "Hierarchical vision-language out-of-distribution detection over "
            "precomputed embedding bundles."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic bundle")
    p_synth.add_argument("--spec", required=True, help="JSON file of synthesis settings")
    p_synth.add_argument("--out", required=True, help="output bundle directory")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=_cmd_synth)

    p_validate = sub.add_parser("validate", help="check a bundle directory")
    p_validate.add_argument("bundle", help="bundle directory")
    p_validate.set_defaults(func=_cmd_validate)

    p_train = sub.add_parser("train", help="train adapter and text biases")
    p_train.add_argument("--bundle", required=True)
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--config", help="JSON file of config overrides")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--stop-after", type=int, help="stop after this many epochs")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--k", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--tau", type=float)
    p_train.add_argument("--lambda-ood", type=float, dest="lambda_ood")
    for flag in _ABLATION_FLAGS:
        p_train.add_argument(
            f"--{flag.replace('_', '-')}", action="store_true", dest=flag
        )
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--bundle", required=True)
    p_eval.add_argument("--out-dir", help="write report.json and scores.jsonl here")
    p_eval.set_defaults(func=_cmd_eval)

    p_score = sub.add_parser("score", help="write per-item scores as JSON lines")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--bundle", required=True)
    p_score.add_argument("--out", required=True)
    p_score.set_defaults(func=_cmd_score)

    p_grad = sub.add_parser(
        "gradcheck", help="compare analytic gradients against finite differences"
    )
    p_grad.add_argument("--d", type=int, default=8)
    p_grad.add_argument("--num-classes", type=int, default=3, dest="num_classes")
    p_grad.add_argument("--n", type=int, default=2)
    p_grad.add_argument("--batch", type=int, default=2)
    p_grad.add_argument("--k", type=int, default=2)
    p_grad.add_argument("--seeds", type=int, default=20)
    p_grad.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p_grad.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

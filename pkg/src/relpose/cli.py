"""``relpose`` command line: train, eval, ablate, synth, report.

Failures print a single ``error: <Category>: <message>`` line on stderr and
exit with status 1.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from relpose.config import RunConfig, load_config, render_config
from relpose.data import load_pairs, save_pairs, save_synthetic, split, synth_scene
from relpose.errors import ConfigError, EmptyDataset, RelPoseError
from relpose.evaluate import EvalReport, evaluate, write_predictions, write_report
from relpose.regressor import VARIANTS, RelPoseNet
from relpose.report import emit_distribution, read_error_csv
from relpose.tensorio import load_checkpoint
from relpose.training import load_model_state, predict, train

log = logging.getLogger("relpose")


def _splits(cfg: RunConfig):
    records = load_pairs(cfg.manifest, cfg.convention, cfg.swap)
    return split(records, cfg.split_ratios, cfg.split_seed)


def _train_run(cfg: RunConfig, out: Path, resume=None):
    train_set, val_set, test_set = _splits(cfg)
    if not train_set:
        raise EmptyDataset("training split is empty; check data.split_ratios")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.source is not None and cfg.source.resolve() != (out / "config.ini").resolve():
        shutil.copyfile(cfg.source, out / "config.ini")
    for name, part in (("train", train_set), ("val", val_set), ("test", test_set)):
        if part:
            save_pairs(out / f"{name}.txt", part)
    model = RelPoseNet(cfg.model, seed=cfg.model_seed)
    result = train(model, train_set, val_set, cfg.train, log_path=out / "train_log.csv", out_dir=out, resume=resume)
    return model, result, (train_set, val_set, test_set)


def _print_report(report: EvalReport, out: Path) -> None:
    for s in report.scenes:
        print(f"{s.scene}\t{s.median_rotation_deg:.3f} deg\t{s.median_translation_m:.4f} m\t({s.pair_count} pairs)")
    print(f"Average\t{report.average_rotation_deg:.3f} deg\t{report.average_translation_m:.4f} m")
    if report.skipped:
        print(f"skipped {report.skipped} pairs with degenerate predictions")
    print(f"report written to {out}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _, result, _ = _train_run(cfg, cfg.output_dir, resume=args.resume)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch}; "
          f"final train loss {last.train_loss:.5f}; checkpoints in {cfg.output_dir}")
    return 0


def _eval_config(args) -> RunConfig:
    path = Path(args.config) if args.config else Path(args.checkpoint).parent / "config.ini"
    if not path.is_file():
        raise ConfigError(f"no config for checkpoint (looked for {path}); pass --config", key="config")
    return load_config(path, check_paths=False)


def cmd_eval(args) -> int:
    cfg = _eval_config(args)
    model = RelPoseNet(cfg.model, seed=cfg.model_seed)
    load_model_state(model, load_checkpoint(args.checkpoint))
    records = load_pairs(args.pairs, cfg.convention)
    preds = predict(model, records, cfg.train.batch_size)
    report = evaluate(records, preds, scale_align=args.scale_align, scale_mode=args.scale_mode, pooled=args.pooled)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    write_report(out, report, cutoff_deg=args.cutoff_deg)
    write_predictions(out / "predictions.txt", records, preds)
    _print_report(report, out)
    return 0


def cmd_ablate(args) -> int:
    if args.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {args.variant!r}", key="variant")
    cfg = load_config(args.config)
    cfg = replace(cfg, model=replace(cfg.model, variant=args.variant))
    out = cfg.output_dir / f"ablate_{args.variant}"
    model, result, (train_set, _, test_set) = _train_run(cfg, out)
    if (out / "config.ini").exists():
        _set_variant(out / "config.ini", args.variant)
    load_model_state(model, result.best_state)
    records = test_set or train_set
    preds = predict(model, records, cfg.train.batch_size)
    report = evaluate(records, preds, scale_align=args.scale_align, pooled=args.pooled)
    write_report(out / "eval", report)
    print(f"variant {args.variant}: evaluated on {'test' if test_set else 'train'} split")
    _print_report(report, out / "eval")
    return 0


def _set_variant(path: Path, variant: str) -> None:
    # keep the copied config consistent with the trained variant so that
    # `relpose eval` on the ablation checkpoint rebuilds the same network
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.read(path)
    if not parser.has_section("run"):
        parser.add_section("run")
    parser.set("run", "variant", variant)
    with open(path, "w") as f:
        parser.write(f)


def cmd_synth(args) -> int:
    scene, records = synth_scene(args.seed, n_pairs=args.pairs, image_size=(args.size, args.size))
    out = Path(args.out)
    manifest = save_synthetic(out, scene, records)
    config = out / "config.ini"
    if not config.exists():
        config.write_text(render_config({
            "data": {"manifest": manifest.name, "split_seed": args.seed, "split_ratios": (0.8, 0.1, 0.1)},
            "extractor": {"channels": 32, "layers": 2, "heads": 4, "widths": (16, 32, 32)},
            "optim": {"epochs": 200, "batch_size": 8, "seed": args.seed},
            "run": {"output_dir": "run"},
        }))
    print(f"wrote {len(records)} pairs to {manifest}")
    return 0


def cmd_report(args) -> int:
    rot, trans = read_error_csv(args.errors)
    out = Path(args.out) if args.out else Path(args.errors).parent / "report"
    info = emit_distribution(out, "rotation", rot, "degrees", args.bin_width, args.cutoff_deg)
    emit_distribution(out, "translation", trans, "meters", args.bin_width_m)
    msg = f"{info['pairs']} pairs"
    if args.cutoff_deg is not None:
        msg += f"; {info['kept']} ({100 * info['fraction_kept']:.1f}%) at or below {args.cutoff_deg:g} deg"
    print(f"{msg}; written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relpose", description="Relative camera pose regression from image pairs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint (last.rpck) to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a pair manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pairs", required=True)
    e.add_argument("--config", help="defaults to config.ini next to the checkpoint")
    e.add_argument("--scale-align", action="store_true", help="fit one translation scale per scene")
    e.add_argument("--scale-mode", choices=("lsq", "median"), default="lsq")
    e.add_argument("--pooled", action="store_true", help="average over all pairs instead of scene medians")
    e.add_argument("--cutoff-deg", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    a.add_argument("--config", required=True)
    a.add_argument("--variant", required=True)
    a.add_argument("--scale-align", action="store_true")
    a.add_argument("--pooled", action="store_true")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic scene with ground-truth poses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs", type=int, default=32)
    s.add_argument("--size", type=int, default=64, help="square image size in pixels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="CDF and histogram files from a per-pair error CSV")
    r.add_argument("--errors", required=True)
    r.add_argument("--cutoff-deg", type=float)
    r.add_argument("--bin-width", type=float, default=1.0, help="rotation bin width in degrees")
    r.add_argument("--bin-width-m", type=float, default=0.05, help="translation bin width in meters")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except RelPoseError as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen-data, train, eval, visualize, gradcheck, ablate.

Config precedence is defaults < --config file < explicit flags.  Every
command exits 0 on success; failures print a single ``error: ...`` line to
stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_image_folder, write_image_folder
from .evaluation import evaluate, export_attention
from .experiment import ablate, eval_dataset, train_dataset, write_json
from .gradcheck import run_suite
from .model import FaceModel, Variant, load_checkpoint, read_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("occlusion_attn")


class CliError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def resolve_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_json(args.config)
    elif getattr(args, "checkpoint", None) and (Path(args.checkpoint).parent / "config.json").exists():
        cfg = TrainConfig.from_json(Path(args.checkpoint).parent / "config.json")
    else:
        cfg = TrainConfig()
    overrides = {}
    for flag, key in (("variant", "variant"), ("ma", "ma_probability"), ("seed", "seed"),
                      ("epochs", "total_epochs"), ("far_grid", "far_grid")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if "total_epochs" in overrides and overrides["total_epochs"] <= cfg.warmup_epochs:
        overrides["warmup_epochs"] = max(0, overrides["total_epochs"] - 1)
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def _require(args, name: str) -> str:
    value = getattr(args, name)
    if not value:
        raise CliError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


def _load_model(cfg: TrainConfig, checkpoint) -> FaceModel:
    path = Path(checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    arrays = read_checkpoint(path)
    if "arcface.weight" not in arrays:
        raise CliError(f"{path}: checkpoint has no arcface.weight")
    model = FaceModel(cfg.model_config(arrays["arcface.weight"].shape[1]))
    load_checkpoint(model, path)
    model.eval()
    return model


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(args, "out_dir"))
    write_image_folder(train_dataset(cfg), out / "train")
    write_image_folder(eval_dataset(cfg), out / "eval")
    print(f"wrote {out / 'train'} and {out / 'eval'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(args, "out_dir"))
    dataset = load_image_folder(args.data_dir) if args.data_dir else train_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, dataset, out)
    last = result.log[-1]
    print(f"trained {cfg.variant} for {cfg.total_epochs} epochs: "
          f"loss {last['loss_total']:.4f}, checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = _load_model(cfg, _require(args, "checkpoint"))
    dataset = load_image_folder(args.data_dir) if args.data_dir else eval_dataset(cfg)
    report = {"variant": cfg.variant, "ma": cfg.ma_probability, "seed": cfg.seed}
    report.update(evaluate(model, dataset, cfg.seed, cfg.n_genuine, cfg.n_impostor,
                           cfg.far_grid))
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out_dir) / "report.json", report)
    print(json.dumps(report, indent=2))
    return 0


def cmd_visualize(args) -> int:
    cfg = resolve_config(args)
    model = _load_model(cfg, _require(args, "checkpoint"))
    if model.variant.attention is None:
        raise CliError(f"variant {cfg.variant} has no spatial attention to visualize")
    dataset = load_image_folder(args.data_dir) if args.data_dir else eval_dataset(cfg)
    masked = np.flatnonzero(dataset.masked)[: args.count]
    clean = np.flatnonzero(~dataset.masked)[: args.count]
    idx = np.concatenate([masked, clean])
    files = export_attention(model, dataset.images[idx], _require(args, "out_dir"))
    print(f"wrote {len(files)} files to {args.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(f"gradcheck failed for {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    variants = args.variants or [cfg.variant]
    for v in variants:
        try:
            Variant(v)
        except ValueError:
            raise CliError(f"unknown variant: {v}") from None
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    out = Path(_require(args, "out_dir"))
    ablate(cfg, variants, seeds, out)
    print((out / "ablation.txt").read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="occlusion-attn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, training=True):
        p.add_argument("--config", help="JSON file with TrainConfig fields")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)
        if training:
            p.add_argument("--variant", choices=[v.value for v in Variant])
            p.add_argument("--ma", type=float, help="mask augmentation probability")
            p.add_argument("--epochs", type=int)
            p.add_argument("--data-dir", dest="data_dir", help="image folder instead of synthetic data")
            p.add_argument("--far-grid", dest="far_grid", type=_floats)
            p.add_argument("--checkpoint")
        return p

    common(sub.add_parser("gen-data", help="write the synthetic train/eval image folders"))
    common(sub.add_parser("train", help="train one variant"))
    common(sub.add_parser("eval", help="verification + localization report"))
    vis = common(sub.add_parser("visualize", help="export attention maps as PPM/PGM"))
    vis.add_argument("--count", type=int, default=4, help="masked and clean images to export")
    common(sub.add_parser("gradcheck", help="finite-difference suite"), training=False)
    abl = common(sub.add_parser("ablate", help="variant x seed grid with a summary table"))
    abl.add_argument("--variants", type=_names)
    abl.add_argument("--seeds", type=_ints)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "visualize": cmd_visualize, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

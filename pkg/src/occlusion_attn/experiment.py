"""Train-then-evaluate runs and the variant x seed ablation grid."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import Dataset, make_eval_dataset, make_synthetic_dataset
from .evaluation import evaluate
from .model import Variant
from .training import TrainConfig, train

log = logging.getLogger(__name__)

THREADS_ENV = "OCCLUSION_ATTN_THREADS"


def train_dataset(cfg: TrainConfig) -> Dataset:
    return make_synthetic_dataset(cfg.seed, cfg.n_identities, cfg.samples_per_identity,
                                  cfg.image_size)


def eval_dataset(cfg: TrainConfig) -> Dataset:
    """Held-out identities (indices after the training ones), clean + masked copies."""
    return make_eval_dataset(cfg.seed, cfg.eval_identities, cfg.eval_samples_per_identity,
                             cfg.image_size, identity_offset=cfg.n_identities,
                             cfg=cfg.augment_config())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def run_experiment(cfg: TrainConfig, out_dir, dataset: Dataset | None = None) -> dict:
    """Train one (variant, seed) cell and write config.json, metrics, checkpoint, report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, dataset if dataset is not None else train_dataset(cfg), out)
    report = {"variant": cfg.variant, "ma": cfg.ma_probability, "seed": cfg.seed}
    report.update(evaluate(result.model, eval_dataset(cfg), cfg.seed, cfg.n_genuine,
                           cfg.n_impostor, cfg.far_grid))
    report["final_mask_acc"] = result.log[-1]["mask_acc"]
    write_json(out / "report.json", report)
    return report


def _cell(args) -> dict:
    cfg, out_dir = args
    try:
        return {"status": "ok", **run_experiment(cfg, out_dir)}
    except Exception as exc:  # a failed cell must not sink the grid
        log.exception("cell %s seed %s failed", cfg.variant, cfg.seed)
        return {"status": "failed", "variant": cfg.variant, "seed": cfg.seed,
                "ma": cfg.ma_probability, "error": f"{type(exc).__name__}: {exc}"}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


METRICS = {
    "masked_tar@0.01": lambda r: r["tar_at_far"]["masked_probe"]["0.01"],
    "clean_tar@0.01": lambda r: r["tar_at_far"]["clean"]["0.01"],
    "masked_acc": lambda r: r["masked_accuracy"],
    "clean_acc": lambda r: r["clean_accuracy"],
    "a_um_in_mask": lambda r: r["a_um_mass_in_mask"],
    "a_m_in_mask": lambda r: r["a_m_mass_in_mask"],
}


def aggregate(rows: list[dict], variants: list[str], ma: float) -> list[dict]:
    out = []
    for v in variants:
        ok = [r for r in rows if r["variant"] == v and r["status"] == "ok"]
        agg = {"variant": v, "row": Variant(v).row_name(ma), "n_seeds": len(ok)}
        for name, get in METRICS.items():
            vals = [get(r) for r in ok if get(r) is not None]
            if not vals:
                agg[name] = None
                continue
            agg[name] = {"mean": float(np.mean(vals))}
            if len(vals) > 1:
                agg[name]["sd"] = float(np.std(vals, ddof=1))
        out.append(agg)
    return out


def format_table(rows: list[dict], aggregates: list[dict], ma: float) -> str:
    header = ["Model", "seed"] + list(METRICS)
    lines = []
    for r in rows:
        name = Variant(r["variant"]).row_name(ma)
        if r["status"] != "ok":
            lines.append([name, str(r["seed"])] + ["failed"] * len(METRICS))
            continue
        lines.append([name, str(r["seed"])] +
                     ["-" if (x := get(r)) is None else f"{100 * x:.2f}" for get in METRICS.values()])
    for a in aggregates:
        cells = []
        for name in METRICS:
            m = a[name]
            if m is None:
                cells.append("-")
            elif "sd" in m:
                cells.append(f"{100 * m['mean']:.2f}±{100 * m['sd']:.2f}")
            else:
                cells.append(f"{100 * m['mean']:.2f}")
        lines.append([a["row"], "mean"] + cells)
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, lines)]) + "\n"


def ablate(cfg: TrainConfig, variants: list[str], seeds: list[int], out_dir) -> dict:
    """Every (variant, seed) cell, then a consolidated JSON + aligned text table."""
    if not variants or not seeds:
        raise ValueError("ablation needs at least one variant and one seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(replace(cfg, variant=Variant(v).value, seed=s), out / f"{v}_seed{s}")
            for v in variants for s in seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_cell, jobs))
    else:
        rows = [_cell(job) for job in jobs]
    aggregates = aggregate(rows, [Variant(v).value for v in variants], cfg.ma_probability)
    report = {"ma": cfg.ma_probability, "runs": rows, "aggregates": aggregates}
    write_json(out / "ablation.json", report)
    (out / "ablation.txt").write_text(format_table(rows, aggregates, cfg.ma_probability),
                                      encoding="utf-8")
    return report

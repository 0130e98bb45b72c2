#!/usr/bin/env python3
"""Train and evaluate a variant x seed grid and print the summary table.

Defaults reproduce the desk-scale ablation: baseline, MFSA + CAL, CBAM + CAL
and Baseline + Adv at MA=0.5 over seeds 0-2, then check the three directional
expectations (masked TAR, clean-drop ordering, localization).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from occlusion_attn.experiment import ablate
from occlusion_attn.training import TrainConfig


def seed_mean(report: dict, variant: str, get) -> float | None:
    vals = [get(r) for r in report["runs"] if r["variant"] == variant and r["status"] == "ok"]
    return float(np.mean(vals)) if vals else None


def directional_checks(report: dict) -> list[str]:
    masked = lambda r: r["tar_at_far"]["masked_probe"]["0.01"]
    clean = lambda r: r["tar_at_far"]["clean"]["0.01"]
    names = {r["variant"] for r in report["runs"]}
    lines = []
    if {"mfsa_cal", "baseline"} <= names:
        a, b = seed_mean(report, "mfsa_cal", masked), seed_mean(report, "baseline", masked)
        lines.append(f"masked TAR@0.01  mfsa_cal {a:.4f} vs baseline {b:.4f}: "
                     f"{'ok' if a >= b else 'not met'}")
    if {"baseline", "cbam_cal", "baseline_adv"} <= names:
        base = seed_mean(report, "baseline", clean)
        d_cal = base - seed_mean(report, "cbam_cal", clean)
        d_adv = base - seed_mean(report, "baseline_adv", clean)
        lines.append(f"clean TAR@0.01 drop  cbam_cal {d_cal:+.4f} vs baseline_adv {d_adv:+.4f}: "
                     f"{'ok' if d_cal <= d_adv else 'not met'}")
    if "mfsa_cal" in names:
        share = seed_mean(report, "mfsa_cal", lambda r: r["mask_region_share"])
        a_um = seed_mean(report, "mfsa_cal", lambda r: r["a_um_mass_in_mask"])
        a_m = seed_mean(report, "mfsa_cal", lambda r: r["a_m_mass_in_mask"])
        ok = a_um < 0.5 * share and a_m > share
        lines.append(f"mask-region mass  A_um {a_um:.3f} (< {0.5 * share:.3f}), "
                     f"A_m {a_m:.3f} (> {share:.3f}): {'ok' if ok else 'not met'}")
    return lines


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON TrainConfig (defaults to the desk-scale settings)")
    ap.add_argument("--variants", default="baseline,mfsa_cal,cbam_cal,baseline_adv")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--ma", type=float, default=None)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out-dir", default="runs/ablation")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.ma is not None:
        overrides["ma_probability"] = args.ma
    if args.epochs is not None:
        overrides["total_epochs"] = args.epochs
        overrides["warmup_epochs"] = min(cfg.warmup_epochs, args.epochs - 1)
    cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})

    variants = [v for v in args.variants.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out = Path(args.out_dir)
    report = ablate(cfg, variants, seeds, out)
    print((out / "ablation.txt").read_text(encoding="utf-8"))
    for line in directional_checks(report):
        print(line)
    failed = [r for r in report["runs"] if r["status"] != "ok"]
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())

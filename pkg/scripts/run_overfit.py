"""Memorize eight captioned clips; report the loss drop and FK reconstruction error."""

import argparse
import json
from dataclasses import fields

import torch

from textmotion.experiments import OverfitConfig, run_overfit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    for f in fields(OverfitConfig):
        if f.name == "widths":
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    parser.add_argument("--widths", default=None, help="comma-separated widths")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--report", default="overfit_report.json")
    args = parser.parse_args()
    torch.set_num_threads(args.threads)
    cfg = OverfitConfig(**{f.name: getattr(args, f.name) for f in fields(OverfitConfig) if f.name != "widths"})
    if args.widths:
        cfg.widths = tuple(int(w) for w in args.widths.split(","))
    report = run_overfit(cfg)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    print(f"loss ratio {report['loss_ratio']:.4f}  mean joint error {report['mean_joint_error']:.4f}"
          f"  (0.2 x height = {0.2 * report['skeleton_height']:.4f})")


if __name__ == "__main__":
    main()

"""Synthesize, train both stages, sample with guidance and score; writes a JSON report."""

import argparse
import json
from dataclasses import fields

import torch

from textmotion.experiments import DeskConfig, run_desk_pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    for f in fields(DeskConfig):
        if f.name in ("evaluator", "widths"):
            continue
        kind = str if f.default is None else type(f.default)
        parser.add_argument("--" + f.name.replace("_", "-"), type=kind, default=f.default)
    parser.add_argument("--widths", default=None, help="comma-separated widths")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--report", default="desk_report.json")
    args = parser.parse_args()
    torch.set_num_threads(args.threads)
    cfg = DeskConfig(**{f.name: getattr(args, f.name) for f in fields(DeskConfig) if f.name not in ("evaluator", "widths")})
    if args.widths:
        cfg.widths = tuple(int(w) for w in args.widths.split(","))
    report = run_desk_pipeline(cfg)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    for key in sorted(report):
        print(f"{key}\t{report[key]}")


if __name__ == "__main__":
    main()

"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with flat ``key=value`` lines whose
keys are the flag names (dashes or underscores). Flags given on the command
line override the file. Exit codes: 0 success, 2 usage or configuration,
3 data, 4 numerical.
"""

import argparse
import json
import os
import subprocess
import sys
import time
from collections import Counter
from dataclasses import fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from textmotion import evaluation
from textmotion.dataset import (
    FAMILIES,
    DatasetSpec,
    caption_class,
    compute_stats,
    extract_static_pairs,
    generate_dataset,
    load_motion,
    load_stats,
    mark_unconditional,
    mirror_corpus,
    read_dataset,
    save_motion,
    write_dataset,
)
from textmotion.diffusion import DEFAULT_CLAMP
from textmotion.errors import BadArgument, DataError, TextMotionError, UsageError
from textmotion.experiments import split_by_class
from textmotion.skeleton import default_skeleton, export_bvh, resample_motion
from textmotion.text import HashedTextEncoder
from textmotion.training import (
    TrainConfig,
    generate_motions,
    load_denoiser,
    save_training_checkpoint,
    train_motion,
    train_pose,
    write_loss_csv,
)

OUT_ENV = "TEXTMOTION_OUT"
CHECKPOINT_NAME = "checkpoint.tm"
EVALUATOR_NAME = "evaluator.tm"
MANIFEST_NAME = "run.json"


# -- configuration --------------------------------------------------------------


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise BadArgument(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment; keys are normalized to underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class _Options:
    """Declared options of one subcommand: defaults, converters and flag names."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults = {}
        self.convert = {}

    def add(self, flag, default=None, type=str, help=None, required=False):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if type is bool:
            self.convert[dest] = _parse_bool
            self.parser.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=help)
        else:
            self.convert[dest] = type
            self.parser.add_argument(flag, dest=dest, type=type, default=None, help=help)
        if required:
            self.defaults[dest] = _REQUIRED


_REQUIRED = object()


def resolve(options, args):
    """Merge defaults, then the config file, then explicit flags."""
    merged = dict(options.defaults)
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in options.defaults:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            try:
                merged[key] = options.convert[key](value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key!r}: {value!r}") from exc
    for key in options.defaults:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{args.command}: missing required option(s) {flags}")
    return merged


def _train_options(opts, stage):
    opts.add("--data", required=True, help="dataset directory written by synth-data")
    opts.add("--seed", type=int, required=True)
    opts.add("--resume", help="checkpoint to continue from")
    opts.add("--split", default="train")
    skip = {"stage", "seed", "widths"}
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        opts.add("--" + f.name.replace("_", "-"), default=f.default, type=type(f.default))
    opts.add("--widths", default="64", help="comma-separated channel widths per level")
    if stage == "pose":
        opts.add("--static-per-motion", default=8, type=int)
    else:
        opts.add("--pose-checkpoint", help="stage-1 checkpoint to extend")
        opts.add("--uncond-split", default="uncond", help="split tag of caption-free clips mixed into training")


def build_parser():
    parser = argparse.ArgumentParser(prog="textmotion", description="Text-conditioned motion diffusion at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs/{name})")
        opts = _Options(p)
        registry[name] = opts
        return opts

    o = command("synth-data", "write a procedural text-motion corpus")
    o.add("--families", default=",".join(FAMILIES), help="comma-separated family names")
    o.add("--count", type=int, help="clips per family (default: built-in counts)")
    o.add("--frames", default=24, type=int)
    o.add("--fps", default=20.0, type=float)
    o.add("--seed", default=0, type=int)
    o.add("--mirror", default=False, type=bool, help="append sagittal mirrors of the train split")
    o.add("--held-out-per-class", default=0, type=int, help="clips per caption class tagged 'test'")
    o.add("--uncond-count", default=0, type=int, help="extra caption-free clips per family tagged 'uncond'")

    _train_options(command("train-pose", "stage 1: static-pose diffusion"), "pose")
    _train_options(command("train-motion", "stage 2: temporal fine-tuning"), "motion")

    o = command("sample", "generate motions from a checkpoint")
    o.add("--checkpoint", required=True)
    o.add("--seed", type=int, required=True)
    o.add("--caption", help="caption to condition on")
    o.add("--captions-from", help="dataset directory whose split captions are used")
    o.add("--split", default="test")
    o.add("--unconditional", default=False, type=bool)
    o.add("--frames", default=24, type=int)
    o.add("--guidance", default=1.0, type=float)
    o.add("--count", default=1, type=int, help="samples per caption")
    o.add("--clamp", default=DEFAULT_CLAMP, type=float)
    o.add("--upsample", type=int, help="resample outputs to this many frames")
    o.add("--bvh", default=False, type=bool, help="also write BVH files")

    o = command("train-evaluator", "fit the contrastive text/motion evaluator")
    o.add("--data", required=True)
    o.add("--split", default="train")
    o.add("--seed", type=int, required=True)
    for f in fields(evaluation.EvaluatorConfig):
        if f.name != "seed":
            o.add("--" + f.name.replace("_", "-"), default=f.default, type=type(f.default))

    o = command("eval", "FID, R-Precision and Diversity of a generated set")
    o.add("--evaluator", required=True)
    o.add("--generated", required=True, help="directory of motion files or a dataset directory")
    o.add("--generated-split")
    o.add("--reference", required=True)
    o.add("--reference-split", default="test")
    o.add("--seed", type=int, required=True)
    o.add("--k", default=3, type=int)
    o.add("--pool", default=32, type=int)
    o.add("--diversity-pairs", default=300, type=int)
    o.add("--repetitions", default=1, type=int)

    o = command("nn", "nearest neighbors of a text or motion query")
    o.add("--evaluator", required=True)
    o.add("--data", required=True)
    o.add("--split")
    o.add("--query-text")
    o.add("--query-motion")
    o.add("--k", default=6, type=int)
    o.add("--against", help="'motion' or 'text' (default: the query's modality)")
    o.add("--export", help="directory receiving the neighbor motions")
    return parser, registry


# -- helpers --------------------------------------------------------------------


def git_describe():
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8", newline="\n")


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _out_dir(args, command):
    out = args.out or os.environ.get(OUT_ENV) or str(Path("runs") / command)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_motion_set(path, split=None):
    """``[(name, motion)]`` from a dataset directory (manifest) or a flat directory of motion files."""
    root = _existing(path, "motion set")
    if (root / "manifest.txt").exists():
        return read_dataset(root, split)
    if root.is_file():
        return [(root.name, load_motion(root))]
    files = sorted(p for p in root.glob("*.json") if p.name != MANIFEST_NAME and p.name != "stats.json")
    return [(p.name, load_motion(p)) for p in files]


def _train_config(stage, cfg):
    values = {f.name: cfg[f.name] for f in fields(TrainConfig) if f.name in cfg}
    values["stage"] = stage
    return TrainConfig(**values)


# -- subcommands ------------------------------------------------------------------


def cmd_synth_data(cfg, out, log):
    families = [f.strip() for f in cfg["families"].split(",") if f.strip()]
    unknown = sorted(set(families) - set(FAMILIES))
    if unknown:
        raise UsageError(f"unknown families {unknown}; choose from {list(FAMILIES)}")
    counts = {f: (cfg["count"] if cfg["count"] is not None else DatasetSpec().counts[f]) for f in families}
    spec = DatasetSpec(seed=cfg["seed"], counts=counts, frames=cfg["frames"], fps=cfg["fps"])
    corpus = generate_dataset(spec)
    if cfg["held_out_per_class"]:
        train, test = split_by_class(corpus, cfg["held_out_per_class"])
    else:
        train, test = corpus, []
    if cfg["mirror"]:
        train = mirror_corpus(train)
    splits = {"train": train}
    if test:
        splits["test"] = test
    if cfg["uncond_count"]:
        extra = DatasetSpec(seed=cfg["seed"] + 1, counts={f: cfg["uncond_count"] for f in families},
                            frames=cfg["frames"], fps=cfg["fps"])
        splits["uncond"] = mark_unconditional(generate_dataset(extra), 1.0, cfg["seed"])
    write_dataset(out, splits, compute_stats(train))
    tally = Counter((split, (m.meta or {}).get("family")) for split, ms in splits.items() for m in ms)
    for (split, fam), n in sorted(tally.items()):
        log(f"{split}\t{fam}\t{n}")
    return {"counts": {f"{s}/{f}": n for (s, f), n in sorted(tally.items())}}


def _run_training(stage, cfg, out, log):
    data_root = _existing(cfg["data"], "dataset directory")
    tcfg = _train_config(stage, cfg)
    loaded = None
    if cfg["resume"]:
        loaded = load_denoiser(_existing(cfg["resume"], "resume checkpoint"))
    if stage == "motion" and not cfg["pose_checkpoint"] and loaded is None:
        raise UsageError("train-motion requires --pose-checkpoint")

    provider = HashedTextEncoder(tcfg.text_dim, tcfg.text_seed)
    interval_paths = []

    def on_checkpoint(state):
        path = out / f"checkpoint_step{state.step:06d}.tm"
        save_training_checkpoint(path, state, tcfg, stats, provider)
        interval_paths.append(path.name)

    state = loaded.train_state() if loaded is not None else None
    start_step = state.step if state is not None else 0
    if stage == "pose":
        stats = loaded.stats if loaded is not None else load_stats(data_root / "stats.json")
        corpus = [m for _, m in read_dataset(data_root, cfg["split"])]
        pairs = extract_static_pairs(corpus, cfg["static_per_motion"], tcfg.seed)
        state = train_pose(tcfg, pairs, provider, stats, state=state, on_checkpoint=on_checkpoint, log=log)
    else:
        pose = None
        if loaded is None:
            pose = load_denoiser(_existing(cfg["pose_checkpoint"], "pose checkpoint"))
            stats = pose.stats
        else:
            stats = loaded.stats
        corpus = [m for _, m in read_dataset(data_root, [cfg["split"], cfg["uncond_split"]])]
        state = train_motion(tcfg, corpus, pose.model if pose else None, provider, stats, state=state,
                             on_checkpoint=on_checkpoint, log=log)
    save_training_checkpoint(out / CHECKPOINT_NAME, state, tcfg, stats, provider)
    write_loss_csv(out / "loss.csv", state.trace)
    return {"start_step": start_step, "step": state.step, "checkpoints": interval_paths + [CHECKPOINT_NAME]}


def cmd_train_pose(cfg, out, log):
    return _run_training("pose", cfg, out, log)


def cmd_train_motion(cfg, out, log):
    return _run_training("motion", cfg, out, log)


def cmd_sample(cfg, out, log):
    loaded = load_denoiser(_existing(cfg["checkpoint"], "checkpoint"))
    sources = [cfg["caption"] is not None, cfg["captions_from"] is not None, bool(cfg["unconditional"])]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --caption, --captions-from or --unconditional")
    if cfg["caption"] is not None:
        base = [cfg["caption"]]
    elif cfg["captions_from"] is not None:
        base = [m.caption for _, m in load_motion_set(cfg["captions_from"], cfg["split"]) if m.caption is not None]
        if not base:
            raise DataError("no captions found to sample from")
    else:
        base = [None]
    if cfg["count"] < 1:
        raise UsageError("--count must be >= 1")
    captions = [c for c in base for _ in range(cfg["count"])]
    motions = generate_motions(loaded.model, loaded.schedule, loaded.stats, loaded.provider, captions, cfg["frames"],
                               guidance=cfg["guidance"], seed=cfg["seed"], clamp=cfg["clamp"])
    skeleton = default_skeleton()
    names = []
    for i, motion in enumerate(motions):
        if cfg["upsample"]:
            motion = resample_motion(motion, cfg["upsample"])
        motion = motion.with_(meta={"guidance": cfg["guidance"], "index": i, "seed": cfg["seed"]})
        name = f"sample_{i:04d}"
        save_motion(motion, out / f"{name}.json")
        if cfg["bvh"]:
            export_bvh(skeleton, motion, out / f"{name}.bvh")
        names.append(name)
    log(f"wrote {len(names)} motions to {out}")
    return {"samples": len(names)}


def cmd_train_evaluator(cfg, out, log):
    corpus = [m for _, m in read_dataset(_existing(cfg["data"], "dataset directory"), cfg["split"])]
    ecfg = evaluation.EvaluatorConfig(**{f.name: cfg[f.name] for f in fields(evaluation.EvaluatorConfig)})
    provider = evaluation.train_evaluator(corpus, ecfg, log=log)
    provider.save(out / EVALUATOR_NAME)
    return {"checksum": evaluation.checksum(out / EVALUATOR_NAME)}


def _bootstrap(n, rng):
    return rng.integers(0, n, size=n)


def cmd_eval(cfg, out, log):
    evaluator_path = _existing(cfg["evaluator"], "evaluator checkpoint")
    provider = evaluation.EmbeddingProvider.load(evaluator_path)
    generated = [m for _, m in load_motion_set(cfg["generated"], cfg["generated_split"])]
    reference = [m for _, m in load_motion_set(cfg["reference"], cfg["reference_split"])]
    if not generated or not reference:
        raise DataError("generated and reference sets must be non-empty")
    e_gen = provider.embed_motions(generated)
    e_ref = provider.embed_motions(reference)
    captioned = [i for i, m in enumerate(generated) if m.caption is not None]
    e_cap = provider.embed_texts([generated[i].caption for i in captioned]) if captioned else None
    k, reps, seed = cfg["k"], cfg["repetitions"], cfg["seed"]
    if reps < 1:
        raise UsageError("--repetitions must be >= 1")

    def one(rep):
        if reps == 1:
            gi, ci = np.arange(len(generated)), np.arange(len(captioned))
        else:
            rng = np.random.default_rng([seed, 606, rep])
            gi, ci = _bootstrap(len(generated), rng), _bootstrap(len(captioned), rng)
        row = {"fid": evaluation.fid(e_gen[gi], e_ref), "diversity": evaluation.diversity(e_gen[gi], cfg["diversity_pairs"], seed + rep)}
        if len(captioned) >= cfg["pool"]:
            idx = np.asarray(captioned)[ci]
            row[f"r_precision@{k}"] = evaluation.r_precision_from_embeddings(
                e_gen[idx], e_cap[ci], [generated[i].caption for i in idx], k, cfg["pool"], seed + rep
            )
        return row

    rows = [one(r) for r in range(reps)]
    report = dict(rows[0]) if reps == 1 else {}
    if reps > 1:
        for key in rows[0]:
            mean, half = evaluation.mean_ci95([r[key] for r in rows])
            report[key] = mean
            report[f"{key}_ci95"] = half
        report["repetitions"] = reps
    report.update(n_samples=len(generated), n_reference=len(reference), seed=seed,
                  provider_checksum=evaluation.checksum(evaluator_path))
    _json_dump(report, out / "metrics.json")
    for key in sorted(report):
        log(f"{key}\t{report[key]}")
    return {"metrics": "metrics.json"}


def cmd_nn(cfg, out, log):
    provider = evaluation.EmbeddingProvider.load(_existing(cfg["evaluator"], "evaluator checkpoint"))
    items = load_motion_set(cfg["data"], cfg["split"])
    if (cfg["query_text"] is None) == (cfg["query_motion"] is None):
        raise UsageError("give exactly one of --query-text or --query-motion")
    query_motion = load_motion(_existing(cfg["query_motion"], "query motion")) if cfg["query_motion"] else None
    ranked = evaluation.nearest_neighbors(provider, [m for _, m in items], k=cfg["k"], query_text=cfg["query_text"],
                                          query_motion=query_motion, against=cfg["against"])
    lines = []
    for rank, (i, sim) in enumerate(ranked):
        name, motion = items[i]
        lines.append(f"{rank}\t{name}\t{sim:.6f}\t{motion.caption}")
        if cfg["export"]:
            dest = Path(cfg["export"])
            dest.mkdir(parents=True, exist_ok=True)
            stem = f"{rank:02d}_{Path(name).stem}"
            save_motion(motion, dest / f"{stem}.json")
            export_bvh(default_skeleton(), motion, dest / f"{stem}.bvh")
    for line in lines:
        log(line)
    (out / "neighbors.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return {"neighbors": len(lines)}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-pose": cmd_train_pose,
    "train-motion": cmd_train_motion,
    "sample": cmd_sample,
    "train-evaluator": cmd_train_evaluator,
    "eval": cmd_eval,
    "nn": cmd_nn,
}


def main(argv=None):
    parser, registry = build_parser()
    args = parser.parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        cfg = resolve(registry[args.command], args)
        out = _out_dir(args, args.command)
        try:
            lock = FileLock(str(out / ".lock"), timeout=0)
            lock.acquire()
        except Timeout as exc:
            raise UsageError(f"output directory {out} is in use by another run") from exc
        try:
            t0 = time.perf_counter()
            result = COMMANDS[args.command](cfg, out, log)
            manifest = {
                "command": args.command,
                "config": cfg,
                "seed": cfg.get("seed"),
                "git": git_describe(),
                "wall_seconds": time.perf_counter() - t0,
                "result": result,
            }
            _json_dump(manifest, out / MANIFEST_NAME)
        finally:
            lock.release()
    except TextMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

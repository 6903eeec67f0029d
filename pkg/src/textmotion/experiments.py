"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests."""

import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from textmotion.dataset import (
    DatasetSpec,
    caption_class,
    compute_stats,
    extract_static_pairs,
    generate_dataset,
    mark_unconditional,
    mirror_corpus,
    save_motion,
)
from textmotion.diffusion import make_schedule
from textmotion.evaluation import EvaluatorConfig, fid, r_precision, train_evaluator
from textmotion.motion import MotionSequence
from textmotion.network import Denoiser, extend_temporal
from textmotion.skeleton import default_skeleton, forward_kinematics
from textmotion.text import HashedTextEncoder
from textmotion.training import (
    TrainConfig,
    TrainState,
    fixed_batch_loss,
    generate_motions,
    motion_training_data,
    run_training,
    save_training_checkpoint,
    stream_generator,
    train_motion,
    train_pose,
)


def split_by_class(corpus, held_out_per_class):
    """Deterministic split: the last ``held_out_per_class`` clips of each class are held out."""
    by_class = defaultdict(list)
    for i, m in enumerate(corpus):
        by_class[caption_class(m.meta)].append(i)
    held = {i for idx in by_class.values() for i in idx[len(idx) - held_out_per_class :]}
    train = [m for i, m in enumerate(corpus) if i not in held]
    test = [m for i, m in enumerate(corpus) if i in held]
    return train, test


@dataclass
class DeskConfig:
    seed: int = 0
    held_out_per_class: int = 8
    uncond_clips: int = 40
    static_per_motion: int = 8
    pose_steps: int = 4000
    motion_steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    widths: tuple = (160,)
    diffusion_steps: int = 100
    guidance: float = 2.0
    samples_per_caption: int = 2
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    work_dir: Optional[str] = None


def noise_motions(stats, count, frames, seed, fps=20.0):
    """Unit-Gaussian draws in standardized space, mapped back to pose units."""
    rng = np.random.default_rng([seed, 505])
    return [MotionSequence(stats.mean + rng.standard_normal((frames, stats.mean.shape[0])) * stats.std, fps)
            for _ in range(count)]


def run_desk_pipeline(cfg=None, log=print):
    """Synthesize, train both stages, sample with guidance and score against held-out clips."""
    cfg = cfg or DeskConfig()
    report = {}
    corpus = generate_dataset(DatasetSpec(seed=cfg.seed))
    train, test = split_by_class(corpus, cfg.held_out_per_class)
    train = mirror_corpus(train)
    uncond_spec = DatasetSpec(seed=cfg.seed + 1, counts={f: cfg.uncond_clips // 5 for f in DatasetSpec().counts})
    uncond = mark_unconditional(generate_dataset(uncond_spec), 1.0, cfg.seed)
    stats = compute_stats(train)
    provider = HashedTextEncoder(64, cfg.seed)
    base = dict(batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed, widths=cfg.widths,
                diffusion_steps=cfg.diffusion_steps, text_seed=cfg.seed)

    t0 = time.perf_counter()
    pose_cfg = TrainConfig(stage="pose", steps=cfg.pose_steps, **base)
    pose = train_pose(pose_cfg, extract_static_pairs(train, cfg.static_per_motion, cfg.seed), provider, stats, log=log)
    report["pose_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    motion_cfg = TrainConfig(stage="motion", steps=cfg.motion_steps, **base)
    motion = train_motion(motion_cfg, train + uncond, pose.model, provider, stats, log=log)
    report["motion_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    evaluator = train_evaluator(train, replace(cfg.evaluator, seed=cfg.seed), log=log)
    report["evaluator_seconds"] = time.perf_counter() - t0

    schedule = make_schedule("cosine", cfg.diffusion_steps)
    captions = [m.caption for m in test for _ in range(cfg.samples_per_caption)]
    t0 = time.perf_counter()
    generated = generate_motions(motion.model, schedule, stats, provider, captions, test[0].num_frames,
                                 guidance=cfg.guidance, seed=cfg.seed, fps=test[0].fps)
    report["sample_seconds"] = time.perf_counter() - t0
    if cfg.work_dir:
        _save_desk_artifacts(Path(cfg.work_dir), cfg, pose, motion, stats, provider, evaluator, generated)

    noise = noise_motions(stats, len(generated), test[0].num_frames, cfg.seed, test[0].fps)
    e_test = evaluator.embed_motions(test)
    e_gen = evaluator.embed_motions(generated)
    e_noise = evaluator.embed_motions(noise)
    report["r_precision_top3_generated"] = r_precision(evaluator, [(m, m.caption) for m in generated], k=3, seed=cfg.seed)
    report["r_precision_top3_held_out"] = r_precision(evaluator, [(m, m.caption) for m in test], k=3, seed=cfg.seed)
    report["fid_generated"] = fid(e_gen, e_test)
    report["fid_noise"] = fid(e_noise, e_test)
    report["fid_ratio"] = report["fid_noise"] / max(report["fid_generated"], 1e-12)
    report["n_generated"] = len(generated)
    report["n_held_out"] = len(test)
    return report


def _save_desk_artifacts(root, cfg, pose, motion, stats, provider, evaluator, generated):
    root.mkdir(parents=True, exist_ok=True)
    base = dict(batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed, widths=cfg.widths,
                diffusion_steps=cfg.diffusion_steps, text_seed=cfg.seed)
    save_training_checkpoint(root / "pose.tm", pose, TrainConfig(stage="pose", steps=cfg.pose_steps, **base),
                             stats, provider)
    save_training_checkpoint(root / "motion.tm", motion, TrainConfig(stage="motion", steps=cfg.motion_steps, **base),
                             stats, provider)
    evaluator.save(root / "evaluator.tm")
    samples = root / "samples"
    samples.mkdir(exist_ok=True)
    for i, m in enumerate(generated):
        save_motion(m, samples / f"sample_{i:04d}.json")


def _distinct_clips(corpus, count):
    """First clip of each caption class, in class order of first appearance."""
    seen = {}
    for m in corpus:
        seen.setdefault(caption_class(m.meta), m)
    clips = list(seen.values())[:count]
    return clips


def mean_joint_error(a, b, skeleton=None):
    """Mean per-frame Euclidean joint-position distance between two equal-length clips."""
    skeleton = skeleton or default_skeleton()
    pa = forward_kinematics(skeleton, a.frames)
    pb = forward_kinematics(skeleton, b.frames)
    return float(np.linalg.norm(pa - pb, axis=-1).mean())


@dataclass
class OverfitConfig:
    seed: int = 0
    clips: int = 8
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    widths: tuple = (160,)
    diffusion_steps: int = 100


def run_overfit(cfg=None, log=print):
    """Memorize a handful of captioned clips and check the loss drop and FK reconstruction."""
    cfg = cfg or OverfitConfig()
    clips = _distinct_clips(generate_dataset(DatasetSpec(seed=cfg.seed)), cfg.clips)
    stats = compute_stats(clips)
    provider = HashedTextEncoder(64, cfg.seed)
    tcfg = TrainConfig(stage="motion", steps=10, batch_size=cfg.batch_size, lr=cfg.lr, cfg_dropout=0.0,
                       warmup_steps=10, seed=cfg.seed, widths=cfg.widths, diffusion_steps=cfg.diffusion_steps,
                       text_seed=cfg.seed)
    schedule = make_schedule("cosine", cfg.diffusion_steps)
    static = Denoiser(tcfg.network_config(temporal=False), seed=cfg.seed)
    state = TrainState.fresh(extend_temporal(static, seed=cfg.seed))
    data = motion_training_data(clips, provider, stats, tcfg.clip_frames)
    t0 = time.perf_counter()
    run_training(state, data, tcfg, make_schedule("cosine", cfg.diffusion_steps), log=log)
    loss_at_10 = fixed_batch_loss(state.model, schedule, data, cfg.seed)
    trace_at_10 = state.trace[-1][1]
    run_training(state, data, replace(tcfg, steps=cfg.steps), schedule, log=log)
    loss_final, per_t = fixed_batch_loss(state.model, schedule, data, cfg.seed, per_t=True)
    seconds = time.perf_counter() - t0
    samples = generate_motions(state.model, schedule, stats, provider, [m.caption for m in clips],
                               tcfg.clip_frames, guidance=1.0, seed=cfg.seed)
    errors = [mean_joint_error(s, c) for s, c in zip(samples, clips)]
    tail = [row[1] for row in state.trace[-100:]]
    return {
        "fixed_batch_loss_step10": loss_at_10,
        "fixed_batch_loss_final": loss_final,
        "loss_ratio": loss_final / loss_at_10,
        "fixed_batch_loss_final_per_t": per_t,
        "trace_loss_step10": trace_at_10,
        "trace_loss_last100_mean": float(np.mean(tail)),
        "joint_errors": errors,
        "mean_joint_error": float(np.mean(errors)),
        "skeleton_height": default_skeleton().height(),
        "train_seconds": seconds,
    }

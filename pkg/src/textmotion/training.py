"""Two-stage training: static poses first, then temporal fine-tuning on clips.

All randomness derives from ``config.seed`` through named sub-streams keyed by
the step index (batch indices, timesteps, noise, text dropout), so a run is
reproducible bit-for-bit and can be resumed from any checkpoint.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from textmotion import checkpoint
from textmotion.dataset import ChannelStats, standardize
from textmotion.diffusion import (
    DEFAULT_CLAMP,
    GuidanceConfig,
    loss_simple,
    loss_vlb,
    make_schedule,
    q_sample,
    sample,
    v_from,
)
from textmotion.errors import BadArgument, ConfigMismatch, DataError, NonFiniteActivation, NonFiniteGradient
from textmotion.motion import MotionSequence
from textmotion.network import Denoiser, NetworkConfig, extend_temporal, gradients, model_from_tensors
from textmotion.rotations import TRANSLATION_SLICE
from textmotion.text import HashedTextEncoder, TextBatch

STREAMS = {"data": 0, "timestep": 1, "noise": 2, "dropout": 3, "init": 4, "sample": 5, "eval": 6}


def stream_generator(seed, stream, *index):
    """A torch Generator for one named random sub-stream."""
    state = np.random.SeedSequence([int(seed), STREAMS[stream], *map(int, index)]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 31 ^ int(state[1]))
    return g


@dataclass
class TrainConfig:
    stage: str = "pose"
    batch_size: int = 32
    steps: int = 1000
    lr: float = 1e-3
    warmup_steps: int = 100
    cfg_dropout: float = 0.10
    hybrid_weight: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0
    clip_frames: int = 24
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    diffusion_steps: int = 100
    widths: tuple = (64,)
    blocks_per_level: int = 1
    heads: int = 4
    text_dim: int = 64
    text_seed: int = 0

    def __post_init__(self):
        if isinstance(self.widths, str):
            self.widths = tuple(int(w) for w in self.widths.split(",") if w.strip())
        self.widths = tuple(int(w) for w in self.widths)
        if self.stage not in ("pose", "motion"):
            raise BadArgument(f"stage must be 'pose' or 'motion', got {self.stage!r}")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise BadArgument("cfg_dropout must lie in [0, 1]")
        if self.steps < 1:
            raise BadArgument("steps must be >= 1")
        if not self.lr > 0:
            raise BadArgument("lr must be positive")
        if self.batch_size < 1:
            raise BadArgument("batch_size must be >= 1")

    def network_config(self, temporal=False):
        return NetworkConfig(
            widths=self.widths,
            blocks_per_level=self.blocks_per_level,
            heads=self.heads,
            text_dim=self.text_dim,
            temporal_enabled=temporal,
        )

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    model: Denoiser
    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0
    trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model):
        params = dict(model.named_parameters())
        return cls(
            model=model,
            exp_avg={k: torch.zeros_like(p) for k, p in params.items()},
            exp_avg_sq={k: torch.zeros_like(p) for k, p in params.items()},
        )


def learning_rate(config, step):
    """Linear warmup over ``warmup_steps`` then constant; ``step`` is 1-based."""
    if config.warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


@torch.no_grad()
def optimizer_step(state, grads, config):
    """Bias-corrected Adam update with global-norm clipping, in place on ``state.model``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.step + 1}", step=state.step + 1)
    grads, _ = clip_grad_norm(grads, config.grad_clip)
    step = state.step + 1
    lr = learning_rate(config, step)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in state.model.named_parameters():
        g = grads[name]
        m = state.exp_avg[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.adam_eps))
    state.step = step
    return state


def dropout_mask(config, step, batch):
    """Rows whose text is replaced by the null embedding at ``step``."""
    g = stream_generator(config.seed, "dropout", step)
    return torch.rand(batch, generator=g) < config.cfg_dropout


def encode_captions(provider, captions):
    cache = {}
    embs = []
    for c in captions:
        if c not in cache:
            cache[c] = provider.embed(c)
        embs.append(cache[c])
    return TextBatch.collate(embs)


@dataclass
class TrainingData:
    x0: torch.Tensor  # (P, 135, N) standardized
    text: TextBatch

    def __len__(self):
        return self.x0.shape[0]


def training_batch(config, data, step, schedule):
    """Everything random about one step: ``(x0, t, eps, text)``."""
    B = config.batch_size
    idx = torch.randint(len(data), (B,), generator=stream_generator(config.seed, "data", step))
    x0 = data.x0[idx]
    t = torch.randint(1, schedule.T + 1, (B,), generator=stream_generator(config.seed, "timestep", step))
    eps = torch.randn(x0.shape, generator=stream_generator(config.seed, "noise", step), dtype=x0.dtype)
    text = data.text.select(idx).with_null(dropout_mask(config, step, B))
    return x0, t, eps, text


def batch_losses(model, schedule, x0, t, eps, text, hybrid_weight):
    x_t = q_sample(schedule, x0, t, eps)
    v, raw = model(x_t, t, text)
    ls = loss_simple(v, v_from(x0, eps, t, schedule))
    lv = loss_vlb(schedule, v, raw, x0, x_t, t)
    return ls + hybrid_weight * lv, ls, lv


def run_training(state, data, config, schedule, on_checkpoint=None, log=None):
    """Advance ``state`` until ``config.steps`` total steps have run."""
    model = state.model
    model.train()
    while state.step < config.steps:
        step = state.step + 1
        x0, t, eps, text = training_batch(config, data, step, schedule)
        parts = {}

        def closure():
            total, ls, lv = batch_losses(model, schedule, x0, t, eps, text, config.hybrid_weight)
            parts["simple"], parts["vlb"] = float(ls.detach()), float(lv.detach())
            return total

        try:
            grads = gradients(model, closure)
        except NonFiniteActivation as exc:
            raise NonFiniteGradient(f"non-finite activations at step {step}: {exc}", step=step) from exc
        if not (math.isfinite(parts["simple"]) and math.isfinite(parts["vlb"])):
            raise NonFiniteGradient(f"non-finite loss at step {step}", step=step)
        optimizer_step(state, grads, config)
        state.trace.append((step, parts["simple"], parts["vlb"], learning_rate(config, step)))
        if log is not None and (step == 1 or step % 100 == 0 or step == config.steps):
            log(f"step {step}/{config.steps} loss_simple={parts['simple']:.5f} loss_vlb={parts['vlb']:.5f}")
        if on_checkpoint is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            on_checkpoint(state)
    model.eval()
    return state


def pose_training_data(static_pairs, provider, stats):
    poses = np.stack([p for _, p in static_pairs])
    if np.any(poses[:, TRANSLATION_SLICE] != 0.0):
        raise DataError("pose-stage pairs must have zero translation")
    x0 = torch.as_tensor(standardize(poses, stats), dtype=torch.float32)[:, :, None]
    return TrainingData(x0, encode_captions(provider, [c for c, _ in static_pairs]))


def fit_clip(frames, n):
    """Crop to the first ``n`` frames or pad by repeating the last one."""
    if frames.shape[0] >= n:
        return frames[:n]
    pad = np.repeat(frames[-1:], n - frames.shape[0], axis=0)
    return np.concatenate([frames, pad], axis=0)


def motion_training_data(corpus, provider, stats, clip_frames):
    clips = np.stack([fit_clip(m.frames, clip_frames) for m in corpus])
    x0 = torch.as_tensor(standardize(clips, stats), dtype=torch.float32).transpose(1, 2).contiguous()
    return TrainingData(x0, encode_captions(provider, [m.caption for m in corpus]))


def train_pose(config, static_pairs, provider, stats, state=None, on_checkpoint=None, log=None):
    """Stage 1: static-pose diffusion on ``(caption, pose)`` pairs."""
    schedule = make_schedule(config.schedule, config.diffusion_steps)
    if state is None:
        state = TrainState.fresh(Denoiser(config.network_config(temporal=False), seed=config.seed))
    if state.model.config.temporal_enabled:
        raise ConfigMismatch("pose training needs a model without temporal layers")
    data = pose_training_data(static_pairs, provider, stats)
    return run_training(state, data, config, schedule, on_checkpoint, log)


def train_motion(config, corpus, pose_model, provider, stats, state=None, on_checkpoint=None, log=None):
    """Stage 2: extend the pose model with temporal layers and fine-tune on clips.

    Clips with a null caption are the unconditional co-training data; the
    batch-time text dropout is applied on top of them.
    """
    schedule = make_schedule(config.schedule, config.diffusion_steps)
    if state is None:
        want = config.network_config(temporal=False)
        have = pose_model.config
        for key in ("widths", "blocks_per_level", "heads", "text_dim"):
            if getattr(want, key) != getattr(have, key):
                raise ConfigMismatch(f"pose checkpoint {key}={getattr(have, key)} but config has {getattr(want, key)}")
        state = TrainState.fresh(extend_temporal(pose_model, seed=config.seed))
    data = motion_training_data(corpus, provider, stats, config.clip_frames)
    return run_training(state, data, config, schedule, on_checkpoint, log)


# -- checkpoints --------------------------------------------------------------


def checkpoint_meta(state, config, stats, provider, kind="denoiser"):
    return {
        "kind": kind,
        "network": state.model.config.to_dict(),
        "schedule": {"kind": config.schedule, "T": config.diffusion_steps},
        "stats": stats.to_dict(),
        "text_provider": provider.to_dict(),
        "train": {"config": config.to_dict(), "step": state.step},
    }


def save_training_checkpoint(path, state, config, stats, provider):
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    tensors.update({f"optim.exp_avg.{k}": v for k, v in state.exp_avg.items()})
    tensors.update({f"optim.exp_avg_sq.{k}": v for k, v in state.exp_avg_sq.items()})
    return checkpoint.save(path, tensors, checkpoint_meta(state, config, stats, provider))


@dataclass
class LoadedDenoiser:
    model: Denoiser
    schedule: object
    stats: ChannelStats
    provider: HashedTextEncoder
    meta: dict
    tensors: dict

    def train_state(self):
        """Rebuild the optimizer state for resuming training."""
        state = TrainState.fresh(self.model)
        for k in state.exp_avg:
            state.exp_avg[k].copy_(torch.as_tensor(self.tensors[f"optim.exp_avg.{k}"]))
            state.exp_avg_sq[k].copy_(torch.as_tensor(self.tensors[f"optim.exp_avg_sq.{k}"]))
        state.step = int(self.meta["train"]["step"])
        return state


def load_denoiser(path):
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint")
    model = model_from_tensors(NetworkConfig.from_dict(meta["network"]), tensors)
    model.eval()
    sched = make_schedule(meta["schedule"]["kind"], meta["schedule"]["T"])
    return LoadedDenoiser(
        model, sched, ChannelStats.from_dict(meta["stats"]), HashedTextEncoder.from_dict(meta["text_provider"]), meta, tensors
    )


def write_loss_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_simple", "loss_vlb", "lr"])
        for row in trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


# -- generation ---------------------------------------------------------------


def generate_motions(model, schedule, stats, provider, captions, frames, guidance=1.0, seed=0, fps=20.0,
                     clamp=DEFAULT_CLAMP, batch_size=64):
    """Sample one destandardized clip per caption (``None`` = unconditional)."""
    out = []
    g = stream_generator(seed, "sample", 0)
    for start in range(0, len(captions), batch_size):
        chunk = captions[start : start + batch_size]
        text = encode_captions(provider, chunk)
        null = TextBatch.null(len(chunk), provider.dim)
        gcfg = GuidanceConfig(scale=guidance, null_conditioning=null)
        x = sample(model, schedule, (len(chunk), model.config.pose_dim, frames), text, gcfg, g, clamp=clamp)
        x = x.double().transpose(1, 2).numpy()
        for cap, arr in zip(chunk, x):
            out.append(MotionSequence(stats.mean + arr * stats.std, fps, cap))
    return out


@torch.no_grad()
def fixed_batch_loss(model, schedule, data, seed, t_values=None, per_t=False):
    """``loss_simple`` on every item at every timestep (or ``t_values``) with fixed noise.

    Averaging over all timesteps gives the uniform-``t`` training objective
    without the timestep sampling noise.
    """
    if t_values is None:
        t_values = range(1, schedule.T + 1)
    g = stream_generator(seed, "eval", 0)
    losses = {}
    for t in t_values:
        eps = torch.randn(data.x0.shape, generator=g, dtype=data.x0.dtype)
        tt = torch.full((len(data),), int(t), dtype=torch.long)
        x_t = q_sample(schedule, data.x0, tt, eps)
        v, _ = model(x_t, tt, data.text)
        losses[int(t)] = float(loss_simple(v, v_from(data.x0, eps, tt, schedule)))
    mean = sum(losses.values()) / len(losses)
    return (mean, losses) if per_t else mean

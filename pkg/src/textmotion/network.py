"""Factorized spatio-temporal U-Net denoiser.

The static model treats each frame as a ``C x 1 x 1`` image: every layer is a
per-frame affine map (a 1x1 convolution), per-frame layer norm, or
cross-attention from frame features to text tokens. The temporal variant adds
a kernel-3 temporal convolution after every 1x1 convolution inside residual
blocks and a rotary-embedded self-attention over frames after every
cross-attention. All temporal layers enter through zero-initialized residual
branches, so extending a trained static model leaves its per-frame output
unchanged until the new layers are trained.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from textmotion.errors import BadArgument, ConfigMismatch, NonFiniteActivation, NonFiniteGradient, ShapeMismatch
from textmotion.rotations import POSE_DIM

TEMPORAL_TAG = "temporal"


@dataclass
class NetworkConfig:
    widths: tuple = (64, 128)
    blocks_per_level: int = 1
    heads: int = 4
    text_dim: int = 64
    temporal_enabled: bool = False
    temporal_kernel: int = 3
    pose_dim: int = POSE_DIM
    check_finite: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise BadArgument("at least one level width is required")
        for w in self.widths:
            if w % self.heads:
                raise BadArgument(f"width {w} not divisible by {self.heads} heads")
            if (w // self.heads) % 2:
                raise BadArgument("per-head width must be even for rotary embedding")
        if self.temporal_kernel % 2 != 1:
            raise BadArgument("temporal kernel must be odd")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def rotary_embed(x, positions, base=10000.0):
    """Rotate consecutive feature pairs ``(2j, 2j+1)`` by ``position * base**(-2j/d)``.

    ``x`` has shape ``(..., N, d)``; ``positions`` has shape ``(N,)``.
    """
    d = x.shape[-1]
    if d % 2:
        raise BadArgument(f"rotary embedding needs an even feature size, got {d}")
    j = torch.arange(d // 2, dtype=torch.float64)
    theta = base ** (-2.0 * j / d)
    ang = torch.as_tensor(positions, dtype=torch.float64)[:, None] * theta[None]
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def _zero(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


# Internally activations are laid out (B, N, C): frames x channels, so every
# 1x1 convolution is a Linear over the last axis and normalization is a
# per-frame LayerNorm.


class TemporalConv(nn.Module):
    """Zero-padded 1D convolution over frames for ``(B, N, C)`` activations.

    Computed as one matmul over the ``kernel`` shifted copies of the input;
    ``proj.weight[:, k*C:(k+1)*C]`` is the tap applied to frame ``n + k - kernel//2``.
    """

    def __init__(self, channels, kernel):
        super().__init__()
        self.kernel = kernel
        self.proj = _zero(nn.Linear(kernel * channels, channels))

    def forward(self, x):
        N = x.shape[1]
        r = self.kernel // 2
        padded = F.pad(x, (0, 0, r, r))
        taps = torch.cat([padded[:, k : k + N] for k in range(self.kernel)], dim=-1)
        return self.proj(taps)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cin)
        self.conv1 = nn.Linear(cin, cout)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.LayerNorm(cout)
        self.conv2 = _zero(nn.Linear(cout, cout))
        self.skip = nn.Linear(cin, cout) if cin != cout else nn.Identity()
        if cfg.temporal_enabled:
            self.temporal_conv1 = TemporalConv(cout, cfg.temporal_kernel)
            self.temporal_conv2 = TemporalConv(cout, cfg.temporal_kernel)
        else:
            self.temporal_conv1 = self.temporal_conv2 = None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temporal_conv1 is not None:
            h = h + self.temporal_conv1(h)
        h = h + self.emb_proj(emb)[:, None, :]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.temporal_conv2 is not None:
            h = h + self.temporal_conv2(h)
        return self.skip(x) + h


def _attend(q, k, v, mask=None):
    # q: (B, H, Nq, d), k/v: (B, H, Nk, d), mask: (B, Nk) True = keep
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class CrossAttention(nn.Module):
    def __init__(self, channels, context_dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_kv = nn.Linear(context_dim, 2 * channels, bias=False)
        self.to_out = _zero(nn.Linear(channels, channels))

    def forward(self, x, context, mask):
        B, N, C = x.shape
        H = self.heads
        q = self.to_q(self.norm(x)).reshape(B, N, H, C // H).transpose(1, 2)
        k, v = self.to_kv(context).reshape(B, -1, 2, H, C // H).permute(2, 0, 3, 1, 4)
        out = _attend(q, k, v, mask).transpose(1, 2).reshape(B, N, C)
        return x + self.to_out(out)


class TemporalAttention(nn.Module):
    def __init__(self, channels, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.to_out = _zero(nn.Linear(channels, channels))

    def forward(self, x):
        B, N, C = x.shape
        H = self.heads
        q, k, v = self.to_qkv(self.norm(x)).reshape(B, N, 3, H, C // H).permute(2, 0, 3, 1, 4)
        pos = torch.arange(N)
        q, k = rotary_embed(q, pos), rotary_embed(k, pos)
        out = _attend(q, k, v).transpose(1, 2).reshape(B, N, C)
        return x + self.to_out(out)


class AttentionBlock(nn.Module):
    def __init__(self, channels, context_dim, cfg):
        super().__init__()
        self.cross = CrossAttention(channels, context_dim, cfg.heads)
        self.temporal_attn = TemporalAttention(channels, cfg.heads) if cfg.temporal_enabled else None

    def forward(self, x, context, mask):
        x = self.cross(x, context, mask)
        if self.temporal_attn is not None:
            x = self.temporal_attn(x)
        return x


class Stage(nn.Module):
    def __init__(self, cin, cout, emb_dim, cfg):
        super().__init__()
        self.res = ResBlock(cin, cout, emb_dim, cfg)
        self.attn = AttentionBlock(cout, cfg.text_dim, cfg)

    def forward(self, x, emb, context, mask):
        return self.attn(self.res(x, emb), context, mask)


class Denoiser(nn.Module):
    """``forward(x, t, text) -> (v, raw_variance)``, both shaped like ``x = (B, 135, N)``.

    ``text`` is a :class:`~textmotion.text.TextBatch`; rows flagged
    ``is_null`` use the learned null embedding instead of their tokens.
    Frames never interact unless ``temporal_enabled`` is set, so the static
    model also accepts ``N > 1`` and simply treats frames independently.
    """

    def __init__(self, config=None, seed=None):
        super().__init__()
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self._build(config or NetworkConfig())
        else:
            self._build(config or NetworkConfig())

    def _build(self, cfg):
        self.config = cfg
        w0 = cfg.widths[0]
        self.emb_dim = emb_dim = 4 * w0
        self.time_mlp = nn.Sequential(nn.Linear(w0, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.text_pool_proj = nn.Linear(cfg.text_dim, emb_dim)
        self.time_token = nn.Linear(emb_dim, cfg.text_dim)
        self.null_tokens = nn.Parameter(torch.randn(1, cfg.text_dim) / math.sqrt(cfg.text_dim))
        self.null_pooled = nn.Parameter(torch.zeros(cfg.text_dim))
        self.in_proj = nn.Linear(cfg.pose_dim, w0)

        self.down = nn.ModuleList()
        ch = w0
        skip_ch = []
        for w in cfg.widths:
            level = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                level.append(Stage(ch, w, emb_dim, cfg))
                ch = w
            self.down.append(level)
            skip_ch.append(ch)
        self.mid = Stage(ch, ch, emb_dim, cfg)
        self.up = nn.ModuleList()
        for w, sc in zip(reversed(cfg.widths), reversed(skip_ch)):
            level = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                level.append(Stage(ch + sc if b == 0 else ch, w, emb_dim, cfg))
                ch = w
            self.up.append(level)
        self.out_norm = nn.LayerNorm(ch)
        self.out = _zero(nn.Linear(ch, 2 * cfg.pose_dim))
        self.cond_used = 0

    def _context(self, text, emb):
        B = text.tokens.shape[0]
        null = text.is_null
        self.cond_used += int((~null).sum())
        L = text.tokens.shape[1]
        null_tok = F.pad(self.null_tokens, (0, 0, 0, L - 1)).expand(B, L, -1).to(text.tokens.dtype)
        tokens = torch.where(null[:, None, None], null_tok, text.tokens)
        first_only = torch.zeros(L, dtype=torch.bool)
        first_only[0] = True
        mask = torch.where(null[:, None], first_only[None].expand(B, L), text.mask)
        pooled = torch.where(null[:, None], self.null_pooled.expand(B, -1), text.pooled)
        ctx = torch.cat([tokens, self.time_token(emb)[:, None]], dim=1)
        mask = torch.cat([mask, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        return ctx, mask, pooled

    def forward(self, x, t, text):
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.pose_dim:
            raise ShapeMismatch(f"expected (B, {cfg.pose_dim}, N) input, got {tuple(x.shape)}")
        B = x.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(B)
        emb = self.time_mlp(timestep_embedding(t, cfg.widths[0]).to(x.dtype))
        context, mask, pooled = self._context(text, emb)
        emb = emb + self.text_pool_proj(pooled)

        h = self.in_proj(x.transpose(1, 2))
        skips = []
        for level in self.down:
            for stage in level:
                h = stage(h, emb, context, mask)
            skips.append(h)
        h = self.mid(h, emb, context, mask)
        for level in self.up:
            for b, stage in enumerate(level):
                if b == 0:
                    h = torch.cat([h, skips.pop()], dim=-1)
                h = stage(h, emb, context, mask)
        out = self.out(F.silu(self.out_norm(h))).transpose(1, 2)
        if cfg.check_finite and not torch.isfinite(out).all():
            raise NonFiniteActivation("denoiser produced non-finite outputs")
        return out[:, : cfg.pose_dim], out[:, cfg.pose_dim :]


def forward(model, x, t, text):
    return model(x, t, text)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def extend_temporal(static_model, config=None, seed=None):
    """Copy a static model into a temporal one with zero-initialized temporal layers."""
    src = static_model.config
    if src.temporal_enabled:
        raise ConfigMismatch("source model already has temporal layers")
    cfg_dict = src.to_dict() if config is None else config.to_dict()
    cfg_dict["temporal_enabled"] = True
    cfg = NetworkConfig.from_dict(cfg_dict)
    for key in ("widths", "blocks_per_level", "heads", "text_dim", "pose_dim"):
        if getattr(cfg, key) != getattr(src, key):
            raise ConfigMismatch(f"{key} differs between static model ({getattr(src, key)}) and config ({getattr(cfg, key)})")
    model = Denoiser(cfg, seed=seed)
    model.to(next(static_model.parameters()).dtype)
    missing, unexpected = model.load_state_dict(static_model.state_dict(), strict=False)
    if unexpected or any(TEMPORAL_TAG not in k for k in missing):
        raise ConfigMismatch(f"state mismatch: missing={missing} unexpected={unexpected}")
    return model


def gradients(model, loss_closure):
    """Exact gradients of ``loss_closure()`` for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_closure()
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        grads[name] = g
    return grads


def model_tensors(model, prefix="model."):
    return {prefix + k: v for k, v in model.state_dict().items()}


def model_from_tensors(config, tensors, prefix="model.", dtype=torch.float32):
    model = Denoiser(config, seed=0)
    state = {k[len(prefix):]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith(prefix)}
    model.load_state_dict(state, strict=True)
    return model.to(dtype)

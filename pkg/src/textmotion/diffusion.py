"""Gaussian diffusion with v-parameterization, learned variances and classifier-free guidance.

Timesteps are 1-based: ``t`` runs from 1 (almost clean) to ``T`` (almost pure
noise). Schedule arrays are float64 numpy with index 0 holding the clean
``alpha_bar = 1`` entry, so ``schedule.alpha_bar[t]`` reads naturally.
Tensors handled here are torch tensors of shape ``(B, C, N)`` (or any shape
whose first axis is the batch when ``t`` is a per-item tensor).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from textmotion.errors import BadArgument, BadTimestep, ShapeMismatch

HYBRID_VLB_WEIGHT = 1e-3
DEFAULT_CLAMP = 3.0


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha_bar"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ab = self.alpha_bar
        derived = {
            "signal_rate": np.sqrt(ab),
            "noise_rate": np.sqrt(1.0 - ab),
        }
        bt = np.zeros(self.T + 1)
        bt[1:] = self.beta[1:] * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        derived["posterior_variance"] = bt
        # log of beta_tilde with the t=1 zero replaced by beta_tilde[2]
        clipped = bt.copy()
        clipped[1] = bt[2] if self.T >= 2 else self.beta[1]
        clipped[0] = clipped[1]
        derived["posterior_log_variance"] = np.log(clipped)
        derived["log_beta"] = np.log(np.where(self.beta > 0, self.beta, 1.0))
        coef_x0 = np.zeros(self.T + 1)
        coef_xt = np.zeros(self.T + 1)
        coef_x0[1:] = self.beta[1:] * np.sqrt(ab[:-1]) / (1.0 - ab[1:])
        coef_xt[1:] = (1.0 - ab[:-1]) * np.sqrt(1.0 - self.beta[1:]) / (1.0 - ab[1:])
        derived["posterior_coef_x0"] = coef_x0
        derived["posterior_coef_xt"] = coef_xt
        for name, arr in derived.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def to_dict(self):
        return {"kind": self.kind, "T": self.T}


def _cosine_alpha_bar(t, T, s=0.008):
    return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2


def make_schedule(kind="cosine", T=1000):
    """Cosine (squared-cosine ``alpha_bar``, betas clipped at 0.999) or linear betas.

    The linear kind spans 1e-4 .. 0.02 at ``T = 1000`` and is rescaled by
    ``1000 / T`` for other lengths.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise BadArgument(f"schedule needs T >= 2, got {T!r}")
    T = int(T)
    beta = np.zeros(T + 1)
    if kind == "cosine":
        f0 = _cosine_alpha_bar(0, T)
        for t in range(1, T + 1):
            beta[t] = min(1.0 - (_cosine_alpha_bar(t, T) / f0) / (_cosine_alpha_bar(t - 1, T) / f0), 0.999)
    elif kind == "linear":
        scale = 1000.0 / T
        beta[1:] = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
    else:
        raise BadArgument(f"unknown schedule kind {kind!r}")
    alpha_bar = np.ones(T + 1)
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha_bar=alpha_bar)


def _coef(arr, t, like):
    """Gather ``arr[t]`` and shape it to broadcast against ``like``."""
    if isinstance(t, torch.Tensor):
        idx = t.detach().cpu().long()
        if idx.ndim == 0:
            return torch.as_tensor(arr[int(idx)], dtype=like.dtype, device=like.device)
        vals = torch.as_tensor(arr[idx.numpy()], dtype=like.dtype, device=like.device)
        return vals.reshape((-1,) + (1,) * (like.ndim - 1))
    return torch.as_tensor(arr[int(t)], dtype=like.dtype, device=like.device)


def _check_t(schedule, t):
    lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
    if lo < 1 or hi > schedule.T:
        raise BadTimestep(f"timestep out of range [1, {schedule.T}]: {lo}..{hi}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(schedule, x0, t, noise):
    """Closed-form forward marginal ``a_t * x0 + s_t * noise``."""
    _same_shape(x0, noise, "q_sample noise")
    _check_t(schedule, t)
    return _coef(schedule.signal_rate, t, x0) * x0 + _coef(schedule.noise_rate, t, x0) * noise


def v_from(x0, eps, t, schedule):
    _same_shape(x0, eps, "v_from")
    return _coef(schedule.signal_rate, t, x0) * eps - _coef(schedule.noise_rate, t, x0) * x0


def x0_from(x_t, v, t, schedule):
    _same_shape(x_t, v, "x0_from")
    return _coef(schedule.signal_rate, t, x_t) * x_t - _coef(schedule.noise_rate, t, x_t) * v


def eps_from(x_t, v, t, schedule):
    _same_shape(x_t, v, "eps_from")
    return _coef(schedule.noise_rate, t, x_t) * x_t + _coef(schedule.signal_rate, t, x_t) * v


def loss_simple(model_v, target_v):
    _same_shape(model_v, target_v, "loss_simple")
    return torch.mean((model_v - target_v) ** 2)


def posterior_mean(schedule, x0, x_t, t):
    return _coef(schedule.posterior_coef_x0, t, x_t) * x0 + _coef(schedule.posterior_coef_xt, t, x_t) * x_t


def variance_fraction(raw):
    """Squash the network's raw variance output to an interpolation weight in [0, 1]."""
    return torch.sigmoid(raw)


def model_log_variance(schedule, raw, t):
    """``w * log(beta_t) + (1 - w) * log(beta_tilde_t)`` with ``w = sigmoid(raw)``."""
    w = variance_fraction(raw)
    return w * _coef(schedule.log_beta, t, raw) + (1.0 - w) * _coef(schedule.posterior_log_variance, t, raw)


def normal_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def gaussian_nll(x, mean, logvar):
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def _reduce(per_elem, reduction):
    if reduction == "none":
        return per_elem
    if reduction == "sum":
        return per_elem.sum()
    if reduction == "mean":
        return per_elem.mean()
    raise BadArgument(f"unknown reduction {reduction!r}")


def loss_vlb(schedule, model_v, model_var_weights, x0, x_t, t, reduction="mean"):
    """Variational bound term that trains the learned variances only.

    The predicted mean uses a detached ``model_v`` so no gradient reaches the
    mean path. For ``t > 1`` this is the KL between the true posterior and
    the model's reverse step; at ``t = 1`` it is the Gaussian negative
    log-likelihood of ``x0``. Values are in nats per element.
    """
    _same_shape(model_v, x_t, "loss_vlb model_v")
    _same_shape(model_var_weights, x_t, "loss_vlb variance weights")
    _same_shape(x0, x_t, "loss_vlb x0")
    _check_t(schedule, t)
    true_mean = posterior_mean(schedule, x0, x_t, t)
    true_logvar = _coef(schedule.posterior_log_variance, t, x_t).expand_as(x_t)
    x0_hat = x0_from(x_t, model_v.detach(), t, schedule)
    mean = posterior_mean(schedule, x0_hat, x_t, t)
    logvar = model_log_variance(schedule, model_var_weights, t)
    kl = normal_kl(true_mean, true_logvar, mean, logvar)
    nll = gaussian_nll(x0, mean, logvar)
    if isinstance(t, torch.Tensor) and t.ndim:
        first = (t == 1).reshape((-1,) + (1,) * (x_t.ndim - 1))
    else:
        first = torch.tensor(int(t) == 1)
    return _reduce(torch.where(first, nll, kl), reduction)


def hybrid_loss(simple, vlb, weight=HYBRID_VLB_WEIGHT):
    return simple + weight * vlb


@dataclass
class GuidanceConfig:
    """Classifier-free guidance: ``v_null + scale * (v_cond - v_null)``.

    ``null_conditioning`` is whatever the model accepts as the dropped-text
    input (for :class:`~textmotion.network.Denoiser` a null TextBatch).
    """

    scale: float = 1.0
    null_conditioning: object = None

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale < 0:
            raise BadArgument(f"guidance scale must be finite and >= 0, got {self.scale}")


def guided_prediction(model, x_t, t_vec, conditioning, guidance):
    if guidance is None or guidance.scale == 1.0:
        return model(x_t, t_vec, conditioning)
    if guidance.null_conditioning is None:
        raise BadArgument("guidance scale != 1 requires null conditioning")
    if guidance.scale == 0.0:
        return model(x_t, t_vec, guidance.null_conditioning)
    v_cond, var_cond = model(x_t, t_vec, conditioning)
    v_null, _ = model(x_t, t_vec, guidance.null_conditioning)
    return v_null + guidance.scale * (v_cond - v_null), var_cond


@torch.no_grad()
def p_sample_step(model, schedule, x_t, t, conditioning, guidance, rng, clamp=DEFAULT_CLAMP):
    """One ancestral step ``x_t -> x_{t-1}``.

    ``model(x, t_vec, conditioning)`` must return ``(v, raw_variance)``. The
    step at ``t = 1`` returns the posterior mean without adding noise.
    """
    t = int(t)
    _check_t(schedule, t)
    t_vec = torch.full((x_t.shape[0],), t, dtype=torch.long)
    v, raw = guided_prediction(model, x_t, t_vec, conditioning, guidance)
    x0_hat = x0_from(x_t, v, t, schedule)
    if clamp is not None:
        x0_hat = x0_hat.clamp(-clamp, clamp)
    mean = posterior_mean(schedule, x0_hat, x_t, t)
    if t == 1:
        return mean
    logvar = model_log_variance(schedule, raw, t)
    noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + torch.exp(0.5 * logvar) * noise


@torch.no_grad()
def sample(model, schedule, shape, conditioning, guidance, rng, clamp=DEFAULT_CLAMP, dtype=torch.float32, x_T=None):
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``t = 1``.

    ``shape`` is ``(B, C, N)``; every frame is denoised jointly.
    """
    x = torch.randn(tuple(shape), generator=rng, dtype=dtype) if x_T is None else x_T.clone()
    for t in range(schedule.T, 0, -1):
        x = p_sample_step(model, schedule, x, t, conditioning, guidance, rng, clamp=clamp)
    return x


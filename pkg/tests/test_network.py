import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from textmotion.diffusion import loss_simple
from textmotion.errors import BadArgument, ConfigMismatch, NonFiniteGradient, ShapeMismatch
from textmotion.network import (
    Denoiser,
    NetworkConfig,
    count_parameters,
    extend_temporal,
    gradients,
    rotary_embed,
)
from textmotion.text import HashedTextEncoder, TextBatch

ENC = HashedTextEncoder(16, seed=3)


def text_batch(captions, dtype=torch.float32, dim=16):
    enc = ENC if dim == 16 else HashedTextEncoder(dim, seed=3)
    return TextBatch.collate([enc.embed(c) for c in captions], dtype=dtype)


def tiny(temporal=False, widths=(8,), heads=2, seed=0, dtype=torch.float64):
    m = Denoiser(NetworkConfig(widths=widths, heads=heads, text_dim=16, temporal_enabled=temporal), seed=seed)
    return m.to(dtype)


def randomize(model, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def test_output_shapes_and_head():
    m = tiny(widths=(16, 32), heads=4, dtype=torch.float32)
    x = torch.randn(3, 135, 5)
    v, w = m(x, torch.tensor([1, 5, 9]), text_batch(["walk", "raise the left arm", None]))
    assert v.shape == w.shape == (3, 135, 5)
    assert m.out.out_features == 270
    assert not any("temporal" in n for n, _ in m.named_parameters())
    with pytest.raises(ShapeMismatch):
        m(torch.randn(1, 134, 1), torch.tensor([1]), text_batch(["walk"]))


@pytest.mark.parametrize("kwargs", [dict(widths=(10,), heads=4), dict(widths=(12,), heads=4), dict(temporal_kernel=4)])
def test_config_validation(kwargs):
    with pytest.raises(BadArgument):
        NetworkConfig(**kwargs)


def test_null_rows_ignore_tokens():
    m = randomize(tiny(dtype=torch.float32), 1)
    x = torch.randn(2, 135, 1)
    a = text_batch(["walk forward", "squat down"]).with_null(torch.tensor([True, True]))
    b = TextBatch.null(2, 16)
    assert torch.equal(m(x, torch.tensor([3, 3]), a)[0], m(x, torch.tensor([3, 3]), b)[0])


@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_static_model_is_frame_equivariant(seed, n):
    g = torch.Generator().manual_seed(seed)
    m = randomize(tiny(dtype=torch.float64), seed % 997)
    x = torch.randn(2, 135, n, generator=g, dtype=torch.float64)
    perm = torch.randperm(n, generator=g)
    text = text_batch(["turn left", "wave"], torch.float64)
    t = torch.tensor([4, 60])
    v, w = m(x, t, text)
    vp, wp = m(x[:, :, perm], t, text)
    assert torch.allclose(vp, v[:, :, perm], atol=1e-12) and torch.allclose(wp, w[:, :, perm], atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_activations_finite_on_bounded_inputs(seed):
    g = torch.Generator().manual_seed(seed)
    m = extend_temporal(randomize(tiny(dtype=torch.float32), seed % 991, scale=1.0), seed=seed % 13)
    randomize(m, seed % 17, scale=1.0)
    x = torch.rand(2, 135, 6, generator=g) * 20 - 10
    v, w = m(x, torch.tensor([1, 1000]), text_batch(["a", None]))
    assert torch.isfinite(v).all() and torch.isfinite(w).all()


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-12)])
@pytest.mark.parametrize("n", [1, 4, 16])
def test_temporal_extension_identity(dtype, tol, n):
    static = randomize(tiny(widths=(16, 32), heads=4, dtype=dtype), 5, scale=0.2)
    ext = extend_temporal(static, seed=11)
    assert count_parameters(ext) > count_parameters(static)
    x = torch.randn(3, 135, n, dtype=dtype)
    t = torch.tensor([2, 50, 99])
    text = text_batch(["raise the right arm", None, "walk"], dtype)
    v, w = ext(x, t, text)
    for i in range(n):
        vs, ws = static(x[:, :, i : i + 1], t, text)
        assert (v[:, :, i : i + 1] - vs).abs().max() <= tol
        assert (w[:, :, i : i + 1] - ws).abs().max() <= tol


def test_extend_temporal_mismatch():
    static = tiny()
    with pytest.raises(ConfigMismatch):
        extend_temporal(static, NetworkConfig(widths=(16,), heads=2, text_dim=16))
    with pytest.raises(ConfigMismatch):
        extend_temporal(extend_temporal(static))


def test_rotary_position_zero_and_norms():
    x = torch.randn(2, 3, 5, 8, dtype=torch.float64)
    assert torch.equal(rotary_embed(x, torch.zeros(5)), x)
    y = rotary_embed(x, torch.arange(5))
    pair = lambda z: z.reshape(*z.shape[:-1], -1, 2).norm(dim=-1)
    assert (pair(y) - pair(x)).abs().max() < 1e-10
    with pytest.raises(BadArgument):
        rotary_embed(torch.randn(4, 7), torch.arange(4))


def test_rotary_relative_shift():
    g = torch.Generator().manual_seed(0)
    q = torch.randn(16, generator=g, dtype=torch.float64)
    k = torch.randn(16, generator=g, dtype=torch.float64)
    dots = {}
    for m in range(8):
        for n in range(8):
            rq = rotary_embed(q[None], torch.tensor([m]))[0]
            rk = rotary_embed(k[None], torch.tensor([n]))[0]
            dots.setdefault(m - n, []).append(float(rq @ rk))
    for vals in dots.values():
        assert max(vals) - min(vals) < 1e-10


def test_rotary_angles():
    d = 6
    x = torch.zeros(1, d, dtype=torch.float64)
    x[0, 2] = 1.0
    y = rotary_embed(x, torch.tensor([3.0]))
    ang = 3.0 * 10000.0 ** (-2.0 * 1 / d)
    assert torch.allclose(y[0, 2:4], torch.tensor([math.cos(ang), math.sin(ang)], dtype=torch.float64))


def _fd_check(model, closure, n_coords, seed, step=1e-5):
    grads = gradients(model, closure)
    params = dict(model.named_parameters())
    index = [(name, i) for name, p in params.items() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(index), size=n_coords, replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            name, i = index[k]
            flat = params[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            up = closure().item()
            flat[i] = orig - step
            down = closure().item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            an = grads[name].view(-1)[i].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("temporal", [False, True])
def test_gradient_matches_finite_differences(temporal):
    model = randomize(tiny(temporal=temporal), 21)
    g = torch.Generator().manual_seed(4)
    x = torch.randn(2, 135, 2, generator=g, dtype=torch.float64)
    target = torch.randn(2, 135, 2, generator=g, dtype=torch.float64)
    proj = torch.randn(2, 135, 2, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 40])
    text = text_batch(["one two three", "three two one"], torch.float64)
    assert text.tokens.shape[1] == 3

    def closure():
        v, raw = model(x, t, text)
        return loss_simple(v, target) + (torch.sigmoid(raw) * proj).mean()

    assert _fd_check(model, closure, 240, seed=int(temporal)) < 1e-3


def test_gradient_layout_and_zero_region():
    model = randomize(tiny(), 2)
    x = torch.randn(1, 135, 1, dtype=torch.float64)
    text = text_batch(["walk"], torch.float64)

    def closure():
        v, _ = model(x, torch.tensor([5]), text)
        return loss_simple(v, v.detach())

    grads = gradients(model, closure)
    assert list(grads) == [n for n, _ in model.named_parameters()]
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())
    assert not any("token" in n and "null" not in n and "time" not in n for n in grads)


def test_non_finite_gradient_raises():
    model = tiny()
    with pytest.raises(NonFiniteGradient):
        gradients(model, lambda: model.null_pooled.sum() * float("inf"))

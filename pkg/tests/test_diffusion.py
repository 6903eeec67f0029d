import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from textmotion.diffusion import (
    HYBRID_VLB_WEIGHT,
    GuidanceConfig,
    eps_from,
    gaussian_nll,
    guided_prediction,
    hybrid_loss,
    loss_simple,
    loss_vlb,
    make_schedule,
    p_sample_step,
    posterior_mean,
    q_sample,
    sample,
    v_from,
    x0_from,
)
from textmotion.errors import BadArgument, BadTimestep, ShapeMismatch


def forward_chain(schedule, x0, t_stop, rng):
    """Step-by-step forward process x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps_t."""
    x = np.array(x0, dtype=np.float64, copy=True)
    for t in range(1, t_stop + 1):
        b = schedule.beta[t]
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * rng.standard_normal(x.shape)
    return x


@pytest.mark.parametrize("kind,T", [("cosine", 1000), ("cosine", 100), ("linear", 1000), ("linear", 50)])
def test_schedule_invariants(kind, T):
    s = make_schedule(kind, T)
    assert np.abs(s.signal_rate**2 + s.noise_rate**2 - 1).max() < 1e-12
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert s.alpha_bar[T] < s.alpha_bar[1]


def test_cosine_profile_matches_closed_form():
    T = 1000
    s = make_schedule("cosine", T)
    f = lambda t: math.cos((t / T + 0.008) / 1.008 * math.pi / 2) ** 2
    unclipped = [t for t in range(1, T + 1) if s.beta[t] < 0.999]
    for t in unclipped:
        assert math.isclose(s.alpha_bar[t], f(t) / f(0), rel_tol=1e-9)
    assert s.beta.max() <= 0.999
    assert s.alpha_bar[T] < 1e-3


def test_linear_endpoints_scale_with_T():
    assert np.isclose(make_schedule("linear", 1000).beta[1], 1e-4)
    assert np.isclose(make_schedule("linear", 1000).beta[-1], 0.02)
    s = make_schedule("linear", 100)
    assert np.isclose(s.beta[1], 1e-3) and np.isclose(s.beta[-1], 0.2)


@pytest.mark.parametrize("kind,T", [("cosine", 1), ("quadratic", 10), ("linear", 0)])
def test_bad_schedule(kind, T):
    with pytest.raises(BadArgument):
        make_schedule(kind, T)


def test_q_sample_edges():
    s = make_schedule("cosine", 100)
    x0 = torch.randn(2, 135, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    assert torch.allclose(q_sample(s, torch.zeros_like(x0), 7, eps), s.noise_rate[7] * eps)
    assert (q_sample(s, x0, 1, eps) - x0).abs().max() < 0.1
    with pytest.raises(ShapeMismatch):
        q_sample(s, x0, 3, eps[:, :, :2])
    with pytest.raises(BadTimestep):
        q_sample(s, x0, 0, eps)
    with pytest.raises(BadTimestep):
        q_sample(s, x0, torch.tensor([1, 101]), eps)


def test_v_endpoints():
    s = make_schedule("cosine", 10)
    x0 = torch.randn(1, 4, 1, dtype=torch.float64)
    eps = torch.randn_like(x0)
    # a=1,s=0 and a=0,s=1 via the index-0 clean state and a hand-built terminal state
    assert torch.equal(v_from(x0, eps, 0, s), eps)
    import dataclasses

    pure = dataclasses.replace(s, alpha_bar=np.r_[s.alpha_bar[:-1], 0.0])
    assert torch.equal(v_from(x0, eps, 10, pure), -x0)


def test_conversion_triangle():
    rng = np.random.default_rng(0)
    for kind in ("cosine", "linear"):
        s = make_schedule(kind, 1000)
        x0 = torch.as_tensor(rng.normal(size=(1000, 6, 2)))
        eps = torch.as_tensor(rng.normal(size=(1000, 6, 2)))
        t = torch.as_tensor(rng.integers(1, 1001, size=1000))
        x_t = q_sample(s, x0, t, eps)
        v = v_from(x0, eps, t, s)
        a = torch.as_tensor(s.signal_rate[t.numpy()]).reshape(-1, 1, 1)
        sig = torch.as_tensor(s.noise_rate[t.numpy()]).reshape(-1, 1, 1)
        assert (x0_from(x_t, v, t, s) - x0).abs().max() < 1e-10
        assert (eps_from(x_t, v, t, s) - eps).abs().max() < 1e-10
        assert (v_from(x0_from(x_t, v, t, s), eps_from(x_t, v, t, s), t, s) - v).abs().max() < 1e-10
        assert (q_sample(s, x0_from(x_t, v, t, s), t, eps_from(x_t, v, t, s)) - x_t).abs().max() < 1e-10
        assert ((a * x_t - x0) / sig - v).abs().max() < 1e-8


@pytest.mark.parametrize("kind,T,t_stop", [("cosine", 1000, 1000), ("cosine", 100, 50), ("linear", 200, 200)])
def test_forward_chain_matches_marginal(kind, T, t_stop):
    s = make_schedule(kind, T)
    n = 100_000
    x0 = np.array([2.0, -1.0, 0.5])
    rng = np.random.default_rng([7, T, t_stop])
    xs = forward_chain(s, np.broadcast_to(x0, (n, 3)), t_stop, rng)
    mean_exp = s.signal_rate[t_stop] * x0
    var_exp = s.noise_rate[t_stop] ** 2
    se_mean = math.sqrt(var_exp / n)
    se_var = var_exp * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(xs.mean(axis=0) - mean_exp) < 4 * se_mean)
    assert np.all(np.abs(xs.var(axis=0, ddof=1) - var_exp) < 4 * se_var)


def test_loss_simple_values():
    a = torch.tensor([1.0, 2.0, -0.5])
    b = torch.tensor([0.0, 2.5, 0.5])
    assert loss_simple(a, a) == 0
    assert loss_simple(torch.ones(4, 5), torch.zeros(4, 5)) == 1
    assert math.isclose(float(loss_simple(a, b)), (1.0 + 0.25 + 1.0) / 3)
    with pytest.raises(ShapeMismatch):
        loss_simple(a, b[:2])


def _exact_v_setup(s, t, shape=(3, 5, 2), seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(shape, generator=g, dtype=torch.float64)
    eps = torch.randn(shape, generator=g, dtype=torch.float64)
    x_t = q_sample(s, x0, t, eps)
    return x0, x_t, v_from(x0, eps, t, s)


@pytest.mark.parametrize("t", [2, 17, 100])
def test_vlb_zero_at_exact_posterior(t):
    s = make_schedule("cosine", 100)
    x0, x_t, v = _exact_v_setup(s, t)
    raw = torch.full_like(x_t, -math.inf)
    assert abs(float(loss_vlb(s, v, raw, x0, x_t, t, reduction="sum"))) < 1e-10


def test_vlb_doubled_variance_closed_form():
    s = make_schedule("cosine", 100)
    t = 2
    x0, x_t, v = _exact_v_setup(s, t)
    w = math.log(2.0) / (s.log_beta[t] - s.posterior_log_variance[t])
    raw = torch.full_like(x_t, math.log(w / (1 - w)))
    per_dim = 0.5 * (math.log(2.0) + 0.5 - 1.0)
    got = float(loss_vlb(s, v, raw, x0, x_t, t, reduction="sum"))
    assert math.isclose(got, per_dim * x_t.numel(), rel_tol=1e-9)


@pytest.mark.parametrize("t,w", [(3, 0.5), (40, 0.9), (99, 0.3)])
def test_vlb_variance_ratio_closed_form(t, w):
    s = make_schedule("cosine", 100)
    x0, x_t, v = _exact_v_setup(s, t)
    raw = torch.full_like(x_t, math.log(w / (1 - w)))
    ratio = math.exp(w * (s.log_beta[t] - s.posterior_log_variance[t]))
    per_dim = 0.5 * (math.log(ratio) + 1.0 / ratio - 1.0)
    got = float(loss_vlb(s, v, raw, x0, x_t, t, reduction="sum"))
    assert math.isclose(got, per_dim * x_t.numel(), rel_tol=1e-8)


@given(st.integers(2, 100), st.integers(0, 10_000), st.floats(-8, 8), st.floats(0, 2))
def test_vlb_nonnegative_for_t_above_one(t, seed, raw_value, mean_err):
    s = make_schedule("cosine", 100)
    x0, x_t, v = _exact_v_setup(s, t, seed=seed)
    raw = torch.full_like(x_t, raw_value)
    assert float(loss_vlb(s, v + mean_err, raw, x0, x_t, t, reduction="none").min()) >= -1e-12


def test_vlb_at_t1_is_gaussian_nll():
    s = make_schedule("cosine", 100)
    x0, x_t, v = _exact_v_setup(s, 1)
    v = v + 0.1
    raw = torch.zeros_like(x_t)
    x0_hat = s.signal_rate[1] * x_t - s.noise_rate[1] * v
    mean = s.posterior_coef_x0[1] * x0_hat + s.posterior_coef_xt[1] * x_t
    logvar = 0.5 * s.log_beta[1] + 0.5 * s.posterior_log_variance[1]
    expected = 0.5 * (math.log(2 * math.pi) + logvar + (x0 - mean) ** 2 / math.exp(logvar))
    got = loss_vlb(s, v, raw, x0, x_t, 1, reduction="none")
    assert torch.allclose(got, expected, atol=1e-12)
    assert torch.allclose(got, gaussian_nll(x0, mean, torch.full_like(x0, logvar)), atol=1e-12)


def test_vlb_trains_variance_only():
    s = make_schedule("cosine", 100)
    x0, x_t, v = _exact_v_setup(s, 30)
    v = (v + 0.3).requires_grad_(True)
    raw = torch.zeros_like(x_t, requires_grad=True)
    loss_vlb(s, v, raw, x0, x_t, 30).backward()
    assert v.grad is None
    assert raw.grad is not None and raw.grad.abs().sum() > 0


def test_vlb_errors():
    s = make_schedule("cosine", 10)
    x = torch.zeros(2, 3, 1)
    with pytest.raises(ShapeMismatch):
        loss_vlb(s, x, x[:1], x, x, 2)
    with pytest.raises(BadTimestep):
        loss_vlb(s, x, x, x, x, 11)


def test_hybrid_weight():
    assert HYBRID_VLB_WEIGHT == 1e-3
    assert hybrid_loss(torch.tensor(2.0), torch.tensor(5.0)) == 2.0 + 1e-3 * 5.0


class CountingModel:
    """Deterministic toy model whose output depends on the conditioning tag."""

    def __init__(self):
        self.calls = 0

    def __call__(self, x, t, cond):
        self.calls += 1
        shift = {"cond": 0.7, "null": -0.4}[cond]
        v = torch.tanh(x) * 0.5 + shift + 0.01 * t.reshape(-1, 1, 1).to(x.dtype)
        return v, torch.zeros_like(x)


def test_guidance_identities():
    x = torch.randn(3, 4, 2)
    t = torch.full((3,), 5)
    m = CountingModel()
    direct_c, _ = m(x, t, "cond")
    direct_n, _ = m(x, t, "null")
    m.calls = 0
    v1, _ = guided_prediction(m, x, t, "cond", GuidanceConfig(1.0, "null"))
    assert m.calls == 1 and torch.equal(v1, direct_c)
    v0, _ = guided_prediction(m, x, t, "cond", GuidanceConfig(0.0, "null"))
    assert m.calls == 2 and torch.equal(v0, direct_n)
    v2, _ = guided_prediction(m, x, t, "cond", GuidanceConfig(2.5, "null"))
    assert m.calls == 4 and torch.allclose(v2, direct_n + 2.5 * (direct_c - direct_n))
    with pytest.raises(BadArgument):
        GuidanceConfig(-1.0)
    with pytest.raises(BadArgument):
        GuidanceConfig(float("nan"))


def test_sampling_identities_and_determinism():
    s = make_schedule("cosine", 20)
    m = CountingModel()
    run = lambda scale, cond, seed: sample(m, s, (2, 4, 3), cond, GuidanceConfig(scale, "null"), torch.Generator().manual_seed(seed))
    assert torch.equal(run(1.0, "cond", 7), run(1.0, "cond", 7))
    assert torch.equal(run(1.0, "cond", 7), sample(m, s, (2, 4, 3), "cond", None, torch.Generator().manual_seed(7)))
    assert torch.equal(run(0.0, "cond", 7), run(1.0, "null", 7))
    assert run(1.0, "cond", 7).shape == (2, 4, 3)
    assert not torch.equal(run(1.0, "cond", 7), run(1.0, "cond", 8))


def test_last_step_is_posterior_mean():
    s = make_schedule("cosine", 20)
    m = CountingModel()
    x = torch.randn(2, 4, 3)
    out = p_sample_step(m, s, x, 1, "cond", None, torch.Generator().manual_seed(0))
    v, _ = m(x, torch.full((2,), 1), "cond")
    expected = posterior_mean(s, x0_from(x, v, 1, s).clamp(-3, 3), x, 1)
    assert torch.equal(out, expected)


def test_oracle_model_recovers_x0():
    s = make_schedule("cosine", 100)
    target = torch.as_tensor(np.random.default_rng(3).uniform(-2, 2, size=(2, 135, 4)))

    def oracle(x, t, cond):
        a = torch.as_tensor(s.signal_rate[t.numpy()]).reshape(-1, 1, 1)
        sig = torch.as_tensor(s.noise_rate[t.numpy()]).reshape(-1, 1, 1)
        return (a * x - target) / sig, torch.zeros_like(x)

    out = sample(oracle, s, target.shape, None, None, torch.Generator().manual_seed(1), dtype=torch.float64)
    assert (out - target).abs().max() < 1e-3

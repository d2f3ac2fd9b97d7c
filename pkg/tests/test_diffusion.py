import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import randomize, tiny_model
from facepers import codec, prompts
from facepers.diffusion import (SamplerConfig, TrainLossConfig, cfg_combine, loss_diff, loss_gen,
                                loss_pers, make_schedule, q_sample, sample, sampling_timesteps,
                                total_loss)
from facepers.errors import DegenerateMapError, InvalidArgumentError

POS = prompts.tokenize(prompts.POSITIVE_PROMPT)

# closed-form product of (1 - beta_t) for the linear 1e-4 -> 0.02 ramp, T = 1000,
# evaluated independently with math.fsum over logs
ABAR_999 = math.exp(math.fsum(math.log1p(-(1e-4 + (0.02 - 1e-4) * i / 999)) for i in range(1000)))


def test_schedule_end_value(sched):
    assert ABAR_999 < 0.01
    assert abs(float(sched.alpha_bars[-1]) - ABAR_999) < 1e-12


def test_schedule_first_term(sched):
    assert float(sched.alpha_bars[0]) == pytest.approx(1 - 1e-4, abs=1e-15)


def test_schedule_invariants(sched):
    assert torch.all(sched.betas > 0) and torch.all(sched.betas < 1)
    assert torch.equal(sched.alphas, 1 - sched.betas)
    assert torch.all(sched.alpha_bars[1:] < sched.alpha_bars[:-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2000), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_schedule_monotone_property(T, start, span):
    s = make_schedule(T, start, min(start + span, 0.999))
    assert torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1])


@pytest.mark.parametrize("args", [(1000, 0.0, 0.02), (1000, 0.03, 0.02), (1000, 1e-4, 1.0), (0, 1e-4, 0.02)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(InvalidArgumentError):
        make_schedule(*args)


def test_q_sample_t0_and_zero_noise(sched):
    z0 = torch.rand(2, 12, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    zt = q_sample(z0, 0, eps, sched)
    assert torch.all((zt - z0).abs() <= math.sqrt(1 - float(sched.alpha_bars[0])) * eps.abs() + 1e-4 * z0.abs() + 1e-15)
    assert torch.equal(q_sample(z0, 400, torch.zeros_like(z0), sched), sched.alpha_bars[400].sqrt() * z0)


def test_q_sample_moments(sched):
    t = 600
    z0 = torch.full((10_000, 1, 1, 1), 0.7, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    zt = q_sample(z0, t, eps, sched)
    ab = float(sched.alpha_bars[t])
    mean_se = math.sqrt((1 - ab) / 10_000)
    assert abs(float(zt.mean()) - math.sqrt(ab) * 0.7) < 3 * mean_se
    var_se = (1 - ab) * math.sqrt(2 / 9_999)
    assert abs(float(zt.var()) - (1 - ab)) < 3 * var_se


class EpsOracle(torch.nn.Module):
    """Returns the true noise: (z_t - sqrt(abar) z0) / sqrt(1 - abar)."""

    def __init__(self, z0, sched):
        super().__init__()
        self.z0, self.sched = z0, sched

    def forward(self, z_t, t, **kw):
        ab = self.sched.alpha_bars[t].to(z_t.dtype)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt()


def test_loss_diff_zero_for_oracle(sched):
    z0 = torch.rand(1, 12, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    assert float(loss_diff(EpsOracle(z0, sched), z0, 500, eps, sched=sched)) < 1e-20


def test_losses_non_negative(sched):
    m = randomize(tiny_model())
    z0 = torch.rand(2, 12, 8, 8)
    eps = torch.randn_like(z0)
    lq = torch.rand(2, 3, 16, 16)
    assert loss_diff(m, z0, 300, eps, lq=lq, sched=sched).item() >= 0
    assert loss_gen(m, z0, 300, eps, sched=sched).item() >= 0


def test_loss_gen_equals_loss_diff_when_lq_is_ignored(sched):
    m = randomize(tiny_model())
    with torch.no_grad():
        for sft in m.down_sft:
            sft.shared.weight.zero_()
    z0, eps = torch.rand(2, 12, 8, 8), torch.randn(2, 12, 8, 8)
    lq = torch.rand(2, 3, 16, 16)
    assert torch.equal(loss_diff(m, z0, 300, eps, lq=lq, sched=sched), loss_gen(m, z0, 300, eps, sched=sched))


def test_loss_gen_gradient_reaches_gains_and_adapters(sched):
    m = randomize(tiny_model())
    refs = torch.rand(2, 3, 16, 16)
    ps = m.new_personalization(refs)
    from facepers.diffusion import reference_features
    feats = reference_features(m, refs[:1], 300, torch.Generator().manual_seed(0), sched=sched)
    z0, eps = torch.rand(1, 12, 8, 8), torch.randn(1, 12, 8, 8)
    loss_gen(m, z0, 300, eps, POS, feats, ps, sched).backward()
    assert all(g.grad is not None and g.grad.abs().sum() > 0 for g in ps.gains.values())
    # with gains at zero the adapter weights get their gradient through the gains on the next step
    opt = torch.optim.SGD(ps.parameters(), lr=0.1)
    opt.step()
    opt.zero_grad()
    loss_gen(m, z0, 300, eps, POS, feats, ps, sched).backward()
    assert ps.blocks["mid"].out_txt.weight.grad.abs().sum() > 0


def test_loss_pers_values():
    a = torch.tensor([1.0, 0.0])
    b = torch.tensor([0.0, 1.0])
    assert float(loss_pers(a, b)) == 2.0
    x = torch.rand(10) + 0.1
    assert float(loss_pers(x, x)) == 0.0
    assert float(loss_pers(3.0 * x, x)) < 1e-12


def test_loss_pers_degenerate_map():
    with pytest.raises(DegenerateMapError):
        loss_pers(torch.zeros(4), torch.ones(4))


def test_total_loss_weights():
    ld, lg, lp = torch.tensor(1.5), torch.tensor(2.0), torch.tensor(4.0)
    assert float(total_loss(ld, lg, lp, TrainLossConfig(0.0, 0.0))) == 1.5
    assert float(total_loss(ld, lg, lp, TrainLossConfig(0.0, 0.01))) == pytest.approx(1.54)
    one = float(total_loss(ld, lg, lp, TrainLossConfig(0.1, 0.0))) - 1.5
    two = float(total_loss(ld, lg, lp, TrainLossConfig(0.2, 0.0))) - 1.5
    assert two == pytest.approx(2 * one)
    assert TrainLossConfig().lambda_gen == 0.1
    with pytest.raises(InvalidArgumentError):
        TrainLossConfig(-1.0)


def test_cfg_combine_identities():
    g = torch.Generator().manual_seed(0)
    pos, neg = torch.randn(2, 12, 4, 4, generator=g), torch.randn(2, 12, 4, 4, generator=g)
    assert torch.equal(cfg_combine(pos, neg, 1.0), pos)
    assert torch.equal(cfg_combine(pos, neg, 0.0), neg)
    for lam in (0.3, 4.0, 7.5):
        assert torch.equal(cfg_combine(pos, pos, lam), pos)
        assert torch.allclose(cfg_combine(pos, neg, lam), neg + lam * (pos - neg), atol=1e-5)
    with pytest.raises(InvalidArgumentError):
        cfg_combine(pos, neg[:1], 2.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1))
def test_cfg_combine_affine_in_lambda(a, b, w):
    pos, neg = torch.tensor([1.25, -0.5], dtype=torch.float64), torch.tensor([0.5, 2.0], dtype=torch.float64)
    mix = cfg_combine(pos, neg, w * a + (1 - w) * b)
    assert torch.allclose(mix, w * cfg_combine(pos, neg, a) + (1 - w) * cfg_combine(pos, neg, b), atol=1e-9)


def test_sampling_timesteps():
    steps = sampling_timesteps(1000, 200)
    assert len(steps) == 200 and steps[0] == 995 and steps[-1] == 0
    assert len(set(np.diff(steps))) == 1
    with pytest.raises(InvalidArgumentError):
        sampling_timesteps(1000, 1001)


def test_sampler_defaults():
    c = SamplerConfig()
    assert c.num_steps == 200 and c.lambda_cfg == 4 and c.lambda_att == 1


def _personalized_setup():
    m = randomize(tiny_model(), 0, 0.2)
    ps = randomize(m.new_personalization(torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(1))), 2)
    lq = np.random.default_rng(0).random((2, 16, 16, 3)).astype(np.float32)
    return m, ps, lq


def test_sample_deterministic_and_shaped():
    m, ps, lq = _personalized_setup()
    cfg = SamplerConfig(num_steps=5, seed=11)
    a = sample(m, lq, ps, cfg)
    assert a.shape == lq.shape and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, sample(m, lq, ps, cfg))
    single = sample(m, lq[0], None, cfg)
    assert single.shape == lq[0].shape


def test_cfg_one_equals_positive_only_sampling():
    m, ps, lq = _personalized_setup()
    guided = sample(m, lq, ps, SamplerConfig(num_steps=6, lambda_cfg=1.0, seed=3))
    positive = sample(m, lq, ps, SamplerConfig(num_steps=6, lambda_cfg=1.0, seed=3, branch="positive"))
    assert np.array_equal(guided, positive)
    four = sample(m, lq, ps, SamplerConfig(num_steps=6, lambda_cfg=4.0, seed=3))
    assert not np.array_equal(guided, four)


def test_cfg_zero_equals_negative_only_sampling():
    m, ps, lq = _personalized_setup()
    guided = sample(m, lq, ps, SamplerConfig(num_steps=6, lambda_cfg=0.0, seed=3))
    negative = sample(m, lq, ps, SamplerConfig(num_steps=6, seed=3, branch="negative"))
    assert np.array_equal(guided, negative)


def test_null_lq_negative_variant_differs():
    m, ps, lq = _personalized_setup()
    a = sample(m, lq, ps, SamplerConfig(num_steps=4, seed=3))
    b = sample(m, lq, ps, SamplerConfig(num_steps=4, seed=3, null_lq_negative=True))
    assert not np.array_equal(a, b)


def test_sampler_config_validation():
    with pytest.raises(InvalidArgumentError):
        SamplerConfig(lambda_cfg=-1)
    with pytest.raises(InvalidArgumentError):
        SamplerConfig(num_steps=0)
    with pytest.raises(InvalidArgumentError):
        SamplerConfig(branch="both")

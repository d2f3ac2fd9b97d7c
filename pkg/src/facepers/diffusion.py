"""Noise schedule, training losses and the guided DDPM sampler."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import codec, prompts
from .denoiser import Denoiser, PersonalizationState
from .errors import DegenerateMapError, InvalidArgumentError

REF_SEED_SALT = 0x5EED
BRANCHES = ("guided", "positive", "negative")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.numel())


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise InvalidArgumentError(f"invalid schedule T={T}, beta in [{beta_start}, {beta_end}]")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, 0))


def _per_sample(values: torch.Tensor, t, n: int, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.repeat(n)
    return values[t].to(like.dtype)[:, None, None, None]


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    abar = _per_sample(sched.alpha_bars, t, z0.shape[0], z0)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def reference_features(model: Denoiser, refs: torch.Tensor, t, generator: torch.Generator | None = None,
                       eps: torch.Tensor | None = None, sched: NoiseSchedule | None = None):
    """Encode reference images, noise them to step ``t`` and collect base features per site."""
    sched = sched or make_schedule()
    z0 = codec.encode(refs).to(model.dtype)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64).to(model.dtype)
    with torch.no_grad():
        return model.extract_reference_features(q_sample(z0, t, eps, sched), t)


# -- losses ------------------------------------------------------------------------

@dataclass
class TrainLossConfig:
    lambda_gen: float = 0.1
    lambda_pers: float = 0.01

    def __post_init__(self):
        if self.lambda_gen < 0 or self.lambda_pers < 0:
            raise InvalidArgumentError("loss weights must be non-negative")


def loss_diff(model, z0, t, eps, prompt=None, lq=None, ref_features=None, pstate=None,
              sched: NoiseSchedule | None = None, lambda_att: float = 1.0) -> torch.Tensor:
    """Mean squared error between ``eps`` and the conditioned noise prediction."""
    sched = sched or make_schedule()
    z_t = q_sample(z0, t, eps, sched)
    pred = model(z_t, t, prompt=prompt, lq=lq, ref_features=ref_features, pstate=pstate,
                 lambda_att=lambda_att)
    return F.mse_loss(pred, eps)


def loss_gen(model, z0, t, eps, prompt=None, ref_features=None, pstate=None,
             sched: NoiseSchedule | None = None, lambda_att: float = 1.0) -> torch.Tensor:
    """The diffusion loss with the null LQ input, so identity must come from the adapters."""
    return loss_diff(model, z0, t, eps, prompt, None, ref_features, pstate, sched, lambda_att)


def loss_pers(a_star: torch.Tensor, a_eot: torch.Tensor) -> torch.Tensor:
    """Squared distance of max-normalized maps, summed over the last axis and averaged over the rest."""
    if a_star.shape != a_eot.shape:
        raise InvalidArgumentError("attention maps differ in shape")
    m_star = a_star.amax(dim=-1, keepdim=True)
    m_eot = a_eot.amax(dim=-1, keepdim=True)
    if bool((m_star <= 0).any()) or bool((m_eot <= 0).any()):
        raise DegenerateMapError("attention map has no positive entry")
    return ((a_star / m_star - a_eot / m_eot) ** 2).sum(dim=-1).mean()


def pers_loss_from_features(model: Denoiser, ref_features, prompt, pstate) -> torch.Tensor:
    maps = model.attention_maps(ref_features, prompt, pstate)
    star, eot = prompts.star_index(prompt), prompts.eot_index(prompt)
    terms = [loss_pers(a[..., star], a[..., eot]) for a in maps.values()]
    return torch.stack(terms).mean()


def total_loss(l_diff: torch.Tensor, l_gen: torch.Tensor, l_pers: torch.Tensor,
               cfg: TrainLossConfig) -> torch.Tensor:
    return l_diff + cfg.lambda_gen * l_gen + cfg.lambda_pers * l_pers


# -- guidance and sampling ------------------------------------------------------------

def cfg_combine(pred_pos: torch.Tensor, pred_neg: torch.Tensor, lambda_cfg: float) -> torch.Tensor:
    """neg + lambda * (pos - neg); exact at lambda = 0 and lambda = 1."""
    if pred_pos.shape != pred_neg.shape:
        raise InvalidArgumentError("guidance branches differ in shape")
    return torch.lerp(pred_neg, pred_pos, float(lambda_cfg))


@dataclass
class SamplerConfig:
    num_steps: int = 200
    lambda_cfg: float = 4.0
    positive: str = prompts.POSITIVE_PROMPT
    negative: str = prompts.NEGATIVE_PROMPT
    seed: int = 0
    lambda_att: float = 1.0
    null_lq_negative: bool = False
    branch: str = "guided"

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise InvalidArgumentError(f"branch must be one of {BRANCHES}")
        if self.num_steps < 1:
            raise InvalidArgumentError("num_steps must be >= 1")
        if self.lambda_cfg < 0:
            raise InvalidArgumentError("lambda_cfg must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def sampling_timesteps(T: int, num_steps: int) -> list[int]:
    """Uniform-stride subsequence of [0, T), descending."""
    if not 1 <= num_steps <= T:
        raise InvalidArgumentError(f"num_steps must lie in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return list(range(0, stride * num_steps, stride))[::-1]


def _step_coefficients(sched: NoiseSchedule, steps: list[int]):
    """Per-step DDPM posterior coefficients for the respaced chain."""
    out = []
    for i, t in enumerate(steps):
        abar = float(sched.alpha_bars[t])
        abar_prev = float(sched.alpha_bars[steps[i + 1]]) if i + 1 < len(steps) else 1.0
        beta = 1 - abar / abar_prev
        coef_x0 = np.sqrt(abar_prev) * beta / (1 - abar)
        coef_zt = np.sqrt(1 - beta) * (1 - abar_prev) / (1 - abar)
        var = beta * (1 - abar_prev) / (1 - abar)
        out.append((abar, coef_x0, coef_zt, var))
    return out


def ddpm_loop(predict: Callable[[torch.Tensor, int, int], torch.Tensor], shape, sched: NoiseSchedule,
              num_steps: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Run the reverse chain. ``predict(z, t, step)`` returns the guided noise estimate."""
    steps = sampling_timesteps(sched.T, num_steps)
    coefs = _step_coefficients(sched, steps)
    z = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    for i, (t, (abar, c_x0, c_zt, var)) in enumerate(zip(steps, coefs)):
        eps = predict(z, t, i)
        x0 = ((z - np.sqrt(1 - abar) * eps) / np.sqrt(abar)).clamp(-1, 1)
        z = c_x0 * x0 + c_zt * z
        if i + 1 < len(steps):
            noise = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
            z = z + np.sqrt(var) * noise
    return z


def prepare_references(pstate: PersonalizationState | None, size: tuple[int, int]) -> torch.Tensor | None:
    if pstate is None or pstate.references.shape[0] == 0:
        return None
    refs = pstate.references
    if tuple(refs.shape[-2:]) != tuple(size):
        refs = F.interpolate(refs, size=size, mode="bilinear", align_corners=False, antialias=True)
    return refs


class GuidedPredictor:
    """Noise prediction for one sampler step with negative-prompt guidance."""

    def __init__(self, model: Denoiser, pstate: PersonalizationState | None, cfg: SamplerConfig,
                 sched: NoiseSchedule, ref_size: tuple[int, int]):
        self.model, self.pstate, self.cfg, self.sched = model, pstate, cfg, sched
        self.pos = prompts.tokenize(cfg.positive)
        self.neg = prompts.tokenize(cfg.negative)
        self.refs = prepare_references(pstate, ref_size)
        self.ref_gen = torch.Generator().manual_seed(int(cfg.seed) ^ REF_SEED_SALT)
        self.ref_features = None

    def start_step(self, t: int, step: int):
        """Draw this step's reference features; shared by every tile of the step."""
        if self.refs is None:
            self.ref_features = None
            return
        ref = self.refs[step % self.refs.shape[0]][None]
        self.ref_features = reference_features(self.model, ref, t, self.ref_gen, sched=self.sched)

    def __call__(self, z: torch.Tensor, t: int, lq: torch.Tensor) -> torch.Tensor:
        n = z.shape[0]
        feats = None
        if self.ref_features is not None:
            feats = {k: v.expand(n, *v.shape[1:]) for k, v in self.ref_features.items()}
        tt = torch.full((n,), t, dtype=torch.long)
        cond = self.model.encode_lq_condition(lq, tt)
        if self.cfg.branch == "negative":
            return self.model(z, tt, self.neg, ref_features=feats, pstate=self.pstate,
                              lambda_att=self.cfg.lambda_att, cond=cond)
        pos = self.model(z, tt, self.pos, ref_features=feats, pstate=self.pstate,
                         lambda_att=self.cfg.lambda_att, cond=cond)
        if self.cfg.branch == "positive":
            return pos
        if self.cfg.null_lq_negative:
            neg_cond = None
        elif self.pstate is None or feats is None:
            # prompts only act through the adapters, so both branches coincide
            return cfg_combine(pos, pos, self.cfg.lambda_cfg)
        else:
            neg_cond = cond
        neg = self.model(z, tt, self.neg, ref_features=feats, pstate=self.pstate,
                         lambda_att=self.cfg.lambda_att, cond=neg_cond)
        return cfg_combine(pos, neg, self.cfg.lambda_cfg)


@torch.no_grad()
def sample(model: Denoiser, lq, pstate: PersonalizationState | None = None,
           config: SamplerConfig | None = None, sched: NoiseSchedule | None = None,
           return_latent: bool = False):
    """Restore an LQ image (H x W x 3) or batch (N x H x W x 3)."""
    config = config or SamplerConfig()
    sched = sched or make_schedule()
    single = isinstance(lq, np.ndarray) and lq.ndim == 3
    lq_t = codec.image_to_tensor(lq).to(torch.float32)
    n, _, h, w = lq_t.shape
    f = codec.FACTOR
    shape = (n, model.config.latent_channels, h // f, w // f)
    if h % f or w % f:
        raise InvalidArgumentError(f"image {h}x{w} not divisible by codec factor {f}")
    predictor = GuidedPredictor(model, pstate, config, sched, (h, w))
    gen = torch.Generator().manual_seed(int(config.seed))

    def predict(z, t, step):
        predictor.start_step(t, step)
        return predictor(z, t, lq_t)

    z0 = ddpm_loop(predict, shape, sched, config.num_steps, gen, model.dtype)
    if return_latent:
        return z0
    out = codec.tensor_to_image(codec.decode(z0))
    return out if single or n > 1 else out[None]

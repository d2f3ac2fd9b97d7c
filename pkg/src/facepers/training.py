"""Base-model training and per-identity personalization."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import codec, prompts
from .checkpoint import state_digest
from .data import IdentityDataset, ReferenceSet, sample_training_example
from .degradation import LEVELS, degrade, sample_degradation
from .denoiser import Denoiser, DenoiserConfig, PersonalizationState
from .diffusion import (NoiseSchedule, TrainLossConfig, make_schedule, pers_loss_from_features,
                        prepare_references, q_sample, reference_features, total_loss)
from .errors import EmptyDatasetError, FaceRestoreError, InvalidArgumentError

log = logging.getLogger(__name__)


@dataclass
class BaseTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    crop_size: int = 64
    crop_prob: float = 0.5
    p_hq: float = 0.03
    level: str = "heavy"
    lq_dropout: float = 0.1
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    loss_weighting: str = "v"
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if not 0 <= self.p_hq <= 1 or not 0 <= self.crop_prob <= 1 or not 0 <= self.lq_dropout <= 1:
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        if self.level not in LEVELS:
            raise InvalidArgumentError(f"level must be one of {LEVELS}")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgumentError("steps must be >= 0 and batch_size >= 1")
        if self.loss_weighting not in ("eps", "v"):
            raise InvalidArgumentError("loss_weighting must be 'eps' or 'v'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PersonalizeConfig:
    iterations: int = 500
    n_ref: int = 5
    batch_size: int = 2
    lr_adapter: float = 1e-3
    lr_token: float = 5e-3
    loss: TrainLossConfig = field(default_factory=TrainLossConfig)
    crop_size: int = 64
    crop_prob: float = 0.0
    p_hq: float = 0.03
    level: str = "heavy"
    lambda_att: float = 1.0
    prompt: str = prompts.POSITIVE_PROMPT
    loss_weighting: str = "v"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.n_ref < 1 or self.batch_size < 1:
            raise InvalidArgumentError("iterations >= 0, n_ref >= 1 and batch_size >= 1 required")
        if self.loss_weighting not in ("eps", "v"):
            raise InvalidArgumentError("loss_weighting must be 'eps' or 'v'")
        if self.level not in LEVELS:
            raise InvalidArgumentError(f"level must be one of {LEVELS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy()).float()


def make_pairs(dataset: IdentityDataset, n: int, crop_size: int, crop_prob: float, level: str,
               p_hq: float, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """``n`` (high-quality, degraded) training pairs as (N, 3, H, W) tensors."""
    hq, lq = [], []
    for _ in range(n):
        x = sample_training_example(dataset, crop_size, crop_prob, rng)
        hq.append(x)
        lq.append(degrade(x, sample_degradation(level, rng, p_hq)))
    return _to_batch(hq), _to_batch(lq)


def _zero_cond(cond: list[torch.Tensor], keep: torch.Tensor) -> list[torch.Tensor]:
    # zero features give identity modulation, the same as dropping the LQ input
    return [c * keep[:, None, None, None].to(c.dtype) for c in cond]


def train_base(dataset: IdentityDataset, config: BaseTrainConfig | None = None,
               sched: NoiseSchedule | None = None,
               callback: Callable[[dict], None] | None = None) -> Denoiser:
    """Train denoiser and LQ encoder on (degraded, clean) pairs with the diffusion loss."""
    config = config or BaseTrainConfig()
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    sched = sched or make_schedule()
    torch.manual_seed(config.seed)
    model = Denoiser(config.model)
    rng = np.random.default_rng([config.seed, 0xBA5E])
    gen = torch.Generator().manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    ema = [p.detach().clone() for p in params]
    model.train()
    for step in range(config.steps):
        hq, lq = make_pairs(dataset, config.batch_size, config.crop_size, config.crop_prob,
                            config.level, config.p_hq, rng)
        n = hq.shape[0]
        z0 = codec.encode(hq).float()
        t = torch.randint(0, sched.T, (n,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        keep = (torch.rand(n, generator=gen) >= config.lq_dropout)
        cond = _zero_cond(model.encode_lq_condition(lq, t), keep)
        pred = model(q_sample(z0, t, eps, sched), t, cond=cond)
        err = (pred - eps) ** 2
        if config.loss_weighting == "v":
            # eps error = sqrt(abar) * v error, so 1 / abar turns this into the v objective
            err = err / sched.alpha_bars[t].to(err.dtype)[:, None, None, None]
        loss = err.mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        decay = min(config.ema_decay, (1 + step) / (10 + step))
        with torch.no_grad():
            for e, p in zip(ema, params):
                e.lerp_(p, 1 - decay)
        if callback is not None:
            callback({"step": step, "loss": loss.item()})
    if config.ema_decay > 0 and config.steps > 0:
        with torch.no_grad():
            for e, p in zip(ema, params):
                p.copy_(e)
    return model.eval()


@torch.no_grad()
def diffusion_loss_on(model: Denoiser, hq: torch.Tensor, lq: torch.Tensor | None, seed: int = 0,
                      sched: NoiseSchedule | None = None, weighting: str = "eps") -> float:
    """Held-out diffusion loss with fixed noise draws; ``weighting`` as in :class:`BaseTrainConfig`."""
    sched = sched or make_schedule()
    gen = torch.Generator().manual_seed(seed)
    z0 = codec.encode(hq).to(model.dtype)
    t = torch.randint(0, sched.T, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(model.dtype)
    pred = model(q_sample(z0, t, eps, sched), t, lq=lq)
    err = (pred - eps) ** 2
    if weighting == "v":
        err = err / sched.alpha_bars[t].to(err.dtype)[:, None, None, None]
    return float(err.mean())


class FrozenBase:
    """Context that stops gradients into the base and checks it is untouched on exit."""

    def __init__(self, model: Denoiser):
        self.model = model

    def __enter__(self):
        self.flags = {n: p.requires_grad for n, p in self.model.named_parameters()}
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.digest = state_digest(self.model)
        return self

    def __exit__(self, *exc):
        for n, p in self.model.named_parameters():
            p.requires_grad_(self.flags[n])
        if exc[0] is None and state_digest(self.model) != self.digest:
            raise FaceRestoreError("base weights changed during personalization")
        return False


def personalize(model: Denoiser, refs: ReferenceSet, train_images: list[np.ndarray] | None = None,
                config: PersonalizeConfig | None = None, sched: NoiseSchedule | None = None,
                callback: Callable[[dict], None] | None = None) -> PersonalizationState:
    """Fit adapters, gains and the identity token for one identity; the base stays frozen."""
    config = config or PersonalizeConfig()
    if refs is None or refs.n_ref == 0:
        raise EmptyDatasetError("personalization needs at least one reference image")
    sched = sched or make_schedule()
    train = IdentityDataset([(refs.identity_id, list(train_images or refs.images))])
    ref_t = refs.as_tensor().to(model.dtype)
    torch.manual_seed(config.seed)
    pstate = model.new_personalization(ref_t)
    ref_t = prepare_references(pstate, (config.crop_size, config.crop_size))
    prompt = prompts.tokenize(config.prompt)
    prompts.validate(prompt, require_star=True)
    rng = np.random.default_rng([config.seed, 0x9E55])
    gen = torch.Generator().manual_seed(config.seed)
    adapter = [p for n, p in pstate.named_parameters() if n != "star"]
    opt = torch.optim.Adam([
        {"params": adapter, "lr": config.lr_adapter},
        {"params": [pstate.star], "lr": config.lr_token},
    ])
    B = config.batch_size
    with FrozenBase(model):
        for step in range(config.iterations):
            hq, lq = make_pairs(train, B, config.crop_size, config.crop_prob, config.level,
                                config.p_hq, rng)
            hq, lq = hq.to(model.dtype), lq.to(model.dtype)
            z0 = codec.encode(hq).to(model.dtype)
            # independent (t, eps, reference) draws for the two diffusion terms
            t = torch.randint(0, sched.T, (2 * B,), generator=gen)
            eps = torch.randn((2 * B,) + z0.shape[1:], generator=gen, dtype=torch.float64).to(model.dtype)
            ref_idx = torch.randint(0, refs.n_ref, (2 * B,), generator=gen)
            ref_eps = torch.randn((2 * B,) + z0.shape[1:], generator=gen,
                                  dtype=torch.float64).to(model.dtype)
            use_gen = config.loss.lambda_gen > 0
            n = 2 * B if use_gen else B
            feats = reference_features(model, ref_t[ref_idx[:n]], t[:n], eps=ref_eps[:n], sched=sched)
            z_in = q_sample(torch.cat([z0, z0])[:n], t[:n], eps[:n], sched)
            cond = model.encode_lq_condition(lq, t[:B])
            if use_gen:
                cond = [torch.cat([c, torch.zeros_like(c)]) for c in cond]
            pred = model(z_in, t[:n], prompt=prompt, ref_features=feats, pstate=pstate,
                         lambda_att=config.lambda_att, cond=cond)
            err = (pred - eps[:n]) ** 2
            if config.loss_weighting == "v":
                err = err / sched.alpha_bars[t[:n]].to(err.dtype)[:, None, None, None]
            l_diff = err[:B].mean()
            l_gen = err[B:].mean() if use_gen else l_diff.new_zeros(())
            l_pers = pers_loss_from_features(model, {k: v[:B] for k, v in feats.items()}, prompt, pstate)
            loss = total_loss(l_diff, l_gen, l_pers, config.loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            record = {"step": step, "l_diff": l_diff.item(), "l_gen": l_gen.item(),
                      "l_pers": l_pers.item(), "total": loss.item()}
            if callback is not None:
                callback(record)
    return pstate


def jsonl_logger(fh) -> Callable[[dict], None]:
    def write(record: dict):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return write

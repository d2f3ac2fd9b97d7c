"""Arbitrary-size restoration by per-step overlapping-tile denoising.

Each sampler step runs the denoiser on every tile, blends the tile noise
predictions with Gaussian weights and takes one global DDPM step on the
full latent. Weights are stored already divided by the per-pixel weight
sum, so a single covering tile has weight exactly one and reproduces the
untiled sampler bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import codec
from .data import resize
from .denoiser import Denoiser, PersonalizationState
from .diffusion import GuidedPredictor, NoiseSchedule, SamplerConfig, ddpm_loop, make_schedule
from .errors import InvalidArgumentError


@dataclass
class TilePlan:
    height: int
    width: int
    tile: int
    overlap: int
    rects: list[tuple[int, int, int, int]]  # (y, x, h, w) in latent pixels, row-major
    masks: list[torch.Tensor]  # raw Gaussian masks, float64
    norm: torch.Tensor  # sum of masks per latent pixel
    weights: list[torch.Tensor]  # masks / norm over each rect

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.rects[0][2], self.rects[0][3]


def tile_origins(size: int, tile: int, overlap: int) -> list[int]:
    if size <= tile:
        return [0]
    stride = tile - overlap
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] + tile < size:
        origins.append(size - tile)
    return origins


def gaussian_mask(h: int, w: int, sigma: float) -> torch.Tensor:
    def axis(n):
        if math.isinf(sigma):
            return torch.ones(n, dtype=torch.float64)
        x = torch.arange(n, dtype=torch.float64) - (n - 1) / 2
        return torch.exp(-0.5 * (x / sigma) ** 2)
    return axis(h)[:, None] * axis(w)[None, :]


def plan_tiles(h: int, w: int, tile: int, overlap: int, sigma: float | None = None) -> TilePlan:
    """Tile an ``h x w`` latent; ``sigma`` defaults to tile / 4, ``inf`` gives flat masks."""
    if h < 1 or w < 1 or tile < 1:
        raise InvalidArgumentError("sizes must be positive")
    if not 0 <= overlap < tile:
        raise InvalidArgumentError(f"need 0 <= overlap < tile, got overlap={overlap}, tile={tile}")
    sigma = tile / 4 if sigma is None else sigma
    th, tw = min(tile, h), min(tile, w)
    rects = [(y, x, th, tw) for y in tile_origins(h, tile, overlap) for x in tile_origins(w, tile, overlap)]
    mask = gaussian_mask(th, tw, sigma)
    norm = torch.zeros(h, w, dtype=torch.float64)
    for y, x, a, b in rects:
        norm[y:y + a, x:x + b] += mask
    weights = [mask / norm[y:y + a, x:x + b] for y, x, a, b in rects]
    return TilePlan(h, w, tile, overlap, rects, [mask] * len(rects), norm, weights)


def partition_of_unity(plan: TilePlan) -> torch.Tensor:
    total = torch.zeros(plan.height, plan.width, dtype=torch.float64)
    for (y, x, a, b), wgt in zip(plan.rects, plan.weights):
        total[y:y + a, x:x + b] += wgt
    return total


@torch.no_grad()
def restore_tiled(model: Denoiser, lq: np.ndarray, pstate: PersonalizationState | None = None,
                  config: SamplerConfig | None = None, plan: TilePlan | None = None,
                  sched: NoiseSchedule | None = None, tile_batch: int = 8) -> np.ndarray:
    """Restore one H x W x 3 image of any (codec-divisible) size."""
    config = config or SamplerConfig()
    sched = sched or make_schedule()
    lq_t = codec.image_to_tensor(lq).to(torch.float32)
    if lq_t.shape[0] != 1:
        raise InvalidArgumentError("tiled restoration takes a single image")
    f = codec.FACTOR
    h, w = lq_t.shape[-2:]
    if h % f or w % f:
        raise InvalidArgumentError(f"image {h}x{w} not divisible by codec factor {f}")
    lh, lw = h // f, w // f
    if plan is None:
        plan = plan_tiles(lh, lw, 32, 16)
    if (plan.height, plan.width) != (lh, lw):
        raise InvalidArgumentError(f"plan covers {plan.height}x{plan.width}, latent is {lh}x{lw}")
    th, tw = plan.tile_shape
    predictor = GuidedPredictor(model, pstate, config, sched, (th * f, tw * f))
    weights = [wt.to(model.dtype) for wt in plan.weights]
    crops = [lq_t[..., y * f:(y + a) * f, x * f:(x + b) * f] for y, x, a, b in plan.rects]

    def predict(z, t, step):
        predictor.start_step(t, step)
        fused = torch.zeros_like(z)
        for start in range(0, len(plan.rects), tile_batch):
            idx = range(start, min(start + tile_batch, len(plan.rects)))
            zt = torch.cat([z[..., y:y + a, x:x + b] for y, x, a, b in (plan.rects[i] for i in idx)])
            pred = predictor(zt, t, torch.cat([crops[i] for i in idx]))
            for k, i in enumerate(idx):
                y, x, a, b = plan.rects[i]
                fused[..., y:y + a, x:x + b] += weights[i] * pred[k:k + 1]
        return fused

    gen = torch.Generator().manual_seed(int(config.seed))
    shape = (1, model.config.latent_channels, lh, lw)
    z0 = ddpm_loop(predict, shape, sched, config.num_steps, gen, model.dtype)
    return codec.decode_image(z0)


def restore_super_resolution(model: Denoiser, lq: np.ndarray, scale: float,
                             pstate: PersonalizationState | None = None,
                             config: SamplerConfig | None = None, tile: int = 32, overlap: int = 16,
                             sched: NoiseSchedule | None = None) -> np.ndarray:
    """Bicubic pre-upsampling to the target size, then tiled restoration."""
    f = codec.FACTOR
    h = int(round(lq.shape[0] * scale / f)) * f
    w = int(round(lq.shape[1] * scale / f)) * f
    up = resize(lq, (h, w), "bicubic")
    plan = plan_tiles(h // f, w // f, tile, overlap)
    return restore_tiled(model, up, pstate, config, plan, sched)

"""Exact invertible latent codec.

Images (N, 3, H, W) in [0, 1] map to latents (N, 3*f*f, H/f, W/f) in
[-1, 1] by space-to-depth followed by v -> 2v - 1. The affine step runs in
float64, where it is exact for every float32 pixel value above 2**-29, so
float32 images survive decode(encode(x)) bit for bit.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError

FACTOR = 2


def latent_channels(factor: int = FACTOR) -> int:
    return 3 * factor * factor


def image_to_tensor(image) -> torch.Tensor:
    """H x W x 3 (or N x H x W x 3) array -> N x 3 x H x W tensor."""
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image[None]
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    return torch.from_numpy(np.ascontiguousarray(image.transpose(0, 3, 1, 2)))


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    out = x.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return out[0] if out.shape[0] == 1 else out


def encode(image, factor: int = FACTOR) -> torch.Tensor:
    """Map an image to its float64 latent."""
    x = image_to_tensor(image).to(torch.float64)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise InvalidArgumentError(f"image {h}x{w} not divisible by factor {factor}")
    return F.pixel_unshuffle(x, factor) * 2 - 1


def decode(z: torch.Tensor, factor: int = FACTOR, dtype=torch.float32) -> torch.Tensor:
    """Inverse of :func:`encode`. Out-of-range values are clamped to [0, 1]."""
    x = (F.pixel_shuffle(z.to(torch.float64), factor) + 1) / 2
    return x.clamp(0.0, 1.0).to(dtype)


def decode_image(z: torch.Tensor, factor: int = FACTOR) -> np.ndarray:
    """Decode a latent (or batch of latents) to H x W x 3 float32 arrays."""
    return tensor_to_image(decode(z, factor))

"""Noise-prediction network with LQ modulation and gated personalization blocks.

The base model is a small UNet over codec latents. Every base block output is
modulated by features of the low-quality (LQ) image through a spatial feature
transform, ``h * (1 + scale) + shift``. A :class:`PersonalizationState` adds
frozen-base adapters at the coarse sites: each site output becomes
``F + gain * P(F, F_ref)`` where ``P`` mixes text cross-attention against the
prompt embeddings with image cross-attention against reference features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import codec, prompts
from .errors import InvalidArgumentError, InvalidPromptError


@dataclass
class DenoiserConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    latent_channels: int = codec.latent_channels()
    vocab_size: int = len(prompts.VOCAB)
    token_dim: int = 32
    head_dim: int = 32
    norm_groups: int = 8
    prediction: str = "v"
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2 or any(c <= 0 for c in self.channels):
            raise InvalidArgumentError(f"bad channel spec {self.channels}")
        if self.head_dim <= 0 or self.token_dim <= 0:
            raise InvalidArgumentError("head_dim and token_dim must be positive")
        if self.prediction not in ("eps", "v"):
            raise InvalidArgumentError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def time_dim(self) -> int:
        return 4 * self.channels[0]

    def sites(self) -> dict[str, int]:
        """Personalization sites (name -> channel width), finest first."""
        out = {f"down{i}": self.channels[i] for i in range(1, self.levels)}
        out["mid"] = self.channels[-1]
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(channels: int, wanted: int) -> int:
    return math.gcd(channels, wanted)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.base_dim).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class SFT(nn.Module):
    """Spatial feature transform. Bias-free heads map zero features to identity."""

    def __init__(self, cond_channels: int, channels: int):
        super().__init__()
        self.shared = nn.Conv2d(cond_channels, channels, 3, padding=1, bias=False)
        self.scale = nn.Conv2d(channels, channels, 1, bias=False)
        self.shift = nn.Conv2d(channels, channels, 1, bias=False)
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.shift.weight)

    def forward(self, h, cond):
        c = F.silu(self.shared(cond))
        return h * (1 + self.scale(c)) + self.shift(c)


class LQEncoder(nn.Module):
    """Time-aware encoder producing one conditioning map per UNet level."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        ch = cfg.channels
        self.time_embed = TimeEmbedding(ch[0], cfg.time_dim)
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.blocks.append(ResBlock(prev, c, cfg.time_dim, cfg.norm_groups))
            if i < len(ch) - 1:
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

    def forward(self, lq_latent, t):
        temb = self.time_embed(t)
        h = self.conv_in(lq_latent)
        feats = []
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


class PersonalizationBlock(nn.Module):
    """Text and image cross-attention adapter for one site."""

    def __init__(self, channels: int, token_dim: int, head_dim: int, groups: int = 8):
        super().__init__()
        self.head_dim = head_dim
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.to_q_txt = nn.Linear(channels, head_dim, bias=False)
        self.to_k_txt = nn.Linear(token_dim, head_dim, bias=False)
        self.to_v_txt = nn.Linear(token_dim, head_dim, bias=False)
        self.out_txt = nn.Linear(head_dim, channels)
        self.to_q_img = nn.Linear(channels, head_dim, bias=False)
        self.to_k_img = nn.Linear(channels, head_dim, bias=False)
        self.to_v_img = nn.Linear(channels, head_dim, bias=False)
        self.out_img = nn.Linear(head_dim, channels)

    def _tokens(self, feat):
        return self.norm(feat).flatten(2).transpose(1, 2)

    def text_attention(self, feat, token_emb):
        """softmax(Q K^T / sqrt(d_k)) with queries from ``feat`` -> (N, HW, L)."""
        q = self.to_q_txt(self._tokens(feat))
        k = self.to_k_txt(token_emb)
        return torch.softmax(q @ k.T / math.sqrt(self.head_dim), dim=-1)

    def forward(self, feat, ref_feat, token_emb, star: int | None = None,
                lambda_att: float = 1.0, use_mask: bool = True):
        if feat.shape[1:] != ref_feat.shape[1:]:
            raise InvalidArgumentError(
                f"feature shape {tuple(feat.shape[1:])} != reference {tuple(ref_feat.shape[1:])}")
        n, c, h, w = feat.shape
        x = self._tokens(feat)
        attn = self.text_attention(feat, token_emb)
        out = self.out_txt(attn @ self.to_v_txt(token_emb))
        if lambda_att != 0:
            r = self._tokens(ref_feat)
            logits = self.to_q_img(x) @ self.to_k_img(r).transpose(1, 2) / math.sqrt(self.head_dim)
            if use_mask and star is not None:
                a_star = self.text_attention(ref_feat, token_emb)[..., star]
                mask = foreground_mask(a_star)
                logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
            img = torch.softmax(logits, dim=-1) @ self.to_v_img(r)
            out = out + lambda_att * self.out_img(img)
        return out.transpose(1, 2).reshape(n, c, h, w)


def foreground_mask(a_star: torch.Tensor) -> torch.Tensor:
    """Threshold a per-position attention map at its mean (ties count as foreground)."""
    return a_star >= a_star.mean(dim=-1, keepdim=True)


class PersonalizationState(nn.Module):
    """Everything that is learned per identity; the base model is not part of it.

    ``references`` holds the identity's reference images so the image
    cross-attention has features to attend to at restoration time.
    """

    def __init__(self, cfg: DenoiserConfig, references: torch.Tensor | None = None,
                 init_token: torch.Tensor | None = None):
        super().__init__()
        self.config = cfg
        sites = cfg.sites()
        self.blocks = nn.ModuleDict({
            s: PersonalizationBlock(c, cfg.token_dim, cfg.head_dim, cfg.norm_groups)
            for s, c in sites.items()})
        self.gains = nn.ParameterDict({s: nn.Parameter(torch.zeros(c)) for s, c in sites.items()})
        star = init_token.detach().clone() if init_token is not None else torch.zeros(cfg.token_dim)
        self.star = nn.Parameter(star)
        if references is None:
            references = torch.zeros(0, 3, 1, 1)
        self.register_buffer("references", references.detach().clone().float())

    def token_embeddings(self, table: nn.Embedding, tokens: torch.Tensor) -> torch.Tensor:
        emb = table(tokens)
        is_star = (tokens == prompts.STAR)[:, None]
        return torch.where(is_star, self.star.to(emb.dtype).expand_as(emb), emb)

    def mean_abs_gains(self) -> dict[str, float]:
        return {s: float(g.detach().abs().mean()) for s, g in self.gains.items()}


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.config = cfg
        ch, td, g = cfg.channels, cfg.time_dim, cfg.norm_groups
        self.time_embed = TimeEmbedding(ch[0], td)
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.token_dim)
        self.token_embedding.weight.requires_grad_(False)
        self.lq_encoder = LQEncoder(cfg)
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.down_sft = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down.append(ResBlock(prev, c, td, g))
            self.down_sft.append(SFT(c, c))
            if i < cfg.levels - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

        self.mid1 = ResBlock(ch[-1], ch[-1], td, g)
        self.mid_attn = SelfAttention(ch[-1], g)
        self.mid2 = ResBlock(ch[-1], ch[-1], td, g)

        self.up = nn.ModuleList()
        cur = ch[-1]
        for i in reversed(range(cfg.levels)):
            self.up.append(ResBlock(cur + ch[i], ch[i], td, g))
            cur = ch[i]

        self.norm_out = nn.GroupNorm(_groups(ch[0], g), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.schedule_T, dtype=torch.float64)
        self._alpha_bars = torch.cumprod(1 - betas, 0)  # plain attribute: never cast, never saved

    # -- helpers ---------------------------------------------------------------
    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def base_parameters(self):
        return self.parameters()

    def new_personalization(self, references: torch.Tensor | None = None) -> PersonalizationState:
        init = self.token_embedding.weight[prompts.TOKEN_IDS[prompts.INIT_WORD]]
        state = PersonalizationState(self.config, references, init_token=init)
        return state.to(self.dtype)

    def _check(self, z_t, t, lq):
        if z_t.dim() != 4 or z_t.shape[1] != self.config.latent_channels:
            raise InvalidArgumentError(f"latent shape {tuple(z_t.shape)} does not match config")
        down = 2 ** (self.config.levels - 1)
        if z_t.shape[2] % down or z_t.shape[3] % down:
            raise InvalidArgumentError(f"latent size must be divisible by {down}")
        if t.shape != (z_t.shape[0],):
            raise InvalidArgumentError("need one timestep per batch element")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.config.schedule_T):
            raise InvalidArgumentError(f"timesteps must lie in [0, {self.config.schedule_T})")
        if lq is not None and tuple(lq.shape[-2:]) != (z_t.shape[2] * codec.FACTOR, z_t.shape[3] * codec.FACTOR):
            raise InvalidArgumentError(
                f"LQ image {tuple(lq.shape[-2:])} inconsistent with latent {tuple(z_t.shape[2:])}")

    def _as_t(self, t, n):
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([int(t)] * n)
        elif t.dim() == 0:
            t = t.repeat(n)
        return t.long()

    # -- conditioning ------------------------------------------------------------
    def encode_lq_condition(self, lq: torch.Tensor, t) -> list[torch.Tensor]:
        """LQ image batch (N, 3, H, W) -> per-level conditioning feature maps."""
        lq = codec.image_to_tensor(lq)
        t = self._as_t(t, lq.shape[0])
        latent = codec.encode(lq).to(self.dtype)
        return self.lq_encoder(latent, t)

    def _run(self, z_t, t, cond, token_emb, star, ref_features, pstate, lambda_att,
             use_mask, stop_after_mid=False):
        temb = self.time_embed(t)
        personalize = pstate is not None and ref_features is not None
        collected = {}

        def site(name, h):
            collected[name] = h
            if personalize and name in pstate.blocks:
                p = pstate.blocks[name](h, ref_features[name], token_emb, star, lambda_att, use_mask)
                h = h + pstate.gains[name][None, :, None, None] * p
            return h

        h = self.conv_in(z_t)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            if cond is not None:
                h = self.down_sft[i](h, cond[i])
            if i > 0:
                h = site(f"down{i}", h)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid_attn(self.mid1(h, temb))
        h = site("mid", h)
        if stop_after_mid:
            return collected
        h = self.mid2(h, temb)
        for j, block in enumerate(self.up):
            level = self.config.levels - 1 - j
            h = block(torch.cat([h, skips[level]], dim=1), temb)
            if level > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        out = self.conv_out(F.silu(self.norm_out(h)))
        if self.config.prediction == "v":
            # the network predicts v = sqrt(abar) eps - sqrt(1 - abar) z0; convert to eps
            abar = self._alpha_bars[t].to(z_t.dtype)[:, None, None, None]
            out = (1 - abar).sqrt() * z_t + abar.sqrt() * out
        return out

    def forward(self, z_t, t, prompt=None, lq=None, ref_features=None, pstate=None,
                lambda_att: float = 1.0, cond=None, use_mask: bool = True):
        """Predict the noise in ``z_t``.

        ``lq=None`` drops all LQ conditioning (identity modulation). Without
        ``pstate`` or ``ref_features`` the personalization sites are skipped
        and the result is the pure base model. ``cond`` may carry precomputed
        :meth:`encode_lq_condition` output.
        """
        t = self._as_t(t, z_t.shape[0])
        if lq is not None:
            lq = codec.image_to_tensor(lq)
        self._check(z_t, t, lq)
        if cond is None and lq is not None:
            cond = self.encode_lq_condition(lq, t)
        token_emb, star = None, None
        if pstate is not None and ref_features is not None:
            if prompt is None:
                raise InvalidPromptError("personalized forward needs a prompt")
            prompts.validate(prompt)
            token_emb = pstate.token_embeddings(self.token_embedding, prompt)
            star = prompts.star_index(prompt)
        return self._run(z_t, t, cond, token_emb, star, ref_features, pstate, lambda_att, use_mask)

    def extract_reference_features(self, ref_latent_t: torch.Tensor, t) -> dict[str, torch.Tensor]:
        """Frozen base features of an already-noised reference latent, per site.

        No LQ conditioning and no personalization take part.
        """
        t = self._as_t(t, ref_latent_t.shape[0])
        self._check(ref_latent_t, t, None)
        return self._run(ref_latent_t, t, None, None, None, None, None, 0.0, False,
                         stop_after_mid=True)

    def attention_maps(self, ref_features: dict, prompt: torch.Tensor,
                       pstate: PersonalizationState) -> dict[str, torch.Tensor]:
        """Per-site text attention maps A (N, HW, L) with queries from the reference."""
        prompts.validate(prompt, require_star=True)
        emb = pstate.token_embeddings(self.token_embedding, prompt)
        return {s: pstate.blocks[s].text_attention(ref_features[s], emb) for s in pstate.blocks}

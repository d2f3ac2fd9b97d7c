"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Every key has a default
below and unknown keys are rejected. Command-line flags override file
values.
"""
from __future__ import annotations

import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import PIL
import safetensors
import scipy
import torch

from . import __version__, prompts
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig, TrainLossConfig
from .errors import InvalidArgumentError
from .training import BaseTrainConfig, PersonalizeConfig


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    doc: str


def _channels(text: str) -> tuple[int, ...]:
    return tuple(int(c) for c in str(text).replace(" ", "").split(",") if c)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


KEYS: dict[str, Key] = {
    "seed": Key(0, int, "global seed for every random stream"),
    "jobs": Key(1, int, "worker threads for degradation and torch intra-op parallelism"),
    # toy data
    "identities": Key(20, int, "identities generated by make-toy-data"),
    "images_per_identity": Key(9, int, "renders per identity for make-toy-data"),
    "size": Key(64, int, "render size in pixels"),
    # degradation
    "level": Key("heavy", str, "degradation level: light or heavy"),
    "degrade_p_hq": Key(0.0, float, "pass-through probability for the degrade command"),
    # base training
    "channels": Key("16,32,64", _channels, "denoiser channels per level"),
    "base_steps": Key(3000, int, "base training steps"),
    "base_batch": Key(8, int, "base training batch size"),
    "base_lr": Key(1e-3, float, "base learning rate"),
    "crop_size": Key(64, int, "training crop size in pixels"),
    "crop_prob": Key(0.5, float, "probability of a random crop instead of a resize"),
    "train_p_hq": Key(0.03, float, "probability of feeding the clean image as LQ during training"),
    "lq_dropout": Key(0.1, float, "probability of dropping the LQ condition in base training"),
    "ema_decay": Key(0.999, float, "weight averaging decay for the base model (0 disables)"),
    "base_loss_weighting": Key("v", str, "base loss weighting: eps (plain noise MSE) or v (noise MSE / abar_t)"),
    # personalization
    "iters": Key(500, int, "personalization iterations"),
    "n_ref": Key(5, int, "reference images used for personalization"),
    "batch": Key(2, int, "personalization batch size"),
    "lr_adapter": Key(1e-3, float, "learning rate of adapters and gains"),
    "lr_token": Key(5e-3, float, "learning rate of the identity token"),
    "lambda_gen": Key(0.1, float, "weight of the generative regularizer"),
    "lambda_pers": Key(0.01, float, "weight of the attention regularizer"),
    "pers_loss_weighting": Key("v", str, "weighting of the personalization diffusion losses: eps or v"),
    # sampling
    "steps": Key(200, int, "DDPM sampling steps"),
    "cfg": Key(4.0, float, "classifier-free guidance weight"),
    "lambda_att": Key(1.0, float, "weight of the image cross-attention"),
    "positive": Key(prompts.POSITIVE_PROMPT, str, "positive prompt"),
    "negative": Key(prompts.NEGATIVE_PROMPT, str, "negative prompt"),
    "null_lq_negative": Key(False, _bool, "negative branch without the LQ condition"),
    "tile": Key(64, int, "tile size in pixels"),
    "overlap": Key(32, int, "tile overlap in pixels"),
    "scale": Key(1.0, float, "super-resolution factor applied before restoration"),
}


def defaults() -> dict:
    return {k: v.default if v.kind is not _channels else _channels(v.default) for k, v in KEYS.items()}


def coerce(key: str, value) -> object:
    if key not in KEYS:
        raise InvalidArgumentError(f"unknown config key {key!r}")
    try:
        return KEYS[key].kind(value)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad value for {key}: {value!r}") from exc


def parse_config(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        cfg.update(parse_config(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    return cfg


def dump_config(cfg: dict) -> str:
    lines = []
    for k in KEYS:
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(c) for c in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def versions() -> dict:
    return {"facepers": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__, "scipy": scipy.__version__, "pillow": PIL.__version__,
            "safetensors": safetensors.__version__}


def write_manifest(path, command: str, argv: list[str], cfg: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = [f"# command: {command}", f"# argv: {' '.join(argv)}"]
    text += [f"# {k}: {v}" for k, v in versions().items()]
    path.write_text("\n".join(text) + "\n" + dump_config(cfg))
    return path


# -- typed views ------------------------------------------------------------------

def model_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(channels=cfg["channels"])


def base_config(cfg: dict) -> BaseTrainConfig:
    return BaseTrainConfig(steps=cfg["base_steps"], batch_size=cfg["base_batch"], lr=cfg["base_lr"],
                           crop_size=cfg["crop_size"], crop_prob=cfg["crop_prob"], p_hq=cfg["train_p_hq"],
                           level=cfg["level"], lq_dropout=cfg["lq_dropout"], ema_decay=cfg["ema_decay"],
                           loss_weighting=cfg["base_loss_weighting"], seed=cfg["seed"], model=model_config(cfg))


def personalize_config(cfg: dict) -> PersonalizeConfig:
    return PersonalizeConfig(iterations=cfg["iters"], n_ref=cfg["n_ref"], batch_size=cfg["batch"],
                             lr_adapter=cfg["lr_adapter"], lr_token=cfg["lr_token"],
                             loss=TrainLossConfig(cfg["lambda_gen"], cfg["lambda_pers"]),
                             crop_size=cfg["crop_size"], p_hq=cfg["train_p_hq"], level=cfg["level"],
                             lambda_att=cfg["lambda_att"], prompt=cfg["positive"],
                             loss_weighting=cfg["pers_loss_weighting"], seed=cfg["seed"])


def sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(num_steps=cfg["steps"], lambda_cfg=cfg["cfg"], positive=cfg["positive"],
                         negative=cfg["negative"], seed=cfg["seed"], lambda_att=cfg["lambda_att"],
                         null_lq_negative=cfg["null_lq_negative"])

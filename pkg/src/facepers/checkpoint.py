"""Named-parameter archives for base models and personalization states.

Archives are safetensors files holding row-major float32 tensors keyed by
parameter name; kind and config ride along as one JSON metadata entry
(a single entry keeps the header byte-stable across saves). Base
weights and personalization states are always stored separately.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save_file

from .denoiser import Denoiser, DenoiserConfig, PersonalizationState
from .errors import FaceRestoreError

KIND_BASE = "base"
KIND_STATE = "personalization"


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over sorted (name, shape, float32 bytes) of a module's state."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().to(torch.float32).contiguous().cpu()
        h.update(name.encode())
        h.update(json.dumps(list(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _save(module: torch.nn.Module, path, kind: str, config: dict) -> None:
    tensors = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in module.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"kind": kind, "config": config}, sort_keys=True)
    save_file(tensors, str(path), metadata={"facepers": header})


def _metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get("facepers")
    return json.loads(raw) if raw else {}


def _config(path, kind: str) -> DenoiserConfig:
    meta = _metadata(path)
    if meta.get("kind") != kind:
        raise FaceRestoreError(f"{path} is not a {kind} archive (kind={meta.get('kind')!r})")
    return DenoiserConfig(**meta["config"])


def save_base(model: Denoiser, path) -> None:
    _save(model, path, KIND_BASE, model.config.to_dict())


def load_base(path) -> Denoiser:
    model = Denoiser(_config(path, KIND_BASE))
    model.load_state_dict(load_file(str(path)))
    model.token_embedding.weight.requires_grad_(False)
    return model.eval()


def save_personalization(state: PersonalizationState, path) -> None:
    _save(state, path, KIND_STATE, state.config.to_dict())


def load_personalization(path, model: Denoiser | None = None) -> PersonalizationState:
    cfg = _config(path, KIND_STATE)
    if model is not None and model.config.to_dict() != cfg.to_dict():
        raise FaceRestoreError("personalization state was trained for a different base config")
    tensors = load_file(str(path))
    state = PersonalizationState(cfg, references=tensors["references"])
    state.load_state_dict(tensors)
    return state

"""End-to-end personalization experiment on synthetic identities.

Trains a base model, personalizes it per held-out identity, restores
heavily degraded test images with both models and scores them against the
ground truth. Everything is derived from one seed.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_base, save_base, state_digest
from .data import ReferenceSet, make_synthetic_dataset, split_references
from .degradation import degrade, extreme_record, sample_degradation
from .denoiser import Denoiser, PersonalizationState
from .diffusion import SamplerConfig, TrainLossConfig, sample
from .metrics import MetricsReport, OracleEmbedder, OracleFaceDetector, evaluate_dataset
from .training import BaseTrainConfig, PersonalizeConfig, personalize, train_base

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    train_identities: int = 200
    train_images_per_identity: int = 4
    train_render_size: int = 96
    eval_identities: int = 5
    n_ref: int = 5
    n_test: int = 4
    size: int = 64
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    extreme_down: float = 10.0
    extreme_noise: float = 15.0

    def with_seed(self) -> "ExperimentConfig":
        """Propagate ``seed`` into the nested configs."""
        return replace(self, base=replace(self.base, seed=self.seed),
                       personalize=replace(self.personalize, seed=self.seed),
                       sampler=replace(self.sampler, seed=self.seed))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IdentitySplit:
    identity_id: str
    refs: ReferenceSet
    test: list[np.ndarray]
    heavy: list[np.ndarray]
    extreme: list[np.ndarray]


@dataclass
class ExperimentResult:
    reports: dict[str, MetricsReport]
    per_identity: dict[str, dict[str, float]]
    gains: dict[str, dict[str, float]]
    base_digest: str
    timings: dict[str, float]

    def report_hashes(self) -> dict[str, str]:
        return {k: r.digest() for k, r in sorted(self.reports.items())}

    def summary(self) -> str:
        lines = []
        for name, rep in sorted(self.reports.items()):
            m = rep.means
            lines.append(f"{name:<22} psnr {m['psnr_db']:7.3f}  ssim {m['ssim']:.4f}  "
                         f"lmse {m['lmse']:7.3f}  id {m['id_percent']:7.2f}")
        return "\n".join(lines)


def make_eval_splits(cfg: ExperimentConfig) -> list[IdentitySplit]:
    ds = make_synthetic_dataset(cfg.eval_identities, cfg.n_ref + cfg.n_test, cfg.size,
                                seed=cfg.seed + 1000, prefix="eval")
    splits = []
    for k, ident in enumerate(ds.ids()):
        refs, test = split_references(ds, ident, cfg.n_ref, seed=cfg.seed)
        rng = np.random.default_rng([cfg.seed, 0xE7A1, k])
        heavy = [degrade(x, sample_degradation("heavy", rng, p_hq=0.0)) for x in test]
        extreme = [degrade(x, extreme_record(rng, cfg.extreme_down, cfg.extreme_noise)) for x in test]
        splits.append(IdentitySplit(ident, refs, test, heavy, extreme))
    return splits


def build_base(cfg: ExperimentConfig, cache: Path | None = None) -> Denoiser:
    if cache is not None and Path(cache).exists():
        return load_base(cache)
    ds = make_synthetic_dataset(cfg.train_identities, cfg.train_images_per_identity,
                                cfg.train_render_size, seed=cfg.seed, prefix="train")
    model = train_base(ds, cfg.base)
    if cache is not None:
        save_base(model, cache)
        model = load_base(cache)
    return model


def restore_batch(model: Denoiser, lqs: list[np.ndarray], pstate: PersonalizationState | None,
                  sampler: SamplerConfig) -> list[np.ndarray]:
    out = sample(model, np.stack(lqs), pstate, sampler)
    return list(out)


def run_experiment(cfg: ExperimentConfig | None = None, lambda_gens: tuple[float, ...] = (0.1,),
                   splits: tuple[str, ...] = ("heavy",), base: Denoiser | None = None,
                   base_cache: Path | None = None) -> ExperimentResult:
    """Base vs personalized restoration for each ``lambda_gen`` and degradation split.

    Report keys are ``base/<split>`` and ``pers<lambda_gen>/<split>``.
    """
    cfg = (cfg or ExperimentConfig()).with_seed()
    timings = {}
    t0 = time.perf_counter()
    model = base if base is not None else build_base(cfg, base_cache)
    timings["base"] = time.perf_counter() - t0
    base_digest = state_digest(model)
    eval_splits = make_eval_splits(cfg)
    detector, embedder = OracleFaceDetector(), OracleEmbedder(cfg.size)

    pairs: dict[str, list] = {}
    names: dict[str, list] = {}
    gains = {}
    per_identity: dict[str, dict[str, float]] = {}

    def add(key, restored, sp):
        pairs.setdefault(key, []).extend(zip(restored, sp.test))
        names.setdefault(key, []).extend(f"{sp.identity_id}_{i}" for i in range(len(sp.test)))

    t0 = time.perf_counter()
    for sp in eval_splits:
        for split in splits:
            add(f"base/{split}", restore_batch(model, getattr(sp, split), None, cfg.sampler), sp)
    timings["restore_base"] = time.perf_counter() - t0

    for lg in lambda_gens:
        pcfg = replace(cfg.personalize, loss=TrainLossConfig(lg, cfg.personalize.loss.lambda_pers))
        for sp in eval_splits:
            t0 = time.perf_counter()
            pstate = personalize(model, sp.refs, config=pcfg)
            timings[f"personalize{lg}/{sp.identity_id}"] = time.perf_counter() - t0
            gains[f"pers{lg}/{sp.identity_id}"] = pstate.mean_abs_gains()
            t0 = time.perf_counter()
            for split in splits:
                add(f"pers{lg}/{split}", restore_batch(model, getattr(sp, split), pstate, cfg.sampler), sp)
            timings[f"restore{lg}/{sp.identity_id}"] = time.perf_counter() - t0
    if state_digest(model) != base_digest:
        raise RuntimeError("base model changed during the experiment")

    reports = {k: evaluate_dataset(v, detector, embedder, names[k]) for k, v in pairs.items()}
    for key, rep in reports.items():
        for sp in eval_splits:
            rows = [r for r in rep.rows if r["name"].startswith(sp.identity_id + "_")]
            per_identity.setdefault(key, {})[sp.identity_id] = float(np.mean([r["id_percent"] for r in rows]))
    return ExperimentResult(reports, per_identity, gains, base_digest, timings)


def combined_hash(hashes: dict[str, str]) -> str:
    h = hashlib.sha256()
    for k, v in sorted(hashes.items()):
        h.update(f"{k}={v}\n".encode())
    return h.hexdigest()

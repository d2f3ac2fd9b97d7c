"""Command-line entry point.

Subcommands: make-toy-data, degrade, train-base, personalize, restore and
evaluate. Every run writes a manifest (command line, versions and the full
config) next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import codec, config as cfgmod
from .checkpoint import load_base, load_personalization, save_base, save_personalization
from .data import (IMAGE_SUFFIXES, load_dataset, load_image, load_reference_dir, make_synthetic_dataset,
                   save_dataset, save_image)
from .degradation import LEVELS, degrade, sample_degradation
from .errors import FaceRestoreError, InvalidArgumentError
from .metrics import evaluate_dataset
from .tiling import plan_tiles, restore_super_resolution, restore_tiled
from .training import jsonl_logger, personalize, train_base

log = logging.getLogger("facepers")


def _images_under(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def manifest_path(output: Path) -> Path:
    """``<dir>/manifest.txt`` for folder outputs, ``<file>.manifest.txt`` for file outputs."""
    if output.is_dir() or not output.suffix:
        return output / "manifest.txt"
    return output.with_name(output.name + ".manifest.txt")


def _manifest(output: Path, args, cfg: dict, argv: list[str]) -> None:
    cfgmod.write_manifest(manifest_path(output), args.command, argv, cfg)


# -- subcommands ----------------------------------------------------------------

def cmd_make_toy_data(args, cfg, argv):
    out = Path(args.out)
    ds = make_synthetic_dataset(cfg["identities"], cfg["images_per_identity"], cfg["size"], seed=cfg["seed"])
    save_dataset(ds, out)
    _manifest(out, args, cfg, argv)
    print(f"wrote {cfg['identities']} identities x {cfg['images_per_identity']} images to {out}")


def cmd_degrade(args, cfg, argv):
    src, out = Path(args.in_path), Path(args.out)
    files = _images_under(src)
    if not files:
        raise FaceRestoreError(f"no images under {src}")

    def work(item):
        k, f = item
        rng = np.random.default_rng([cfg["seed"], k])
        record = sample_degradation(cfg["level"], rng, p_hq=cfg["degrade_p_hq"])
        target = (out / f.relative_to(src)).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(target, degrade(load_image(f), record))
        target.with_suffix(".json").write_text(record.to_json())

    with ThreadPoolExecutor(max_workers=max(1, cfg["jobs"])) as pool:
        list(pool.map(work, enumerate(files)))
    _manifest(out, args, cfg, argv)
    print(f"degraded {len(files)} images into {out}")


def cmd_train_base(args, cfg, argv):
    ds = load_dataset(args.data)
    out = Path(args.out)
    every = max(1, cfg["base_steps"] // 20)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == cfg["base_steps"] - 1:
            print(json.dumps(rec), flush=True)

    model = train_base(ds, cfgmod.base_config(cfg), callback=progress)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_base(model, out)
    _manifest(out, args, cfg, argv)


def cmd_personalize(args, cfg, argv):
    model = load_base(args.base)
    refs = load_reference_dir(args.refs)
    pcfg = cfgmod.personalize_config(cfg)
    if refs.n_ref > pcfg.n_ref:
        refs = type(refs)(refs.identity_id, refs.images[:pcfg.n_ref])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fh = open(args.log, "w") if args.log else sys.stdout
    try:
        state = personalize(model, refs, config=pcfg, callback=jsonl_logger(fh))
    finally:
        if fh is not sys.stdout:
            fh.close()
    save_personalization(state, out)
    _manifest(out, args, cfg, argv)


def _restore_one(model, image, pstate, cfg):
    scfg = cfgmod.sampler_config(cfg)
    f = codec.FACTOR
    tile, overlap = cfg["tile"] // f, cfg["overlap"] // f
    if cfg["scale"] != 1.0:
        return restore_super_resolution(model, image, cfg["scale"], pstate, scfg, tile, overlap)
    h, w = image.shape[:2]
    if h % f or w % f:
        raise InvalidArgumentError(f"image {h}x{w} must have even sides")
    plan = plan_tiles(h // f, w // f, tile, overlap)
    return restore_tiled(model, image, pstate, scfg, plan)


def cmd_restore(args, cfg, argv):
    model = load_base(args.base)
    pstate = load_personalization(args.state, model) if args.state else None
    src, out = Path(args.in_path), Path(args.out)
    if src.is_dir():
        jobs = [(f, (out / f.relative_to(src)).with_suffix(".png")) for f in _images_under(src)]
        if not jobs:
            raise FaceRestoreError(f"no images under {src}")
    else:
        if not src.exists():
            raise FaceRestoreError(f"input {src} does not exist")
        jobs = [(src, out)]
    for f, target in jobs:
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(target, _restore_one(model, load_image(f), pstate, cfg))
        print(f"restored {f} -> {target}", flush=True)
    _manifest(out, args, cfg, argv)


def cmd_evaluate(args, cfg, argv):
    restored, gt = Path(args.restored), Path(args.gt)
    pairs, names = [], []
    for f in _images_under(gt):
        rel = f.relative_to(gt)
        cand = [restored / rel, (restored / rel).with_suffix(".png")]
        match = next((c for c in cand if c.exists()), None)
        if match is None:
            raise FaceRestoreError(f"no restored image for {rel}")
        pairs.append((load_image(match), load_image(f)))
        names.append(str(rel.with_suffix("")))
    if not pairs:
        raise FaceRestoreError(f"no ground-truth images under {gt}")
    report = evaluate_dataset(pairs, names=names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    print(report.table())
    _manifest(out, args, cfg, argv)


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--jobs", type=int, help="bound on worker threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")

    parser = argparse.ArgumentParser(prog="facepers", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", parents=[common], help="render synthetic identities")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int)
    p.add_argument("--images", type=int, dest="images_per_identity")
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_make_toy_data, keys=("identities", "images_per_identity", "size"))

    p = sub.add_parser("degrade", parents=[common], help="degrade every image under a folder")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", choices=LEVELS)
    p.set_defaults(func=cmd_degrade, keys=("level",))

    p = sub.add_parser("train-base", parents=[common], help="train the base restoration model")
    p.add_argument("--data", required=True, help="folder of <identity>/<image> files")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, dest="base_steps")
    p.add_argument("--batch", type=int, dest="base_batch")
    p.add_argument("--lr", type=float, dest="base_lr")
    p.set_defaults(func=cmd_train_base, keys=("base_steps", "base_batch", "base_lr"))

    p = sub.add_parser("personalize", parents=[common], help="fit a personalization state")
    p.add_argument("--base", required=True)
    p.add_argument("--refs", required=True, help="folder of reference images")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-gen", type=float, dest="lambda_gen")
    p.add_argument("--log", help="write progress records here instead of stdout")
    p.set_defaults(func=cmd_personalize, keys=("iters", "lambda_gen"))

    p = sub.add_parser("restore", parents=[common], help="restore an image or a folder")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--state")
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--cfg", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--scale", type=float)
    p.set_defaults(func=cmd_restore, keys=("tile", "overlap", "cfg", "steps", "scale"))

    p = sub.add_parser("evaluate", parents=[common], help="score restorations against ground truth")
    p.add_argument("--restored", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate, keys=())
    return parser


def _config_from(args, parser) -> dict:
    overrides = {k: getattr(args, k) for k in args.keys + ("seed", "jobs")}
    for item in args.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        return cfgmod.load_config(args.config, overrides)
    except (InvalidArgumentError, OSError) as exc:
        parser.error(str(exc))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from(args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, cfg["jobs"]))
    try:
        args.func(args, cfg, argv)
    except Exception as exc:  # any failure past argument parsing is a runtime error
        print(f"facepers {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

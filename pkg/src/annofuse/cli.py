"""Command-line interface.

Subcommands run stages against a working directory (--out, or the
ANNOFUSE_OUT environment variable): `synth`, `patches`, `train-embed`,
`grids`, `train-detect`, `eval`, `plots` operate stage-wise on fixed
artifact names so they can be chained; `run` executes the full multi-repeat
pipeline; `compare` tabulates finished runs.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .dataset import Patch, generate_synthetic_scenes, load_manifest, save_manifest, stratified_split, tile_scene
from .detector import detections_to_json, infer, load_checkpoint, save_checkpoint, train_detector
from .embedding import encode_batch, encoder_checksum, load_encoder, save_encoder, train_embedding
from .errors import AnnofuseError, ConfigError, StageError
from .evaluation import compute_report, roc_auc, window_roc_examples
from .fusion import FusionConfig
from .harness import (
    balanced_patch_cap,
    compare_variants,
    detector_config,
    embedding_config,
    load_run_records,
    run_experiment,
    scene_class_key,
)
from .latentgrid import extract_grid_cached
from .utilio import read_json, write_json

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage, per the CLI contract
        raise ConfigError(message)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ANNOFUSE_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set ANNOFUSE_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set or [])


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing artifact {path}; run `annofuse {hint}` first")
    return path


def _stage_scenes(config: ExperimentConfig, out: Path):
    manifest = out / "manifest.json"
    if config.source == "manifest":
        return load_manifest(config.manifest)
    _require(manifest, "synth")
    return load_manifest(manifest)


def _stage_split(config: ExperimentConfig, scenes):
    return stratified_split(scenes, config.split_spec(), key=scene_class_key)


def cmd_synth(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    scenes = generate_synthetic_scenes(config.generator_config(), seed=config.seed)
    path = save_manifest(scenes, out / "manifest.json")
    print(f"wrote {len(scenes)} scenes to {path}")
    return 0


def cmd_patches(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    scenes = _stage_scenes(config, out)
    train, val, _ = _stage_split(config, scenes)
    patches = []
    for scene in train + val:
        patches.extend(tile_scene(scene, config.patch_side, config.background_iou_max))
    patches = balanced_patch_cap(patches, config.max_patches, seed=config.seed)
    if not patches:
        raise StageError("patches", "tiling produced no patches")
    np.savez_compressed(
        out / "patches.npz",
        pixels=np.stack([p.pixels for p in patches]),
        classes=np.array([p.annotation.class_index for p in patches], dtype=np.int64),
        areas=np.array([p.annotation.area_norm for p in patches]),
        squareness=np.array([p.annotation.squareness for p in patches]),
        is_background=np.array([p.annotation.is_background for p in patches]),
        scene_ids=np.array([p.source_scene_id for p in patches]),
        origins=np.array([p.origin for p in patches], dtype=np.int64),
    )
    print(f"wrote {len(patches)} patches to {out / 'patches.npz'}")
    return 0


def _load_patches(path: Path) -> list[Patch]:
    from .dataset import AnnotationVector

    blob = np.load(path, allow_pickle=False)
    patches = []
    for i in range(len(blob["classes"])):
        ann = AnnotationVector(
            class_index=int(blob["classes"][i]),
            area_norm=float(blob["areas"][i]),
            squareness=float(blob["squareness"][i]),
            is_background=bool(blob["is_background"][i]),
        )
        patches.append(
            Patch(
                pixels=blob["pixels"][i],
                annotation=ann,
                source_scene_id=str(blob["scene_ids"][i]),
                origin=tuple(int(v) for v in blob["origins"][i]),
            )
        )
    return patches


def cmd_train_embed(args) -> int:
    config = _config(args)
    if config.variant == "none":
        raise ConfigError("train-embed requires variant=dtl or variant=matl")
    out = _out_dir(args)
    patches = _load_patches(_require(out / "patches.npz", "patches"))
    state = train_embedding(patches, embedding_config(config, config.seed, out / "embed_log.csv"))
    save_encoder(state, out / "encoder.pt")
    print(f"wrote encoder to {out / 'encoder.pt'}")
    return 0


def cmd_grids(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    scenes = _stage_scenes(config, out)
    encoder = load_encoder(_require(out / "encoder.pt", "train-embed")).freeze()
    cache = out / "grids"
    for scene in scenes:
        extract_grid_cached(scene, encoder, config.window, config.stride, cache)
    print(f"cached {len(scenes)} grids under {cache}")
    return 0


def cmd_train_detect(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    scenes = _stage_scenes(config, out)
    train, _, _ = _stage_split(config, scenes)
    fusion = None
    checksum = None
    if config.fusion_enabled:
        encoder = load_encoder(_require(out / "encoder.pt", "train-embed")).freeze()
        checksum = encoder_checksum(encoder)
        grids = {
            scene.scene_id: extract_grid_cached(scene, encoder, config.window, config.stride, out / "grids")
            for scene in train
        }
        fusion = (grids, FusionConfig(config.fusion_mode, config.selected_levels(), config.fusion_init))
    checkpoint = train_detector(train, detector_config(config, config.seed), fusion, out / "detect_log.csv")
    checkpoint.encoder_checksum = checksum
    save_checkpoint(checkpoint, out / "detector.pt")
    print(f"wrote detector to {out / 'detector.pt'}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    scenes = _stage_scenes(config, out)
    _, _, test = _stage_split(config, scenes)
    checkpoint = load_checkpoint(_require(out / "detector.pt", "train-detect"))
    encoder = None
    if checkpoint.fusion_config is not None:
        encoder = load_encoder(_require(out / "encoder.pt", "train-embed")).freeze()
    per_scene = []
    for scene in test:
        grid = None
        if encoder is not None:
            grid = extract_grid_cached(scene, encoder, config.window, config.stride, out / "grids")
        per_scene.append(infer(checkpoint, scene, 0.05, config.nms_iou, grid=grid))
    roc_examples = window_roc_examples(test, per_scene, config.roc_window, config.roc_stride)
    report = compute_report(per_scene, test, config.score_threshold, roc_examples, seed=config.seed)
    write_json(out / "metrics.json", report.to_dict())
    write_json(
        out / "detections.json",
        {scene.scene_id: detections_to_json(scene.scene_id, dets) for scene, dets in zip(test, per_scene)},
    )
    print(f"metrics: map50={report.map50:.3f} P={report.precision:.3f} R={report.recall:.3f} f1={report.f1:.3f}")
    print(f"wrote {out / 'metrics.json'}")
    return 0


def cmd_plots(args) -> int:
    from .plots import emit_plots

    out = _out_dir(args)
    records = load_run_records(out)
    result = emit_plots(records, out / "plots")
    if not records:
        print("no run records found; nothing to plot")
        return 0
    print(f"emitted {len(result['paths'])} plot files under {out / 'plots'}")
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    records = run_experiment(config, out)
    for record in records:
        if record.status == "ok" and record.metrics is not None:
            m = record.metrics
            print(
                f"repeat {record.repeat}: map50={m.map50:.3f} P={m.precision:.3f} "
                f"R={m.recall:.3f} f1={m.f1:.3f}"
            )
        else:
            print(f"repeat {record.repeat}: FAILED at {record.failed_stage}: {record.error}")
    failed = [r for r in records if r.status != "ok"]
    if failed:
        raise StageError(failed[0].failed_stage or "unknown", f"{len(failed)} repeat(s) failed")
    agg = read_json(Path(out) / "runs" / config.config_hash() / "aggregate.json")
    for name, stats in agg["metrics"].items():
        print(f"{name}: {stats['mean']:.3f} +/- {stats['std']:.3f}")
    return 0


def cmd_compare(args) -> int:
    groups: dict[str, list] = {}
    for root in args.dirs:
        for record in load_run_records(root):
            if record.status == "ok":
                groups.setdefault(record.variant_key, []).append(record)
    if len(groups) < 2:
        raise ConfigError(f"compare needs >= 2 variants, found {sorted(groups)}")
    table = compare_variants(groups)
    print(table.render())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="annofuse", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": cmd_synth,
        "patches": cmd_patches,
        "train-embed": cmd_train_embed,
        "grids": cmd_grids,
        "train-detect": cmd_train_detect,
        "eval": cmd_eval,
        "plots": cmd_plots,
        "run": cmd_run,
    }
    for name, handler in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="keyed text config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default=None, help="output directory (or ANNOFUSE_OUT)")
        p.set_defaults(handler=handler)
    p = sub.add_parser("compare")
    p.add_argument("dirs", nargs="+", help="output directories containing runs/")
    p.set_defaults(handler=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except AnnofuseError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        logger.exception("unexpected failure")
        print(f"unexpected failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

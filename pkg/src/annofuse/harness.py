"""Experiment orchestration: the patches -> embedding -> grids -> detector ->
evaluation pipeline with repeats, split hygiene, persistence, and variant
comparison."""
from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .dataset import (
    Scene,
    generate_synthetic_scenes,
    load_manifest,
    save_manifest,
    stratified_split,
    tile_scene,
)
from .detector import (
    DetectorConfig,
    detections_to_json,
    infer,
    save_checkpoint,
    train_detector,
)
from .embedding import (
    EmbeddingTrainConfig,
    EncoderState,
    encode_batch,
    encoder_checksum,
    save_encoder,
    train_embedding,
)
from .errors import ConfigError, StageError
from .evaluation import MetricsReport, compute_report, roc_auc, window_roc_examples
from .fusion import FusionConfig
from .latentgrid import extract_grid_cached
from .utilio import write_json

logger = logging.getLogger(__name__)

STAGES = ("split", "patches", "train-embed", "grids", "train-detect", "eval")

# detections down to this floor feed AP and ROC; P/R/F1 apply the operating
# threshold inside the metrics
AP_SCORE_FLOOR = 0.05


class SceneStore:
    """Split-tagged scene access with an audit log.

    Every read is recorded as (stage, split); the pipeline asserts that the
    test split is first touched during the eval stage.
    """

    def __init__(self, train: list[Scene], val: list[Scene], test: list[Scene]):
        self._splits = {"train": train, "val": val, "test": test}
        self.access_log: list[tuple[str, str]] = []
        self.current_stage = "init"

    def set_stage(self, stage: str) -> None:
        self.current_stage = stage

    def scenes(self, split: str) -> list[Scene]:
        if split not in self._splits:
            raise ConfigError(f"unknown split {split!r}")
        self.access_log.append((self.current_stage, split))
        return self._splits[split]

    def counts(self) -> dict[str, int]:
        return {name: len(scenes) for name, scenes in self._splits.items()}

    def assert_test_isolation(self) -> None:
        for stage, split in self.access_log:
            if split == "test" and stage != "eval":
                raise StageError(stage, "test split accessed before evaluation")


def scene_class_key(scene: Scene) -> int:
    """Stratification key: the scene's most common label (0 when empty)."""
    if len(scene.labels) == 0:
        return 0
    counts = Counter(int(l) for l in scene.labels)
    # ties break on the smaller class index for determinism
    return min(counts, key=lambda c: (-counts[c], c))


def balanced_patch_cap(patches: list, cap: int, seed: int) -> list:
    """Deterministically cap patches, taking classes round-robin."""
    if cap <= 0 or len(patches) <= cap:
        return list(patches)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for p in patches:
        by_class.setdefault(p.annotation.class_index, []).append(p)
    queues = {c: [members[i] for i in rng.permutation(len(members))] for c, members in by_class.items()}
    out = []
    while len(out) < cap:
        progressed = False
        for c in sorted(queues):
            if queues[c]:
                out.append(queues[c].pop())
                progressed = True
                if len(out) == cap:
                    break
        if not progressed:
            break
    return out


@dataclass
class RunRecord:
    """One repeat of one experiment configuration."""

    config_hash: str
    variant_key: str
    repeat: int
    split_seed: int
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    paths: dict[str, str] = field(default_factory=dict)
    metrics: MetricsReport | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "variant_key": self.variant_key,
            "repeat": self.repeat,
            "split_seed": self.split_seed,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "paths": self.paths,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        metrics = doc.get("metrics")
        return cls(
            config_hash=doc["config_hash"],
            variant_key=doc["variant_key"],
            repeat=doc["repeat"],
            split_seed=doc["split_seed"],
            status=doc.get("status", "ok"),
            failed_stage=doc.get("failed_stage"),
            error=doc.get("error"),
            paths=doc.get("paths", {}),
            metrics=None if metrics is None else MetricsReport.from_dict(metrics),
            timings=doc.get("timings", {}),
        )


def load_scenes(config: ExperimentConfig) -> list[Scene]:
    if config.source == "manifest":
        return load_manifest(config.manifest)
    return generate_synthetic_scenes(config.generator_config(), seed=config.seed)


def detector_config(config: ExperimentConfig, seed: int) -> DetectorConfig:
    return DetectorConfig(
        num_classes=config.n_classes,
        channels=config.channels,
        epochs=config.detector_epochs,
        lr=config.detector_lr,
        batch_size=config.detector_batch,
        seed=seed,
        score_threshold=config.score_threshold,
        nms_iou=config.nms_iou,
    )


def embedding_config(config: ExperimentConfig, seed: int, log_path: Path | None = None) -> EmbeddingTrainConfig:
    return EmbeddingTrainConfig(
        variant=config.variant,
        latent_dim=config.latent_dim,
        input_size=config.encoder_input,
        width=config.encoder_width,
        epochs=config.embed_epochs,
        batch_size=config.embed_batch,
        lr=config.embed_lr,
        dtl_margin=config.dtl_margin,
        margin_scale=config.margin_scale,
        seed=seed,
        log_path=log_path,
    )


def run_repeat(config: ExperimentConfig, scenes: list[Scene], repeat: int, repeat_dir: Path) -> RunRecord:
    """Execute one repeat end to end; artifacts land in repeat_dir."""
    split_seed = config.seed + repeat
    record = RunRecord(
        config_hash=config.config_hash(),
        variant_key=config.variant_key(),
        repeat=repeat,
        split_seed=split_seed,
    )
    repeat_dir.mkdir(parents=True, exist_ok=True)
    stage = "split"
    try:
        start = time.perf_counter()
        train, val, test = stratified_split(scenes, config.split_spec(split_seed), key=scene_class_key)
        store = SceneStore(train, val, test)
        record.timings[stage] = time.perf_counter() - start

        encoder: EncoderState | None = None
        grids = {}
        if config.variant != "none":
            stage = "patches"
            store.set_stage(stage)
            start = time.perf_counter()
            pool = store.scenes("train") + store.scenes("val")
            patches = []
            for scene in pool:
                patches.extend(tile_scene(scene, config.patch_side, config.background_iou_max))
            patches = balanced_patch_cap(patches, config.max_patches, seed=split_seed)
            if not patches:
                raise StageError(stage, "tiling produced no patches")
            record.timings[stage] = time.perf_counter() - start

            stage = "train-embed"
            store.set_stage(stage)
            start = time.perf_counter()
            embed_log = repeat_dir / "embed_log.csv"
            encoder = train_embedding(patches, embedding_config(config, split_seed, embed_log))
            encoder_path = repeat_dir / "encoder.pt"
            save_encoder(encoder, encoder_path)
            encoder = encoder.freeze()
            record.paths["encoder"] = encoder_path.name
            record.paths["embed_log"] = embed_log.name
            # held-out val-scene patches give the embedding diagnostics
            val_patches = []
            for scene in store.scenes("val"):
                val_patches.extend(tile_scene(scene, config.patch_side, config.background_iou_max))
            val_patches = balanced_patch_cap(val_patches, 300, seed=split_seed)
            if val_patches:
                emb = encode_batch(encoder, np.stack([p.pixels for p in val_patches]))
                np.savez(
                    repeat_dir / "embeddings.npz",
                    embeddings=emb,
                    classes=np.array([p.annotation.class_index for p in val_patches]),
                    areas=np.array([p.annotation.area_norm for p in val_patches]),
                    squareness=np.array([p.annotation.squareness for p in val_patches]),
                )
                record.paths["embeddings"] = "embeddings.npz"
            record.timings[stage] = time.perf_counter() - start

            stage = "grids"
            store.set_stage(stage)
            start = time.perf_counter()
            cache_dir = repeat_dir / "grids"
            for scene in store.scenes("train"):
                grids[scene.scene_id] = extract_grid_cached(
                    scene, encoder, config.window, config.stride, cache_dir
                )
            record.paths["grid_cache"] = "grids"
            record.timings[stage] = time.perf_counter() - start

        stage = "train-detect"
        store.set_stage(stage)
        start = time.perf_counter()
        det_config = detector_config(config, split_seed)
        fusion = None
        if config.variant != "none":
            fusion = (grids, FusionConfig(config.fusion_mode, config.selected_levels(), config.fusion_init))
        detect_log = repeat_dir / "detect_log.csv"
        checkpoint = train_detector(store.scenes("train"), det_config, fusion=fusion, log_path=detect_log)
        if encoder is not None:
            checkpoint.encoder_checksum = encoder_checksum(encoder)
        detector_path = repeat_dir / "detector.pt"
        save_checkpoint(checkpoint, detector_path)
        record.paths["detector"] = detector_path.name
        record.paths["detect_log"] = detect_log.name
        record.timings[stage] = time.perf_counter() - start

        stage = "eval"
        store.set_stage(stage)
        start = time.perf_counter()
        test_scenes = store.scenes("test")
        per_scene = []
        for scene in test_scenes:
            grid = None
            if config.variant != "none":
                grid = extract_grid_cached(scene, encoder, config.window, config.stride, repeat_dir / "grids")
            per_scene.append(infer(checkpoint, scene, AP_SCORE_FLOOR, config.nms_iou, grid=grid))
        roc_examples = window_roc_examples(
            test_scenes, per_scene, config.roc_window, config.roc_stride
        )
        report = compute_report(
            per_scene,
            test_scenes,
            score_threshold=config.score_threshold,
            roc_examples=roc_examples,
            seed=split_seed,
            split_id=f"repeat_{repeat}",
        )
        record.metrics = report
        write_json(repeat_dir / "metrics.json", report.to_dict())
        record.paths["metrics"] = "metrics.json"
        detections_doc = {
            scene.scene_id: detections_to_json(scene.scene_id, dets)
            for scene, dets in zip(test_scenes, per_scene)
        }
        write_json(repeat_dir / "detections.json", detections_doc)
        record.paths["detections"] = "detections.json"
        try:
            curve, _ = roc_auc(roc_examples)
        except Exception:
            curve = []
        with open(repeat_dir / "roc.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            writer.writerows(curve)
        record.paths["roc_curve"] = "roc.csv"
        save_manifest(test_scenes, repeat_dir / "test_scenes" / "manifest.json")
        record.paths["test_manifest"] = "test_scenes/manifest.json"
        record.timings[stage] = time.perf_counter() - start

        store.assert_test_isolation()
        record.paths["access_log"] = "access_log.csv"
        with open(repeat_dir / "access_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "split"])
            writer.writerows(store.access_log)
    except Exception as err:  # noqa: BLE001 - partial results must survive
        record.status = "failed"
        record.failed_stage = getattr(err, "stage", stage)
        record.error = f"{type(err).__name__}: {err}"
        logger.exception("repeat %d failed at stage %s", repeat, stage)
    write_json(repeat_dir / "record.json", record.to_dict())
    return record


def aggregate_metrics(records: list[RunRecord]) -> dict[str, dict[str, float]]:
    """Mean and std (population) per metric over successful repeats."""
    rows = [r.metrics for r in records if r.status == "ok" and r.metrics is not None]
    if not rows:
        return {}
    out = {}
    for name in ("map50", "precision", "recall", "f1", "auc"):
        values = [getattr(m, name) for m in rows]
        if any(v is None for v in values):
            continue
        arr = np.asarray(values, dtype=np.float64)
        out[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def run_experiment(config: ExperimentConfig, out_root: str | Path) -> list[RunRecord]:
    """Run all repeats of one configuration under out_root/runs/<hash>/.

    Each repeat draws a fresh stratified split (seed + repeat index) over
    the same scene collection; per-metric mean and std are aggregated over
    the repeats.
    """
    config.validate()
    run_dir = Path(out_root) / "runs" / config.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.resolved_text())
    scenes = load_scenes(config)
    records = []
    for repeat in range(config.repeats):
        records.append(run_repeat(config, scenes, repeat, run_dir / f"repeat_{repeat}"))
    aggregate = {
        "config_hash": config.config_hash(),
        "variant_key": config.variant_key(),
        "repeats": config.repeats,
        "metrics": aggregate_metrics(records),
        "failed": [r.repeat for r in records if r.status != "ok"],
    }
    write_json(run_dir / "aggregate.json", aggregate)
    (run_dir / "DONE").write_text("ok\n" if all(r.status == "ok" for r in records) else "failed\n")
    return records


def load_run_records(out_root: str | Path) -> list[RunRecord]:
    """All RunRecords found under out_root/runs/<hash>/repeat_*/record.json."""
    records = []
    for record_path in sorted(Path(out_root).glob("runs/*/repeat_*/record.json")):
        with open(record_path) as fh:
            record = RunRecord.from_dict(json.load(fh))
        record.paths = {k: str(record_path.parent / v) for k, v in record.paths.items()}
        records.append(record)
    return records


METRIC_COLUMNS = ("map50", "precision", "recall", "f1")


@dataclass
class ComparisonTable:
    """Mean +/- std of each metric per variant, with best-per-column flags."""

    rows: dict[str, dict[str, tuple[float, float]]]
    best: dict[str, list[str]]

    def render(self) -> str:
        header = ["variant"] + [m for m in METRIC_COLUMNS]
        widths = [max(len(header[0]), *(len(v) for v in self.rows))]
        lines = []
        cells = {}
        for variant, metrics in self.rows.items():
            row = []
            for metric in METRIC_COLUMNS:
                mean, std = metrics[metric]
                text = f"{mean:.3f} +/- {std:.3f}"
                if variant in self.best.get(metric, []):
                    text = "*" + text
                row.append(text)
            cells[variant] = row
        col_w = [max(len(METRIC_COLUMNS[j]), *(len(cells[v][j]) for v in cells)) for j in range(len(METRIC_COLUMNS))]
        lines.append(" | ".join([header[0].ljust(widths[0])] + [m.ljust(w) for m, w in zip(METRIC_COLUMNS, col_w)]))
        lines.append("-+-".join(["-" * widths[0]] + ["-" * w for w in col_w]))
        for variant, row in cells.items():
            lines.append(" | ".join([variant.ljust(widths[0])] + [c.ljust(w) for c, w in zip(row, col_w)]))
        lines.append("(* = best per column; ties all flagged)")
        return "\n".join(lines)


def compare_variants(groups: dict[str, list[RunRecord]]) -> ComparisonTable:
    """Comparison table over >= 1 variant groups with equal repeat counts."""
    if not groups:
        raise ConfigError("compare_variants needs at least one variant group")
    sizes = {name: len(records) for name, records in groups.items()}
    if len(set(sizes.values())) > 1:
        raise ConfigError(f"unequal repeat counts are not comparable: {sizes}")
    rows = {}
    for name, records in groups.items():
        metrics = aggregate_metrics(records)
        missing = [m for m in METRIC_COLUMNS if m not in metrics]
        if missing:
            raise ConfigError(f"variant {name!r} lacks metrics {missing}")
        rows[name] = {m: (metrics[m]["mean"], metrics[m]["std"]) for m in METRIC_COLUMNS}
    best: dict[str, list[str]] = {}
    if len(rows) >= 2:
        for metric in METRIC_COLUMNS:
            top = max(mean for mean, _ in (rows[v][metric] for v in rows))
            best[metric] = [v for v in rows if rows[v][metric][0] == top]
    return ComparisonTable(rows=rows, best=best)

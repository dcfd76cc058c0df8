"""Plot emission for finished runs: PCA scatters, first-component heatmap
overlays, ROC curves with AUC legends, and detection overlays."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataset import load_manifest
from .evaluation import fit_pca, pc1_heatmap, project
from .harness import RunRecord
from .latentgrid import read_grid_cache, resample_bilinear
from .utilio import read_json

logger = logging.getLogger(__name__)

MAX_SCENES_PER_FAMILY = 4


def _read_roc_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    points = np.array([[float(a), float(b)] for a, b in rows]) if rows else np.zeros((0, 2))
    return points[:, 0], points[:, 1]


def plot_pca_scatter(record: RunRecord, out_dir: Path) -> Path | None:
    path = record.paths.get("embeddings")
    if not path or not Path(path).exists():
        logger.info("skip PCA scatter for %s repeat %d: no embeddings artifact", record.variant_key, record.repeat)
        return None
    blob = np.load(path)
    model = fit_pca(blob["embeddings"])
    coords = project(model, blob["embeddings"], 2)
    classes = blob["classes"]
    fig, ax = plt.subplots(figsize=(5, 5))
    for cls in np.unique(classes):
        mask = classes == cls
        label = "background" if cls == 0 else f"class {cls}"
        ax.scatter(coords[mask, 0], coords[mask, 1], s=12, alpha=0.7, label=label)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(f"{record.variant_key} embeddings (repeat {record.repeat})")
    ax.legend(fontsize=8)
    out = out_dir / f"pca_scatter_{record.variant_key}_r{record.repeat}.png"
    fig.savefig(out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_pc1_heatmaps(record: RunRecord, out_dir: Path) -> list[Path]:
    grid_dir = record.paths.get("grid_cache")
    manifest = record.paths.get("test_manifest")
    if not grid_dir or not manifest or not Path(manifest).exists():
        logger.info("skip PC1 heatmaps for %s repeat %d: missing artifacts", record.variant_key, record.repeat)
        return []
    scenes = {s.scene_id: s for s in load_manifest(manifest)}
    grid_files = sorted(Path(grid_dir).glob("*.grid"))
    grids = []
    for gf in grid_files:
        grid, _ = read_grid_cache(gf)
        if grid.scene_id in scenes:
            grids.append(grid)
        if len(grids) == MAX_SCENES_PER_FAMILY:
            break
    if not grids:
        return []
    cells = np.concatenate([g.values.reshape(g.values.shape[0], -1).T for g in grids])
    model = fit_pca(cells)
    outputs = []
    for grid in grids:
        scene = scenes[grid.scene_id]
        heat = pc1_heatmap(model, grid)
        import torch

        upsampled = resample_bilinear(
            torch.as_tensor(heat, dtype=torch.float32).unsqueeze(0), scene.height, scene.width
        )[0].numpy()
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(scene.image.transpose(1, 2, 0))
        ax.imshow(upsampled, cmap="magma", alpha=0.55, vmin=0.0, vmax=1.0)
        ax.set_title(f"PC1 heatmap: {grid.scene_id}")
        ax.axis("off")
        out = out_dir / f"pc1_heatmap_{record.variant_key}_r{record.repeat}_{grid.scene_id}.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        plt.close(fig)
        outputs.append(out)
    return outputs


def plot_roc_curves(records: list[RunRecord], out_dir: Path) -> tuple[Path | None, dict[str, float]]:
    """One figure with every record's ROC curve; AUC in the legend."""
    legend_auc: dict[str, float] = {}
    fig, ax = plt.subplots(figsize=(5, 5))
    plotted = False
    for record in records:
        path = record.paths.get("roc_curve")
        if not path or not Path(path).exists() or record.metrics is None or record.metrics.auc is None:
            continue
        fpr, tpr = _read_roc_csv(Path(path))
        if len(fpr) == 0:
            continue
        label = f"{record.variant_key} r{record.repeat} (AUC={record.metrics.auc:.3f})"
        legend_auc[label] = record.metrics.auc
        ax.plot(fpr, tpr, label=label)
        plotted = True
    if not plotted:
        plt.close(fig)
        logger.info("skip ROC plot: no curves available")
        return None, {}
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("window-level ROC")
    ax.legend(fontsize=7)
    out = out_dir / "roc_curves.png"
    fig.savefig(out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out, legend_auc


def plot_detection_overlays(record: RunRecord, out_dir: Path, threshold: float = 0.5) -> list[Path]:
    manifest = record.paths.get("test_manifest")
    detections_path = record.paths.get("detections")
    if not manifest or not detections_path or not Path(manifest).exists() or not Path(detections_path).exists():
        logger.info("skip overlays for %s repeat %d: missing artifacts", record.variant_key, record.repeat)
        return []
    scenes = load_manifest(manifest)
    detections = read_json(detections_path)
    outputs = []
    for scene in scenes[:MAX_SCENES_PER_FAMILY]:
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(scene.image.transpose(1, 2, 0))
        for box in np.asarray(scene.boxes).reshape(-1, 4):
            x0, y0, x1, y1 = box
            ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="lime", linewidth=1.5))
        for det in detections.get(scene.scene_id, []):
            if det["score"] < threshold:
                continue
            x0, y0, x1, y1 = det["box"]
            ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="red", linewidth=1.2))
            ax.text(x0, max(0, y0 - 2), f"{det['class']}:{det['score']:.2f}", color="red", fontsize=7)
        ax.set_title(f"{scene.scene_id} (score >= {threshold})")
        ax.axis("off")
        out = out_dir / f"detections_{record.variant_key}_r{record.repeat}_{scene.scene_id}.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        plt.close(fig)
        outputs.append(out)
    return outputs


def emit_plots(records: list[RunRecord], out_dir: str | Path) -> dict:
    """Emit all four plot families for the given records.

    Families whose artifacts are missing are skipped with a notice. Returns
    the emitted paths plus the AUC values used in the ROC legend.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted: list[Path] = []
    for record in records:
        if record.status != "ok":
            logger.info("skip plots for failed repeat %d (%s)", record.repeat, record.variant_key)
            continue
        scatter = plot_pca_scatter(record, out_dir)
        if scatter:
            emitted.append(scatter)
        emitted.extend(plot_pc1_heatmaps(record, out_dir))
        emitted.extend(plot_detection_overlays(record, out_dir))
    roc_path, legend_auc = plot_roc_curves([r for r in records if r.status == "ok"], out_dir)
    if roc_path:
        emitted.append(roc_path)
    return {"paths": [str(p) for p in emitted], "roc_legend_auc": legend_auc}

"""Latent-space learning: a small convolutional patch encoder trained with
either a fixed-margin triplet loss (discrete, class-driven) or an
adaptive-margin triplet loss whose margin scales with the gap between
annotation vectors.

The encoder is an interface: anything exposing `latent_dim`, `input_size`
and a forward from (N, 3, S, S) to (N, D) can stand in for ConvEncoder.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import AnnotationVector, Patch
from .errors import ConfigError, EmptyDatasetError, ShapeError, TripletOrderError


@dataclass(frozen=True)
class AnnotationWeights:
    """Weights of the class/area/squareness terms in annotation distance."""

    w_class: float = 1.0
    w_area: float = 1.0
    w_square: float = 1.0

    def validate(self) -> None:
        if min(self.w_class, self.w_area, self.w_square) < 0:
            raise ConfigError(f"annotation weights must be non-negative, got {self}")
        if self.w_class == self.w_area == self.w_square == 0:
            raise ConfigError("annotation weights must not all be zero")


def annotation_distance(a: AnnotationVector, b: AnnotationVector, w: AnnotationWeights) -> float:
    """Weighted pseudo-metric between annotation vectors.

    d = w_class * [class differs] + w_area * |area gap| + w_square * |squareness gap|
    """
    w.validate()
    return (
        w.w_class * float(a.class_index != b.class_index)
        + w.w_area * abs(a.area_norm - b.area_norm)
        + w.w_square * abs(a.squareness - b.squareness)
    )


def dtl_loss(d_ap, d_an, margin):
    """Fixed-margin triplet hinge: max(0, d_ap - d_an + margin).

    Accepts floats or torch tensors (autograd-safe). margin must be >= 0;
    margin 0 is the degenerate boundary.
    """
    if float(torch.as_tensor(margin).min() if torch.is_tensor(margin) else margin) < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    hinge = d_ap - d_an + margin
    if torch.is_tensor(hinge):
        return hinge.clamp_min(0)
    return max(0.0, hinge)


def matl_loss(d_ap, d_an, ann_ap, ann_an, margin_scale):
    """Adaptive-margin triplet hinge with margin = margin_scale * (ann_an - ann_ap).

    The annotation-space gap sets the margin, so embedding distances are
    pushed apart in proportion to how different the annotations are. With a
    constant gap this reduces exactly to dtl_loss with the fixed margin
    margin_scale * gap.
    """
    if float(margin_scale) <= 0:
        raise ConfigError(f"margin_scale must be > 0, got {margin_scale}")
    gap = ann_an - ann_ap
    if torch.is_tensor(gap):
        if bool((gap <= 0).any()):
            raise TripletOrderError("triplet requires ann_an > ann_ap for every element")
    elif gap <= 0:
        raise TripletOrderError(f"triplet requires ann_an > ann_ap, got {ann_ap} vs {ann_an}")
    hinge = d_ap - d_an + margin_scale * gap
    if torch.is_tensor(hinge):
        return hinge.clamp_min(0)
    return max(0.0, hinge)


@dataclass(frozen=True)
class Triplet:
    """Indices into a batch plus the anchor's annotation distances."""

    anchor: int
    positive: int
    negative: int
    ann_ap: float
    ann_an: float


def annotation_distance_matrix(annotations: list[AnnotationVector], w: AnnotationWeights) -> np.ndarray:
    w.validate()
    cls = np.array([a.class_index for a in annotations])
    area = np.array([a.area_norm for a in annotations])
    sq = np.array([a.squareness for a in annotations])
    return (
        w.w_class * (cls[:, None] != cls[None, :]).astype(np.float64)
        + w.w_area * np.abs(area[:, None] - area[None, :])
        + w.w_square * np.abs(sq[:, None] - sq[None, :])
    )


def mine_triplets(
    batch: list[tuple[np.ndarray, AnnotationVector]],
    w: AnnotationWeights,
    mode: str = "semi_hard",
    margin_scale: float = 1.0,
) -> list[Triplet]:
    """Enumerate triplets (a, p, n) with ann_dist(a, p) < ann_dist(a, n).

    mode "all" returns every valid ordering; "semi_hard" additionally
    requires d_ap < d_an < d_ap + margin_scale * annotation gap in
    embedding space. Returns [] when no valid triplet exists.
    """
    if mode not in ("all", "semi_hard"):
        raise ConfigError(f"unknown mining mode {mode!r}")
    if len(batch) < 3:
        raise ConfigError(f"mining needs a batch of >= 3, got {len(batch)}")
    embeddings = np.stack([np.asarray(e, dtype=np.float64) for e, _ in batch])
    annotations = [a for _, a in batch]
    ann_d = annotation_distance_matrix(annotations, w)
    n = len(batch)
    valid = ann_d[:, :, None] < ann_d[:, None, :]  # [a, p, n]
    eye = np.eye(n, dtype=bool)
    distinct = ~(eye[:, :, None] | eye[:, None, :] | eye[None, :, :])
    mask = valid & distinct
    if mode == "semi_hard":
        diff = embeddings[:, None, :] - embeddings[None, :, :]
        emb_d = np.sqrt(np.maximum((diff ** 2).sum(-1), 0.0))
        margin = margin_scale * (ann_d[:, None, :] - ann_d[:, :, None])
        mask &= emb_d[:, :, None] < emb_d[:, None, :]
        mask &= emb_d[:, None, :] < emb_d[:, :, None] + margin
    triplets = [
        Triplet(int(a), int(p), int(q), float(ann_d[a, p]), float(ann_d[a, q]))
        for a, p, q in np.argwhere(mask)
    ]
    return triplets


class ConvEncoder(nn.Module):
    """4 conv blocks with pooling and a linear head to the latent dimension."""

    def __init__(self, latent_dim: int = 64, input_size: int = 32, width: int = 16):
        super().__init__()
        if input_size % 16 != 0:
            raise ConfigError(f"encoder input_size must be divisible by 16, got {input_size}")
        self.latent_dim = latent_dim
        self.input_size = input_size
        channels = [3, width, 2 * width, 4 * width, 4 * width]
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.GroupNorm(min(8, c_out), c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
        self.blocks = nn.Sequential(*blocks)
        side = input_size // 16
        self.head = nn.Linear(channels[-1] * side * side, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder expects (N, 3, S, S), got {tuple(x.shape)}")
        h = self.blocks(x)
        return self.head(h.flatten(1))


@dataclass
class EncoderState:
    """An encoder plus the metadata needed to reuse and checksum it."""

    module: nn.Module
    architecture_id: str
    latent_dim: int
    input_size: int
    frozen: bool = False

    def freeze(self) -> "EncoderState":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        return replace(self, frozen=True)


def new_encoder(latent_dim: int = 64, input_size: int = 32, seed: int = 0, width: int = 16) -> EncoderState:
    torch.manual_seed(seed)
    module = ConvEncoder(latent_dim=latent_dim, input_size=input_size, width=width)
    return EncoderState(module, f"conv4x{width}", latent_dim, input_size, frozen=False)


def _prepare_batch(pixels: torch.Tensor, input_size: int) -> torch.Tensor:
    if pixels.shape[-1] != input_size or pixels.shape[-2] != input_size:
        pixels = F.interpolate(pixels, size=(input_size, input_size), mode="bilinear", align_corners=False)
    return pixels


def encode_batch(state: EncoderState, pixels: np.ndarray | torch.Tensor) -> np.ndarray:
    """Deterministic inference encoding of (N, 3, S, S) patches to (N, D)."""
    tensor = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    if tensor.ndim != 4 or tensor.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, S, S) pixels, got {tuple(tensor.shape)}")
    tensor = _prepare_batch(tensor, state.input_size)
    was_training = state.module.training
    state.module.eval()
    with torch.no_grad():
        out = state.module(tensor)
    if was_training and not state.frozen:
        state.module.train()
    return out.numpy().astype(np.float32)


def encode(state: EncoderState, pixels: np.ndarray | torch.Tensor) -> np.ndarray:
    """Encode a single (3, S, S) patch to a length-D vector."""
    array = np.asarray(pixels)
    if array.ndim != 3 or array.shape[0] != 3:
        raise ShapeError(f"expected (3, S, S) pixels, got {array.shape}")
    return encode_batch(state, array[None])[0]


def encoder_checksum(state: EncoderState) -> str:
    """SHA-256 over architecture metadata and all parameters."""
    digest = hashlib.sha256()
    digest.update(f"{state.architecture_id}|{state.latent_dim}|{state.input_size}".encode())
    sd = state.module.state_dict()
    for name in sorted(sd):
        digest.update(name.encode())
        digest.update(sd[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_encoder(state: EncoderState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "architecture_id": state.architecture_id,
            "latent_dim": state.latent_dim,
            "input_size": state.input_size,
            "state_dict": state.module.state_dict(),
        },
        path,
    )
    return path


def load_encoder(path: str | Path) -> EncoderState:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    arch = blob["architecture_id"]
    if not arch.startswith("conv4x"):
        raise ConfigError(f"unknown encoder architecture {arch!r}")
    width = int(arch.removeprefix("conv4x"))
    module = ConvEncoder(blob["latent_dim"], blob["input_size"], width=width)
    module.load_state_dict(blob["state_dict"])
    return EncoderState(module, arch, blob["latent_dim"], blob["input_size"], frozen=False)


@dataclass
class EmbeddingTrainConfig:
    variant: str = "matl"  # "dtl" | "matl"
    latent_dim: int = 64
    input_size: int = 32
    width: int = 16
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    dtl_margin: float = 0.5
    margin_scale: float = 1.0
    weights: AnnotationWeights = AnnotationWeights()
    mining: str = "semi_hard"
    max_triplets_per_batch: int = 256
    seed: int = 0
    log_path: str | Path | None = None

    def validate(self) -> None:
        if self.variant not in ("dtl", "matl"):
            raise ConfigError(f"variant must be 'dtl' or 'matl', got {self.variant!r}")
        self.weights.validate()


def _triplet_batch_loss(
    emb: torch.Tensor,
    triplets: list[Triplet],
    config: EmbeddingTrainConfig,
) -> torch.Tensor:
    a = emb[[t.anchor for t in triplets]]
    p = emb[[t.positive for t in triplets]]
    n = emb[[t.negative for t in triplets]]
    d_ap = torch.linalg.vector_norm(a - p, dim=1)
    d_an = torch.linalg.vector_norm(a - n, dim=1)
    if config.variant == "dtl":
        return dtl_loss(d_ap, d_an, config.dtl_margin).mean()
    ann_ap = torch.tensor([t.ann_ap for t in triplets], dtype=emb.dtype)
    ann_an = torch.tensor([t.ann_an for t in triplets], dtype=emb.dtype)
    return matl_loss(d_ap, d_an, ann_ap, ann_an, config.margin_scale).mean()


def train_embedding(patches: list[Patch], config: EmbeddingTrainConfig) -> EncoderState:
    """Train the patch encoder with the configured triplet objective.

    DTL mines triplets on class identity alone (margin dtl_margin); the
    adaptive-margin variant mines on the full annotation distance. Mining
    falls back from semi-hard to all valid triplets when a batch has no
    semi-hard candidate, so training never silently stalls. Deterministic
    for a fixed seed; epochs=0 returns the untouched initialization.
    """
    config.validate()
    if not patches:
        raise EmptyDatasetError("train_embedding requires at least one patch")
    torch.manual_seed(config.seed)
    state = new_encoder(config.latent_dim, config.input_size, seed=config.seed, width=config.width)
    module = state.module
    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
    pixels = torch.as_tensor(np.stack([p.pixels for p in patches]), dtype=torch.float32)
    pixels = _prepare_batch(pixels, config.input_size)
    annotations = [p.annotation for p in patches]
    if config.variant == "dtl":
        mine_w = AnnotationWeights(1.0, 0.0, 0.0)
        mine_scale = config.dtl_margin
    else:
        mine_w = config.weights
        mine_scale = config.margin_scale
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(patches))
        losses = []
        for start in range(0, len(order) - 2, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 3:
                continue
            module.train()
            emb = module(pixels[idx])
            batch = [(emb[i].detach().numpy(), annotations[j]) for i, j in enumerate(idx)]
            triplets = mine_triplets(batch, mine_w, config.mining, mine_scale)
            if not triplets and config.mining == "semi_hard":
                triplets = mine_triplets(batch, mine_w, "all", mine_scale)
            if not triplets:
                continue
            if len(triplets) > config.max_triplets_per_batch:
                chosen = rng.choice(len(triplets), size=config.max_triplets_per_batch, replace=False)
                triplets = [triplets[i] for i in chosen]
            loss = _triplet_batch_loss(emb, triplets, config)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append((epoch, float(np.mean(losses)) if losses else 0.0))
    if config.log_path is not None:
        log_path = Path(config.log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            writer.writerows(history)
    module.eval()
    return state

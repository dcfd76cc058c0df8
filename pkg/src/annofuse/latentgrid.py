"""Dense latent grids: sliding-window encoding of full scenes with a frozen
encoder, bilinear resampling to pyramid resolutions, and a binary on-disk
grid cache keyed by encoder checksum.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import Scene
from .embedding import EncoderState, encode_batch, encoder_checksum
from .errors import ConfigError, GeometryError, ShapeError


@dataclass
class LatentGrid:
    """D x H_g x W_g embeddings from sliding-window coverage of one scene."""

    values: np.ndarray  # (D, H_g, W_g) float32
    window: int
    stride: int
    scene_id: str

    @property
    def latent_dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ResampleSpec:
    target_h: int
    target_w: int
    align_corners: bool = True

    def validate(self) -> None:
        if self.target_h < 1 or self.target_w < 1:
            raise ConfigError(f"resample target must be >= 1, got {self.target_h}x{self.target_w}")


def grid_shape(height: int, width: int, window: int, stride: int) -> tuple[int, int]:
    """Grid dims from the drop-partial-windows rule: floor((dim - window)/stride) + 1."""
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if window > min(height, width) or window < 1:
        raise GeometryError(f"window {window} does not fit scene {width}x{height}")
    return (height - window) // stride + 1, (width - window) // stride + 1


def extract_grid(
    scene: Scene,
    encoder: EncoderState,
    window: int,
    stride: int,
    batch_size: int = 64,
) -> LatentGrid:
    """Encode every full window at offsets (j*stride, i*stride) into a grid.

    Crops are resized to the encoder's input size before encoding; partial
    windows at the borders are dropped. Requires a frozen encoder.
    """
    if not encoder.frozen:
        raise ConfigError("extract_grid requires a frozen encoder (call state.freeze())")
    h_g, w_g = grid_shape(scene.height, scene.width, window, stride)
    crops = np.empty((h_g * w_g, 3, window, window), dtype=np.float32)
    k = 0
    for i in range(h_g):
        for j in range(w_g):
            y, x = i * stride, j * stride
            crops[k] = scene.image[:, y:y + window, x:x + window]
            k += 1
    chunks = [
        encode_batch(encoder, crops[start:start + batch_size])
        for start in range(0, len(crops), batch_size)
    ]
    values = np.concatenate(chunks, axis=0).reshape(h_g, w_g, encoder.latent_dim)
    return LatentGrid(
        values=np.ascontiguousarray(values.transpose(2, 0, 1)),
        window=window,
        stride=stride,
        scene_id=scene.scene_id,
    )


def _axis_indices(in_size: int, out_size: int, align_corners: bool, dtype, device):
    """Source (low index, high index, fraction) for one resampled axis."""
    out = torch.arange(out_size, dtype=dtype, device=device)
    if align_corners:
        scale = 0.0 if out_size == 1 else (in_size - 1) / (out_size - 1)
        src = out * scale
    else:
        src = ((out + 0.5) * (in_size / out_size) - 0.5).clamp(0, in_size - 1)
    lo = src.floor().long().clamp(0, in_size - 1)
    hi = (lo + 1).clamp(max=in_size - 1)
    frac = (src - lo.to(dtype)).clamp(0, 1)
    return lo, hi, frac


def resample_bilinear(x: torch.Tensor, target_h: int, target_w: int, align_corners: bool = True) -> torch.Tensor:
    """Channel-wise bilinear resampling of (..., H, W) to (..., target_h, target_w).

    Uses the lerp form a + w*(b - a), so constants are preserved exactly and
    same-resolution resampling with align_corners=True is an exact identity.
    """
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"resample target must be >= 1, got {target_h}x{target_w}")
    h, w = x.shape[-2], x.shape[-1]
    dtype = x.dtype if x.dtype.is_floating_point else torch.float32
    x = x.to(dtype)
    lo_y, hi_y, fy = _axis_indices(h, target_h, align_corners, dtype, x.device)
    lo_x, hi_x, fx = _axis_indices(w, target_w, align_corners, dtype, x.device)
    top = x.index_select(-2, lo_y)
    bottom = x.index_select(-2, hi_y)
    rows = top + fy.view(-1, 1) * (bottom - top)
    left = rows.index_select(-1, lo_x)
    right = rows.index_select(-1, hi_x)
    return left + fx * (right - left)


def resample_grid(grid: LatentGrid | np.ndarray, spec: ResampleSpec) -> np.ndarray:
    """Resample grid values to (D, target_h, target_w)."""
    spec.validate()
    values = grid.values if isinstance(grid, LatentGrid) else np.asarray(grid)
    if values.ndim != 3:
        raise ShapeError(f"expected (D, H, W) grid values, got {values.shape}")
    tensor = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
    out = resample_bilinear(tensor, spec.target_h, spec.target_w, spec.align_corners)
    return out.numpy()


_MAGIC = b"AFGC"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII64sI")  # magic, ver, D, Hg, Wg, window, stride, checksum, id len


def write_grid_cache(grid: LatentGrid, checksum: str, path: str | Path) -> Path:
    """Write the binary grid container atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d, h_g, w_g = grid.values.shape
    sid = grid.scene_id.encode()
    header = _HEADER.pack(_MAGIC, _VERSION, d, h_g, w_g, grid.window, grid.stride, checksum.encode(), len(sid))
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(sid)
            fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_grid_cache(path: str | Path) -> tuple[LatentGrid, str]:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ConfigError(f"{path}: truncated grid cache header")
        magic, version, d, h_g, w_g, window, stride, checksum, id_len = _HEADER.unpack(header)
        if magic != _MAGIC or version != _VERSION:
            raise ConfigError(f"{path}: not a grid cache file (magic {magic!r}, version {version})")
        scene_id = fh.read(id_len).decode()
        values = np.frombuffer(fh.read(d * h_g * w_g * 4), dtype="<f4").reshape(d, h_g, w_g)
    if not np.isfinite(values).all():
        raise ConfigError(f"{path}: grid cache contains non-finite values")
    grid = LatentGrid(values=values.copy(), window=window, stride=stride, scene_id=scene_id)
    return grid, checksum.decode().rstrip("\x00")


def cache_key(scene_id: str, checksum: str, window: int, stride: int) -> str:
    return f"{scene_id}__{checksum[:16]}__w{window}s{stride}.grid"


def extract_grid_cached(
    scene: Scene,
    encoder: EncoderState,
    window: int,
    stride: int,
    cache_dir: str | Path,
    batch_size: int = 64,
) -> LatentGrid:
    """extract_grid with a per-(scene, encoder, geometry) disk cache.

    The encoder is frozen, so a checksum hit is sound; writes go through an
    atomic rename and tolerate concurrent extraction.
    """
    cache_dir = Path(cache_dir)
    checksum = encoder_checksum(encoder)
    path = cache_dir / cache_key(scene.scene_id, checksum, window, stride)
    if path.exists():
        grid, stored = read_grid_cache(path)
        if stored == checksum and grid.scene_id == scene.scene_id:
            return grid
    grid = extract_grid(scene, encoder, window, stride, batch_size=batch_size)
    write_grid_cache(grid, checksum, path)
    return grid

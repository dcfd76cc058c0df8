"""Fusion of resampled latent grids into feature-pyramid levels.

Three operators are supported on each selected level, all fed by a
learnable 1x1 projection of the resampled grid into the pyramid channel
space:

  additive:  P + G
  film:      gamma(G) * P + beta(G), channel-wise affine, gamma = 1 + head(G)
  mask:      sigmoid(h(G)) * P, a single-channel spatial attention mask

Under the baseline_identity init policy every operator is an exact (or,
for the mask, saturated) no-op, so fused training starts at baseline
behavior.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .latentgrid import LatentGrid, resample_bilinear

LEVELS = ("P2", "P3", "P4", "P5")
FUSION_MODES = ("additive", "film", "mask")
# sigmoid(16) differs from 1 by ~1.1e-7, which keeps even end-to-end
# detector outputs within 1e-5 of baseline; +10 leaves a visible 4.5e-5 dent
MASK_IDENTITY_BIAS = 16.0


@dataclass
class PyramidFeatures:
    """Ordered per-level feature maps sharing a channel count.

    Tensors are (C, H, W) or (B, C, H, W); spatial dims must not grow from
    one level to the next coarser one.
    """

    levels: dict[str, torch.Tensor]

    def validate(self) -> None:
        names = list(self.levels)
        channel_counts = {t.shape[-3] for t in self.levels.values()}
        if len(channel_counts) != 1:
            raise ShapeError(f"pyramid levels disagree on channels: {channel_counts}")
        for prev, cur in zip(names[:-1], names[1:]):
            p, c = self.levels[prev], self.levels[cur]
            if c.shape[-2] > p.shape[-2] or c.shape[-1] > p.shape[-1]:
                raise ShapeError(f"level {cur} {tuple(c.shape)} larger than {prev} {tuple(p.shape)}")

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[-3]

    def shapes(self) -> dict[str, tuple]:
        return {name: tuple(t.shape) for name, t in self.levels.items()}


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "additive"
    selected_levels: tuple[str, ...] = LEVELS
    init_policy: str = "baseline_identity"

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if not self.selected_levels:
            raise ConfigError("fusion enabled with empty selected_levels")
        unknown = set(self.selected_levels) - set(LEVELS)
        if unknown:
            raise ConfigError(f"unknown pyramid levels {sorted(unknown)}")
        if self.init_policy not in ("baseline_identity", "random"):
            raise ConfigError(f"unknown init_policy {self.init_policy!r}")


class FusionParams(nn.Module):
    """Per-level projection and fusion heads for one FusionConfig.

    baseline_identity zeroes the additive projection, the FiLM heads
    (gamma is produced as 1 + head output), and the mask head weights with
    a +10 bias so sigmoid saturates at ~1. The projection stays randomly
    initialized for film/mask, where identity is carried by the heads; a
    zero projection there would also zero the heads' weight gradients.
    """

    def __init__(
        self,
        latent_dim: int,
        channels: int,
        config: FusionConfig,
        mask_identity_bias: float = MASK_IDENTITY_BIAS,
    ):
        super().__init__()
        config.validate()
        self.latent_dim = latent_dim
        self.channels = channels
        self.config = config
        self.mask_identity_bias = mask_identity_bias
        self.projection = nn.ModuleDict()
        self.gamma_head = nn.ModuleDict()
        self.beta_head = nn.ModuleDict()
        self.mask_head = nn.ModuleDict()
        for level in config.selected_levels:
            self.projection[level] = nn.Conv2d(latent_dim, channels, 1)
            if config.mode == "film":
                self.gamma_head[level] = nn.Conv2d(channels, channels, 1)
                self.beta_head[level] = nn.Conv2d(channels, channels, 1)
            elif config.mode == "mask":
                self.mask_head[level] = nn.Conv2d(channels, 1, 1)
        if config.init_policy == "baseline_identity":
            self._init_identity()

    def _init_identity(self) -> None:
        for level in self.config.selected_levels:
            if self.config.mode == "additive":
                nn.init.zeros_(self.projection[level].weight)
                nn.init.zeros_(self.projection[level].bias)
            elif self.config.mode == "film":
                nn.init.zeros_(self.gamma_head[level].weight)
                nn.init.zeros_(self.gamma_head[level].bias)
                nn.init.zeros_(self.beta_head[level].weight)
                nn.init.zeros_(self.beta_head[level].bias)
            else:
                nn.init.zeros_(self.mask_head[level].weight)
                nn.init.constant_(self.mask_head[level].bias, self.mask_identity_bias)


def _check_same_shape(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"fusion inputs must share shape, got {tuple(p.shape)} vs {tuple(g.shape)}")


def project_grid(grid_at_level: torch.Tensor, projection: nn.Conv2d) -> torch.Tensor:
    """1x1 projection of a (B?, D, H, W) resampled grid into C channels."""
    if grid_at_level.shape[-3] != projection.in_channels:
        raise ShapeError(
            f"grid has {grid_at_level.shape[-3]} channels, projection expects {projection.in_channels}"
        )
    return projection(grid_at_level)


def fuse_additive(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Element-wise sum of backbone features and projected grid."""
    _check_same_shape(p, g)
    return p + g


def fuse_film(p: torch.Tensor, g: torch.Tensor, gamma_head: nn.Conv2d, beta_head: nn.Conv2d) -> torch.Tensor:
    """Channel-wise affine modulation gamma * P + beta, predicted from G.

    gamma = 1 + gamma_head(G), so zeroed heads give the exact identity.
    """
    _check_same_shape(p, g)
    gamma = 1 + gamma_head(g)
    beta = beta_head(g)
    return gamma * p + beta


def fuse_mask(p: torch.Tensor, g: torch.Tensor, mask_head: nn.Conv2d) -> torch.Tensor:
    """Sigmoid spatial mask from G, broadcast over channels and multiplied into P."""
    _check_same_shape(p, g)
    mask = torch.sigmoid(mask_head(g))
    return mask * p


def augment_pyramid(
    pyramid: PyramidFeatures,
    grid: LatentGrid | torch.Tensor,
    params: FusionParams | None,
    config: FusionConfig | None,
) -> PyramidFeatures:
    """Fuse the latent grid into the selected levels; others pass through.

    Disabled fusion (config is None) returns the input levels untouched.
    Selected levels get the grid resampled to their resolution, projected,
    and fused per config.mode; unselected levels are passed through as the
    same tensors, so they stay bit-identical.
    """
    pyramid.validate()
    if config is None:
        return PyramidFeatures(dict(pyramid.levels))
    config.validate()
    if params is None:
        raise ConfigError("fusion enabled but no FusionParams given")
    sample = next(iter(pyramid.levels.values()))
    if isinstance(grid, LatentGrid):
        grid_t = torch.as_tensor(grid.values, dtype=sample.dtype, device=sample.device)
    else:
        grid_t = grid.to(sample.dtype)
    batched = sample.ndim == 4
    if grid_t.ndim == 3 and batched:
        grid_t = grid_t.unsqueeze(0).expand(sample.shape[0], -1, -1, -1)
    out: dict[str, torch.Tensor] = {}
    for name, features in pyramid.levels.items():
        if name not in config.selected_levels:
            out[name] = features
            continue
        if name not in params.projection:
            raise ConfigError(f"no fusion parameters for selected level {name}")
        resampled = resample_bilinear(grid_t, features.shape[-2], features.shape[-1])
        g = project_grid(resampled if batched else resampled.unsqueeze(0), params.projection[name])
        p = features if batched else features.unsqueeze(0)
        if config.mode == "additive":
            fused = fuse_additive(p, g)
        elif config.mode == "film":
            fused = fuse_film(p, g, params.gamma_head[name], params.beta_head[name])
        else:
            fused = fuse_mask(p, g, params.mask_head[name])
        out[name] = fused if batched else fused.squeeze(0)
    result = PyramidFeatures(out)
    result.validate()
    return result

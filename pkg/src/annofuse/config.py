"""Experiment configuration: a flat keyed text format (`key = value` lines,
`#` comments), CLI overrides, and a content hash for run directories.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dataset import SceneGeneratorConfig, SplitSpec
from .errors import ConfigError

VARIANTS = ("none", "dtl", "matl")


@dataclass
class ExperimentConfig:
    """Resolved settings for the full pipeline. Desk-scale defaults."""

    # dataset
    source: str = "synthetic"            # "synthetic" | "manifest"
    manifest: str = ""
    n_scenes: int = 200
    image_size: int = 128
    n_classes: int = 3
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 20
    size_max: int = 48
    noise: float = 0.02
    # splits
    ratio_train: float = 0.6
    ratio_val: float = 0.2
    ratio_test: float = 0.2
    # patches and grid geometry
    patch_side: int = 64
    background_iou_max: float = 0.05
    window: int = 64
    stride: int = 16
    max_patches: int = 600
    # embedding
    variant: str = "none"                # "none" | "dtl" | "matl"
    latent_dim: int = 64
    encoder_input: int = 32
    encoder_width: int = 16
    embed_epochs: int = 50
    embed_batch: int = 32
    embed_lr: float = 1e-3
    dtl_margin: float = 0.5
    margin_scale: float = 1.0
    # fusion
    fusion_mode: str = "mask"            # "additive" | "film" | "mask"
    fusion_levels: str = "P2,P3,P4,P5"
    fusion_init: str = "baseline_identity"
    # detector
    channels: int = 64
    detector_epochs: int = 20
    detector_batch: int = 4
    detector_lr: float = 1e-3
    # evaluation
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    roc_window: int = 32
    roc_stride: int = 8
    # experiment
    repeats: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("source=manifest requires a manifest path")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.window < 1 or self.stride < 1:
            raise ConfigError(f"invalid window/stride {self.window}/{self.stride}")
        if self.source == "synthetic" and self.window > self.image_size:
            raise ConfigError(f"window {self.window} exceeds image_size {self.image_size}")
        self.split_spec().validate()
        if self.source == "synthetic":
            self.generator_config().validate()
        if self.fusion_enabled:
            if self.fusion_mode not in ("additive", "film", "mask"):
                raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
            if not self.selected_levels():
                raise ConfigError("fusion enabled with empty fusion_levels")

    @property
    def fusion_enabled(self) -> bool:
        # variant "none" runs the plain baseline detector
        return self.variant != "none"

    def selected_levels(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.fusion_levels.split(",") if p.strip())

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        return SplitSpec(
            ratios=(self.ratio_train, self.ratio_val, self.ratio_test),
            seed=self.seed if seed is None else seed,
        )

    def generator_config(self) -> SceneGeneratorConfig:
        return SceneGeneratorConfig(
            n_scenes=self.n_scenes,
            image_size=self.image_size,
            n_classes=self.n_classes,
            objects_min=self.objects_min,
            objects_max=self.objects_max,
            size_min=self.size_min,
            size_max=self.size_max,
            noise=self.noise,
        )

    def resolved_text(self) -> str:
        lines = [f"{key} = {value}" for key, value in sorted(asdict(self).items())]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:12]

    def variant_key(self) -> str:
        if self.variant == "none":
            return "baseline"
        return f"{self.variant}+{self.fusion_mode}"


def parse_keyed_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment; blanks ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        values[key] = value
    return values


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        return value
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind}") from err


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    config = ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})
    config.validate()
    return config


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
) -> ExperimentConfig:
    """Config file plus `key=value` command-line overrides (overrides win)."""
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_keyed_text(path.read_text(), origin=str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = value
    return config_from_mapping(values)

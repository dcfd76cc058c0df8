"""Exception types shared across the package."""


class AnnofuseError(Exception):
    """Base class for all package errors."""


class InvalidBoxError(AnnofuseError, ValueError):
    """Box with non-positive extent or outside its allowed bounds."""


class GeometryError(AnnofuseError, ValueError):
    """Window/scene geometry that cannot be tiled or gridded."""


class StratificationError(AnnofuseError, ValueError):
    """A class has too few items to populate every split."""


class ConfigError(AnnofuseError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class ManifestError(AnnofuseError, ValueError):
    """Malformed or invalid dataset manifest."""


class ShapeError(AnnofuseError, ValueError):
    """Tensor shape does not match the expected contract."""


class TripletOrderError(AnnofuseError, ValueError):
    """Triplet whose annotation distances violate anchor ordering."""


class EmptyDatasetError(AnnofuseError, ValueError):
    """An operation that requires data received none."""


class DegenerateInputError(AnnofuseError, ValueError):
    """Input on which the result is undefined (zero-area box, single-label AUC, zero-variance PCA)."""


class StageError(AnnofuseError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage

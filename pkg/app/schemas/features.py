"""Schemas consumed and produced by the evaluation protocols."""

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class FeatureBank(BaseModel):
    """Pooled per-image features with their class labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    pooling: str = "mean"

    @model_validator(mode="after")
    def check_bank(self) -> "FeatureBank":
        if self.features.ndim != 2:
            raise ValueError(f"features must be N x d, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature bank contains non-finite entries")
        return self

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class SegmentationMap(BaseModel):
    """Per-patch cluster labels laid out on the encoder grid."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labels: np.ndarray
    clusters: int

    @model_validator(mode="after")
    def check_labels(self) -> "SegmentationMap":
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.clusters):
            raise ValueError(f"labels must lie in [0, {self.clusters})")
        return self

"""Pydantic schemas for every experiment hyperparameter."""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

LossKind = Literal["L2", "L1", "Huber", "PatchDisc"]
TargetStrategy = Literal["shared", "standalone", "shared_stopgrad", "momentum"]
DecoderKind = Literal["self_attention", "cross_attention"]
GridKind = Literal["contiguous", "noncontiguous"]
PoolingKind = Literal["mean", "max", "topk"]

PROJECTOR_WIDTH_FACTOR = 64


class ModelConfig(BaseModel):
    """Shape of the online/target encoders, projector and decoder.

    The working canvas is ``grid_size * (patch_size + gap)`` pixels wide;
    the gap itself belongs to :class:`TrainConfig`.
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "vit-tiny-lab"
    patch_size: int = Field(8, ge=1)
    grid_size: int = Field(8, ge=2)
    channels: int = Field(3, ge=1)
    dim: int = Field(64, ge=4)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    decoder_kind: DecoderKind = "self_attention"
    decoder_depth: int = Field(3, ge=1)
    visual_cues: bool = False
    projector: bool = False
    projector_hidden: Optional[int] = Field(
        None, ge=1, description="Projector hidden width; 64 * dim when unset (4096 at dim 64)."
    )
    init_std: float = Field(0.02, gt=0)
    ln_eps: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ValueError(f"dim {self.dim} must be divisible by 4 for SinCos embeddings")
        return self

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def hidden_projector(self) -> int:
        return self.projector_hidden or PROJECTOR_WIDTH_FACTOR * self.dim


class LossConfig(BaseModel):
    """Reconstruction objective and similarity regulariser settings."""
    model_config = ConfigDict(extra="forbid")

    kind: LossKind = "L2"
    delta: float = Field(1.0, gt=0)
    tau: float = Field(0.1, gt=0)
    infonce_sign: Literal["negated", "conventional"] = "negated"
    sim_constraint: bool = False
    sim_weight: float = Field(0.1, ge=0)
    gamma_start: float = Field(0.75, ge=-1, le=1)
    gamma_end: float = Field(0.25, ge=-1, le=1)

    @property
    def reg_weight(self) -> float:
        """Effective regulariser weight, zero when the constraint is off."""
        return self.sim_weight if self.sim_constraint else 0.0


class TrainConfig(BaseModel):
    """Optimisation, masking and target-encoder settings."""
    model_config = ConfigDict(extra="forbid")

    dataset: str = "synthetic"
    synthetic_classes: int = Field(10, ge=1)
    synthetic_count: int = Field(2000, ge=1)
    synthetic_image_size: int = Field(96, ge=8)
    epochs: int = Field(30, ge=1)
    warmup_epochs: int = Field(3, ge=0)
    max_steps: Optional[int] = Field(None, ge=0)
    batch_size: int = Field(32, ge=1)
    base_lr: float = Field(1.5e-4, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    mask_ratio: float = Field(0.75, gt=0, lt=1)
    grid: GridKind = "contiguous"
    gap: int = Field(0, ge=0)
    augment: bool = True
    min_crop_area: float = Field(0.2, gt=0, le=1)
    target_strategy: TargetStrategy = "momentum"
    target_depth: Optional[int] = Field(None, ge=0)
    momentum: float = Field(0.996, ge=0, le=1)
    momentum_end: float = Field(1.0, ge=0, le=1)
    seed: int = 0
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(10, ge=1)

    @model_validator(mode="after")
    def check_schedule(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})"
            )
        if self.grid == "contiguous" and self.gap != 0:
            raise ValueError("gap must be 0 for a contiguous grid")
        return self

    @property
    def effective_lr(self) -> float:
        """Base learning rate scaled linearly by batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0


class EvalConfig(BaseModel):
    """Downstream evaluation protocol settings."""
    model_config = ConfigDict(extra="forbid")

    pooling: PoolingKind = "topk"
    topk: int = Field(10, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    probe_epochs: int = Field(100, ge=1)
    probe_lr: float = Field(0.1, gt=0)
    probe_momentum: float = Field(0.9, ge=0, lt=1)
    probe_batch_size: int = Field(64, ge=1)
    clusters: int = Field(2, ge=2)


class RunConfig(BaseModel):
    """Complete, resolved configuration of one run."""
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def check_target_depth(self) -> "RunConfig":
        depth = self.train.target_depth
        if depth is not None and depth > self.model.depth:
            raise ValueError(
                f"target_depth {depth} exceeds encoder depth {self.model.depth}"
            )
        return self

    @property
    def target_depth(self) -> int:
        """Resolved target depth (full encoder depth when unset)."""
        if self.train.target_depth is None:
            return self.model.depth
        return self.train.target_depth

    @property
    def canvas_size(self) -> int:
        """Side of the square working canvas the loader produces."""
        return self.model.grid_size * (self.model.patch_size + self.train.gap)

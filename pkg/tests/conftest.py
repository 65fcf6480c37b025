import numpy as np
import pytest

from app.schemas.config import EvalConfig, LossConfig, ModelConfig, RunConfig, TrainConfig
from app.services.dataset import ImageDataset
from app.services.synth import textured_shapes


def tiny_model(**changes) -> ModelConfig:
    base = dict(
        name="tiny", patch_size=4, grid_size=4, channels=3, dim=16, depth=2, heads=2,
        mlp_ratio=2, decoder_depth=1, projector_hidden=16,
    )
    base.update(changes)
    return ModelConfig(**base)


def tiny_run(model=None, loss=None, **train) -> RunConfig:
    base = dict(
        synthetic_classes=3, synthetic_count=24, synthetic_image_size=16, epochs=2,
        warmup_epochs=1, batch_size=8, base_lr=8e-3, mask_ratio=0.5, checkpoint_every=1, log_every=1,
    )
    base.update(train)
    return RunConfig(
        name="tiny",
        model=model or tiny_model(),
        loss=loss or LossConfig(),
        train=TrainConfig(**base),
        eval=EvalConfig(topk=2, probe_epochs=5),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def model_cfg() -> ModelConfig:
    return tiny_model()


@pytest.fixture
def run_cfg() -> RunConfig:
    return tiny_run()


@pytest.fixture
def tiny_dataset() -> ImageDataset:
    data = textured_shapes(classes=3, count=24, size=16, seed=0)
    return ImageDataset(images=list(data.images), labels=data.labels)

"""Training loop: masking, forward/backward, AdamW, EMA and run bookkeeping."""

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.errors import CheckpointError, DataIOError, DegenerateVectorError, NonFiniteError
from app.models.latent_mim import LatentMIM
from app.models.target import ema_update
from app.ndtensor.tensor import TapeGraph, backward, gradients_by_name
from app.schemas.config import RunConfig
from app.schemas.metrics import StepMetrics
from app.services import runconfig
from app.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.services.dataset import ImageDataset, prepare_batch, resolve_dataset
from app.services.evaluation import pairwise_mean_cosine, pool_features
from app.services.losses import gamma_schedule, loss_terms
from app.services.optim import AdamMoments, adamw_update, global_norm, lr_schedule, momentum_schedule
from app.services.patching import extract_contiguous_grid, extract_noncontiguous_grid, sample_mask
from app.services.presets import resolve_preset

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
FINAL_CHECKPOINT = "final.lmim"


def flat_parameters(model: LatentMIM) -> Dict[str, np.ndarray]:
    """``<network>.<param>`` -> array for every trainable parameter (no copies)."""
    return {
        f"{network}.{name}": arr
        for network, bundle in model.trainable().items()
        for name, arr in bundle.params.items()
    }


@dataclass(frozen=True)
class Schedule:
    """Step counts derived from the epoch-based config and the dataset size."""

    steps_per_epoch: int
    total_steps: int
    warmup_steps: int

    @classmethod
    def from_config(cls, cfg: RunConfig, dataset_size: int) -> "Schedule":
        train = cfg.train
        steps_per_epoch = math.ceil(dataset_size / min(train.batch_size, dataset_size))
        total = train.epochs * steps_per_epoch
        warmup = train.warmup_epochs * steps_per_epoch
        if train.max_steps is not None and train.max_steps < total:
            warmup = int(round(train.max_steps * train.warmup_epochs / train.epochs))
            total = train.max_steps
        return cls(steps_per_epoch=steps_per_epoch, total_steps=total, warmup_steps=warmup)


@dataclass
class TrainState:
    """Everything a run needs to continue bitwise-identically after a restart.

    Attributes:
        step: Completed optimisation steps.
        model: Online, target, projector and decoder parameters.
        moments: AdamW moment estimates keyed like :func:`flat_parameters`.
        rng: Generator behind batch sampling, augmentation, grids and masks.
        history: Metrics of every step run in this process.
    """

    step: int
    model: LatentMIM
    moments: AdamMoments
    rng: np.random.Generator
    history: List[StepMetrics] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig, dtype=np.float32) -> "TrainState":
        rng = np.random.default_rng(cfg.train.seed)
        model = LatentMIM.create(cfg, rng, dtype)
        return cls(step=0, model=model, moments=AdamMoments.zeros_like(flat_parameters(model)), rng=rng)

    def to_checkpoint(self, cfg: RunConfig) -> Checkpoint:
        ckpt = Checkpoint(digest=runconfig.config_digest(cfg.model), step=self.step)
        ckpt.put_text("config", runconfig.serialize(cfg))
        ckpt.put_json("rng", self.rng.bit_generator.state)
        ckpt.tensors["adam.step"] = np.array([self.moments.step], dtype=np.int64)
        for name, arr in flat_parameters(self.model).items():
            ckpt.tensors[name] = arr
        if not self.model.target.aliased:
            for name, arr in self.model.target.params.params.items():
                ckpt.tensors[f"target.{name}"] = arr
        for name in self.moments.first:
            ckpt.tensors[f"adam.m.{name}"] = self.moments.first[name]
            ckpt.tensors[f"adam.v.{name}"] = self.moments.second[name]
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: Optional[RunConfig] = None) -> Tuple["TrainState", RunConfig]:
        """Rebuild a state, verifying the config digest against the header.

        Raises:
            CheckpointError: On a digest mismatch or missing/misshapen tensors.
        """
        cfg = cfg or config_of(ckpt)
        verify_digest(ckpt, cfg)
        state = cls.create(cfg, dtype=ckpt.tensors["encoder.patch_embed.weight"].dtype)
        _restore(flat_parameters(state.model), ckpt, "")
        if not state.model.target.aliased:
            _restore(dict(state.model.target.params.params.items()), ckpt, "target.")
        _restore(state.moments.first, ckpt, "adam.m.")
        _restore(state.moments.second, ckpt, "adam.v.")
        state.moments.step = int(ckpt.tensors["adam.step"][0])
        state.rng.bit_generator.state = ckpt.json("rng")
        state.step = ckpt.step
        return state, cfg


def config_of(ckpt: Checkpoint) -> RunConfig:
    """The resolved run config embedded in a checkpoint."""
    return runconfig.parse(ckpt.text("config"))


def verify_digest(ckpt: Checkpoint, cfg: RunConfig) -> None:
    if ckpt.digest != runconfig.config_digest(cfg.model):
        raise CheckpointError("checkpoint config digest does not match the model configuration")


def _restore(arrays: Mapping[str, np.ndarray], ckpt: Checkpoint, prefix: str) -> None:
    for name, arr in arrays.items():
        stored = ckpt.tensors.get(prefix + name)
        if stored is None:
            raise CheckpointError(f"checkpoint is missing '{prefix + name}'")
        if stored.shape != arr.shape:
            raise CheckpointError(f"'{prefix + name}' has shape {stored.shape}, model expects {arr.shape}")
        np.copyto(arr, stored)


def mask_batch(images: np.ndarray, cfg: RunConfig, rng: np.random.Generator):
    """Per-image grid extraction and mask sampling.

    Returns:
        Tuple of patches (B x L x w), positions (B x L x 2), visible (B x |V|)
        and target (B x |T|) index arrays.
    """
    patches, positions, visible, target = [], [], [], []
    for img in images:
        if cfg.train.grid == "noncontiguous":
            ps = extract_noncontiguous_grid(img, cfg.model.patch_size, cfg.train.gap, rng)
        else:
            ps = extract_contiguous_grid(img, cfg.model.patch_size)
        plan = sample_mask(ps.num_patches, cfg.train.mask_ratio, rng)
        patches.append(ps.patches)
        positions.append(ps.positions)
        visible.append(plan.visible)
        target.append(plan.target)
    return np.stack(patches), np.stack(positions), np.stack(visible), np.stack(target)


def pooled_pair_cos(latents: np.ndarray) -> Optional[float]:
    """Mean pairwise cosine of mean-pooled per-image latents; None below two images."""
    if len(latents) < 2:
        return None
    try:
        return pairwise_mean_cosine(pool_features(latents, "mean"))
    except DegenerateVectorError:
        return None


def train_step(
    state: TrainState,
    images: np.ndarray,
    cfg: RunConfig,
    schedule: Schedule,
) -> Tuple[TrainState, StepMetrics]:
    """One optimisation step on a batch of normalised images.

    A non-finite loss or gradient aborts the step: parameters, moments,
    step counter and generator are left untouched and the returned
    metrics carry ``nan_flag``.
    """
    train = cfg.train
    step = state.step
    lr = lr_schedule(step, schedule.warmup_steps, schedule.total_steps, train.effective_lr)
    gamma = gamma_schedule(step, schedule.total_steps, cfg.loss.gamma_start, cfg.loss.gamma_end)
    rng_state = copy.deepcopy(state.rng.bit_generator.state)

    try:
        patches, positions, visible, target = mask_batch(images, cfg, state.rng)
        tape = TapeGraph()
        weights = state.model.bind(tape)
        prediction = state.model.forward(patches, positions, visible, target, weights)
        terms = loss_terms(prediction.predicted, prediction.targets, prediction.visible, cfg.loss, step, schedule.total_steps)
        grads = gradients_by_name(tape, backward(tape, terms.total))
        grad_norm = global_norm(grads)
        if not math.isfinite(grad_norm):
            raise NonFiniteError("backward")
    except NonFiniteError as e:
        state.rng.bit_generator.state = rng_state
        logger.warning("step %d aborted: %s", step + 1, e.detail)
        nan = float("nan")
        metrics = StepMetrics(
            step=step + 1, lr=lr, loss=nan, recon=nan, reg=nan, grad_norm=nan, gamma_t=gamma, nan_flag=True
        )
        state.history.append(metrics)
        return state, metrics

    adamw_update(
        flat_parameters(state.model),
        grads,
        state.moments,
        lr,
        train.beta1,
        train.beta2,
        train.adam_eps,
        train.weight_decay,
    )
    if state.model.target.strategy == "momentum":
        mu = momentum_schedule(step, schedule.total_steps, train.momentum, train.momentum_end)
        ema_update(state.model.target, state.model.encoder, mu)

    state.step += 1
    metrics = StepMetrics(
        step=state.step,
        lr=lr,
        loss=terms.total.item(),
        recon=terms.recon.item(),
        reg=terms.reg.item() if terms.reg is not None else 0.0,
        grad_norm=grad_norm,
        pooled_pair_cos=pooled_pair_cos(prediction.visible.data),
        gamma_t=gamma,
    )
    state.history.append(metrics)
    return state, metrics


class MetricsLog:
    """Append-only ``metrics.csv`` writer.

    Resuming from a checkpoint at step ``resume_step`` first drops any rows
    written after that step, so a crashed run's tail is not duplicated.
    """

    def __init__(self, path: Path, resume_step: Optional[int] = None):
        self.path = path
        fresh = resume_step is None or not path.exists()
        try:
            if not fresh:
                self._truncate(resume_step)
            self._file = open(path, "w" if fresh else "a", newline="")
        except (OSError, ValueError) as e:
            raise DataIOError(f"cannot open metrics log {path}: {e}") from e
        self._writer = csv.writer(self._file, lineterminator="\n")
        if fresh:
            self._writer.writerow(StepMetrics.COLUMNS)

    def _truncate(self, resume_step: int) -> None:
        with open(self.path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != StepMetrics.COLUMNS:
            raise DataIOError(f"{self.path} is not a metrics log")
        kept = [row for row in rows[1:] if row and int(row[0]) <= resume_step]
        dropped = len(rows) - 1 - len(kept)
        if dropped:
            logger.info("dropping %d metrics rows past step %d from %s", dropped, resume_step, self.path)
        with open(self.path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows([rows[0], *kept])

    def write(self, metrics: StepMetrics) -> None:
        self._writer.writerow(metrics.csv_row())
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class RunResult:
    config: RunConfig
    out_dir: Path
    state: TrainState
    checkpoint: Path
    metrics: Path


class Trainer:
    """Runs one experiment inside its run directory.

    The directory receives ``config.txt`` (the resolved config),
    ``metrics.csv``, periodic ``checkpoint-<step>.lmim`` files and
    ``final.lmim``.

    Args:
        cfg: Fully resolved run configuration.
        out_dir: Run directory, created when missing.
        dataset: Pre-loaded dataset; resolved from ``cfg`` when omitted.
        dtype: Parameter dtype.
    """

    def __init__(self, cfg: RunConfig, out_dir, dataset: Optional[ImageDataset] = None, dtype=np.float32):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.dataset = dataset
        self.dtype = dtype

    def _prepare_dir(self) -> None:
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"cannot create run directory {self.out_dir}: {e}") from e
        runconfig.save(self.cfg, self.out_dir / CONFIG_FILE)

    def run(self, resume: Optional[Path] = None) -> RunResult:
        """Train to the end of the schedule, optionally resuming a checkpoint.

        Raises:
            NonFiniteError: After logging the aborted step, when a step diverges.
        """
        self._prepare_dir()
        dataset = self.dataset or resolve_dataset(self.cfg.train, self.cfg.model.channels)
        schedule = Schedule.from_config(self.cfg, len(dataset))
        if resume is not None:
            state, _ = TrainState.from_checkpoint(load_checkpoint(resume), self.cfg)
            logger.info("resuming %s from step %d", self.cfg.name, state.step)
        else:
            state = TrainState.create(self.cfg, self.dtype)
        batch_size = min(self.cfg.train.batch_size, len(dataset))
        checkpoint_every = self.cfg.train.checkpoint_every * schedule.steps_per_epoch
        logger.info(
            "training %s: %d images, %d steps (%d warmup), batch %d, lr %.3g",
            self.cfg.name, len(dataset), schedule.total_steps, schedule.warmup_steps,
            batch_size, self.cfg.train.effective_lr,
        )

        metrics_path = self.out_dir / METRICS_FILE
        with MetricsLog(metrics_path, resume_step=state.step if resume is not None else None) as log:
            while state.step < schedule.total_steps:
                indices = state.rng.choice(len(dataset), batch_size, replace=False)
                images = prepare_batch(
                    dataset, indices, self.cfg.canvas_size, state.rng,
                    self.cfg.train.augment, self.cfg.train.min_crop_area, self.dtype,
                )
                state, metrics = train_step(state, images, self.cfg, schedule)
                log.write(metrics)
                if metrics.nan_flag:
                    raise NonFiniteError("loss", f"training diverged at step {metrics.step}; see {metrics_path}")
                if state.step % self.cfg.train.log_every == 0:
                    logger.info(
                        "step %d/%d loss=%.5f grad_norm=%.3g pooled_pair_cos=%s",
                        state.step, schedule.total_steps, metrics.loss, metrics.grad_norm,
                        "n/a" if metrics.pooled_pair_cos is None else f"{metrics.pooled_pair_cos:.4f}",
                    )
                if state.step % checkpoint_every == 0 and state.step < schedule.total_steps:
                    self.save(state, self.out_dir / f"checkpoint-{state.step}.lmim")

        final = self.save(state, self.out_dir / FINAL_CHECKPOINT)
        return RunResult(config=self.cfg, out_dir=self.out_dir, state=state, checkpoint=final, metrics=metrics_path)

    def save(self, state: TrainState, path: Path) -> Path:
        return save_checkpoint(state.to_checkpoint(self.cfg), path)


def resolve_config(
    preset_name: Optional[str] = None,
    overrides: Optional[Mapping[str, str]] = None,
    config_path: Optional[Path] = None,
    model: Optional[str] = None,
) -> RunConfig:
    """Preset or config file, then overrides, then the ``LMIM_SEED`` environment override."""
    if config_path is not None:
        cfg = runconfig.load(config_path)
    else:
        cfg = resolve_preset(preset_name or "full", model)
    if overrides:
        cfg = runconfig.apply_overrides(cfg, overrides)
    if settings.SEED is not None:
        cfg = runconfig.apply_overrides(cfg, {"seed": str(settings.SEED)})
    return cfg


def run_experiment(
    preset_name: Optional[str],
    overrides: Optional[Sequence[str]] = None,
    out_dir=None,
    config_path: Optional[Path] = None,
    model: Optional[str] = None,
    resume: Optional[Path] = None,
) -> RunResult:
    """Resolve a preset (or config file), apply ``k=v`` overrides and train.

    Raises:
        ConfigurationError: On an unknown preset or invalid override.
    """
    cfg = resolve_config(preset_name, runconfig.parse_overrides(overrides or []), config_path, model)
    out_dir = Path(out_dir) if out_dir is not None else Path(settings.RUNS_DIR) / cfg.name
    return Trainer(cfg, out_dir).run(resume=resume)

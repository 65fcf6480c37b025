"""``lmim eval``: downstream protocols on a frozen checkpoint."""

import argparse
import logging
from pathlib import Path
from typing import Dict, Optional

from app.errors import DataIOError
from app.schemas.config import RunConfig
from app.schemas.report import EvalReport, ReportValue
from app.services import runconfig
from app.services.checkpoint import load_checkpoint
from app.services.dataset import ImageDataset, load_dataset, resolve_dataset, segmentation_dataset
from app.services.evaluation import (
    extract_features,
    linear_probe,
    nn_accuracy,
    pairwise_mean_cosine,
    save_feature_bank,
    segment_dataset,
    write_segmentations,
)
from app.services.trainer import TrainState, config_of

logger = logging.getLogger(__name__)

PROTOCOLS = ("nn", "probe", "collapse", "segment")
REPORT_FILE = "report.txt"
SEGMENTATION_IMAGES = 32


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "eval",
        help="evaluate a checkpoint",
        description="Run one downstream protocol on the frozen online encoder of a checkpoint.",
    )
    parser.add_argument("checkpoint", type=Path)
    parser.add_argument("dataset", nargs="?", type=Path, help="dataset directory (default: the run's corpus)")
    parser.add_argument("--protocol", choices=PROTOCOLS, default="nn")
    parser.add_argument("--config", type=Path, help="config file replacing the one stored in the checkpoint")
    parser.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", type=Path, help="artifact directory (default: next to the checkpoint)")
    parser.set_defaults(handler=cmd_eval)


def _dataset(path: Optional[Path], protocol: str, cfg: RunConfig) -> ImageDataset:
    if path is not None:
        return load_dataset(path)
    if protocol == "segment":
        return segmentation_dataset(SEGMENTATION_IMAGES, cfg.train.synthetic_image_size, cfg.train.seed)
    return resolve_dataset(cfg.train, cfg.model.channels)


def _write_report(report: EvalReport, out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_FILE).write_text("\n".join(report.lines()) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write report to {out_dir}: {e}") from e


def evaluate(
    checkpoint: Path,
    protocol: str,
    dataset_path: Optional[Path] = None,
    config_path: Optional[Path] = None,
    overrides=(),
    out_dir: Optional[Path] = None,
) -> EvalReport:
    """Run one protocol and write its report and artifacts.

    Raises:
        CheckpointError: If the checkpoint is corrupt or its digest does not match the config.
        ConfigurationError: On invalid overrides or protocol parameters.
    """
    ckpt = load_checkpoint(checkpoint)
    cfg = runconfig.load(config_path) if config_path is not None else config_of(ckpt)
    cfg = runconfig.apply_overrides(cfg, runconfig.parse_overrides(overrides))
    state, cfg = TrainState.from_checkpoint(ckpt, cfg)
    encoder = state.model.encoder
    out_dir = out_dir or checkpoint.parent / f"eval-{protocol}"
    dataset = _dataset(dataset_path, protocol, cfg)
    canvas = cfg.model.grid_size * cfg.model.patch_size
    patch_size = cfg.model.patch_size
    ev = cfg.eval
    logger.info("evaluating %s (step %d) with %s on %d images", checkpoint, ckpt.step, protocol, len(dataset))

    values: Dict[str, ReportValue] = {}
    if protocol in ("nn", "probe"):
        train, test = dataset.split(ev.test_fraction, cfg.train.seed)
        train_bank = extract_features(encoder, train, canvas, patch_size, ev.pooling, ev.topk)
        test_bank = extract_features(encoder, test, canvas, patch_size, ev.pooling, ev.topk)
        save_feature_bank(train_bank, _ensure(out_dir) / "features-train.lmim", ckpt.digest)
        save_feature_bank(test_bank, out_dir / "features-test.lmim", ckpt.digest)
        values.update(pooling=ev.pooling, train_size=train_bank.size, test_size=test_bank.size)
        if protocol == "nn":
            values["nn_accuracy"] = nn_accuracy(train_bank, test_bank)
        else:
            values["probe_accuracy"] = linear_probe(
                train_bank, test_bank, ev.probe_epochs, ev.probe_lr, ev.probe_momentum, ev.probe_batch_size,
                cfg.train.seed,
            )
    elif protocol == "collapse":
        bank = extract_features(encoder, dataset, canvas, patch_size, "mean")
        save_feature_bank(bank, _ensure(out_dir) / "features.lmim", ckpt.digest)
        values["pooled_pair_cos"] = pairwise_mean_cosine(bank)
    else:
        maps, ari = segment_dataset(encoder, dataset, canvas, patch_size, ev.clusters)
        write_segmentations(maps, out_dir / "segments")
        values.update(clusters=ev.clusters, segment_ari=ari)

    report = EvalReport(protocol=protocol, checkpoint=str(checkpoint), step=ckpt.step, images=len(dataset), values=values)
    _write_report(report, out_dir)
    return report


def _ensure(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {path}: {e}") from e
    return path


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(args.checkpoint, args.protocol, args.dataset, args.config, args.override, args.out)
    print("\n".join(report.lines()))
    return 0

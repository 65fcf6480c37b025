"""The full Latent MIM network: online encoder, target encoder, projector, decoder."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from app.models.base import ParameterBundle, Weights, position_table
from app.models.decoder import DecoderParams, decode, decoder_parameter_count, init_decoder
from app.models.encoder import EncoderParams, embed_patches, encode, encoder_parameter_count, init_encoder
from app.models.projector import ProjectorParams, init_projector, projector_parameter_count
from app.models.target import TargetEncoderState, create_target_state, target_encode
from app.ndtensor.tensor import TapeGraph, Tensor
from app.schemas.config import ModelConfig, RunConfig

logger = logging.getLogger(__name__)


@dataclass
class Prediction:
    """One forward pass over a batch of masked images.

    Attributes:
        visible: Online latents Z_V of the visible patches (pre-projector).
        predicted: Decoder predictions Ẑ_T.
        targets: Reconstruction targets Z_T.
    """

    visible: Tensor
    predicted: Tensor
    targets: Tensor


def gather_rows(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Select per-image rows: ``values`` B x L x w, ``index`` B x n -> B x n x w."""
    return np.take_along_axis(values, index[:, :, None], axis=1)


def parameter_counts(cfg: ModelConfig) -> Dict[str, int]:
    """Trainable parameter count per network, computed from the config alone."""
    counts = {
        "encoder": encoder_parameter_count(cfg),
        "decoder": decoder_parameter_count(cfg),
    }
    if cfg.projector:
        counts["projector"] = projector_parameter_count(cfg)
    return counts


@dataclass
class LatentMIM:
    """Parameter bundles of one model plus its target-encoder state."""

    cfg: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams
    target: TargetEncoderState
    projector: Optional[ProjectorParams] = None

    @classmethod
    def create(cls, run: RunConfig, rng: np.random.Generator, dtype=np.float32) -> "LatentMIM":
        """Initialise every network of ``run`` from one generator."""
        cfg = run.model
        encoder = init_encoder(cfg, rng, dtype)
        decoder = init_decoder(cfg, rng, dtype)
        projector = init_projector(cfg, rng, dtype) if cfg.projector else None
        target = create_target_state(
            run.train.target_strategy,
            encoder,
            cfg,
            rng,
            momentum=run.train.momentum,
            target_depth=run.target_depth,
        )
        model = cls(cfg=cfg, encoder=encoder, decoder=decoder, target=target, projector=projector)
        logger.info(
            "model %s: %s", cfg.name,
            ", ".join(f"{name}={count}" for name, count in parameter_counts(cfg).items()),
        )
        return model

    def trainable(self) -> Dict[str, ParameterBundle]:
        """Bundles updated by the optimiser, keyed by checkpoint prefix."""
        bundles: Dict[str, ParameterBundle] = {"encoder": self.encoder, "decoder": self.decoder}
        if self.projector is not None:
            bundles["projector"] = self.projector
        return bundles

    def bind(self, tape: Optional[TapeGraph] = None) -> Dict[str, Weights]:
        """Bind every trainable bundle, leaves named ``<network>.<param>``."""
        return {name: bundle.bind(tape, prefix=f"{name}.") for name, bundle in self.trainable().items()}

    def forward(
        self,
        patches: np.ndarray,
        positions: np.ndarray,
        visible: np.ndarray,
        target: np.ndarray,
        weights: Optional[Dict[str, Weights]] = None,
    ) -> Prediction:
        """Encode the visible patches, build targets and decode.

        Args:
            patches: B x L x (P*P*C) patch pixels.
            positions: B x L x 2 grid coordinates.
            visible: B x |V| visible indices, one row per image.
            target: B x |T| target indices.
            weights: Output of :meth:`bind`; constants when omitted.

        Returns:
            Prediction: Z_V, Ẑ_T and Z_T for the batch.
        """
        weights = weights if weights is not None else self.bind()
        dtype = self.encoder.dtype
        patches = np.asarray(patches, dtype=dtype)
        positions = np.asarray(positions)
        if positions.ndim == 2:
            positions = np.broadcast_to(positions, (patches.shape[0],) + positions.shape)

        x_v, pos_v = gather_rows(patches, visible), gather_rows(positions, visible)
        x_t, pos_t = gather_rows(patches, target), gather_rows(positions, target)

        z_v = encode(self.encoder, x_v, pos_v, weights["encoder"])
        z_t = self._targets(x_t, pos_t, weights["encoder"])
        predicted = decode(
            self.decoder,
            z_v,
            position_table(pos_v, self.cfg.dim, dtype),
            position_table(pos_t, self.cfg.dim, dtype),
            weights["decoder"],
            self.projector,
            weights.get("projector"),
        )
        return Prediction(visible=z_v, predicted=predicted, targets=z_t)

    def _targets(self, patches: np.ndarray, positions: np.ndarray, online: Weights) -> Tensor:
        if self.target.strategy != "shared":
            return target_encode(self.target, patches, positions)
        # Naive sharing: the online weights on the tape, so gradients flow into targets.
        if self.target.target_depth == 0:
            return embed_patches(self.encoder, patches, online)
        return encode(self.encoder, patches, positions, online, depth=self.target.target_depth)

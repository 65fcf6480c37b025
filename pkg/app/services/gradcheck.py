"""Finite-difference validation of every differentiable op, loss and network.

Each check builds a point ``x`` and a scalar function ``f`` of one tensor;
the analytic gradient of ``f`` at ``x`` (via the tape) is compared with
central differences. Everything runs in float64.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ConfigurationError
from app.models.decoder import decode_cross_attn, decode_self_attn, init_decoder, init_mask_tokens
from app.models.encoder import encode, init_encoder
from app.models.latent_mim import LatentMIM
from app.models.projector import init_projector, project
from app.ndtensor import ops
from app.ndtensor.gradcheck import ScalarFn, finite_diff_grad, max_absolute_error, max_relative_error
from app.ndtensor.tensor import TapeGraph, Tensor, backward
from app.schemas.config import LossConfig, ModelConfig, RunConfig, TrainConfig
from app.schemas.gradcheck import GradcheckResult
from app.services import losses
from app.services.patching import grid_positions, sincos_pos_embed

logger = logging.getLogger(__name__)

ELEMENTWISE_TOLERANCE = 1e-6
DTYPE = np.float64

Check = Callable[[np.random.Generator, LossConfig], Tuple[np.ndarray, ScalarFn]]
CHECKS: Dict[str, Check] = {}
ELEMENTWISE = set()


def check(name: str, elementwise: bool = False):
    def register(fn: Check) -> Check:
        CHECKS[name] = fn
        if elementwise:
            ELEMENTWISE.add(name)
        return fn
    return register


def _head(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output element gets a distinct weight."""
    weights = rng.normal(size=shape)
    return lambda out: ops.sum(ops.mul(out, weights))


def _unary(name: str, sample):
    @check(name, elementwise=True)
    def build(rng, _cfg):
        x = sample(rng)
        head = _head(rng, x.shape)
        return x, lambda t: head(getattr(ops, name)(t))
    return build


_unary("neg", lambda rng: rng.normal(size=(3, 4)))
_unary("square", lambda rng: rng.normal(size=(3, 4)))
_unary("abs", lambda rng: rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4)))
_unary("exp", lambda rng: rng.normal(size=(3, 4)))
_unary("log", lambda rng: rng.uniform(0.5, 2.0, size=(3, 4)))
_unary("gelu", lambda rng: rng.normal(scale=2.0, size=(3, 4)))


@check("add", elementwise=True)
def _add(rng, _cfg):
    x, other = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    head = _head(rng, (3, 4))
    return x, lambda t: head(ops.add(t, other))


@check("add_broadcast", elementwise=True)
def _add_broadcast(rng, _cfg):
    bias, batch = rng.normal(size=4), rng.normal(size=(2, 3, 4))
    head = _head(rng, (2, 3, 4))
    return bias, lambda t: head(ops.add(batch, t))


@check("sub", elementwise=True)
def _sub(rng, _cfg):
    x, other = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    head = _head(rng, (3, 4))
    return x, lambda t: head(ops.sub(other, t))


@check("mul", elementwise=True)
def _mul(rng, _cfg):
    x, other = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    head = _head(rng, (3, 4))
    return x, lambda t: head(ops.mul(t, other))


@check("mean")
def _mean(rng, _cfg):
    x = rng.normal(size=(3, 4))
    head = _head(rng, (4,))
    return x, lambda t: head(ops.mean(t, axis=0))


@check("logsumexp")
def _logsumexp(rng, _cfg):
    x = rng.normal(size=(4, 6))
    head = _head(rng, (4,))
    return x, lambda t: head(ops.logsumexp(t, axis=-1))


@check("matmul")
def _matmul(rng, _cfg):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    head = _head(rng, (5, 3))
    return a, lambda t: head(ops.matmul(t, b))


@check("matmul_batched_rhs")
def _matmul_batched(rng, _cfg):
    a, b = rng.normal(size=(2, 5, 7)), rng.normal(size=(7, 3))
    head = _head(rng, (2, 5, 3))
    return b, lambda t: head(ops.matmul(a, t))


@check("transpose_reshape")
def _transpose_reshape(rng, _cfg):
    x = rng.normal(size=(2, 3, 4))
    head = _head(rng, (4, 6))
    return x, lambda t: head(ops.reshape(ops.transpose(t, (2, 0, 1)), (4, 6)))


@check("narrow_concat")
def _narrow_concat(rng, _cfg):
    x, other = rng.normal(size=(3, 6)), rng.normal(size=(2, 2))
    head = _head(rng, (5, 2))
    return x, lambda t: head(ops.concat([ops.narrow(t, 1, 2, 2), other], axis=0))


@check("softmax")
def _softmax(rng, _cfg):
    x = rng.normal(size=(4, 6))
    head = _head(rng, (4, 6))
    return x, lambda t: head(ops.softmax(t, axis=-1))


@check("layer_norm")
def _layer_norm(rng, _cfg):
    x = rng.normal(size=(4, 6))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    head = _head(rng, (4, 6))
    return x, lambda t: head(ops.layer_norm(t, Tensor(gamma), Tensor(beta), 1e-6))


@check("layer_norm_gain")
def _layer_norm_gain(rng, _cfg):
    x, beta = rng.normal(size=(4, 6)), rng.normal(size=6)
    head = _head(rng, (4, 6))
    return rng.normal(size=6), lambda t: head(ops.layer_norm(Tensor(x), t, Tensor(beta), 1e-6))


@check("l2_normalize")
def _l2_normalize(rng, _cfg):
    x = rng.normal(size=(4, 6))
    head = _head(rng, (4, 6))
    return x, lambda t: head(ops.l2_normalize(t))


@check("cosine_sim")
def _cosine_sim(rng, _cfg):
    a, b = rng.normal(size=8), rng.normal(size=8)
    return a, lambda t: ops.cosine_sim(t, b)


@check("pairwise_cosine")
def _pairwise_cosine(rng, _cfg):
    a, b = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 5, 6))
    head = _head(rng, (2, 4, 5))
    return a, lambda t: head(ops.pairwise_cosine(t, b))


# ---------------------------------------------------------------- losses

def _recon(kind: str):
    @check(f"recon_{kind.lower()}")
    def build(rng, cfg):
        target = rng.normal(size=(2, 5, 4))
        # Huber rows either well inside or well outside the quadratic zone.
        scale = np.where(rng.random(size=(2, 5, 1)) < 0.5, 0.05, 2.0) * cfg.delta
        pred = target + scale * rng.choice([-1.0, 1.0], size=(2, 5, 4)) * rng.uniform(0.5, 1.0, size=(2, 5, 4))
        return pred, lambda t: losses.recon_direct(t, target, kind, cfg.delta)
    return build


for _kind in ("L2", "L1", "Huber"):
    _recon(_kind)


@check("patch_disc")
def _patch_disc(rng, cfg):
    pred, target = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
    return pred, lambda t: losses.patch_disc(t, target, cfg.tau, "negated")


@check("patch_disc_conventional")
def _patch_disc_conventional(rng, cfg):
    pred, target = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
    return target, lambda t: losses.patch_disc(pred, t, cfg.tau, "conventional")


@check("sim_regularizer")
def _sim_regularizer(rng, _cfg):
    visible, pred = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 5, 6))
    return visible, lambda t: losses.sim_regularizer(t, pred, 0.5)


@check("total_loss")
def _total_loss(rng, cfg):
    composite = cfg.model_copy(update={"kind": "PatchDisc", "sim_constraint": True})
    visible, pred, target = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
    return pred, lambda t: losses.total_loss(t, target, visible, composite, step=3, total_steps=10)


# ---------------------------------------------------------------- networks

def toy_model_config(**changes) -> ModelConfig:
    base = dict(
        patch_size=2, grid_size=3, channels=1, dim=16, depth=2, heads=4, mlp_ratio=2,
        decoder_depth=2, projector_hidden=16, init_std=0.3,
    )
    base.update(changes)
    return ModelConfig(**base)


def _split(rng, length: int, n_target: int):
    order = rng.permutation(length)
    return np.sort(order[n_target:]), np.sort(order[:n_target])


@check("encoder")
def _encoder(rng, _cfg):
    cfg = toy_model_config()
    params = init_encoder(cfg, rng, DTYPE)
    patches = rng.normal(size=(cfg.num_patches, cfg.patch_dim))
    positions = grid_positions(cfg.grid_size)
    head = _head(rng, (cfg.num_patches, cfg.dim))
    return patches, lambda t: head(encode(params, t, positions))


@check("encoder_params")
def _encoder_params(rng, _cfg):
    cfg = toy_model_config()
    params = init_encoder(cfg, rng, DTYPE)
    patches = rng.normal(size=(cfg.num_patches, cfg.patch_dim))
    positions = grid_positions(cfg.grid_size)
    head = _head(rng, (cfg.num_patches, cfg.dim))
    name = "blocks.1.attn.qkv.weight"

    def f(t):
        weights = params.bind()
        weights[name] = t
        return head(encode(params, patches, positions, weights))

    return params.params[name].copy(), f


@check("projector")
def _projector(rng, _cfg):
    cfg = toy_model_config()
    params = init_projector(cfg, rng, DTYPE)
    latents = rng.normal(size=(5, cfg.dim))
    head = _head(rng, (5, cfg.dim))
    return latents, lambda t: head(project(params, t))


def _positions(rng, cfg: ModelConfig):
    table = sincos_pos_embed(grid_positions(cfg.grid_size), cfg.dim).data
    visible, target = _split(rng, cfg.num_patches, 5)
    return table[visible], table[target]


@check("mask_tokens")
def _mask_tokens(rng, _cfg):
    cfg = toy_model_config()
    p_v, p_t = _positions(rng, cfg)
    mask_token = rng.normal(size=cfg.dim)
    head = _head(rng, p_t.shape)
    return rng.normal(size=p_v.shape), lambda t: head(init_mask_tokens(mask_token, p_t, p_v, t))


@check("decoder_self_attn")
def _decoder_self(rng, _cfg):
    cfg = toy_model_config(visual_cues=True)
    params = init_decoder(cfg, rng, DTYPE)
    p_v, p_t = _positions(rng, cfg)
    head = _head(rng, p_t.shape)
    return rng.normal(size=p_v.shape), lambda t: head(decode_self_attn(params, t, p_v, p_t))


@check("decoder_cross_attn")
def _decoder_cross(rng, _cfg):
    cfg = toy_model_config(decoder_kind="cross_attention", visual_cues=True, projector=True)
    params = init_decoder(cfg, rng, DTYPE)
    projector = init_projector(cfg, rng, DTYPE)
    p_v, p_t = _positions(rng, cfg)
    head = _head(rng, p_t.shape)
    return rng.normal(size=p_v.shape), lambda t: head(decode_cross_attn(params, t, p_v, p_t, projector=projector))


def _composite(name: str, strategy: str, model_changes: dict, loss_changes: dict):
    @check(name)
    def build(rng, cfg):
        run = RunConfig(
            model=toy_model_config(dim=8, depth=1, heads=2, decoder_depth=1, projector_hidden=8, **model_changes),
            loss=cfg.model_copy(update=loss_changes),
            train=TrainConfig(target_strategy=strategy),
        )
        model = LatentMIM.create(run, rng, DTYPE)
        batch, length = 2, run.model.num_patches
        patches = rng.normal(size=(batch, length, run.model.patch_dim))
        positions = grid_positions(run.model.grid_size)
        splits = [_split(rng, length, 5) for _ in range(batch)]
        visible = np.stack([v for v, _ in splits])
        target = np.stack([t for _, t in splits])

        layout: List[Tuple[str, str, Tuple[int, ...], int]] = []
        chunks, offset = [], 0
        for network, bundle in model.trainable().items():
            for param, arr in bundle.params.items():
                layout.append((network, param, arr.shape, offset))
                chunks.append(arr.ravel())
                offset += arr.size

        def f(t):
            weights: Dict[str, Dict[str, Tensor]] = {network: {} for network in model.trainable()}
            for network, param, shape, start in layout:
                size = int(np.prod(shape))
                weights[network][param] = ops.reshape(ops.narrow(t, 0, start, size), shape)
            prediction = model.forward(patches, positions, visible, target, weights)
            return losses.total_loss(
                prediction.predicted, prediction.targets, prediction.visible, run.loss, step=1, total_steps=4
            )

        return np.concatenate(chunks), f
    return build


_composite(
    "latent_mim_full", "momentum",
    {"decoder_kind": "cross_attention", "visual_cues": True, "projector": True},
    {"kind": "PatchDisc", "sim_constraint": True},
)
_composite("latent_mim_naive", "shared", {}, {"kind": "L2"})


# ---------------------------------------------------------------- runner

def run_check(name: str, rng: np.random.Generator, cfg: LossConfig, tolerance: float, h: float = 1e-4) -> GradcheckResult:
    """Run one named check and compare its analytic and numeric gradients."""
    x, f = CHECKS[name](rng, cfg)
    tape = TapeGraph()
    leaf = tape.leaf(np.asarray(x, dtype=DTYPE), name="x")
    analytic = backward(tape, f(leaf))[leaf.handle].data
    numeric = finite_diff_grad(f, np.asarray(x, dtype=DTYPE), h).data
    limit = min(tolerance, ELEMENTWISE_TOLERANCE) if name in ELEMENTWISE else tolerance
    return GradcheckResult(
        name=name,
        max_rel_err=max_relative_error(analytic, numeric),
        max_abs_err=max_absolute_error(analytic, numeric),
        tolerance=limit,
        size=int(np.size(x)),
    )


def run_suite(
    tolerance: float = 1e-4,
    seed: int = 0,
    loss_cfg: Optional[LossConfig] = None,
    names: Optional[Sequence[str]] = None,
    h: float = 1e-4,
) -> List[GradcheckResult]:
    """Run the named checks (all by default) with one seeded generator each.

    Raises:
        ConfigurationError: If a name is unknown or the tolerance is negative.
    """
    if tolerance < 0:
        raise ConfigurationError(f"tolerance must be >= 0, got {tolerance}")
    names = list(names) if names is not None else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown gradient checks: {', '.join(unknown)}")
    loss_cfg = loss_cfg or LossConfig()
    results = []
    for index, name in enumerate(names):
        result = run_check(name, np.random.default_rng([seed, index]), loss_cfg, tolerance, h)
        logger.debug(result.line())
        results.append(result)
    return results

import numpy as np
import pytest

from conftest import tiny_model, tiny_run
from app.errors import ConfigurationError, ContractError, DimensionError
from app.models.decoder import (
    decode,
    decode_cross_attn,
    decode_self_attn,
    decoder_parameter_count,
    init_decoder,
    init_mask_tokens,
    visual_cue_weights,
)
from app.models.encoder import embed_patches, encode, encoder_parameter_count, init_encoder
from app.models.latent_mim import LatentMIM, parameter_counts
from app.models.projector import init_projector, project, projector_parameter_count
from app.models.target import create_target_state, ema_update, target_encode
from app.ndtensor import TapeGraph
from app.schemas.config import ModelConfig
from app.services.patching import grid_positions, sincos_pos_embed

F64 = np.float64


def random_patches(rng, cfg, batch=None):
    shape = (cfg.num_patches, cfg.patch_dim) if batch is None else (batch, cfg.num_patches, cfg.patch_dim)
    return rng.normal(size=shape)


def test_encoder_shapes_and_parameter_count(model_cfg, rng):
    encoder = init_encoder(model_cfg, rng, F64)
    z = encode(encoder, random_patches(rng, model_cfg), grid_positions(model_cfg.grid_size))
    assert z.shape == (model_cfg.num_patches, model_cfg.dim)
    assert encoder.num_parameters() == encoder_parameter_count(model_cfg)


def test_encoder_batch_matches_single_images(model_cfg, rng):
    encoder = init_encoder(model_cfg, rng, F64)
    patches = random_patches(rng, model_cfg, batch=3)
    positions = grid_positions(model_cfg.grid_size)
    batched = encode(encoder, patches, np.broadcast_to(positions, (3,) + positions.shape)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], encode(encoder, patches[i], positions).data, atol=1e-12)


def test_encoder_is_permutation_equivariant(model_cfg, rng):
    encoder = init_encoder(model_cfg, rng, F64)
    patches, positions = random_patches(rng, model_cfg), grid_positions(model_cfg.grid_size)
    order = rng.permutation(model_cfg.num_patches)
    z = encode(encoder, patches, positions).data
    z_perm = encode(encoder, patches[order], positions[order]).data
    np.testing.assert_allclose(z_perm, z[order], atol=1e-12)


def test_encoder_contract_errors(model_cfg, rng):
    encoder = init_encoder(model_cfg, rng, F64)
    positions = grid_positions(model_cfg.grid_size)
    with pytest.raises(DimensionError):
        encode(encoder, rng.normal(size=(model_cfg.num_patches, 5)), positions)
    with pytest.raises(ConfigurationError):
        encode(encoder, random_patches(rng, model_cfg), positions, depth=model_cfg.depth + 1)


def test_shared_strategies_alias_the_online_encoder(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    for strategy in ("shared", "shared_stopgrad"):
        state = create_target_state(strategy, online, model_cfg, rng)
        assert state.params is online and state.aliased


def test_momentum_and_standalone_own_their_parameters(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    momentum = create_target_state("momentum", online, model_cfg, rng)
    standalone = create_target_state("standalone", online, model_cfg, rng)
    name = "blocks.0.attn.qkv.weight"
    assert momentum.params.params[name] is not online.params[name]
    np.testing.assert_array_equal(momentum.params.params[name], online.params[name])
    assert not np.array_equal(standalone.params.params[name], online.params[name])


def test_target_encode_is_detached(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng)
    z = target_encode(state, random_patches(rng, model_cfg), grid_positions(model_cfg.grid_size))
    assert z.shape == (model_cfg.num_patches, model_cfg.dim)
    assert not z.requires_grad


def test_target_depth_zero_is_the_patch_embedding(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng, target_depth=0)
    patches = random_patches(rng, model_cfg)
    z = target_encode(state, patches, grid_positions(model_cfg.grid_size))
    np.testing.assert_array_equal(z.data, embed_patches(online, patches).data)


def test_target_depth_beyond_encoder(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    with pytest.raises(ConfigurationError):
        create_target_state("momentum", online, model_cfg, rng, target_depth=model_cfg.depth + 1)


def _perturbed(online, rng):
    moved = online.clone()
    for arr in moved.params.arrays.values():
        arr += rng.normal(size=arr.shape)
    return moved


def test_ema_with_momentum_one_freezes_bitwise(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng)
    before = {k: v.copy() for k, v in state.params.params.items()}
    ema_update(state, _perturbed(online, rng), 1.0)
    for name, arr in state.params.params.items():
        assert arr.tobytes() == before[name].tobytes()


def test_ema_with_momentum_zero_copies_bitwise(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng)
    moved = _perturbed(online, rng)
    ema_update(state, moved, 0.0)
    for name, arr in state.params.params.items():
        assert arr.tobytes() == moved.params[name].tobytes()


def test_ema_blends_in_place(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng)
    moved = _perturbed(online, rng)
    name = "patch_embed.weight"
    expected = 0.9 * online.params[name] + 0.1 * moved.params[name]
    ema_update(state, moved, 0.9)
    np.testing.assert_allclose(state.params.params[name], expected)
    assert state.momentum == 0.9


@pytest.mark.parametrize("momentum,steps", [(0.9, 5), (0.5, 3), (0.99, 20)])
def test_ema_converges_geometrically_toward_a_fixed_online(model_cfg, rng, momentum, steps):
    online = init_encoder(model_cfg, rng, F64)
    state = create_target_state("momentum", online, model_cfg, rng)
    for arr in state.params.params.values():
        arr += rng.normal(size=arr.shape)
    start = {name: np.linalg.norm(arr - online.params[name]) for name, arr in state.params.params.items()}
    for _ in range(steps):
        ema_update(state, online, momentum)
    for name, arr in state.params.params.items():
        gap = np.linalg.norm(arr - online.params[name])
        assert gap == pytest.approx(momentum ** steps * start[name], rel=1e-6)


def test_ema_contracts(model_cfg, rng):
    online = init_encoder(model_cfg, rng, F64)
    with pytest.raises(ContractError):
        ema_update(create_target_state("shared_stopgrad", online, model_cfg, rng), online, 0.5)
    state = create_target_state("momentum", online, model_cfg, rng)
    with pytest.raises(ConfigurationError):
        ema_update(state, online, 1.5)
    other = init_encoder(tiny_model(dim=8, heads=2), rng, F64)
    with pytest.raises(DimensionError):
        ema_update(state, other, 0.5)


def test_projector_is_row_wise(model_cfg, rng):
    projector = init_projector(model_cfg, rng, F64)
    latents = rng.normal(size=(5, model_cfg.dim))
    joint = project(projector, latents).data
    np.testing.assert_allclose(joint[3], project(projector, latents[3:4]).data[0], atol=1e-12)
    assert projector.num_parameters() == projector_parameter_count(model_cfg)
    with pytest.raises(DimensionError):
        project(projector, rng.normal(size=(5, model_cfg.dim + 4)))


def test_projector_width_defaults_to_64_times_dim():
    assert ModelConfig().hidden_projector == 4096
    assert tiny_model(projector_hidden=None).hidden_projector == 64 * 16
    assert tiny_model(projector_hidden=24).hidden_projector == 24
    cfg = tiny_model(dim=8, projector_hidden=None)
    assert projector_parameter_count(cfg) == (8 * 512 + 512) + 2 * 512 + (512 * 512 + 512) + 2 * 512 + (512 * 8 + 8)


def _split_positions(cfg, visible, target):
    table = sincos_pos_embed(grid_positions(cfg.grid_size), cfg.dim).data
    return table[visible], table[target]


@pytest.mark.parametrize("kind", ["self_attention", "cross_attention"])
def test_decoders_predict_one_latent_per_target(kind, rng):
    cfg = tiny_model(decoder_kind=kind, decoder_depth=2)
    decoder = init_decoder(cfg, rng, F64)
    p_v, p_t = _split_positions(cfg, np.arange(6), np.arange(6, 16))
    out = decode(decoder, rng.normal(size=(6, cfg.dim)), p_v, p_t)
    assert out.shape == (10, cfg.dim)
    assert decoder.num_parameters() == decoder_parameter_count(cfg)


def test_decoder_kind_mismatch(rng):
    cfg = tiny_model()
    decoder = init_decoder(cfg, rng, F64)
    p_v, p_t = _split_positions(cfg, np.arange(6), np.arange(6, 16))
    with pytest.raises(ContractError):
        decode_cross_attn(decoder, rng.normal(size=(6, cfg.dim)), p_v, p_t)


def test_self_attention_decoder_follows_target_order(rng):
    cfg = tiny_model()
    decoder = init_decoder(cfg, rng, F64)
    target = np.arange(6, 16)
    order = rng.permutation(len(target))
    z = rng.normal(size=(6, cfg.dim))
    p_v, p_t = _split_positions(cfg, np.arange(6), target)
    out = decode_self_attn(decoder, z, p_v, p_t).data
    shuffled = decode_self_attn(decoder, z, p_v, p_t[order]).data
    np.testing.assert_allclose(shuffled, out[order], atol=1e-12)


def test_cross_attention_records_every_block(rng):
    cfg = tiny_model(decoder_kind="cross_attention", decoder_depth=3)
    decoder = init_decoder(cfg, rng, F64)
    p_v, p_t = _split_positions(cfg, np.arange(6), np.arange(6, 16))
    block_outputs = []
    decode_cross_attn(decoder, rng.normal(size=(6, cfg.dim)), p_v, p_t, block_outputs=block_outputs)
    assert len(block_outputs) == 3


@pytest.mark.parametrize("cues", [False, True])
def test_cross_attention_leaves_visible_latents_untouched(rng, cues):
    cfg = tiny_model(decoder_kind="cross_attention", decoder_depth=2, visual_cues=cues)
    decoder = init_decoder(cfg, rng, F64)
    p_v, p_t = _split_positions(cfg, np.arange(6), np.arange(6, 16))
    z = rng.normal(size=(6, cfg.dim))
    before = z.tobytes()
    decode_cross_attn(decoder, z, p_v, p_t)
    assert z.tobytes() == before


def test_visual_cue_weights_are_convex(rng):
    cfg = tiny_model()
    p_v, p_t = _split_positions(cfg, np.arange(0, 16, 3), np.arange(1, 16, 3))
    weights = visual_cue_weights(p_t, p_v).data
    assert weights.min() >= 0.0
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_single_visible_patch_is_recovered_exactly(rng):
    cfg = tiny_model()
    p_v, p_t = _split_positions(cfg, np.array([5]), np.array([0, 1, 2]))
    z = rng.normal(size=(1, cfg.dim))
    weights = visual_cue_weights(p_t, p_v).data
    assert np.array_equal(weights, np.ones((3, 1)))
    np.testing.assert_array_equal(weights @ z, np.repeat(z, 3, axis=0))
    tokens = init_mask_tokens(np.zeros(cfg.dim), p_t, p_v, z).data
    np.testing.assert_allclose(tokens, p_t + z, atol=1e-15)


def test_mask_tokens_need_a_visible_patch(rng):
    cfg = tiny_model()
    p_t = sincos_pos_embed(grid_positions(2), cfg.dim).data
    with pytest.raises(ConfigurationError):
        init_mask_tokens(np.zeros(cfg.dim), p_t, np.zeros((0, cfg.dim)), np.zeros((0, cfg.dim)))
    with pytest.raises(DimensionError):
        init_mask_tokens(np.zeros(cfg.dim), p_t, p_t[:2], np.zeros((2, cfg.dim + 4)))


def test_latent_mim_bundles(rng):
    run = tiny_run(model=tiny_model(projector=True, decoder_kind="cross_attention", visual_cues=True))
    model = LatentMIM.create(run, rng, F64)
    assert set(model.trainable()) == {"encoder", "decoder", "projector"}
    counts = parameter_counts(run.model)
    assert counts["encoder"] == model.encoder.num_parameters()
    assert counts["projector"] == model.projector.num_parameters()


def _forward(model, rng, tape=None):
    cfg = model.cfg
    patches = random_patches(rng, cfg, batch=2)
    visible = np.stack([np.arange(0, 16, 2)] * 2)
    target = np.stack([np.arange(1, 16, 2)] * 2)
    weights = model.bind(tape)
    return model.forward(patches, grid_positions(cfg.grid_size), visible, target, weights)


@pytest.mark.parametrize("strategy, tracked", [
    ("shared", True), ("shared_stopgrad", False), ("momentum", False), ("standalone", False),
])
def test_only_naive_sharing_puts_targets_on_the_tape(strategy, tracked, rng):
    model = LatentMIM.create(tiny_run(target_strategy=strategy), rng, F64)
    prediction = _forward(model, rng, TapeGraph())
    assert prediction.targets.requires_grad is tracked
    assert prediction.predicted.shape == (2, 8, model.cfg.dim)
    assert prediction.visible.requires_grad


def test_shared_stopgrad_targets_equal_online_encoding(rng):
    model = LatentMIM.create(tiny_run(target_strategy="shared_stopgrad"), np.random.default_rng(3), F64)
    cfg = model.cfg
    patches = random_patches(rng, cfg, batch=1)
    target = np.arange(1, 16, 2)[None, :]
    positions = grid_positions(cfg.grid_size)
    prediction = model.forward(patches, positions, np.arange(0, 16, 2)[None, :], target)
    expected = encode(model.encoder, patches[:, target[0]], positions[target[0]][None]).data
    assert prediction.targets.data.tobytes() == expected.tobytes()

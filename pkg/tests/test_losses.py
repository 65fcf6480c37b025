import math

import numpy as np
import pytest

from app.errors import ConfigurationError, DimensionError
from app.ndtensor import TapeGraph, backward
from app.schemas.config import LossConfig
from app.services.losses import (
    gamma_schedule,
    loss_terms,
    mean_pair_cos,
    patch_disc,
    recon_direct,
    sim_regularizer,
    total_loss,
)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def brute_patch_disc(pred, target, tau, sign):
    s = -1.0 if sign == "negated" else 1.0
    n = len(pred)
    total = 0.0
    for k in range(n):
        denom = sum(math.exp(s * cos(pred[k], target[l]) / tau) for l in range(n))
        total += -tau * math.log(math.exp(s * cos(pred[k], target[k]) / tau) / denom)
    return total / n


def brute_mean_pair_cos(rows):
    n = len(rows)
    return sum(cos(rows[i], rows[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))


@pytest.mark.parametrize("kind, delta, expected", [
    ("L2", 1.0, 25.0), ("L1", 1.0, 7.0), ("Huber", 10.0, 12.5), ("Huber", 1.0, 6.5),
])
def test_direct_losses_by_hand(kind, delta, expected):
    loss = recon_direct(np.array([[3.0, 4.0]]), np.zeros((1, 2)), kind, delta)
    assert loss.item() == pytest.approx(expected)


def test_direct_loss_averages_over_patches():
    pred = np.array([[1.0, 0.0], [0.0, 3.0]])
    assert recon_direct(pred, np.zeros((2, 2)), "L2").item() == pytest.approx(5.0)


def test_direct_loss_shape_and_kind_errors():
    with pytest.raises(DimensionError):
        recon_direct(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ConfigurationError):
        recon_direct(np.zeros((2, 3)), np.zeros((2, 3)), "PatchDisc")
    with pytest.raises(ConfigurationError):
        recon_direct(np.zeros((2, 3)), np.zeros((2, 3)), "Huber", delta=0.0)


@pytest.mark.parametrize("delta", [0.5, 1.0, 3.0])
def test_huber_is_continuous_at_the_boundary(delta):
    below = recon_direct(np.array([[delta * math.sqrt(1 - 1e-7)]]), np.zeros((1, 1)), "Huber", delta).item()
    above = recon_direct(np.array([[delta * math.sqrt(1 + 1e-7)]]), np.zeros((1, 1)), "Huber", delta).item()
    assert abs(above - below) < 1e-6 * delta ** 2


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("sign", ["negated", "conventional"])
def test_patch_disc_matches_brute_force(seed, sign):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    pred, target = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
    loss = patch_disc(pred, target, tau=0.2, sign=sign).item()
    assert loss == pytest.approx(brute_patch_disc(pred, target, 0.2, sign), abs=1e-9)


def test_patch_disc_batches_average_images():
    rng = np.random.default_rng(9)
    pred, target = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    expected = np.mean([brute_patch_disc(pred[i], target[i], 0.1, "negated") for i in range(3)])
    assert patch_disc(pred, target).item() == pytest.approx(expected, abs=1e-9)


def test_patch_disc_needs_two_targets():
    with pytest.raises(ConfigurationError):
        patch_disc(np.ones((1, 4)), np.ones((1, 4)))
    with pytest.raises(ConfigurationError):
        patch_disc(np.ones((3, 4)), np.ones((3, 4)), tau=0.0)


def test_conventional_sign_rewards_alignment():
    target = np.eye(4)
    aligned = patch_disc(target, target, sign="conventional").item()
    shuffled = patch_disc(target[[1, 2, 3, 0]], target, sign="conventional").item()
    assert aligned < shuffled


@pytest.mark.parametrize("seed", range(4))
def test_sim_regularizer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    visible, pred = rng.normal(size=(int(rng.integers(2, 9)), 5)), rng.normal(size=(int(rng.integers(2, 9)), 5))
    gamma = 0.4
    expected = (gamma - brute_mean_pair_cos(pred)) ** 2 + (gamma - brute_mean_pair_cos(visible)) ** 2
    assert sim_regularizer(visible, pred, gamma).item() == pytest.approx(expected, abs=1e-9)


def random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@pytest.mark.parametrize("sign", ["negated", "conventional"])
@pytest.mark.parametrize("transform", ["row_scale", "joint_permutation"])
def test_patch_disc_invariances(sign, transform):
    rng = np.random.default_rng(21)
    pred, target = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    if transform == "row_scale":
        moved = pred * rng.uniform(0.1, 10.0, size=(7, 1)), target * rng.uniform(0.1, 10.0, size=(7, 1))
    else:
        order = rng.permutation(7)
        moved = pred[order], target[order]
    expected = patch_disc(pred, target, tau=0.2, sign=sign).item()
    assert patch_disc(*moved, tau=0.2, sign=sign).item() == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("count", [2, 5, 9])
@pytest.mark.parametrize("sign", ["negated", "conventional"])
def test_patch_disc_with_equal_cosines_is_tau_log_count(count, sign):
    rng = np.random.default_rng(count)
    pred = rng.normal(size=(count, 4))
    target = np.tile(rng.normal(size=4), (count, 1))
    assert patch_disc(pred, target, tau=0.3, sign=sign).item() == pytest.approx(0.3 * math.log(count), abs=1e-9)


@pytest.mark.parametrize("transform", ["rotation", "row_scale"])
def test_sim_regularizer_invariances(transform):
    rng = np.random.default_rng(5)
    visible, pred = rng.normal(size=(6, 5)), rng.normal(size=(8, 5))
    if transform == "rotation":
        q = random_rotation(rng, 5)
        moved = visible @ q, pred @ q
    else:
        moved = visible * rng.uniform(0.1, 10.0, size=(6, 1)), pred * rng.uniform(0.1, 10.0, size=(8, 1))
    expected = sim_regularizer(visible, pred, 0.4).item()
    assert sim_regularizer(*moved, 0.4).item() == pytest.approx(expected, abs=1e-9)


def test_mean_pair_cos_of_identical_rows_is_one():
    assert mean_pair_cos(np.ones((4, 3))).item() == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        mean_pair_cos(np.ones((1, 3)))


def test_gamma_schedule_endpoints():
    assert gamma_schedule(0, 100) == pytest.approx(0.75)
    assert gamma_schedule(50, 100) == pytest.approx(0.5)
    assert gamma_schedule(100, 100) == pytest.approx(0.25)


def test_regulariser_off_means_plain_reconstruction():
    rng = np.random.default_rng(5)
    pred, target, visible = rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    terms = loss_terms(pred, target, visible, LossConfig(kind="L1"), step=0, total_steps=10)
    assert terms.reg is None
    assert terms.total.item() == recon_direct(pred, target, "L1").item()


def test_total_loss_adds_weighted_regulariser():
    rng = np.random.default_rng(6)
    pred, target, visible = rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    cfg = LossConfig(kind="PatchDisc", sim_constraint=True, sim_weight=0.1)
    gamma = gamma_schedule(2, 10)
    expected = patch_disc(pred, target).item() + 0.1 * sim_regularizer(visible, pred, gamma).item()
    assert total_loss(pred, target, visible, cfg, step=2, total_steps=10).item() == pytest.approx(expected)


def test_loss_gradient_reaches_predictions():
    rng = np.random.default_rng(7)
    tape = TapeGraph()
    pred = tape.leaf(rng.normal(size=(5, 4)), name="pred")
    loss = total_loss(pred, rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), LossConfig(kind="Huber"), 0, 1)
    grad = backward(tape, loss)[pred.handle].data
    assert grad.shape == (5, 4) and np.any(grad != 0)

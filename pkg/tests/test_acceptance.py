"""Directional end-to-end runs on the lab schedule.

These train the vit-tiny-lab model on the 10-class synthetic corpus and take
minutes each; run them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from app.cli.evaluate import evaluate
from app.errors import NonFiniteError
from app.services.trainer import run_experiment

pytestmark = pytest.mark.slow

CHANCE = 0.1


def train_and_score(tmp_path, preset, *overrides):
    out = tmp_path / preset
    result = run_experiment(preset, list(overrides), out_dir=out)
    nn = evaluate(result.checkpoint, "nn", out_dir=out / "eval-nn").values["nn_accuracy"]
    collapse = evaluate(result.checkpoint, "collapse", out_dir=out / "eval-collapse").values["pooled_pair_cos"]
    return nn, collapse


def test_naive_latent_mim_collapses(tmp_path):
    try:
        nn, collapse = train_and_score(tmp_path, "naive")
    except NonFiniteError:
        return
    assert collapse >= 0.99
    assert abs(nn - CHANCE) <= 0.05


def test_full_recipe_avoids_collapse(tmp_path):
    nn, collapse = train_and_score(tmp_path, "full")
    assert collapse <= 0.90
    assert nn >= CHANCE + 0.15


def test_target_strategies_order(tmp_path):
    scores = {}
    for preset in ("naive", "shared_stopgrad", "momentum"):
        runs = []
        for seed in range(3):
            try:
                nn, _ = train_and_score(tmp_path / f"seed{seed}", preset, f"seed={seed}")
            except NonFiniteError:
                nn = CHANCE
            runs.append(nn)
        scores[preset] = float(np.mean(runs))
    gaps = (scores["momentum"] - scores["shared_stopgrad"], scores["shared_stopgrad"] - scores["naive"])
    if min(abs(g) for g in gaps) < 0.02:
        pytest.skip(f"inconclusive ordering: {scores}")
    assert scores["momentum"] >= scores["shared_stopgrad"] >= scores["naive"]


def test_full_recipe_segments_two_textures(tmp_path):
    result = run_experiment("full", [], out_dir=tmp_path / "full")
    first = evaluate(result.checkpoint, "segment", out_dir=tmp_path / "seg-a")
    second = evaluate(result.checkpoint, "segment", out_dir=tmp_path / "seg-b")
    assert first.values["segment_ari"] >= 0.3
    assert first.values == second.values

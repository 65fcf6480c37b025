"""Named experiment configurations: the challenge ladder and its sweeps.

Each preset is a parent preset plus a handful of flat overrides, so the
ladder is cumulative: ``naive`` -> target strategies -> ``patchdisc`` ->
``mask90`` -> ``gap`` -> ``simreg`` -> decoder variants -> ``full``.
"""

from typing import Dict, List, Optional, Tuple

from app.errors import ConfigurationError
from app.schemas.config import ModelConfig, RunConfig
from app.services.runconfig import apply_overrides

MODELS: Dict[str, ModelConfig] = {
    "vit-tiny-lab": ModelConfig(),
    "vit-b16": ModelConfig(
        name="vit-b16",
        patch_size=16,
        grid_size=14,
        dim=768,
        depth=12,
        heads=12,
        decoder_depth=3,
        projector_hidden=4096,
    ),
}

# Desk-scale schedule shared by every preset.
LAB_DEFAULTS: Dict[str, object] = {
    "epochs": 30,
    "warmup_epochs": 3,
    "batch_size": 32,
    "base_lr": 8e-3,
    "synthetic_classes": 10,
    "synthetic_count": 2000,
}

Preset = Tuple[Optional[str], Dict[str, object]]

PRESETS: Dict[str, Preset] = {
    "naive": (None, {
        "target_strategy": "shared",
        "loss.kind": "L2",
        "mask_ratio": 0.75,
        "grid": "contiguous",
        "gap": 0,
        "model.decoder_kind": "self_attention",
        "model.decoder_depth": 3,
    }),
    "no_weight_sharing": ("naive", {"target_strategy": "standalone"}),
    "shared_stopgrad": ("naive", {"target_strategy": "shared_stopgrad"}),
    "momentum": ("naive", {"target_strategy": "momentum"}),
    "patchdisc": ("momentum", {"loss.kind": "PatchDisc"}),
    "mask90": ("patchdisc", {"mask_ratio": 0.9}),
    "gap": ("mask90", {"grid": "noncontiguous", "gap": 2}),
    "simreg": ("gap", {"loss.sim_constraint": True}),
    "challenge3-optimal": ("simreg", {}),
    "crossattn": ("challenge3-optimal", {"model.decoder_kind": "cross_attention"}),
    "cues": ("crossattn", {"model.visual_cues": True}),
    "projector": ("cues", {"model.projector": True}),
    "full": ("projector", {}),
}

for _ratio in (50, 75, 85, 90, 95):
    PRESETS[f"mask{_ratio}"] = ("patchdisc", {"mask_ratio": _ratio / 100})
for _gap in (0, 1, 2, 4):
    PRESETS[f"gap{_gap}"] = ("mask90", {"grid": "noncontiguous" if _gap else "contiguous", "gap": _gap})
for _depth in range(MODELS["vit-tiny-lab"].depth + 1):
    PRESETS[f"target-depth-{_depth}"] = ("full", {"target_depth": _depth})


def preset_names() -> List[str]:
    return sorted(PRESETS)


def named_model(name: str) -> ModelConfig:
    """Look up a named model shape.

    Raises:
        ConfigurationError: If the name is unknown.
    """
    if name not in MODELS:
        raise ConfigurationError(
            f"unknown model '{name}'; known models: {', '.join(sorted(MODELS))}", key="model.name"
        )
    return MODELS[name].model_copy()


def _chain(name: str) -> List[Dict[str, object]]:
    chain = []
    current: Optional[str] = name
    while current is not None:
        parent, overrides = PRESETS[current]
        chain.append(overrides)
        current = parent
    return list(reversed(chain))


def resolve_preset(name: str, model: Optional[str] = None) -> RunConfig:
    """Fully resolved config of a preset.

    Args:
        name: Preset name, see :func:`preset_names`.
        model: Optional named model shape replacing ``vit-tiny-lab``.

    Raises:
        ConfigurationError: If the preset is unknown; the message lists all presets.
    """
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset '{name}'; available presets: {', '.join(preset_names())}", key="preset"
        )
    cfg = RunConfig(name=name, model=named_model(model or "vit-tiny-lab"))
    flat: Dict[str, object] = dict(LAB_DEFAULTS)
    for overrides in _chain(name):
        flat.update(overrides)
    return apply_overrides(cfg, flat)

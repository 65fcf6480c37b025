"""Flat ``key = value`` form of :class:`~app.schemas.config.RunConfig`.

Train fields are unprefixed (``mask_ratio``); the model, loss and eval
sections use dotted keys (``model.dim``, ``loss.kind``, ``eval.topk``).
``#`` starts a comment. Serialisation writes every field, defaults
included, in declaration order.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from pydantic import BaseModel, ValidationError

from app.errors import ConfigurationError, DataIOError
from app.schemas.config import EvalConfig, LossConfig, ModelConfig, RunConfig, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS: Tuple[Tuple[str, str, type], ...] = (
    ("train", "", TrainConfig),
    ("model", "model.", ModelConfig),
    ("loss", "loss.", LossConfig),
    ("eval", "eval.", EvalConfig),
)
NONE = "none"


def known_keys() -> List[str]:
    """Every accepted flat key, in serialisation order."""
    keys = ["name"]
    for _, prefix, schema in SECTIONS:
        keys.extend(prefix + field for field in schema.model_fields)
    return keys


def _render(value: Any) -> str:
    if value is None:
        return NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg: RunConfig) -> Dict[str, str]:
    """Ordered flat key -> rendered value mapping of a config."""
    flat = {"name": _render(cfg.name)}
    for section, prefix, _ in SECTIONS:
        part: BaseModel = getattr(cfg, section)
        for field, value in part.model_dump().items():
            flat[prefix + field] = _render(value)
    return flat


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in flatten(cfg).items())


def _split_line(line: str, lineno: int) -> Optional[Tuple[str, str]]:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigurationError(f"line {lineno}: expected 'key = value', got '{line}'")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_flat(text: str) -> Dict[str, str]:
    """Parse the text form into an ordered key -> raw value mapping.

    Raises:
        ConfigurationError: On malformed lines, unknown or repeated keys.
    """
    allowed = set(known_keys())
    flat: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        pair = _split_line(line, lineno)
        if pair is None:
            continue
        key, value = pair
        if key not in allowed:
            raise ConfigurationError(f"unknown config key '{key}'", key=key)
        if key in flat:
            raise ConfigurationError(f"config key '{key}' given twice", key=key)
        flat[key] = value
    return flat


def _flat_key(loc: Tuple[Any, ...]) -> str:
    if not loc:
        return "config"
    section = loc[0]
    prefix = next((p for name, p, _ in SECTIONS if name == section), None)
    if prefix is None:
        return str(section)
    if len(loc) == 1:
        return section
    return prefix + str(loc[1])


def build(flat: Mapping[str, Any]) -> RunConfig:
    """Validate a flat mapping into a :class:`RunConfig`.

    Raises:
        ConfigurationError: Naming the first offending flat key.
    """
    nested: Dict[str, Any] = {section: {} for section, _, _ in SECTIONS}
    allowed = set(known_keys())
    for key, value in flat.items():
        if key not in allowed:
            raise ConfigurationError(f"unknown config key '{key}'", key=key)
        if isinstance(value, str) and value.lower() == NONE:
            value = None
        if key == "name":
            nested["name"] = value
        elif "." in key:
            section, field = key.split(".", 1)
            nested[section][field] = value
        else:
            nested["train"][key] = value
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        first = e.errors()[0]
        key = _flat_key(tuple(first["loc"]))
        raise ConfigurationError(f"invalid value for '{key}': {first['msg']}", key=key) from e


def parse(text: str) -> RunConfig:
    return build(parse_flat(text))


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    """Turn ``["k=v", ...]`` into a mapping, rejecting unknown keys."""
    allowed = set(known_keys())
    result: Dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in allowed:
            raise ConfigurationError(f"unknown config key '{key}'", key=key)
        result[key] = value
    return result


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Replace exactly the named flat keys and re-validate."""
    flat: Dict[str, Any] = dict(flatten(cfg))
    for key, value in overrides.items():
        if key not in flat:
            raise ConfigurationError(f"unknown config key '{key}'", key=key)
        flat[key] = value if isinstance(value, str) else _render(value)
    return build(flat)


def load(path) -> RunConfig:
    """Read and validate a config file.

    Raises:
        DataIOError: If the file cannot be read.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    return parse(text)


def save(cfg: RunConfig, path) -> Path:
    path = Path(path)
    try:
        path.write_text(serialize(cfg))
    except OSError as e:
        raise DataIOError(f"cannot write config {path}: {e}") from e
    logger.debug("wrote resolved config to %s", path)
    return path


def config_digest(model: ModelConfig) -> bytes:
    """SHA-256 of the serialised model section, which fixes every tensor shape."""
    text = "".join(f"{field} = {_render(value)}\n" for field, value in model.model_dump().items())
    return hashlib.sha256(text.encode("utf-8")).digest()

"""Run configuration: ``key = value`` documents with dotted module namespaces.

Example::

    preset = desk
    seed = 3
    detector.steps = 600
    fpr3d.dropout_fc = 0.5
    phantom.vessel_count = 2

Values are Python literals (``8, 16, 32`` is a tuple); anything that does not
parse as a literal is kept as a string.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable

from . import detector, fpr
from .phantom import PhantomParams

NAMESPACES = ("detector", "fpr3d", "phantom")
PRESETS = ("full", "desk")
DEFAULT_SEED = 0


class ConfigError(ValueError):
    """Malformed config document or unknown / ill-typed key."""


def parse_value(text: str) -> Any:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_document(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key] = parse_value(value)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """``--set key=value`` style overrides."""
    return parse_document("\n".join(items), "--set")


def _coerce(name: str, default: Any, value: Any) -> Any:
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            seq = value if isinstance(value, (tuple, list)) else (value,)
            proto = default[0] if default else None
            return tuple(_coerce(name, proto, v) if proto is not None else v for v in seq)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} here (expected {type(default).__name__})") from None
    return value


def _apply(obj, prefix: str, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {prefix}.{key}")
        changes[key] = _coerce(f"{prefix}.{key}", getattr(obj, key), value)
    return dataclasses.replace(obj, **changes)


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = DEFAULT_SEED
    threads: int = 1
    detector: detector.DetectorConfig = field(default_factory=detector.desk_preset)
    fpr3d: fpr.Fpr3dConfig = field(default_factory=fpr.desk_preset)
    phantom: PhantomParams = field(default_factory=PhantomParams)

    def to_text(self) -> str:
        """Fully resolved document; parsing it back gives an equal config."""
        lines = [f"preset = {self.preset}", f"seed = {self.seed}"]
        for ns in NAMESPACES:
            obj = getattr(self, ns)
            for f in dataclasses.fields(obj):
                lines.append(f"{ns}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "(" + ", ".join(_format(v) for v in value) + ("," if len(value) == 1 else "") + ")"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value
    return repr(value)


def resolve(values: dict[str, Any], seed: int | None = None, preset: str | None = None) -> RunConfig:
    """Build a RunConfig from a flat key/value document; explicit arguments win over the document.

    The module seeds follow the run seed unless set explicitly.
    """
    values = dict(values)
    preset = preset or str(values.pop("preset", "desk"))
    values.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    doc_seed = values.pop("seed", None)
    seed = seed if seed is not None else doc_seed if doc_seed is not None else DEFAULT_SEED
    seed = _coerce("seed", 0, seed)
    threads = _coerce("threads", 0, values.pop("threads", 1))

    grouped: dict[str, dict[str, Any]] = {ns: {} for ns in NAMESPACES}
    for key, value in values.items():
        ns, dot, name = key.partition(".")
        if not dot or ns not in grouped:
            raise ConfigError(f"unknown key {key}; keys are 'preset', 'seed' or <{'|'.join(NAMESPACES)}>.<field>")
        grouped[ns][name] = value

    make_det = detector.full_preset if preset == "full" else detector.desk_preset
    make_fpr = fpr.full_preset if preset == "full" else fpr.desk_preset
    det_cfg = _apply(make_det(seed=seed), "detector", grouped["detector"])
    fpr_cfg = _apply(make_fpr(seed=seed), "fpr3d", grouped["fpr3d"])
    phantom = _apply(PhantomParams(), "phantom", grouped["phantom"])
    try:
        det_cfg.validate()
        fpr_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(preset, seed, threads, det_cfg, fpr_cfg, phantom)


def load(path: str | None, overrides: Iterable[str] = (), seed: int | None = None, preset: str | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path:
        with open(path) as fh:
            values.update(parse_document(fh.read(), path))
    values.update(parse_overrides(overrides))
    return resolve(values, seed=seed, preset=preset)

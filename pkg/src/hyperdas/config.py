"""Plain-text run configuration (INI sections) and its typed view.

Sections::

    [world]            seed (required), template counts, per-cell example counts,
                       target size and pretraining budget
    [domain.<name>]    n_entities, attributes = "country:4, climate:4", max_entity_tokens
    [train]            any TrainConfig field; the seed defaults to [world] seed

Unknown sections or keys and unparsable values raise ``ConfigError`` naming
the offending field.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from hyperdas.autodiff import ContractError
from hyperdas.pipeline import WorldConfig
from hyperdas.ravel import DomainSpec
from hyperdas.train import TrainConfig


class ConfigError(ContractError):
    """Invalid configuration; the message names the section and field."""


@dataclass
class RunConfig:
    world: WorldConfig
    train: TrainConfig
    text: str = ""
    source: str = "<string>"
    sweep_stride: int = 2
    overrides: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        """Hash of the config text plus any command-line overrides."""
        h = hashlib.sha256(self.text.encode())
        for key in sorted(self.overrides):
            h.update(f"\0{key}={self.overrides[key]}".encode())
        return h.hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        world = dataclasses.replace(self.world, seed=seed)
        train = dataclasses.replace(self.train, seed=seed)
        return RunConfig(world, train, self.text, self.source, self.sweep_stride,
                         {**self.overrides, "seed": seed})


def _convert(section: str, key: str, raw: str, kind):
    args = typing.get_args(kind)
    if type(None) in args:
        if raw.strip().lower() in ("", "none"):
            return None
        kind = next(a for a in args if a is not type(None))
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") \
            from None


def _typed_fields(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _section(cp, name: str, cls, skip=()) -> dict:
    kinds = _typed_fields(cls)
    out = {}
    for key, raw in cp[name].items():
        if key not in kinds or key in skip:
            raise ConfigError(f"[{name}] {key}: unknown field")
        out[key] = _convert(name, key, raw, kinds[key])
    return out


def _parse_attributes(section: str, raw: str) -> dict[str, int]:
    attrs = {}
    for part in raw.split(","):
        if not part.strip():
            continue
        name, sep, size = part.partition(":")
        if not sep:
            raise ConfigError(f"[{section}] attributes: expected name:size, got {part.strip()!r}")
        try:
            attrs[name.strip()] = int(size)
        except ValueError:
            raise ConfigError(f"[{section}] attributes: size of {name.strip()!r} is not an integer") from None
    if len(attrs) < 2:
        raise ConfigError(f"[{section}] attributes: need at least two attributes")
    return attrs


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if "world" not in cp:
        raise ConfigError("[world] section is required")
    if "seed" not in cp["world"]:
        raise ConfigError("[world] seed: required field is missing")
    world = _section(cp, "world", WorldConfig, skip=("domains",))
    domains = []
    sweep_stride = 2
    for name in cp.sections():
        if name.startswith("domain."):
            sec = cp[name]
            unknown = set(sec) - {"n_entities", "attributes", "max_entity_tokens"}
            if unknown:
                raise ConfigError(f"[{name}] {sorted(unknown)[0]}: unknown field")
            if "attributes" not in sec:
                raise ConfigError(f"[{name}] attributes: required field is missing")
            domains.append(DomainSpec(
                name=name.split(".", 1)[1],
                n_entities=_convert(name, "n_entities", sec.get("n_entities", "16"), int),
                attributes=_parse_attributes(name, sec["attributes"]),
                max_entity_tokens=_convert(name, "max_entity_tokens", sec.get("max_entity_tokens", "3"), int)))
        elif name == "sweep":
            unknown = set(cp[name]) - {"stride"}
            if unknown:
                raise ConfigError(f"[sweep] {sorted(unknown)[0]}: unknown field")
            sweep_stride = _convert(name, "stride", cp[name].get("stride", "2"), int)
        elif name not in ("world", "train"):
            raise ConfigError(f"[{name}]: unknown section")
    if domains:
        world["domains"] = domains
    train = _section(cp, "train", TrainConfig) if "train" in cp else {}
    train.setdefault("seed", world["seed"])
    try:
        tcfg = TrainConfig(**train)
        tcfg.model_config()
        return RunConfig(WorldConfig(**world), tcfg, text, source, sweep_stride)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


DEFAULT_CONFIG = """\
[world]
seed = 0
n_train_templates = 24
n_test_templates = 8
train_per_cell = 512
test_per_cell = 128
d_model = 64
n_layers = 6
n_heads = 4
pretrain_steps = 1500
pretrain_lr = 0.003
fact_steps = 1000
exit_layer = 3

[domain.city]
n_entities = 16
attributes = country:4, climate:4
max_entity_tokens = 3

[train]
layer = 3
rank = 8
lr = 0.001
steps = 3000
batch_size = 32
"""

"""Experiment configuration documents (YAML) with strict validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Annotated, Literal, Union

import yaml
from pydantic import ConfigDict, Field, TypeAdapter, ValidationError

from .models import SPEC_TYPES, AdaptiveRnnSpec, GridModelSpec, ResidualStackSpec
from .train import TrainConfig

ModelSection = Annotated[Union[ResidualStackSpec, GridModelSpec, AdaptiveRnnSpec], Field(discriminator="kind")]


@dataclass
class EvalConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")
    modes: list[Literal["relaxed", "discrete", "thresholded", "act"]] = field(
        default_factory=lambda: ["relaxed", "discrete", "thresholded"])
    size: int = 2000


@dataclass
class ExperimentConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")
    model: ModelSection = field(default_factory=ResidualStackSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: str | None = None


_ADAPTER = TypeAdapter(ExperimentConfig)


class ConfigError(ValueError):
    pass


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node at pydantic location ``loc``."""
    node, line = root, (root.start_mark.line + 1 if root is not None else None)
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == key:
                    node, line = v, k.start_mark.line + 1
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    data.pop("notes", None)  # written into resolved configs; informational only
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = list(err["loc"])
            if loc[:1] == ["model"] and len(loc) > 1 and loc[1] in SPEC_TYPES:
                del loc[1]  # discriminated-union tag, not a document key
            if err["type"] == "union_tag_invalid":
                loc.append("kind")
            line = _node_line(root, loc)
            dotted = ".".join(str(p) for p in loc)
            if err["type"] in ("extra_forbidden", "unexpected_keyword_argument"):
                section = ".".join(map(str, loc[:-1]))
                msg = f"unknown key '{loc[-1]}'" + (f" in section '{section}'" if section else "")
            else:
                msg = f"{dotted}: {err['msg']}"
            lines.append(f"{source}:{line}: {msg}" if line else f"{source}: {msg}")
        raise ConfigError("\n".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig, notes: dict | None = None) -> str:
    """Fully resolved config as YAML, every default spelled out."""
    d = dataclasses.asdict(cfg)
    d["train"]["milestones"] = list(d["train"]["milestones"])
    if notes:
        d["notes"] = notes
    return yaml.safe_dump(d, sort_keys=False)

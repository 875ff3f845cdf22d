"""Experiment configuration: nested dataclasses loaded from YAML.

Every hyperparameter has a dotted key (``federation.tau``, ``train.lr_pq``,
...) usable both in config files and in ``--set key=value`` overrides.
Unknown keys and wrongly typed values are rejected with the offending key and,
for files, the line it appears on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .align import AlignmentConfig
from .client import LocalTrainConfig
from .model import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelTypeConfig:
    id: str
    depth: int
    width: int


@dataclass(frozen=True)
class DataConfig:
    input_dim: int = 16
    n_classes: int = 8
    n_clusters: int = 2
    tasks_per_client: int = 4
    train_per_task: int = 200
    test_per_task: int = 100
    n_unseen: int = 2
    public_size: int = 512
    proto_scale: float = 3.0
    noise: float = 1.0
    task_angle: float = 1.2
    task_jitter: float = 0.1
    classes_per_task: int = 0
    staggered: bool = True
    cluster_overlap: float = 0.0
    stream: str = "dynamic"


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 6
    rounds_per_task: int = 5
    local_steps: int = 100
    eval_interval: int = 5
    tau: float = 0.5
    mu: float = 1e-4
    subsample_ratio: float = 0.4
    rank: int = 8
    n_blocks: int = 4
    clusters: tuple[int, ...] = ()
    model_assignment: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    models: tuple[ModelTypeConfig, ...] = (
        ModelTypeConfig("small", 8, 16),
        ModelTypeConfig("large", 12, 32),
    )
    federation: FederationConfig = field(default_factory=FederationConfig)
    train: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        fed, data = self.federation, self.data
        if fed.n_clients < 1:
            raise ConfigError("federation.n_clients: must be >= 1")
        if fed.clusters and len(fed.clusters) != fed.n_clients:
            raise ConfigError(f"federation.clusters: needs {fed.n_clients} entries, got {len(fed.clusters)}")
        if fed.clusters and max(fed.clusters) >= data.n_clusters:
            raise ConfigError(f"federation.clusters: ids must be < data.n_clusters={data.n_clusters}")
        ids = [m.id for m in self.models]
        if not ids:
            raise ConfigError("models: at least one model type is required")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"models: duplicate ids {ids}")
        if fed.model_assignment:
            if len(fed.model_assignment) != fed.n_clients:
                raise ConfigError(f"federation.model_assignment: needs {fed.n_clients} entries")
            unknown = set(fed.model_assignment) - set(ids)
            if unknown:
                raise ConfigError(f"federation.model_assignment: unknown model types {sorted(unknown)}")
        if fed.eval_interval < 1:
            raise ConfigError("federation.eval_interval: must be >= 1")
        if fed.tau <= 0:
            raise ConfigError("federation.tau: must be > 0")
        if data.stream not in ("dynamic", "static"):
            raise ConfigError(f"data.stream: expected 'dynamic' or 'static', got {data.stream!r}")
        for m in self.models:
            if not 1 <= fed.n_blocks <= m.depth:
                raise ConfigError(f"federation.n_blocks: {fed.n_blocks} does not fit model {m.id} of depth {m.depth}")
            if fed.rank > min(m.width, data.input_dim, data.n_classes):
                raise ConfigError(f"federation.rank: {fed.rank} exceeds a layer dimension of model {m.id}")

    @property
    def cluster_of(self) -> list[int]:
        n, c = self.federation.n_clients, self.data.n_clusters
        return list(self.federation.clusters) or [i * c // n for i in range(n)]

    @property
    def type_of(self) -> list[str]:
        ids = [m.id for m in self.models]
        return list(self.federation.model_assignment) or [ids[i % len(ids)] for i in range(self.federation.n_clients)]

    @property
    def total_rounds(self) -> int:
        return self.data.tasks_per_client * self.federation.rounds_per_task

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# -- loading -------------------------------------------------------------------


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(value, tp, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        inner = args[0]
        return tuple(_coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, raw, prefix: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {raw!r}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{prefix + '.' if prefix else ''}{sorted(unknown)[0]}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        key = f"{prefix}.{name}" if prefix else name
        if name in raw:
            kwargs[name] = _coerce(raw[name], hints[name], key)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{key}: required field is missing")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _line_of(text: str, dotted: str) -> int | None:
    """Best-effort line number of a dotted key inside a YAML document."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for part in dotted.split("."):
        part = part.split("[")[0]
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if k.value == part:
                line, node = k.start_mark.line + 1, v
                break
        else:
            break
    return line


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, val = text.split("=", 1)
    return key.strip(), yaml.safe_load(val)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, val = parse_override(item)
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: cannot override inside a non-mapping")
        node[parts[-1]] = val
    return raw


def config_from_dict(raw: dict, overrides: list[str] | None = None) -> ExperimentConfig:
    if overrides:
        raw = apply_overrides(raw, overrides)
    return _build(ExperimentConfig, raw)


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: malformed YAML ({getattr(exc, 'problem', exc)})") from exc
    try:
        return config_from_dict(raw, overrides)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        line = _line_of(text, key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

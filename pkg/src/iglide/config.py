"""Experiment configuration: YAML file -> nested dataclasses, plus a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import GroupSpec, HealthyPolicy, MillColumns, RulLabelCfg, SynthCfg, default_groups, synth_groups
from .forest import ForestConfig
from .models import MODEL_KINDS, ModelConfig
from .rapp import HI_SETS
from .uq import UqConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetCfg:
    """``kind``: cmapss | mill | synthetic. Paths are resolved relative to the
    config file's directory."""

    kind: str = "synthetic"
    subset: str = "SYN"
    train_path: str | None = None
    test_path: str | None = None
    rul_path: str | None = None
    mill_path: str | None = None
    mill_columns: MillColumns = MillColumns()
    mill_test_fraction: float = 0.3
    split_seed: int = 0
    include_op_settings: bool = False
    synth: SynthCfg = SynthCfg()
    synth_test: SynthCfg | None = None
    synth_seed: int = 42


# (model kind, HI set) rows of the comparison table
DEFAULT_METHODS = (
    ("ae", "gonzalez"),
    ("ae", "mono"),
    ("iglide_ae", "groups"),
    ("vae", "gonzalez"),
    ("vae", "mono"),
    ("iglide_vae", "groups"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetCfg = DatasetCfg()
    groups: GroupSpec | None = None
    model: ModelConfig = ModelConfig()
    uq: UqConfig = UqConfig()
    forest: ForestConfig = ForestConfig()
    rul: RulLabelCfg = RulLabelCfg()
    healthy: HealthyPolicy = HealthyPolicy()
    methods: tuple[tuple[str, str], ...] = DEFAULT_METHODS
    seeds: tuple[int, ...] = tuple(range(10))
    out: str = "runs/default"
    jobs: int = 1
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for kind, hi in self.methods:
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown model kind {kind!r}")
            if hi not in HI_SETS:
                raise ConfigError(f"unknown HI set {hi!r}")
            grouped = MODEL_KINDS[kind][0]
            if (hi == "groups") != grouped:
                raise ConfigError(f"HI set {hi!r} does not fit model {kind!r}")

    def group_spec(self) -> GroupSpec:
        if self.groups is not None:
            return self.groups
        if self.dataset.kind == "synthetic":
            return synth_groups(self.dataset.synth)
        return default_groups(self.dataset.kind)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["groups"] = self.group_spec().to_dict()
        return d

    def hash(self) -> str:
        """Digest of every semantic field (output dir and job count excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        return digest(d)

    def stage_hash(self, *sections: str, **extra) -> str:
        d = self.to_dict()
        return digest({**{s: d[s] for s in sections}, **extra})


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _build(cls, raw: dict | None, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if k in names else None
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _tuple_fields(d: dict, *keys):
    for k in keys:
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    return d


def from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    ds = dict(raw.get("dataset") or {})
    if "synth" in ds:
        ds["synth"] = _build(SynthCfg, _tuple_fields(dict(ds["synth"]), "degraded_groups", "nuisance_groups",
                                                     "onset_range", "rate_range"), "dataset.synth")
    if ds.get("synth_test") is not None:
        ds["synth_test"] = _build(SynthCfg, _tuple_fields(dict(ds["synth_test"]), "degraded_groups",
                                                          "nuisance_groups", "onset_range", "rate_range"),
                                  "dataset.synth_test")
    if "mill_columns" in ds:
        ds["mill_columns"] = _build(MillColumns, _tuple_fields(dict(ds["mill_columns"]), "conditions", "sensors"),
                                    "dataset.mill_columns")
    dataset = _build(DatasetCfg, ds, "dataset")

    groups = None
    if raw.get("groups") is not None:
        groups = GroupSpec.from_mapping(raw["groups"])

    model = _build(ModelConfig, _tuple_fields(dict(raw.get("model") or {}), "hidden"), "model")
    kw = dict(
        dataset=dataset,
        groups=groups,
        model=model,
        uq=_build(UqConfig, raw.get("uq"), "uq"),
        forest=_build(ForestConfig, raw.get("forest"), "forest"),
        rul=_build(RulLabelCfg, raw.get("rul"), "rul"),
        healthy=_build(HealthyPolicy, raw.get("healthy"), "healthy"),
        base_dir=str(base_dir),
    )
    if "methods" in raw:
        kw["methods"] = tuple((str(a), str(b)) for a, b in raw["methods"])
    if "seeds" in raw:
        kw["seeds"] = tuple(int(s) for s in raw["seeds"])
    for k in ("out", "jobs"):
        if k in raw:
            kw[k] = raw[k]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return from_dict(raw, base_dir=str(path.parent))


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(cfg, **kw) if kw else cfg

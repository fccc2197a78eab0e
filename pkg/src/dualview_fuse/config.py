"""Pipeline configuration (JSON or YAML on disk)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .core import CHALLENGING_DEFAULT, Vocabulary
from .errors import BadManifest, InvalidValue
from .saliency import SaliencyParams

CONFIG_SCHEMA_VERSION = 1

MERGE_STRATEGIES = ("nms", "weighted_average")


@dataclass(frozen=True)
class CrossviewConfig:
    min_overlap: float = 0.3
    pad: float = 8.0

    def __post_init__(self) -> None:
        if not 0.0 < self.min_overlap <= 1.0:
            raise InvalidValue(f"crossview.min_overlap must be in (0, 1], got {self.min_overlap}")
        if self.pad < 0:
            raise InvalidValue("crossview.pad must be >= 0")


@dataclass(frozen=True)
class MergeConfig:
    strategy: str = "nms"
    iou_thresh: float = 0.5

    def __post_init__(self) -> None:
        strategy = self.strategy.lower().replace("-", "_")
        aliases = {"weightedaverage": "weighted_average", "wbf": "weighted_average"}
        strategy = aliases.get(strategy, strategy)
        if strategy not in MERGE_STRATEGIES:
            raise InvalidValue(f"merge.strategy must be one of {MERGE_STRATEGIES}, got {self.strategy!r}")
        object.__setattr__(self, "strategy", strategy)
        if not 0.0 < self.iou_thresh < 1.0:
            raise InvalidValue(f"merge.iou_thresh must be in (0, 1), got {self.iou_thresh}")


@dataclass(frozen=True)
class FusionConfig:
    conf_threshold: float = 0.6
    aux_categories: tuple[str, ...] = CHALLENGING_DEFAULT
    dedup_iou: float = 0.5
    strict_union: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise InvalidValue(f"fusion.conf_threshold must be in [0, 1], got {self.conf_threshold}")
        if not 0.0 < self.dedup_iou <= 1.0:
            raise InvalidValue(f"fusion.dedup_iou must be in (0, 1], got {self.dedup_iou}")
        object.__setattr__(self, "aux_categories", tuple(self.aux_categories))


@dataclass(frozen=True)
class PipelineConfig:
    saliency: SaliencyParams = field(default_factory=SaliencyParams)
    crossview: CrossviewConfig = field(default_factory=CrossviewConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    # raw backend sections: {"main": {...}, "aux": {...}, "experts": {...}}
    backends: Mapping[str, Any] = field(default_factory=dict)

    def check_vocabulary(self, vocab: Vocabulary) -> None:
        unknown = [a for a in self.fusion.aux_categories if a not in vocab]
        if unknown:
            raise InvalidValue(f"fusion.aux_categories not in vocabulary: {unknown}")

    def with_threshold(self, t: float) -> "PipelineConfig":
        return replace(self, fusion=replace(self.fusion, conf_threshold=t))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["fusion"]["aux_categories"] = list(self.fusion.aux_categories)
        d["backends"] = json.loads(json.dumps(dict(self.backends)))
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        version = d.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise BadManifest(f"unsupported config schema_version {version}")

        def section(klass, key):
            raw = d.get(key) or {}
            known = {f.name for f in fields(klass)}
            extra = set(raw) - known
            if extra:
                raise InvalidValue(f"unknown keys in config section {key!r}: {sorted(extra)}")
            return klass(**raw)

        unknown = set(d) - {"saliency", "crossview", "merge", "fusion", "backends", "schema_version"}
        if unknown:
            raise InvalidValue(f"unknown config sections: {sorted(unknown)}")
        return cls(
            saliency=section(SaliencyParams, "saliency"),
            crossview=section(CrossviewConfig, "crossview"),
            merge=section(MergeConfig, "merge"),
            fusion=section(FusionConfig, "fusion"),
            backends=dict(d.get("backends") or {}),
        )


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise BadManifest(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise BadManifest(f"config {path} must be a mapping")
    return PipelineConfig.from_dict(raw)

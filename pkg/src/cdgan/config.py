"""YAML run configuration: model, training, data source, evaluation, output dir."""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .data import MultiDomainDataset, SyntheticDomainSpec, load_dataset, make_synthetic
from .errors import InvalidConfigError
from .evaluation import JudgeSpec
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, Any] = {
    "output_dir": "runs/default",
    "model": {"base_channels": 64, "disc_depth": 4},
    "train": {"max_iterations": 2000, "log_every": 50, "checkpoint_every": 500},
    "data": {"synthetic": {"n_domains": 4, "images_per_domain": 200, "image_size": 32,
                           "seed": 0}},
    "evaluation": {"judge": {}, "per_domain_count": None, "eval_seed": 0, "eval_every": None},
    "ablation": {"matrix": "loss", "seeds": [0, 1, 2]},
}

SECTIONS = set(DEFAULTS)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_assignment(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` -> (["a", "b", "c"], yaml-parsed value)."""
    if "=" not in text:
        raise InvalidConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise InvalidConfigError(f"--set has an empty key: {text!r}")
    return path, yaml.safe_load(raw) if raw.strip() else None


def apply_assignment(doc: dict, path: list[str], value: Any) -> None:
    node = doc
    for p in path[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfigError(f"cannot set {'.'.join(path)}: {p} is not a mapping")
    node[path[-1]] = value


def _build(cls, values: dict | None, section: str, **extra):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfigError(f"unknown field(s) in {section}: {', '.join(sorted(unknown))}")
    values.update(extra)
    try:
        return cls(**values)
    except InvalidConfigError as exc:
        raise InvalidConfigError(f"{section}: {exc}") from exc
    except TypeError as exc:
        raise InvalidConfigError(f"{section}: {exc}") from exc


@dataclass
class RunConfig:
    raw: dict
    output_dir: Path
    train: TrainConfig
    judge: JudgeSpec
    model_overrides: dict
    data_section: dict

    @classmethod
    def from_dict(cls, doc: dict | None, seed: int | None = None,
                  out: str | None = None, assignments=()) -> "RunConfig":
        doc = _merge(DEFAULTS, doc or {})
        for a in assignments:
            apply_assignment(doc, *parse_assignment(a))
        unknown = set(doc) - SECTIONS
        if unknown:
            raise InvalidConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        if seed is not None:
            doc["train"]["seed"] = seed
            doc["model"]["seed"] = seed
        if out is not None:
            doc["output_dir"] = out
        train_doc = dict(doc["train"])
        weights = _build(LossWeights, train_doc.pop("weights", None), "train.weights")
        train = _build(TrainConfig, train_doc, "train", weights=weights)
        judge = _build(JudgeSpec, doc["evaluation"].get("judge"), "evaluation.judge")
        data = doc["data"]
        if not isinstance(data, dict) or not (data.get("path") or data.get("synthetic") is not None):
            raise InvalidConfigError("data needs either 'path' or 'synthetic'")
        return cls(doc, Path(doc["output_dir"]), train, judge, dict(doc["model"]), data)

    @classmethod
    def load(cls, path: str | Path | None, **kwargs) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
            try:
                doc = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise InvalidConfigError(f"config {path} is not valid YAML: {exc}") from exc
            if not isinstance(doc, dict):
                raise InvalidConfigError(f"config {path} must be a mapping")
        return cls.from_dict(doc, **kwargs)

    @property
    def evaluation(self) -> dict:
        return self.raw["evaluation"]

    @property
    def ablation(self) -> dict:
        return self.raw["ablation"]

    def dataset(self) -> MultiDomainDataset:
        data = self.data_section
        if data.get("path"):
            size = data.get("image_size", self.model_overrides.get("image_size"))
            if size is None:
                raise InvalidConfigError("data.path requires data.image_size or model.image_size")
            return load_dataset(data["path"], int(size), float(data.get("train_fraction", 0.8)))
        spec = _build(SyntheticDomainSpec, data.get("synthetic"), "data.synthetic")
        return make_synthetic(spec)

    def model_config(self, dataset: MultiDomainDataset) -> ModelConfig:
        values = dict(self.model_overrides)
        values.setdefault("n_domains", dataset.n_domains)
        values.setdefault("image_size", dataset.image_size)
        values.setdefault("image_channels", dataset.image_channels)
        if values["n_domains"] != dataset.n_domains:
            raise InvalidConfigError(
                f"model.n_domains={values['n_domains']} but the dataset has {dataset.n_domains}")
        if values.get("n_shared_layers") == 0:
            values.setdefault("share_lowest", False)
            values.setdefault("share_highest", False)
        return _build(ModelConfig, values, "model")


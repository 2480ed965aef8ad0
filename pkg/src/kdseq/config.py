"""Run-configuration files.

A config is a JSON object with the sections ``data``, ``model``, ``sgd``,
``policy``, ``replicates`` and ``registry_dir``. Missing sections fall back to
the desk-scale defaults below.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import Dataset, load_idx, make_blobs, make_spirals
from .distill import DistillPolicy
from .nncore import SgdConfig

SECTIONS = {"data", "model", "sgd", "policy", "replicates", "registry_dir"}

DEFAULT_DATA = {"kind": "spirals", "seed": 1, "test_seed": 2, "classes": 3, "per_class": 200,
                "noise_std": 0.1, "turns": 0.75}
DEFAULT_MODEL = {"hidden": [64, 64], "width_multiplier": 2}
DEFAULT_SGD = {"initial_lr": 0.1, "gamma": 0.975, "batch_size": 128, "epochs": 200, "seed": 0}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: dict(DEFAULT_DATA))
    model: dict = field(default_factory=lambda: dict(DEFAULT_MODEL))
    sgd: dict = field(default_factory=lambda: dict(DEFAULT_SGD))
    policy: dict = field(default_factory=dict)
    replicates: int = 3
    registry_dir: str = "registry"

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.model.get("hidden", DEFAULT_MODEL["hidden"]))

    @property
    def width_multiplier(self) -> int:
        return int(self.model.get("width_multiplier", 2))

    def sgd_config(self, **overrides) -> SgdConfig:
        values = {**DEFAULT_SGD, **self.sgd}
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(SgdConfig)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown sgd fields: {sorted(unknown)}")
        try:
            return SgdConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sgd: {exc}") from exc

    def distill_policy(self) -> DistillPolicy:
        try:
            return DistillPolicy.from_dict(self.policy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"policy: {exc}") from exc

    def datasets(self) -> tuple[Dataset, Dataset]:
        """Build the (train, test) pair described by the ``data`` section."""
        d = {**DEFAULT_DATA, **self.data} if self.data.get("kind", "spirals") == "spirals" else self.data
        kind = d.get("kind", "spirals")
        try:
            if kind == "spirals":
                args = (int(d["classes"]), int(d["per_class"]), float(d["noise_std"]))
                turns = float(d.get("turns", 0.75))
                test_n = int(d.get("test_per_class", d["per_class"]))
                return (make_spirals(int(d["seed"]), *args, turns=turns),
                        make_spirals(int(d["test_seed"]), args[0], test_n, args[2], turns=turns))
            if kind == "blobs":
                classes, per_class = int(d["classes"]), int(d["per_class"])
                spread, dim = float(d.get("spread", 1.0)), int(d.get("dim", 2))
                train = make_blobs(int(d.get("seed", 1)), classes, per_class, spread, dim)
                test = make_blobs(int(d.get("seed", 1)), classes, int(d.get("test_per_class", per_class)),
                                  spread, dim, sample_seed=int(d.get("test_seed", 2)))
                return train, test
            if kind == "idx":
                return (load_idx(d["images"], d["labels"], "train"),
                        load_idx(d["test_images"], d["test_labels"], "test"))
        except KeyError as exc:
            raise ConfigError(f"data section is missing {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from exc
        raise ConfigError(f"unknown data kind {kind!r}")


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig()
    for name in ("data", "model", "sgd", "policy"):
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            setattr(cfg, name, dict(raw[name]))
    if "replicates" in raw:
        cfg.replicates = int(raw["replicates"])
    if "registry_dir" in raw:
        cfg.registry_dir = str(raw["registry_dir"])
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)

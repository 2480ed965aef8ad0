"""Checkpoints, run manifests and teacher lookup.

Checkpoint layout (all little-endian)::

    b"KDCK" | u32 version=1 | u32 n_layers |
    per layer: u32 in | u32 out | in*out f64 weights (row-major) | out f64 biases
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill import DistillPolicy
from .nncore import ModelParams, SgdConfig

MAGIC = b"KDCK"
VERSION = 1
ROLES = ("teacher", "student", "finetune", "baseline")
MANIFEST_SUFFIX = ".manifest.json"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestError(ValueError):
    pass


class DuplicateRunError(FileExistsError):
    pass


class NoTeachersError(LookupError):
    pass


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params.layers))]
    for w, b in params.layers:
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path):
    _atomic_write(Path(path), checkpoint_bytes(params))


def parse_checkpoint(buf: bytes, source="<bytes>") -> ModelParams:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a KDCK checkpoint")
    if len(buf) < 12:
        raise TruncatedCheckpointError(f"{source}: header cut short")
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: version {version}, expected {VERSION}")
    pos, layers = 12, []
    for _ in range(n_layers):
        if pos + 8 > len(buf):
            raise TruncatedCheckpointError(f"{source}: layer header cut short")
        fan_in, fan_out = struct.unpack_from("<II", buf, pos)
        pos += 8
        need = 8 * (fan_in * fan_out + fan_out)
        if pos + need > len(buf):
            raise TruncatedCheckpointError(f"{source}: payload cut short")
        w = np.frombuffer(buf, dtype="<f8", count=fan_in * fan_out, offset=pos)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(buf, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        layers.append((w.reshape(fan_in, fan_out).astype(np.float64), b.astype(np.float64)))
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return ModelParams(tuple(layers))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), path)


@dataclass
class CostSummary:
    relative_cost: float = 1.0
    estimated_wall_seconds: float = 0.0
    teacher_forward_count: int = 0


@dataclass
class RunManifest:
    run_id: str
    role: str
    config: SgdConfig
    policy: DistillPolicy | None = None
    parent_ids: list[str] = field(default_factory=list)
    replicate_seeds: list[int] = field(default_factory=list)
    final_test_accuracy: float = 0.0
    metrics_path: str = ""
    checkpoint_path: str = ""
    cost: CostSummary = field(default_factory=CostSummary)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ManifestError(f"unknown role {self.role!r}")
        if not 0.0 <= self.final_test_accuracy <= 1.0:
            raise ManifestError(f"final_test_accuracy {self.final_test_accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "role": self.role,
            "config": asdict(self.config),
            "policy": self.policy.to_dict() if self.policy is not None else None,
            "parent_ids": list(self.parent_ids),
            "replicate_seeds": list(self.replicate_seeds),
            "final_test_accuracy": self.final_test_accuracy,
            "metrics_path": self.metrics_path,
            "checkpoint_path": self.checkpoint_path,
            "cost": asdict(self.cost),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        policy = d.get("policy")
        return cls(
            run_id=d["run_id"],
            role=d["role"],
            config=SgdConfig(**d["config"]),
            policy=DistillPolicy.from_dict(policy) if policy is not None else None,
            parent_ids=list(d.get("parent_ids", [])),
            replicate_seeds=[int(s) for s in d.get("replicate_seeds", [])],
            final_test_accuracy=float(d["final_test_accuracy"]),
            metrics_path=d.get("metrics_path", ""),
            checkpoint_path=d.get("checkpoint_path", ""),
            cost=CostSummary(**d.get("cost", {})),
        )


def manifest_path(directory, run_id: str) -> Path:
    return Path(directory) / f"{run_id}{MANIFEST_SUFFIX}"


def write_manifest(m: RunManifest, directory) -> Path:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"registry directory {directory} does not exist")
    path = manifest_path(directory, m.run_id)
    if path.exists():
        raise DuplicateRunError(f"run {m.run_id!r} already registered in {directory}")
    _atomic_write(path, (json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return path


def read_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        return RunManifest.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path.name}: {exc}") from exc


def list_runs(directory) -> list[RunManifest]:
    directory = Path(directory)
    runs = [read_manifest(p) for p in directory.glob(f"*{MANIFEST_SUFFIX}")]
    return sorted(runs, key=lambda m: m.run_id)


def get_run(directory, run_id: str) -> RunManifest:
    path = manifest_path(directory, run_id)
    if not path.exists():
        raise KeyError(f"no run {run_id!r} in {directory}")
    return read_manifest(path)


def resolve_path(directory, stored: str) -> Path:
    p = Path(stored)
    return p if p.is_absolute() else Path(directory) / p


def _teachers(directory, candidate_ids) -> list[RunManifest]:
    runs = [m for m in list_runs(directory) if m.role == "teacher"]
    if candidate_ids is not None:
        wanted = set(candidate_ids)
        runs = [m for m in runs if m.run_id in wanted]
    if not runs:
        raise NoTeachersError(f"no teacher runs in {directory}")
    return runs


def best_teacher(directory, candidate_ids=None) -> RunManifest:
    """Highest final accuracy; ties go to the smallest run_id."""
    return min(_teachers(directory, candidate_ids), key=lambda m: (-m.final_test_accuracy, m.run_id))


def worst_teacher(directory, candidate_ids=None) -> RunManifest:
    return min(_teachers(directory, candidate_ids), key=lambda m: (m.final_test_accuracy, m.run_id))

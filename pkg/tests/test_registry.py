import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdseq import registry
from kdseq.distill import DistillPolicy, Schedule
from kdseq.nncore import ModelParams, SgdConfig, init_params
from kdseq.registry import (
    BadMagicError,
    CostSummary,
    DuplicateRunError,
    ManifestError,
    NoTeachersError,
    RunManifest,
    TruncatedCheckpointError,
    VersionMismatchError,
    best_teacher,
    list_runs,
    load_checkpoint,
    save_checkpoint,
    worst_teacher,
    write_manifest,
)


def _random_params(seed, dims):
    rng = np.random.default_rng(seed)
    return ModelParams(tuple((rng.normal(size=(a, b)) * 10.0 ** rng.integers(-300, 300),
                              rng.normal(size=b)) for a, b in zip(dims[:-1], dims[1:])))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = init_params(3, [2, 16, 8, 3])
        save_checkpoint(p, tmp_path / "a.ckpt")
        assert load_checkpoint(tmp_path / "a.ckpt").equal(p)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 9), min_size=2, max_size=5))
    def test_roundtrip_property(self, seed, dims):
        p = _random_params(seed, dims)
        assert registry.parse_checkpoint(registry.checkpoint_bytes(p)).equal(p)

    def test_layout(self, tmp_path):
        p = ModelParams(((np.array([[1.0, 2.0]]), np.array([0.5, -0.5])),))
        save_checkpoint(p, tmp_path / "x")
        raw = (tmp_path / "x").read_bytes()
        expected = b"KDCK" + struct.pack("<IIII", 1, 1, 1, 2) + struct.pack("<4d", 1.0, 2.0, 0.5, -0.5)
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        save_checkpoint(init_params(0, [2, 3]), tmp_path / "c")
        raw = bytearray((tmp_path / "c").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "c").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(tmp_path / "c")

    def test_version(self, tmp_path):
        raw = bytearray(registry.checkpoint_bytes(init_params(0, [2, 3])))
        raw[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionMismatchError):
            registry.parse_checkpoint(bytes(raw))

    def test_truncated(self, tmp_path):
        raw = registry.checkpoint_bytes(init_params(0, [2, 3, 2]))
        (tmp_path / "t").write_bytes(raw[:-8])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(tmp_path / "t")


def _manifest(run_id, acc=0.5, role="teacher"):
    return RunManifest(run_id, role, SgdConfig(0.1), final_test_accuracy=acc)


class TestManifests:
    def test_roundtrip(self, tmp_path):
        m = RunManifest("S1", "student", SgdConfig(0.1, 0.975, 64, 20, 11),
                        DistillPolicy(Schedule("first_last10"), 1, True, ("B1", "B4")),
                        ["B1", "B4"], [11, 12, 13], 0.718, "S1.metrics.csv", "S1.ckpt",
                        CostSummary(1.3333, 3400.0, 123))
        write_manifest(m, tmp_path)
        (back,) = list_runs(tmp_path)
        assert back == m

    def test_json_field_names(self, tmp_path):
        write_manifest(_manifest("a"), tmp_path)
        doc = json.loads((tmp_path / "a.manifest.json").read_text())
        assert set(doc) == {"run_id", "role", "config", "policy", "parent_ids", "replicate_seeds",
                            "final_test_accuracy", "metrics_path", "checkpoint_path", "cost"}
        assert set(doc["cost"]) == {"relative_cost", "estimated_wall_seconds", "teacher_forward_count"}

    def test_empty(self, tmp_path):
        assert list_runs(tmp_path) == []

    def test_sorted(self, tmp_path):
        write_manifest(_manifest("b"), tmp_path)
        write_manifest(_manifest("a"), tmp_path)
        assert [m.run_id for m in list_runs(tmp_path)] == ["a", "b"]

    def test_duplicate(self, tmp_path):
        write_manifest(_manifest("a"), tmp_path)
        with pytest.raises(DuplicateRunError):
            write_manifest(_manifest("a", 0.9), tmp_path)

    def test_malformed_names_file(self, tmp_path):
        (tmp_path / "bad.manifest.json").write_text("{not json")
        with pytest.raises(ManifestError, match="bad.manifest.json"):
            list_runs(tmp_path)

    def test_no_temp_files_left(self, tmp_path):
        write_manifest(_manifest("a"), tmp_path)
        assert os.listdir(tmp_path) == ["a.manifest.json"]

    def test_validation(self):
        with pytest.raises(ManifestError):
            _manifest("a", 1.5)
        with pytest.raises(ManifestError):
            _manifest("a", role="oracle")


class TestBestTeacher:
    TABLE = {"B0": 0.693, "B1": 0.695, "B2": 0.661, "B3": 0.651, "B4": 0.621}

    def _fill(self, d, accs):
        for rid, acc in accs.items():
            write_manifest(_manifest(rid, acc), d)

    def test_table_fixture(self, tmp_path):
        self._fill(tmp_path, self.TABLE)
        assert best_teacher(tmp_path).run_id == "B1"
        assert worst_teacher(tmp_path).run_id == "B4"

    def test_candidates(self, tmp_path):
        self._fill(tmp_path, self.TABLE)
        assert best_teacher(tmp_path, ["B2", "B3"]).run_id == "B2"

    def test_single(self, tmp_path):
        self._fill(tmp_path, {"only": 0.1})
        assert best_teacher(tmp_path).run_id == "only"

    def test_tie(self, tmp_path):
        self._fill(tmp_path, {"b": 0.7, "a": 0.7})
        assert best_teacher(tmp_path).run_id == "a"

    def test_ignores_students(self, tmp_path):
        self._fill(tmp_path, {"T": 0.6})
        write_manifest(_manifest("S", 0.9, role="student"), tmp_path)
        assert best_teacher(tmp_path).run_id == "T"

    def test_none(self, tmp_path):
        with pytest.raises(NoTeachersError):
            best_teacher(tmp_path)

import json
import sys

import numpy as np
import pytest

from nahid.errors import (
    BackendProcessFailure,
    InvalidConfig,
    InvariantViolation,
    MissingPrecomputedMap,
    ModelNotFound,
    SizeMismatch,
)
from nahid.raster import GrayImage, LabelImage, one_hot
from nahid.segbackend import (
    BackendDescriptor,
    ModelRegistry,
    RegistryEntry,
    frame_hash,
    infer,
    load_registry,
    registry_from_dict,
    registry_to_dict,
    resolve,
    store_pmap,
)

from conftest import random_gray


def oracle_desc(size=16, p=0.0, seed=0):
    return BackendDescriptor(
        kind="synthetic_oracle", input_size=size,
        params={"seed": seed, "noise": {"mode": "iid_flip", "p": p}},
    )


def small_registry():
    return ModelRegistry({
        "left_ovary_focus": RegistryEntry(oracle_desc(), ("bg", "lesion")),
    })


class TestRegistry:
    def test_resolve_registered(self):
        reg = small_registry()
        desc = resolve(reg, "left_ovary_focus")
        assert desc.kind == "synthetic_oracle"

    def test_resolve_absent_situation(self):
        with pytest.raises(ModelNotFound):
            resolve(small_registry(), "spleen_focus")

    def test_bundled_registry_resolves_all_three_situations(self, scenarios_dir):
        reg = load_registry(scenarios_dir / "registry_ovary.json")
        assert reg.situations() == ["left_ovary_focus", "mid_abdomen", "navel_entry"]
        for sit in reg.situations():
            desc = resolve(reg, sit)
            assert desc.input_size == 128
            assert reg.classes_for(sit)[-1] == "endometrioma"

    def test_round_trip(self):
        reg = small_registry()
        again = registry_from_dict(registry_to_dict(reg))
        assert again.situations() == reg.situations()
        assert resolve(again, "left_ovary_focus") == resolve(reg, "left_ovary_focus")

    def test_duplicate_classes_rejected(self):
        with pytest.raises(InvariantViolation):
            RegistryEntry(oracle_desc(), ("a", "a"))

    def test_descriptor_validation(self):
        with pytest.raises(InvalidConfig):
            BackendDescriptor(kind="file_backed", input_size=16, params={})
        with pytest.raises(InvalidConfig):
            BackendDescriptor(kind="external_process", input_size=16, params={})
        with pytest.raises(InvalidConfig):
            BackendDescriptor(kind="quantum", input_size=16, params={})

    def test_without_removes_entry(self):
        reg = small_registry().without("left_ovary_focus")
        assert not reg.has("left_ovary_focus")


class TestSyntheticOracle:
    def test_zero_noise_exact_one_hot(self):
        rng = np.random.default_rng(71)
        frame = random_gray(rng, 16, 16)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(16, 16)), num_classes=3)
        out = infer(oracle_desc(), frame, truth)
        assert np.array_equal(out.data, one_hot(truth).data)

    def test_noisy_inference_repeatable(self):
        rng = np.random.default_rng(72)
        frame = random_gray(rng, 16, 16)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(16, 16)), num_classes=3)
        desc = oracle_desc(p=0.1, seed=5)
        a = infer(desc, frame, truth)
        b = infer(desc, frame, truth)
        assert np.array_equal(a.data, b.data)
        flipped = (np.argmax(a.data, axis=2) != truth.data).mean()
        assert 0.0 < flipped < 0.25

    def test_per_frame_seed_decorrelation(self):
        rng = np.random.default_rng(73)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(16, 16)), num_classes=3)
        desc = oracle_desc(p=0.5, seed=5)
        a = infer(desc, random_gray(rng, 16, 16), truth)
        b = infer(desc, random_gray(rng, 16, 16), truth)
        assert not np.array_equal(a.data, b.data)

    def test_truth_required(self):
        rng = np.random.default_rng(74)
        with pytest.raises(InvariantViolation):
            infer(oracle_desc(), random_gray(rng, 16, 16), None)

    def test_frame_size_checked(self):
        rng = np.random.default_rng(75)
        truth = LabelImage.from_array(rng.integers(0, 2, size=(8, 8)), num_classes=2)
        with pytest.raises(SizeMismatch):
            infer(oracle_desc(size=16), random_gray(rng, 8, 8), truth)


class TestFileBacked:
    def test_missing_map(self, tmp_path):
        rng = np.random.default_rng(76)
        desc = BackendDescriptor(kind="file_backed", input_size=16,
                                 params={"directory": str(tmp_path)})
        with pytest.raises(MissingPrecomputedMap):
            infer(desc, random_gray(rng, 16, 16))

    def test_stored_map_found_by_content_hash(self, tmp_path):
        rng = np.random.default_rng(77)
        frame = random_gray(rng, 16, 16)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(16, 16)), num_classes=3)
        pmap = one_hot(truth)
        store_pmap(tmp_path, frame, pmap)
        desc = BackendDescriptor(kind="file_backed", input_size=16,
                                 params={"directory": str(tmp_path)})
        out = infer(desc, frame)
        assert np.array_equal(out.data, pmap.data)

    def test_truth_forbidden(self, tmp_path):
        rng = np.random.default_rng(78)
        frame = random_gray(rng, 16, 16)
        truth = LabelImage.from_array(rng.integers(0, 2, size=(16, 16)), num_classes=2)
        desc = BackendDescriptor(kind="file_backed", input_size=16,
                                 params={"directory": str(tmp_path)})
        with pytest.raises(InvariantViolation):
            infer(desc, frame, truth)

    def test_hash_depends_on_content(self):
        a = GrayImage.from_array(np.zeros((4, 4), dtype=np.uint8))
        b = GrayImage.from_array(np.ones((4, 4), dtype=np.uint8))
        assert frame_hash(a) != frame_hash(b)
        assert frame_hash(a) == frame_hash(GrayImage.from_array(np.zeros((4, 4), np.uint8)))


ECHO_BACKEND = r"""
import struct, sys
data = sys.stdin.buffer.read()
parts = data.split(maxsplit=4)
w, h = int(parts[1]), int(parts[2])
c = 3
sys.stdout.buffer.write(b"PMAP1\n" + ("%d %d %d\n" % (w, h, c)).encode())
sys.stdout.buffer.write(struct.pack("<f", 1.0 / c) * (w * h * c))
"""


class TestExternalProcess:
    def test_round_trip_through_subprocess(self):
        desc = BackendDescriptor(
            kind="external_process", input_size=12,
            params={"command": [sys.executable, "-c", ECHO_BACKEND]},
        )
        frame = GrayImage.from_array(np.full((12, 12), 9, dtype=np.uint8))
        out = infer(desc, frame)
        assert out.num_classes == 3
        assert np.allclose(out.data, 1.0 / 3)

    def test_nonzero_exit_is_backend_failure(self):
        desc = BackendDescriptor(
            kind="external_process", input_size=8,
            params={"command": [sys.executable, "-c", "import sys; sys.exit(3)"]},
        )
        frame = GrayImage.from_array(np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(BackendProcessFailure):
            infer(desc, frame)

    def test_malformed_output_is_backend_failure(self):
        desc = BackendDescriptor(
            kind="external_process", input_size=8,
            params={"command": [sys.executable, "-c", "print('not a pmap')"]},
        )
        frame = GrayImage.from_array(np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(BackendProcessFailure):
            infer(desc, frame)

    def test_command_template_substitution(self):
        probe = ("import sys; data = sys.stdin.buffer.read(); "
                 "assert sys.argv[1] == '10', sys.argv; "
                 "sys.stdout.buffer.write(b'PMAP1\\n10 10 1\\n' + b'\\x00' * 400)")
        desc = BackendDescriptor(
            kind="external_process", input_size=10,
            params={"command": [sys.executable, "-c", probe, "{input_size}"]},
        )
        frame = GrayImage.from_array(np.zeros((10, 10), dtype=np.uint8))
        out = infer(desc, frame)
        assert out.num_classes == 1


class TestSituationIsolation:
    def test_interleaved_situations_do_not_interact(self):
        rng = np.random.default_rng(80)
        frame = random_gray(rng, 16, 16)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(16, 16)), num_classes=3)
        a = oracle_desc(p=0.2, seed=1)
        b = oracle_desc(p=0.2, seed=2)
        isolated_a = infer(a, frame, truth)
        isolated_b = infer(b, frame, truth)
        # interleaving calls must not change either backend's output
        again_a = infer(a, frame, truth)
        again_b = infer(b, frame, truth)
        assert np.array_equal(isolated_a.data, again_a.data)
        assert np.array_equal(isolated_b.data, again_b.data)
        assert not np.array_equal(isolated_a.data, isolated_b.data)


class TestOutputNormalization:
    def test_multiclass_outputs_sum_to_one(self, tmp_path):
        # store a slightly unnormalized map; infer must renormalize
        rng = np.random.default_rng(79)
        frame = random_gray(rng, 8, 8)
        raw = np.full((8, 8, 4), 0.25, dtype=np.float32)
        raw[0, 0] = [0.3, 0.25, 0.25, 0.2]
        from nahid.raster import ProbMap
        store_pmap(tmp_path, frame, ProbMap.from_array(raw))
        desc = BackendDescriptor(kind="file_backed", input_size=8,
                                 params={"directory": str(tmp_path)})
        out = infer(desc, frame)
        assert np.allclose(out.data.sum(axis=2), 1.0, atol=1e-6)

    def test_registry_json_matches_documented_shape(self):
        doc = registry_to_dict(small_registry())
        assert doc["version"] == 1
        entry = doc["situations"]["left_ovary_focus"]
        assert set(entry) == {"kind", "input_size", "classes", "params"}
        json.dumps(doc)  # serializable

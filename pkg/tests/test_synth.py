"""Synthetic dataset generator: determinism, geometry, separability."""

from __future__ import annotations

import numpy as np
import pytest

from reprloc import evaluate, fit, load_manifest, validate_dataset
from reprloc.synth import SynthSpec, SynthSpecError, generate_synthetic


def _file_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


class TestSynthSpec:
    def test_fixed_box_echoed_exactly(self, tmp_path):
        spec = SynthSpec(
            image_count=2,
            test_count=1,
            image_width=32,
            image_height=32,
            grid_width=4,
            grid_height=4,
            fixed_box=(8, 8, 24, 24),
            seed=1,
        )
        manifest = generate_synthetic(spec, tmp_path)
        for entry in manifest.entries:
            assert entry.gt_boxes is not None
            assert entry.gt_boxes[0].as_tuple() == (8, 8, 24, 24)

    def test_box_without_patch_center_rejected(self, tmp_path):
        # a 1-pixel box between the 8px-wide patch centers of a 4x4 grid
        spec = SynthSpec(
            image_count=1,
            test_count=0,
            image_width=32,
            image_height=32,
            grid_width=4,
            grid_height=4,
            fixed_box=(0, 0, 2, 2),
            seed=0,
        )
        with pytest.raises(SynthSpecError, match="no patch center"):
            generate_synthetic(spec, tmp_path)

    def test_out_of_bounds_fixed_box_rejected(self):
        with pytest.raises(SynthSpecError, match="outside"):
            SynthSpec(fixed_box=(0, 0, 64, 8), image_width=32, image_height=32)

    def test_bad_geometry_rejected(self):
        with pytest.raises(SynthSpecError):
            SynthSpec(grid_width=64, image_width=32)

    def test_from_json_rejects_unknown_fields(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text('{"image_count": 3, "surprise": 1}')
        with pytest.raises(SynthSpecError, match="surprise"):
            SynthSpec.from_json(path)

    def test_from_json_roundtrip(self, tmp_path):
        import json

        spec = SynthSpec(image_count=4, fixed_box=(0, 0, 16, 16), seed=9)
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(spec.to_json_dict()))
        assert SynthSpec.from_json(path) == spec


class TestGeneration:
    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(image_count=4, test_count=2, seed=11)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert _file_bytes(tmp_path / "a") == _file_bytes(tmp_path / "b")

    def test_different_seeds_differ(self, tmp_path):
        generate_synthetic(SynthSpec(image_count=2, test_count=0, seed=1), tmp_path / "a")
        generate_synthetic(SynthSpec(image_count=2, test_count=0, seed=2), tmp_path / "b")
        a = _file_bytes(tmp_path / "a")
        b = _file_bytes(tmp_path / "b")
        assert any(a[name] != b[name] for name in a if name.endswith(".rpsf"))

    def test_output_passes_validation(self, tmp_path):
        manifest = generate_synthetic(SynthSpec(image_count=3, test_count=2, seed=5), tmp_path)
        report = validate_dataset(manifest)
        assert report.ok
        assert report.channel_count == 16

    def test_splits_and_classes(self, tmp_path):
        spec = SynthSpec(image_count=6, test_count=3, num_classes=3, seed=2)
        manifest = generate_synthetic(spec, tmp_path)
        assert len(manifest.split_entries("train")) == 6
        assert len(manifest.split_entries("test")) == 3
        assert {e.class_id for e in manifest.entries} == {0, 1, 2}

    def test_masks_match_boxes(self, tmp_path):
        from reprloc.featstore import read_mask

        manifest = generate_synthetic(SynthSpec(image_count=2, test_count=0, seed=8), tmp_path)
        for entry in manifest.entries:
            mask = read_mask(manifest.mask_file(entry))
            box = entry.gt_boxes[0]
            expected = np.zeros_like(mask)
            expected[box.y0 : box.y1, box.x0 : box.x1] = True
            assert np.array_equal(mask, expected)

    def test_separable_dataset_localizes_perfectly(self, tmp_path):
        spec = SynthSpec(image_count=16, test_count=8, seed=4)
        manifest = generate_synthetic(spec, tmp_path)
        predictors = fit(manifest)
        report = evaluate(manifest, predictors, "gtknown")
        assert report.value == 1.0

    def test_reload_equals_returned_manifest(self, tmp_path):
        manifest = generate_synthetic(SynthSpec(image_count=2, test_count=1, seed=6), tmp_path)
        assert load_manifest(tmp_path / "manifest.json") == manifest

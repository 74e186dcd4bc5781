"""On-disk dataset loading, validation codes, and round-trips."""

import json
import os

import numpy as np
import pytest

from meshsplat import (AvatarDataset, DrivingSignal, FrameRecord,
                       dataset_to_json, load_dataset, load_train_samples,
                       make_uv_texture, save_dataset, save_png, save_rig,
                       texel_anchors)
from meshsplat.bench import canonical_conditioning
from meshsplat.errors import DatasetError
from conftest import make_camera

SIZE = 12


def _write_fixture(root, small_rig, n_frames=3, with_mask=False,
                   provenance=None):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    save_rig(small_rig, os.path.join(root, "rig.obj"))
    texture = make_uv_texture(8, 8, seed=1)
    save_png(os.path.join(root, "texture.png"), texture)
    rng = np.random.default_rng(0)
    records = []
    for i in range(n_frames):
        img = rng.uniform(size=(SIZE, SIZE, 3))
        rel = os.path.join("images", f"frame_{i:03d}.png")
        save_png(os.path.join(root, rel), img)
        mask_rel = None
        if with_mask:
            mask_rel = os.path.join("images", f"mask_{i:03d}.png")
            mask = np.zeros((SIZE, SIZE, 3))
            mask[: SIZE // 2] = 1.0
            save_png(os.path.join(root, mask_rel), mask)
        records.append(FrameRecord(
            image=rel, camera=make_camera(SIZE, distance=0.4),
            driving=DrivingSignal(psi_expr=rng.normal(
                scale=0.2, size=small_rig.n_expressions)),
            mask=mask_rel, provenance=provenance))
    ds = AvatarDataset(root=str(root), frames=records, rig="rig.obj",
                       background=np.array([0.1, 0.2, 0.3]),
                       uv_texture="texture.png")
    save_dataset(ds)
    return ds


def _edit_manifest(root, mutate):
    path = os.path.join(root, "dataset.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    mutate(doc)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


class TestLoading:
    def test_three_frame_fixture_loads(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        ds = load_dataset(str(tmp_path))
        assert len(ds) == 3
        assert ds.uv_texture == "texture.png"
        np.testing.assert_array_equal(ds.background,
                                      np.array([0.1, 0.2, 0.3]))
        img = ds.load_image(0)
        assert img.shape == (SIZE, SIZE, 3)
        assert img.dtype == np.float64
        assert ds.load_mask(0) is None

    def test_round_trip_is_field_identical(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig, with_mask=True,
                       provenance="real")
        ds1 = load_dataset(str(tmp_path))
        save_dataset(ds1)
        ds2 = load_dataset(str(tmp_path))
        assert dataset_to_json(ds1) == dataset_to_json(ds2)
        for a, b in zip(ds1.frames, ds2.frames):
            np.testing.assert_array_equal(a.camera.rotation,
                                          b.camera.rotation)
            np.testing.assert_array_equal(a.driving.concat(),
                                          b.driving.concat())
            assert a.provenance == b.provenance == "real"

    def test_mask_binarized(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig, with_mask=True)
        ds = load_dataset(str(tmp_path))
        mask = ds.load_mask(0)
        assert mask.dtype == bool
        assert np.all(mask[: SIZE // 2])
        assert not np.any(mask[SIZE // 2:])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.MISSING_FILE
        assert err.value.exit_code == 3

    def test_truncated_json_is_parse_error(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        path = os.path.join(tmp_path, "dataset.json")
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[: len(blob) // 2])
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.PARSE_ERROR

    def test_non_orthonormal_camera_rejected(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)

        def spoil(doc):
            m = doc["frames"][0]["camera"]["world_to_cam"]
            m[0] += 0.01  # way past the 1e-4 orthonormality gate
            doc["frames"][0]["camera"]["world_to_cam"] = m

        _edit_manifest(tmp_path, spoil)
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_bad_matrix_last_row_rejected(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)

        def spoil(doc):
            doc["frames"][0]["camera"]["world_to_cam"][12] = 0.5

        _edit_manifest(tmp_path, spoil)
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_missing_image_file(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        os.remove(os.path.join(tmp_path, "images", "frame_001.png"))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.MISSING_FILE

    def test_missing_rig_file(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        os.remove(os.path.join(tmp_path, "rig.obj"))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.MISSING_FILE

    def test_image_dimension_mismatch(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        save_png(os.path.join(tmp_path, "images", "frame_000.png"),
                 np.zeros((SIZE + 2, SIZE, 3)))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.DIMENSION_MISMATCH

    def test_unknown_top_level_key(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        _edit_manifest(tmp_path, lambda doc: doc.update(extra=1))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_unknown_frame_key(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        _edit_manifest(tmp_path,
                       lambda doc: doc["frames"][0].update(wat=True))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_missing_required_frame_key(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        _edit_manifest(tmp_path,
                       lambda doc: doc["frames"][0].pop("driving"))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_inconsistent_expression_counts(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)

        def spoil(doc):
            doc["frames"][1]["driving"]["psi"] = [0.0, 0.0]

        _edit_manifest(tmp_path, spoil)
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR

    def test_bad_background_rejected(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        _edit_manifest(tmp_path,
                       lambda doc: doc.update(background=[0.0, 0.0]))
        with pytest.raises(DatasetError) as err:
            load_dataset(str(tmp_path))
        assert err.value.code == DatasetError.VALIDATION_ERROR


class TestTrainSamples:
    def test_materializes_frames(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig, provenance="generated")
        ds = load_dataset(str(tmp_path))
        texture = make_uv_texture(8, 8, seed=1)
        anchors, inputs, _ = canonical_conditioning(small_rig, 8, texture)
        samples = load_train_samples(ds, small_rig, anchors, inputs)
        assert len(samples) == 3
        for i, sample in enumerate(samples):
            assert sample.tag == "generated"
            np.testing.assert_array_equal(sample.target, ds.load_image(i))
            assert sample.mask is None
            assert sample.inputs is inputs

    def test_default_tag_is_real(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig)
        ds = load_dataset(str(tmp_path))
        texture = make_uv_texture(8, 8, seed=1)
        anchors, inputs, _ = canonical_conditioning(small_rig, 8, texture)
        samples = load_train_samples(ds, small_rig, anchors, inputs,
                                     indices=[2])
        assert len(samples) == 1
        assert samples[0].tag == "real"
        np.testing.assert_array_equal(samples[0].target, ds.load_image(2))

    def test_mask_passed_through(self, tmp_path, small_rig):
        _write_fixture(tmp_path, small_rig, with_mask=True)
        ds = load_dataset(str(tmp_path))
        texture = make_uv_texture(8, 8, seed=1)
        anchors, inputs, _ = canonical_conditioning(small_rig, 8, texture)
        samples = load_train_samples(ds, small_rig, anchors, inputs,
                                     indices=[0])
        assert samples[0].mask is not None
        assert samples[0].mask.dtype == bool

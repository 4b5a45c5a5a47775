import json

import numpy as np
import pytest

from shapeworld_owod.data import (DataError, ProtocolError, ProtocolSpec, SceneSpec,
                                  SceneSpecError, build_task_splits, generate_dataset,
                                  generate_scene, load_dataset)
from shapeworld_owod.data.shapes import ARCHETYPES, render_mask

SMALL_PROTOCOL = ProtocolSpec(train_scenes=6, val_scenes=2, test_scenes=4, master_seed=3)


class TestSceneGeneration:
    def test_same_spec_and_seed_bit_identical(self):
        spec = SceneSpec()
        a = generate_scene(spec, 1234)
        b = generate_scene(spec, 1234)
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations

    def test_single_object_single_class(self):
        spec = SceneSpec(class_ids=(2,), min_objects=1, max_objects=1)
        scene = generate_scene(spec, 5)
        assert len(scene.annotations) == 1
        assert scene.annotations[0].class_id == 2

    def test_boxes_match_pixel_extent_oracle(self):
        # no noise, no overlap, distinct intensities: each object's pixels are
        # exactly the pixels holding its unique value
        spec = SceneSpec(noise_level=0.0, max_overlap_iou=0.0, min_objects=5, max_objects=5)
        scene = generate_scene(spec, 7)
        size = spec.image_size
        values = sorted(set(np.unique(scene.image)) - {0.0})
        assert len(values) >= len(scene.annotations)
        for ann in scene.annotations:
            best = None
            for v in values:
                ys, xs = np.nonzero(scene.image == v)
                extent = (xs.min(), ys.min(), xs.max(), ys.max())
                cx, cy, w, h = ann.box
                box_px = ((cx - w / 2) * size, (cy - h / 2) * size,
                          (cx + w / 2) * size - 1, (cy + h / 2) * size - 1)
                err = max(abs(extent[k] - box_px[k]) for k in range(4))
                best = err if best is None else min(best, err)
            assert best <= 1.0

    def test_box_invariants_hold(self):
        spec = SceneSpec()
        for seed in range(30):
            for ann in generate_scene(spec, seed).annotations:
                cx, cy, w, h = ann.box
                assert w > 0 and h > 0
                assert cx - w / 2 >= -1e-9 and cx + w / 2 <= 1 + 1e-9
                assert cy - h / 2 >= -1e-9 and cy + h / 2 <= 1 + 1e-9

    def test_overlap_cap_respected(self):
        spec = SceneSpec(max_overlap_iou=0.2, min_objects=5, max_objects=5)
        for seed in range(10):
            anns = generate_scene(spec, seed).annotations
            for i in range(len(anns)):
                for j in range(i + 1, len(anns)):
                    bi, bj = anns[i].box, anns[j].box
                    xi = max(0.0, min(bi[0] + bi[2] / 2, bj[0] + bj[2] / 2)
                             - max(bi[0] - bi[2] / 2, bj[0] - bj[2] / 2))
                    yi = max(0.0, min(bi[1] + bi[3] / 2, bj[1] + bj[3] / 2)
                             - max(bi[1] - bi[3] / 2, bj[1] - bj[3] / 2))
                    inter = xi * yi
                    union = bi[2] * bi[3] + bj[2] * bj[3] - inter
                    # pixel-quantized boxes can exceed the continuous cap slightly
                    assert inter / union <= 0.2 + 0.1

    def test_oversized_spec_rejected(self):
        with pytest.raises(SceneSpecError):
            generate_scene(SceneSpec(max_size=70.0), 0)

    def test_required_class_present(self):
        spec = SceneSpec(required_class_ids=(3,), min_objects=1, max_objects=3)
        for seed in range(20):
            classes = {a.class_id for a in generate_scene(spec, seed).annotations}
            assert 3 in classes

    def test_all_archetypes_render_nonempty(self):
        for arch in ARCHETYPES:
            mask = render_mask(arch, 16.0, 16.0, 12.0, 32, 32)
            assert mask.sum() > 10


class TestProtocol:
    def test_two_task_split_definition(self):
        tasks = build_task_splits(ProtocolSpec(class_groups=((0, 1), (2, 3)),
                                               train_scenes=2, val_scenes=1, test_scenes=1))
        assert tasks[0].known_classes == (0, 1)
        assert tasks[0].unknown_classes == (2, 3)
        assert tasks[1].known_classes == (0, 1, 2, 3)
        assert tasks[1].unknown_classes == ()

    def test_default_three_tasks(self):
        tasks = build_task_splits(SMALL_PROTOCOL)
        assert len(tasks) == 3
        assert tasks[2].known_classes == (0, 1, 2, 3, 4, 5)
        assert tasks[2].unknown_classes == ()
        for t in tasks:
            assert set(t.unknown_classes) == {c for g in SMALL_PROTOCOL.class_groups[t.task_id:]
                                              for c in g}

    def test_unknowns_are_union_of_later_groups(self):
        tasks = build_task_splits(SMALL_PROTOCOL)
        assert tasks[0].unknown_classes == (2, 3, 4, 5)
        assert tasks[1].unknown_classes == (4, 5)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ProtocolError):
            build_task_splits(ProtocolSpec(class_groups=((0, 1), (1, 2))))

    def test_empty_group_rejected(self):
        with pytest.raises(ProtocolError):
            build_task_splits(ProtocolSpec(class_groups=((0, 1), ())))

    def test_splits_disjoint(self):
        for task in build_task_splits(SMALL_PROTOCOL):
            ids = [set(task.splits[s]) for s in ("train", "val", "test")]
            assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


class TestDatasetIO:
    @pytest.fixture(scope="class")
    def dataset_dir(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("ds")
        generate_dataset(SMALL_PROTOCOL, root)
        return root

    def test_write_then_load_round_trips(self, dataset_dir):
        ds1 = load_dataset(dataset_dir)
        ds2 = load_dataset(dataset_dir)
        for t in (1, 2, 3):
            for split in ("train", "val", "test"):
                assert ds1.records(t, split) == ds2.records(t, split)
        img = ds1.image("t1-train-00000")
        assert img.shape == (64, 64) and img.dtype == np.float32

    def test_regeneration_is_bit_identical(self, dataset_dir, tmp_path):
        generate_dataset(SMALL_PROTOCOL, tmp_path / "again")
        a = load_dataset(dataset_dir)
        b = load_dataset(tmp_path / "again")
        for t in (1, 2, 3):
            for split in ("train", "val", "test"):
                assert a.records(t, split) == b.records(t, split)
        assert np.array_equal(a.image("t2-test-00001"), b.image("t2-test-00001"))

    def test_train_split_carries_only_introduced_classes(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        for record in ds.records(1, "train"):
            assert all(obj["class"] in (0, 1) for obj in record["objects"])
        for record in ds.records(2, "train"):
            assert all(obj["class"] in (2, 3) for obj in record["objects"])

    def test_test_split_carries_unknown_ids(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        classes = {obj["class"] for r in ds.records(1, "test") for obj in r["objects"]}
        assert classes - {0, 1}, "test split should include future-class objects"

    def test_missing_manifest_error(self, tmp_path):
        with pytest.raises(DataError, match="missing manifest"):
            load_dataset(tmp_path / "nothing_here")

    def test_degenerate_box_rejected_with_record_name(self, dataset_dir, tmp_path):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(dataset_dir, broken)
        jsonl = broken / "task1" / "train.jsonl"
        lines = jsonl.read_text().splitlines()
        record = json.loads(lines[0])
        record["objects"][0]["box"][2] = 0.0
        lines[0] = json.dumps(record)
        jsonl.write_text("\n".join(lines) + "\n")
        manifest = json.loads((broken / "task1" / "manifest.json").read_text())
        import hashlib
        manifest["checksums"]["train.jsonl"] = hashlib.sha256(jsonl.read_bytes()).hexdigest()
        (broken / "task1" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match=record["scene_id"]):
            load_dataset(broken)

    def test_checksum_mismatch_detected(self, dataset_dir, tmp_path):
        import shutil
        broken = tmp_path / "tampered"
        shutil.copytree(dataset_dir, broken)
        jsonl = broken / "task2" / "val.jsonl"
        jsonl.write_text(jsonl.read_text() + "\n")
        with pytest.raises(DataError, match="checksum mismatch"):
            load_dataset(broken)

    def test_missing_image_error(self, dataset_dir, tmp_path):
        import shutil
        broken = tmp_path / "noimg"
        shutil.copytree(dataset_dir, broken)
        (broken / "images" / "t1-train-00000.png").unlink()
        ds = load_dataset(broken)
        with pytest.raises(DataError, match="missing image"):
            ds.image("t1-train-00000")

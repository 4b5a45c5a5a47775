"""Dataset persistence: grayscale PNGs, JSON-lines annotations, task manifests.

Layout under the dataset root:

    dataset.json            protocol echo + task index
    images/<scene_id>.png   8-bit grayscale
    task1/manifest.json     class sets, split files, jsonl checksums
    task1/train.jsonl       one record per scene:
        {"scene_id":..., "image":..., "objects":[{"class":..., "box":[...]}, ...]}

Floats are serialized with Python's shortest round-trip repr, so write->load
is exact. Train/val records are filtered to the classes introduced at that
task; test records carry every object with its true class id.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .generator import Annotation, Scene, generate_scene
from .protocol import (SPLITS, ProtocolSpec, TaskSpec, annotation_classes_for,
                       build_task_splits, scene_seed_for, scene_spec_for)


class DataError(ValueError):
    """Malformed or inconsistent on-disk dataset."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _scene_record(scene: Scene, classes):
    objects = [
        {"class": a.class_id, "box": list(a.box)}
        for a in scene.annotations
        if a.class_id in classes
    ]
    return {
        "scene_id": scene.scene_id,
        "image": f"images/{scene.scene_id}.png",
        "objects": objects,
    }


def write_image(path: Path, image: np.ndarray):
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def generate_dataset(protocol: ProtocolSpec, root) -> "DatasetHandle":
    """Generate every scene of every task and persist the dataset."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    tasks = build_task_splits(protocol)

    for task in tasks:
        task_dir = root / f"task{task.task_id}"
        task_dir.mkdir(exist_ok=True)
        checksums = {}
        for split in SPLITS:
            spec = scene_spec_for(protocol, task, split)
            classes = annotation_classes_for(task, split)
            jsonl = task_dir / f"{split}.jsonl"
            with jsonl.open("w") as fh:
                for index, scene_id in enumerate(task.splits[split]):
                    seed = scene_seed_for(protocol, task.task_id, split, index)
                    scene = generate_scene(spec, seed, scene_id=scene_id)
                    write_image(root / "images" / f"{scene_id}.png", scene.image)
                    fh.write(json.dumps(_scene_record(scene, classes)) + "\n")
            checksums[f"{split}.jsonl"] = _sha256(jsonl)
        manifest = {
            "task_id": task.task_id,
            "known_classes": list(task.known_classes),
            "introduced_classes": list(task.introduced_classes),
            "unknown_classes": list(task.unknown_classes),
            "splits": {s: {"file": f"{s}.jsonl", "num_scenes": len(task.splits[s])} for s in SPLITS},
            "checksums": checksums,
        }
        (task_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    index = {
        "protocol": {
            "class_groups": [list(g) for g in protocol.class_groups],
            "train_scenes": protocol.train_scenes,
            "val_scenes": protocol.val_scenes,
            "test_scenes": protocol.test_scenes,
            "master_seed": protocol.master_seed,
            "image_size": protocol.image_size,
            "min_objects": protocol.min_objects,
            "max_objects": protocol.max_objects,
            "min_size": protocol.min_size,
            "max_size": protocol.max_size,
            "noise_level": protocol.noise_level,
            "max_overlap_iou": protocol.max_overlap_iou,
        },
        "num_tasks": len(tasks),
        "num_classes": protocol.num_classes,
    }
    (root / "dataset.json").write_text(json.dumps(index, indent=2))
    return load_dataset(root)


def _validate_record(record, scene_id_hint=""):
    try:
        scene_id = record["scene_id"]
        image = record["image"]
        objects = record["objects"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed annotation record {scene_id_hint or record!r}: {exc}") from None
    for obj in objects:
        try:
            ann = Annotation(class_id=int(obj["class"]), box=tuple(float(v) for v in obj["box"]))
            if len(ann.box) != 4:
                raise ValueError(f"box must have 4 entries, got {len(ann.box)}")
            ann.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid object in record {scene_id!r}: {exc}") from None
    return scene_id, image, objects


class DatasetHandle:
    """Loaded dataset: task specs, per-split records, lazy cached images."""

    def __init__(self, root: Path, protocol: ProtocolSpec, tasks, records):
        self.root = Path(root)
        self.protocol = protocol
        self.tasks = tasks  # task_id -> TaskSpec
        self._records = records  # (task_id, split) -> list of records
        self._image_cache = {}

    def task(self, task_id: int) -> TaskSpec:
        if task_id not in self.tasks:
            raise DataError(f"dataset has no task {task_id}")
        return self.tasks[task_id]

    def records(self, task_id: int, split: str):
        key = (task_id, split)
        if key not in self._records:
            raise DataError(f"no records for task {task_id} split {split!r}")
        return self._records[key]

    def image(self, scene_id: str) -> np.ndarray:
        if scene_id not in self._image_cache:
            path = self.root / "images" / f"{scene_id}.png"
            if not path.exists():
                raise DataError(f"missing image file for scene {scene_id!r}")
            self._image_cache[scene_id] = load_image(path)
        return self._image_cache[scene_id]

    def annotations(self, record):
        return [Annotation(class_id=int(o["class"]), box=tuple(float(v) for v in o["box"]))
                for o in record["objects"]]


def load_dataset(root) -> DatasetHandle:
    root = Path(root)
    index_path = root / "dataset.json"
    if not index_path.exists():
        raise DataError(f"missing manifest: {index_path}")
    index = json.loads(index_path.read_text())
    p = index["protocol"]
    protocol = ProtocolSpec(
        class_groups=tuple(tuple(g) for g in p["class_groups"]),
        train_scenes=p["train_scenes"],
        val_scenes=p["val_scenes"],
        test_scenes=p["test_scenes"],
        master_seed=p["master_seed"],
        image_size=p["image_size"],
        min_objects=p["min_objects"],
        max_objects=p["max_objects"],
        min_size=p["min_size"],
        max_size=p["max_size"],
        noise_level=p["noise_level"],
        max_overlap_iou=p["max_overlap_iou"],
    )

    tasks = {}
    records = {}
    for task_id in range(1, index["num_tasks"] + 1):
        task_dir = root / f"task{task_id}"
        manifest_path = task_dir / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"missing manifest: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        task = TaskSpec(
            task_id=task_id,
            known_classes=tuple(manifest["known_classes"]),
            introduced_classes=tuple(manifest["introduced_classes"]),
            unknown_classes=tuple(manifest["unknown_classes"]),
            splits={},
        )
        for split in SPLITS:
            info = manifest["splits"][split]
            jsonl = task_dir / info["file"]
            if not jsonl.exists():
                raise DataError(f"missing split file {jsonl}")
            expected = manifest["checksums"].get(info["file"])
            if expected is not None and _sha256(jsonl) != expected:
                raise DataError(f"checksum mismatch for {jsonl}")
            split_records = []
            with jsonl.open() as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    _validate_record(record)
                    split_records.append(record)
            if len(split_records) != info["num_scenes"]:
                raise DataError(
                    f"{jsonl} has {len(split_records)} records, manifest says {info['num_scenes']}")
            task.splits[split] = [r["scene_id"] for r in split_records]
            records[(task_id, split)] = split_records
        task.validate()
        tasks[task_id] = task
    return DatasetHandle(root, protocol, tasks, records)

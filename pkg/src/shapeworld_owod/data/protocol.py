"""Incremental task protocol: which classes are known/unknown per task.

Classes are introduced in disjoint groups, one group per task. At task t the
known set is the union of groups up to t and the unknown set is everything
introduced later. Training annotations at task t carry only the classes
introduced at t (earlier classes appear in images but unlabeled, as in the
standard incremental benchmark); test annotations carry every object with its
true class id and the evaluator maps ids outside the known set to "unknown".
"""

from dataclasses import dataclass, field

import numpy as np

from .generator import SceneSpec

SPLITS = ("train", "val", "test")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    """Full recipe for a regenerable multi-task dataset."""

    class_groups: tuple = ((0, 1), (2, 3), (4, 5))
    train_scenes: int = 600
    val_scenes: int = 100
    test_scenes: int = 200
    master_seed: int = 7
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 5
    min_size: float = 10.0
    max_size: float = 22.0
    noise_level: float = 0.1
    max_overlap_iou: float = 0.3

    @property
    def all_classes(self):
        return tuple(c for group in self.class_groups for c in group)

    @property
    def num_classes(self):
        return len(self.all_classes)

    def validate(self):
        seen = set()
        for group in self.class_groups:
            if not group:
                raise ProtocolError("empty class group")
            if seen & set(group):
                raise ProtocolError(f"class group {group} overlaps an earlier group")
            seen |= set(group)
        if min(self.train_scenes, self.val_scenes, self.test_scenes) <= 0:
            raise ProtocolError("every split needs at least one scene")


@dataclass
class TaskSpec:
    """Known/unknown class sets and scene id lists for one incremental task."""

    task_id: int
    known_classes: tuple
    introduced_classes: tuple
    unknown_classes: tuple
    splits: dict = field(default_factory=dict)  # split name -> list of scene ids

    def validate(self):
        if set(self.introduced_classes) - set(self.known_classes):
            raise ProtocolError("introduced classes must be known")
        if set(self.known_classes) & set(self.unknown_classes):
            raise ProtocolError("known and unknown class sets overlap")
        ids = [set(self.splits.get(s, ())) for s in SPLITS]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if ids[i] & ids[j]:
                    raise ProtocolError(f"task {self.task_id} splits share scene ids")


def scene_id_for(task_id: int, split: str, index: int) -> str:
    return f"t{task_id}-{split}-{index:05d}"


def scene_seed_for(protocol: ProtocolSpec, task_id: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence((protocol.master_seed, task_id, SPLITS.index(split), index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scene_spec_for(protocol: ProtocolSpec, task: "TaskSpec", split: str) -> SceneSpec:
    """Scene family for a (task, split): all classes may appear; train/val
    scenes are guaranteed at least one introduced-class object."""
    required = tuple(task.introduced_classes) if split in ("train", "val") else ()
    return SceneSpec(
        image_size=protocol.image_size,
        class_ids=tuple(sorted(protocol.all_classes)),
        required_class_ids=required,
        min_objects=protocol.min_objects,
        max_objects=protocol.max_objects,
        min_size=protocol.min_size,
        max_size=protocol.max_size,
        noise_level=protocol.noise_level,
        max_overlap_iou=protocol.max_overlap_iou,
    )


def annotation_classes_for(task: "TaskSpec", split: str):
    """Class ids whose annotations are emitted for a (task, split)."""
    if split in ("train", "val"):
        return set(task.introduced_classes)
    return set(task.known_classes) | set(task.unknown_classes)


def build_task_splits(protocol: ProtocolSpec):
    """Expand a protocol into per-task specs with allocated scene ids."""
    protocol.validate()
    counts = {"train": protocol.train_scenes, "val": protocol.val_scenes, "test": protocol.test_scenes}
    tasks = []
    known = []
    for t, group in enumerate(protocol.class_groups, start=1):
        known = known + sorted(group)
        unknown = tuple(sorted(c for g in protocol.class_groups[t:] for c in g))
        task = TaskSpec(
            task_id=t,
            known_classes=tuple(known),
            introduced_classes=tuple(sorted(group)),
            unknown_classes=unknown,
            splits={s: [scene_id_for(t, s, i) for i in range(counts[s])] for s in SPLITS},
        )
        task.validate()
        tasks.append(task)
    return tasks

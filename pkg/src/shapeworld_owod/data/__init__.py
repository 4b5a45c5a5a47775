from .generator import Annotation, PlacementError, Scene, SceneSpec, SceneSpecError, generate_scene
from .io import DataError, DatasetHandle, generate_dataset, load_dataset
from .protocol import (SPLITS, ProtocolError, ProtocolSpec, TaskSpec,
                       annotation_classes_for, build_task_splits, scene_seed_for,
                       scene_spec_for)

__all__ = [
    "Annotation", "Scene", "SceneSpec", "SceneSpecError", "PlacementError", "generate_scene",
    "DataError", "DatasetHandle", "generate_dataset", "load_dataset",
    "SPLITS", "ProtocolError", "ProtocolSpec", "TaskSpec",
    "annotation_classes_for", "build_task_splits", "scene_seed_for", "scene_spec_for",
]

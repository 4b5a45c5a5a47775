"""Deterministic synthetic scene generation.

A scene is a function of (SceneSpec, seed): the same pair always produces a
bit-identical image and annotation list. Images are quantized to 8-bit at
generation time so that the in-memory scene and its PNG round-trip exactly.
"""

from dataclasses import dataclass

import numpy as np

from .shapes import ARCHETYPES, render_mask


class SceneSpecError(ValueError):
    """Scene spec cannot be rendered (e.g. shapes larger than the canvas)."""


class PlacementError(RuntimeError):
    """Object placement failed after the configured number of attempts."""


@dataclass(frozen=True)
class Annotation:
    """One labeled object: class id plus a normalized center-size box."""

    class_id: int
    box: tuple  # (cx, cy, w, h), all in [0, 1]

    def validate(self):
        cx, cy, w, h = self.box
        if not (w > 0 and h > 0):
            raise ValueError(f"degenerate box {self.box}")
        for lo, hi in ((cx - w / 2, cx + w / 2), (cy - h / 2, cy + h / 2)):
            if lo < -1e-9 or hi > 1 + 1e-9:
                raise ValueError(f"box extends outside the image: {self.box}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # H x W float32 in [0, 1], already 8-bit quantized
    annotations: list
    seed: int


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters for one scene family."""

    image_size: int = 64
    class_ids: tuple = (0, 1, 2, 3, 4, 5)
    required_class_ids: tuple = ()  # at least one object drawn from these
    min_objects: int = 2
    max_objects: int = 5
    min_size: float = 10.0
    max_size: float = 22.0
    noise_level: float = 0.1
    max_overlap_iou: float = 0.3
    max_attempts: int = 200
    archetypes: tuple = ARCHETYPES

    def validate(self):
        if not self.class_ids:
            raise SceneSpecError("class_ids is empty")
        if any(c < 0 or c >= len(self.archetypes) for c in self.class_ids):
            raise SceneSpecError("class id without a renderable archetype")
        if self.max_size + 2 > self.image_size:
            raise SceneSpecError(
                f"max object size {self.max_size} does not fit a {self.image_size}px image")
        if self.min_size < 4:
            raise SceneSpecError("min_size below 4px renders unreliably")
        if not (0 <= self.min_objects <= self.max_objects):
            raise SceneSpecError("bad object count range")
        if not set(self.required_class_ids) <= set(self.class_ids):
            raise SceneSpecError("required classes not a subset of class_ids")


def _mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def _bbox_to_norm(xmin, ymin, xmax, ymax, size):
    w = (xmax + 1 - xmin) / size
    h = (ymax + 1 - ymin) / size
    cx = (xmin + xmax + 1) / 2 / size
    cy = (ymin + ymax + 1) / 2 / size
    return (cx, cy, w, h)


def _iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0, min(ax1, bx1) - max(ax0, bx0) + 1)
    iy = max(0, min(ay1, by1) - max(ay0, by0) + 1)
    inter = ix * iy
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / (area_a + area_b - inter)


def generate_scene(spec: SceneSpec, seed: int, scene_id: str = "") -> Scene:
    """Render one scene. Pure function of (spec, seed)."""
    spec.validate()
    seed = int(seed)
    rng = np.random.default_rng(seed)
    n = spec.image_size

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes = [int(rng.choice(spec.class_ids)) for _ in range(count)]
    if spec.required_class_ids and not set(classes) & set(spec.required_class_ids):
        classes[int(rng.integers(0, count))] = int(rng.choice(spec.required_class_ids))

    image = rng.uniform(0.0, spec.noise_level, size=(n, n))
    annotations = []
    placed_bboxes = []
    for class_id in classes:
        placed = False
        for _ in range(spec.max_attempts):
            size = float(rng.uniform(spec.min_size, spec.max_size))
            margin = size / 2 + 1
            cx = float(rng.uniform(margin, n - 1 - margin))
            cy = float(rng.uniform(margin, n - 1 - margin))
            intensity = float(rng.uniform(0.55, 0.95))
            mask = render_mask(spec.archetypes[class_id], cx, cy, size, n, n)
            if not mask.any():
                continue
            bbox = _mask_bbox(mask)
            if any(_iou(bbox, other) > spec.max_overlap_iou for other in placed_bboxes):
                continue
            image = np.where(mask, np.maximum(image, intensity), image)
            placed_bboxes.append(bbox)
            ann = Annotation(class_id=class_id, box=_bbox_to_norm(*bbox, n))
            ann.validate()
            annotations.append(ann)
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place a {spec.archetypes[class_id]} after {spec.max_attempts} attempts")

    quantized = np.round(image * 255.0).astype(np.uint8)
    return Scene(
        scene_id=scene_id,
        image=(quantized.astype(np.float32) / 255.0),
        annotations=annotations,
        seed=seed,
    )

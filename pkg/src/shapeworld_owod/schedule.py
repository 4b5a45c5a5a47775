"""Objectness layer schedules and inference assembly.

Three schedules over an L-layer decoder:

* ``etop``: objectness is predicted and supervised only in layers <= n while
  class and box prediction (with iterative refinement) runs in every layer.
* ``dol``: layers <= n predict objectness only; class/box supervision and box
  refinement start after layer n (comparison baseline).
* ``none``: objectness in every layer (no early termination), equivalent to
  ``etop`` with n = L.

At inference, boxes and class probabilities come from the last layer and the
objectness probability from layer n; their product ranks the detections.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .objectness import factorized_class_prob
from .queries import ORIGIN_NAMES

SCHEDULE_KINDS = ("etop", "dol", "none")


@dataclass(frozen=True)
class EtopConfig:
    stop_layer: int = 2
    total_layers: int = 6
    schedule: str = "etop"

    def validate(self):
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"schedule must be one of {SCHEDULE_KINDS}, got {self.schedule!r}")
        if not 1 <= self.stop_layer <= self.total_layers:
            raise ValueError(
                f"stop layer {self.stop_layer} outside [1, {self.total_layers}]")
        if self.schedule == "dol" and self.stop_layer >= self.total_layers:
            raise ValueError("dol needs at least one class/box layer after the stop layer")

    @property
    def effective_stop(self) -> int:
        """Layer whose objectness is used at inference (and fed to the EMA)."""
        return self.total_layers if self.schedule == "none" else self.stop_layer

    def objectness_layer_mask(self):
        """mask[l-1] is True iff layer l predicts objectness."""
        self.validate()
        return [layer <= self.effective_stop for layer in range(1, self.total_layers + 1)]

    def class_box_layer_mask(self):
        """mask[l-1] is True iff layer l predicts (and is supervised on) class/box."""
        self.validate()
        if self.schedule == "dol":
            return [layer > self.stop_layer for layer in range(1, self.total_layers + 1)]
        return [True] * self.total_layers


@dataclass
class Detection:
    """One emitted query: final box plus factorized confidences."""

    box: np.ndarray              # (4,) cxcywh, normalized
    class_probs: np.ndarray      # factorized probs for known columns, indexed by class id
    unknown_conf: float
    objectness: float
    origin: str                  # "query_selected" | "learnable"


def assemble_inference(outputs, config: EtopConfig, known_classes,
                       unknown_rank_by_objectness: bool = False):
    """Combine last-layer class/box with layer-n objectness into detections.

    outputs: a ForwardOutputs (see detector module). Returns a list (length
    batch) of lists of Detection, one per query; thresholding/ranking is the
    evaluator's job.
    """
    config.validate()
    layers = outputs.layers
    if len(layers) != config.total_layers:
        raise ValueError(f"expected {config.total_layers} layers, got {len(layers)}")
    n_eff = config.effective_stop
    obj_layer = layers[n_eff - 1]
    if obj_layer.objectness is None:
        raise ValueError(f"layer {n_eff} carries no objectness scores")
    last = layers[-1]
    if last.class_logits is None:
        raise ValueError("last layer carries no class logits")

    known_classes = list(known_classes)
    probs = torch.sigmoid(last.class_logits.detach())
    obj = obj_layer.objectness.detach()
    fact = factorized_class_prob(probs, obj)
    boxes = last.boxes.detach()
    origins = outputs.query_origins

    batch = []
    unknown_col = probs.shape[-1] - 1
    for b in range(probs.shape[0]):
        dets = []
        for q in range(probs.shape[1]):
            class_probs = np.zeros(probs.shape[-1] - 1, dtype=np.float64)
            for c in known_classes:
                class_probs[c] = float(fact[b, q, c])
            if unknown_rank_by_objectness:
                unknown_conf = float(obj[b, q])
            else:
                unknown_conf = float(fact[b, q, unknown_col])
            dets.append(Detection(
                box=boxes[b, q].cpu().numpy().astype(np.float64),
                class_probs=class_probs,
                unknown_conf=unknown_conf,
                objectness=float(obj[b, q]),
                origin=ORIGIN_NAMES[int(origins[q])],
            ))
        batch.append(dets)
    return batch

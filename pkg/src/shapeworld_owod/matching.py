"""Hungarian-matched detection losses with per-layer auxiliary supervision.

Every decoder layer (and the encoder proposal head, when query selection is
active) is matched independently against the ground truth of its own
predictions; class targets are one-hot under independent sigmoids, unmatched
queries get all-zero targets, and class columns outside the currently known
set are masked out of the loss entirely. Objectness terms exist only on the
layers the schedule routes them to and see only matched embeddings.
"""

from dataclasses import dataclass, field

import torch

from .assignment import hungarian_match
from .boxes import box_cxcywh_to_xyxy, pairwise_giou_xyxy
from .schedule import EtopConfig


@dataclass(frozen=True)
class CostWeights:
    """Matching-cost and loss weights (cost and loss use the same values)."""

    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    objectness_weight: float = 0.01
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def validate(self):
        for name in ("class_weight", "l1_weight", "giou_weight", "objectness_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def sigmoid_focal(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25,
                  gamma: float = 2.0, num_boxes: int = 1) -> torch.Tensor:
    """Focal loss on sigmoid logits, summed and divided by max(num_boxes, 1)."""
    prob = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * ((1 - p_t) ** gamma)
    if alpha >= 0:
        alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
        loss = alpha_t * loss
    return loss.sum() / max(num_boxes, 1)


def focal_class_cost(probs: torch.Tensor, gt_classes: torch.Tensor,
                     alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """(N, G) focal-style classification cost from (N, C+1) sigmoid probs."""
    eps = 1e-8
    pos = alpha * ((1 - probs) ** gamma) * (-(probs + eps).log())
    neg = (1 - alpha) * (probs ** gamma) * (-(1 - probs + eps).log())
    return pos[:, gt_classes] - neg[:, gt_classes]


def match_cost(class_logits: torch.Tensor, boxes: torch.Tensor, gt_classes: torch.Tensor,
               gt_boxes: torch.Tensor, weights: CostWeights) -> torch.Tensor:
    """(N, G) matching cost: focal class + L1 box + negative gIoU.

    Uses raw class probabilities (objectness never enters the cost).
    """
    if gt_classes.numel() == 0:
        return boxes.new_zeros(boxes.shape[0], 0)
    probs = torch.sigmoid(class_logits)
    cost_class = focal_class_cost(probs, gt_classes, weights.focal_alpha, weights.focal_gamma)
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = -pairwise_giou_xyxy(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return (weights.class_weight * cost_class
            + weights.l1_weight * cost_l1
            + weights.giou_weight * cost_giou)


def box_only_cost(boxes: torch.Tensor, gt_boxes: torch.Tensor, weights: CostWeights) -> torch.Tensor:
    """Cost for objectness-only (DOL) layers that carry no class logits."""
    if gt_boxes.numel() == 0:
        return boxes.new_zeros(boxes.shape[0], 0)
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = -pairwise_giou_xyxy(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return weights.l1_weight * cost_l1 + weights.giou_weight * cost_giou


def _match_batch(cost_fn, batch_size):
    """Run hungarian_match per image; cost_fn(b) -> (N, G_b) tensor."""
    indices = []
    for b in range(batch_size):
        with torch.no_grad():
            cost = cost_fn(b)
        if cost.shape[1] == 0:
            indices.append((torch.zeros(0, dtype=torch.int64), torch.zeros(0, dtype=torch.int64)))
            continue
        rows, cols = hungarian_match(cost.cpu().double().numpy())
        indices.append((torch.from_numpy(rows), torch.from_numpy(cols)))
    return indices


@dataclass
class LossBreakdown:
    """Per-layer loss terms plus the weighted total.

    layers: label -> {"l_class": t, "l_l1": t, "l_giou": t[, "l_obj": t]}
    where label is "enc" or the 1-based decoder layer. matched holds the
    per-image (query_idx, gt_idx) pairs per label. ema_embeddings are the
    detached matched embeddings of the schedule's EMA source layer.
    """

    layers: dict = field(default_factory=dict)
    matched: dict = field(default_factory=dict)
    total: torch.Tensor = None
    ema_embeddings: torch.Tensor = None

    def scalar(self, label, term):
        value = self.layers[label].get(term)
        return float(value) if value is not None else None


def _class_targets(batch_logits, targets, indices):
    out = torch.zeros_like(batch_logits)
    for b, (q_idx, g_idx) in enumerate(indices):
        if q_idx.numel():
            out[b, q_idx, targets[b]["classes"][g_idx]] = 1.0
    return out


def _layer_losses(class_logits, boxes, targets, indices, weights, mask_cols, num_boxes):
    """class/l1/giou terms for one supervised prediction set."""
    batch = class_logits.shape[0]
    tgt = _class_targets(class_logits, targets, indices)
    l_class = sigmoid_focal(class_logits[..., mask_cols], tgt[..., mask_cols],
                            weights.focal_alpha, weights.focal_gamma, num_boxes)
    matched_pred = []
    matched_gt = []
    for b in range(batch):
        q_idx, g_idx = indices[b]
        if q_idx.numel():
            matched_pred.append(boxes[b, q_idx])
            matched_gt.append(targets[b]["boxes"][g_idx])
    if matched_pred:
        pred = torch.cat(matched_pred)
        gt = torch.cat(matched_gt)
        l_l1 = (pred - gt).abs().sum() / max(num_boxes, 1)
        giou = pairwise_giou_xyxy(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt)).diagonal()
        l_giou = (1 - giou).sum() / max(num_boxes, 1)
    else:
        l_l1 = class_logits.new_zeros(())
        l_giou = class_logits.new_zeros(())
    return l_class, l_l1, l_giou


def detection_loss(outputs, targets, weights: CostWeights, etop: EtopConfig, stats,
                   known_class_ids, objectness_active: bool = True,
                   ema_source_layer: int = 0) -> LossBreakdown:
    """Composite loss over all decoder layers plus encoder proposals.

    outputs: ForwardOutputs; targets: list per image of {"classes": (G,) long,
    "boxes": (G, 4)}. Objectness terms appear for layers the schedule routes
    them to; `objectness_active` lets the trainer gate them until the Gaussian
    statistics have seen data (terms are emitted as zeros while inactive).
    ema_source_layer picks which layer's matched embeddings are exported for
    the EMA update (0 = the schedule's effective stop layer).
    """
    weights.validate()
    etop.validate()
    width = outputs.layers[-1].class_logits.shape[-1]
    mask_cols = sorted(set(int(c) for c in known_class_ids)) + [width - 1]
    batch = len(targets)
    num_boxes = max(sum(int(t["classes"].numel()) for t in targets), 1)
    obj_mask = etop.objectness_layer_mask()
    cb_mask = etop.class_box_layer_mask()

    breakdown = LossBreakdown()
    total = outputs.layers[-1].boxes.new_zeros(())

    ema_layer = ema_source_layer if ema_source_layer else etop.effective_stop
    for idx, layer in enumerate(outputs.layers):
        label = idx + 1
        terms = {}
        if cb_mask[idx]:
            indices = _match_batch(
                lambda b: match_cost(layer.class_logits[b], layer.boxes[b],
                                     targets[b]["classes"], targets[b]["boxes"], weights),
                batch)
            l_class, l_l1, l_giou = _layer_losses(
                layer.class_logits, layer.boxes, targets, indices, weights, mask_cols, num_boxes)
            terms.update(l_class=l_class, l_l1=l_l1, l_giou=l_giou)
            total = total + (weights.class_weight * l_class
                             + weights.l1_weight * l_l1
                             + weights.giou_weight * l_giou)
        else:
            indices = _match_batch(
                lambda b: box_only_cost(layer.boxes[b], targets[b]["boxes"], weights), batch)
        if obj_mask[idx]:
            matched_emb = [layer.embeddings[b, q_idx] for b, (q_idx, _) in enumerate(indices)
                           if q_idx.numel()]
            if matched_emb and objectness_active and stats is not None:
                emb = torch.cat(matched_emb)
                l_obj = stats.objectness_loss(emb)
            else:
                l_obj = layer.boxes.new_zeros(())
            terms["l_obj"] = l_obj
            total = total + weights.objectness_weight * l_obj
        breakdown.layers[label] = terms
        breakdown.matched[label] = indices
        if label == ema_layer:
            emb = [layer.embeddings[b, q_idx].detach() for b, (q_idx, _) in enumerate(indices)
                   if q_idx.numel()]
            breakdown.ema_embeddings = (torch.cat(emb) if emb
                                        else layer.embeddings.new_zeros(0, layer.embeddings.shape[-1]))

    if outputs.enc_class_logits is not None:
        indices = _match_batch(
            lambda b: match_cost(outputs.enc_class_logits[b], outputs.enc_boxes[b],
                                 targets[b]["classes"], targets[b]["boxes"], weights),
            batch)
        l_class, l_l1, l_giou = _layer_losses(
            outputs.enc_class_logits, outputs.enc_boxes, targets, indices, weights,
            mask_cols, num_boxes)
        breakdown.layers["enc"] = {"l_class": l_class, "l_l1": l_l1, "l_giou": l_giou}
        breakdown.matched["enc"] = indices
        total = total + (weights.class_weight * l_class
                         + weights.l1_weight * l_l1
                         + weights.giou_weight * l_giou)

    breakdown.total = total
    return breakdown

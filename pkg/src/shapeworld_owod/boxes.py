"""Box format conversions and pairwise IoU / generalized IoU on torch tensors.

All boxes are normalized (cx, cy, w, h) unless a function name says otherwise.
"""

import torch


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def pairwise_iou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix [len(a), len(b)] for corner-form boxes."""
    area_a = box_area_xyxy(a)
    area_b = box_area_xyxy(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def pairwise_giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU matrix [len(a), len(b)] for corner-form boxes.

    giou = iou - (enclosing_area - union) / enclosing_area, in (-1, 1].
    """
    area_a = box_area_xyxy(a)
    area_b = box_area_xyxy(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union.clamp(min=1e-12)

    lt_enc = torch.min(a[:, None, :2], b[None, :, :2])
    rb_enc = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh_enc = (rb_enc - lt_enc).clamp(min=0)
    enclose = wh_enc[..., 0] * wh_enc[..., 1]
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


def pairwise_giou_cxcywh(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return pairwise_giou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))


def pairwise_iou_cxcywh(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return pairwise_iou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))

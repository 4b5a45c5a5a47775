"""mAP@IoU and unknown-recall evaluation with the incremental reporting split.

Detections are flattened PROB-style: each query contributes one candidate per
eligible known class (confidence = factorized class probability) plus one
"unknown" candidate, and the top `top_k` candidates per image survive. AP is
computed per class with greedy confidence-ordered matching at the IoU
threshold and all-point interpolation; classes without ground truth are
excluded from means. U-Recall is the fraction of ground-truth unknown boxes
covered by detections labeled unknown.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .queries import origin_attribution
from .schedule import assemble_inference


@dataclass(frozen=True)
class EvalOptions:
    iou_threshold: float = 0.5
    top_k: int = 100                      # flattened detections kept per image
    unknown_rank_by_objectness: bool = False
    attribution_threshold: float = 0.1
    batch_size: int = 16
    u_recall_top_k: int = 0               # 0 = no per-image cap inside U-Recall


def box_cxcywh_to_xyxy_np(box):
    box = np.asarray(box, dtype=np.float64)
    half = box[..., 2:] / 2
    return np.concatenate([box[..., :2] - half, box[..., :2] + half], axis=-1)


def iou_xyxy_np(a, b):
    """IoU matrix [len(a), len(b)] for corner-form numpy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _greedy_match_flags(detections, gts_by_scene, iou_threshold):
    """detections: list of (scene_id, confidence, cxcywh box), any order.

    Returns (tp flags aligned with confidence-sorted order, num_gt, order).
    Greedy: in descending confidence, a detection is TP iff its best-IoU
    ground-truth box in the same scene clears the threshold and is unused.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], detections[i][0], i))
    used = {scene: np.zeros(len(boxes), dtype=bool) for scene, boxes in gts_by_scene.items()}
    corners = {scene: box_cxcywh_to_xyxy_np(np.asarray(boxes)) if len(boxes) else np.zeros((0, 4))
               for scene, boxes in gts_by_scene.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        scene, _, box = detections[i]
        gt = corners.get(scene)
        if gt is None or gt.shape[0] == 0:
            continue
        ious = iou_xyxy_np(box_cxcywh_to_xyxy_np(np.asarray(box))[None, :], gt)[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold and not used[scene][best]:
            used[scene][best] = True
            tp[rank] = True
    num_gt = sum(len(b) for b in gts_by_scene.values())
    return tp, num_gt, order


def compute_ap(detections, gts_by_scene, iou_threshold: float = 0.5):
    """All-point-interpolated average precision for one class.

    detections: list of (scene_id, confidence, cxcywh box); gts_by_scene:
    scene_id -> list of cxcywh boxes. Returns None when there is no ground
    truth (AP undefined), 0.0 when there are GTs but no detections.
    """
    num_gt = sum(len(b) for b in gts_by_scene.values())
    if num_gt == 0:
        return None
    if not detections:
        return 0.0
    tp, _, _ = _greedy_match_flags(detections, gts_by_scene, iou_threshold)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def compute_u_recall(detections, gts_by_scene, iou_threshold: float = 0.5,
                     top_k_per_image: int = 0):
    """Fraction of unknown ground truth covered by unknown-labeled detections.

    top_k_per_image > 0 keeps only that many highest-confidence detections
    per image before matching. Returns None when there is no unknown GT.
    """
    num_gt = sum(len(b) for b in gts_by_scene.values())
    if num_gt == 0:
        return None
    if top_k_per_image and top_k_per_image > 0:
        per_scene = {}
        for det in detections:
            per_scene.setdefault(det[0], []).append(det)
        kept = []
        for scene in sorted(per_scene):
            dets = sorted(per_scene[scene], key=lambda d: -d[1])[:top_k_per_image]
            kept.extend(dets)
        detections = kept
    if not detections:
        return 0.0
    tp, num_gt, _ = _greedy_match_flags(detections, gts_by_scene, iou_threshold)
    return float(tp.sum() / num_gt)


def flatten_detections(dets, known_classes, top_k: int):
    """Turn per-query Detections of one image into labeled records.

    Each query emits one record per known class plus one unknown record; the
    `top_k` highest-confidence records survive. Ties break by label order and
    query index for determinism.
    """
    known_classes = sorted(known_classes)
    records = []
    for q, det in enumerate(dets):
        for c in known_classes:
            records.append({"label": int(c), "confidence": float(det.class_probs[c]),
                            "box": det.box.tolist(), "origin": det.origin, "query": q})
        records.append({"label": "unknown", "confidence": float(det.unknown_conf),
                        "box": det.box.tolist(), "origin": det.origin, "query": q})
    records.sort(key=lambda r: (-r["confidence"], str(r["label"]), r["query"]))
    return records[:top_k] if top_k and top_k > 0 else records


@dataclass
class EvalReport:
    task_id: int
    map_curr: float = None
    map_prev: float = None
    map_both: float = None
    u_recall: float = None
    per_class_ap: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "map_curr": self.map_curr,
            "map_prev": self.map_prev,
            "map_both": self.map_both,
            "u_recall": self.u_recall,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "counts": self.counts,
            "attribution": self.attribution,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    def csv_rows(self):
        rows = []
        for metric in ("map_curr", "map_prev", "map_both", "u_recall"):
            value = getattr(self, metric)
            if value is not None:
                rows.append((self.task_id, metric, value))
        for c in sorted(self.per_class_ap):
            ap = self.per_class_ap[c]
            if ap is not None:
                rows.append((self.task_id, f"ap_class_{c}", ap))
        return rows


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate_detections(all_records, gt_known, gt_unknown, task, options: EvalOptions):
    """Score flattened records against ground truth for one task.

    all_records: scene_id -> record list; gt_known: class -> scene -> boxes;
    gt_unknown: scene -> boxes.
    """
    per_class_ap = {}
    for c in task.known_classes:
        dets = []
        for scene, records in all_records.items():
            for r in records:
                if r["label"] == c:
                    dets.append((scene, r["confidence"], r["box"]))
        per_class_ap[c] = compute_ap(dets, gt_known.get(c, {}), options.iou_threshold)

    unknown_dets = []
    for scene, records in all_records.items():
        for r in records:
            if r["label"] == "unknown":
                unknown_dets.append((scene, r["confidence"], r["box"]))
    u_recall = compute_u_recall(unknown_dets, gt_unknown, options.iou_threshold,
                                options.u_recall_top_k)

    prev = [c for c in task.known_classes if c not in task.introduced_classes]
    report = EvalReport(task_id=task.task_id)
    report.per_class_ap = per_class_ap
    report.map_curr = _mean_or_none([per_class_ap[c] for c in task.introduced_classes])
    report.map_prev = _mean_or_none([per_class_ap[c] for c in prev]) if prev else None
    report.map_both = _mean_or_none([per_class_ap[c] for c in task.known_classes])
    report.u_recall = u_recall
    flat = [r for records in all_records.values() for r in records]
    report.attribution = origin_attribution(flat, options.attribution_threshold)
    report.counts = {
        "images": len(all_records),
        "detections": len(flat),
        "unknown_detections": len(unknown_dets),
        "known_gt": sum(len(b) for per in gt_known.values() for b in per.values()),
        "unknown_gt": sum(len(b) for b in gt_unknown.values()),
    }
    return report


def run_inference(model, stats, dataset, task, etop, options: EvalOptions, split="test"):
    """Run the model over a split; returns (records per scene, gt structures)."""
    model.eval()
    records_by_scene = {}
    gt_known = {c: {} for c in task.known_classes}
    gt_unknown = {}
    split_records = dataset.records(task.task_id, split)
    known = set(task.known_classes)
    with torch.no_grad():
        for start in range(0, len(split_records), options.batch_size):
            chunk = split_records[start:start + options.batch_size]
            images = torch.from_numpy(
                np.stack([dataset.image(r["scene_id"]) for r in chunk])[:, None])
            images = images.to(next(model.parameters()).dtype)
            out = model(images, stats=stats, etop=etop,
                        known_class_ids=list(task.known_classes))
            dets = assemble_inference(out, etop, task.known_classes,
                                      options.unknown_rank_by_objectness)
            for rec, image_dets in zip(chunk, dets):
                scene = rec["scene_id"]
                records_by_scene[scene] = flatten_detections(
                    image_dets, task.known_classes, options.top_k)
                for obj in rec["objects"]:
                    c = int(obj["class"])
                    if c in known:
                        gt_known[c].setdefault(scene, []).append(obj["box"])
                    else:
                        gt_unknown.setdefault(scene, []).append(obj["box"])
    return records_by_scene, gt_known, gt_unknown


def report_task(model, stats, dataset, task, etop, options: EvalOptions) -> EvalReport:
    records, gt_known, gt_unknown = run_inference(model, stats, dataset, task, etop, options)
    return evaluate_detections(records, gt_known, gt_unknown, task, options)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def write_report(report: EvalReport, out_dir, records_by_scene=None):
    """Write report JSON, a flat CSV, the origin-attribution CSV, and
    (optionally) the per-scene detection dump. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    json_path = out_dir / f"eval_task{report.task_id}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    paths["json"] = json_path

    csv_path = out_dir / f"eval_task{report.task_id}.csv"
    lines = ["task,metric,value"]
    for task_id, metric, value in report.csv_rows():
        lines.append(f"{task_id},{metric},{value!r}")
    csv_path.write_text("\n".join(lines) + "\n")
    paths["csv"] = csv_path

    attr_path = out_dir / f"attribution_task{report.task_id}.csv"
    lines = ["task,category,origin,fraction"]
    for category in ("known", "unknown"):
        per_origin = (report.attribution or {}).get(category)
        if per_origin is None:
            continue
        for origin in sorted(per_origin):
            lines.append(f"{report.task_id},{category},{origin},{per_origin[origin]!r}")
    attr_path.write_text("\n".join(lines) + "\n")
    paths["attribution"] = attr_path

    if records_by_scene is not None:
        dump_path = out_dir / f"detections_task{report.task_id}.jsonl"
        with dump_path.open("w") as fh:
            for scene in sorted(records_by_scene):
                for r in records_by_scene[scene]:
                    fh.write(json.dumps({
                        "scene_id": scene, "label": r["label"],
                        "confidence": r["confidence"], "box": r["box"],
                        "origin": r["origin"],
                    }) + "\n")
        paths["detections"] = dump_path
    return paths

"""Object query initialization: top-k selected encoder proposals + learnable queries.

The first n_qs query slots come from encoder tokens ranked by their best
*known-class* score (the extra unknown/background column never influences the
ranking), carrying projected encoder content and the encoder box head's
proposal box as reference. The remaining n_lq slots are free parameters whose
reference boxes start evenly spread over the image. Each query keeps an
origin tag so detections can be attributed to their initialization route.
"""

from dataclasses import dataclass

import torch
from torch import nn

ORIGIN_QUERY_SELECTED = 0
ORIGIN_LEARNABLE = 1
ORIGIN_NAMES = {ORIGIN_QUERY_SELECTED: "query_selected", ORIGIN_LEARNABLE: "learnable"}


@dataclass(frozen=True)
class TdqiConfig:
    n_qs: int = 20
    n_lq: int = 80
    enabled: bool = True

    @property
    def num_queries(self) -> int:
        return self.n_qs + self.n_lq

    def validate(self):
        if self.n_qs < 0 or self.n_lq < 0:
            raise ValueError("query counts must be nonnegative")
        if self.num_queries == 0:
            raise ValueError("need at least one query")

    @property
    def selection_active(self) -> bool:
        return self.enabled and self.n_qs > 0


def query_select(scores: torch.Tensor, k: int, known_cols) -> torch.Tensor:
    """Indices of the top-k tokens by best known-class score.

    scores: (T, C+1) sigmoid class scores. Ranking key is the max over
    `known_cols` only; any column outside it (in particular the trailing
    unknown/background column) is disregarded. Ties break toward the lower
    token index. Returns int64 indices, descending by key.
    """
    t = scores.shape[0]
    if k > t:
        raise ValueError(f"k={k} exceeds token count {t}")
    if k == 0:
        return torch.zeros(0, dtype=torch.int64, device=scores.device)
    known_cols = torch.as_tensor(known_cols, dtype=torch.int64, device=scores.device)
    if known_cols.numel() == 0:
        raise ValueError("query selection needs at least one known class column")
    key = scores.index_select(1, known_cols).max(dim=1).values
    order = torch.argsort(-key, stable=True)
    return order[:k]


class QueryInit(nn.Module):
    """Builds the query batch; owns learnable query parameters and the
    projection applied to selected encoder content."""

    def __init__(self, dim: int, config: TdqiConfig):
        super().__init__()
        config.validate()
        self.dim = dim
        self.config = config
        self.learnable_content = nn.Parameter(torch.zeros(config.n_lq, dim))
        self.learnable_ref_logits = nn.Parameter(torch.zeros(config.n_lq, 4))
        self.content_proj = nn.Linear(dim, dim)
        self.content_norm = nn.LayerNorm(dim)

    def origins(self) -> torch.Tensor:
        cfg = self.config
        n_qs = cfg.n_qs if cfg.selection_active else 0
        return torch.cat([
            torch.full((n_qs,), ORIGIN_QUERY_SELECTED, dtype=torch.int64),
            torch.full((self.config.num_queries - n_qs,), ORIGIN_LEARNABLE, dtype=torch.int64),
        ])

    def init_queries(self, memory, proposal_scores, proposal_boxes, known_cols):
        """Assemble (content, reference_box, origins, selected_indices).

        memory: (B, T, d); proposal_scores/boxes: (B, T, C+1) / (B, T, 4) or
        None when selection is inactive. Selected reference boxes are
        detached: the decoder does not backpropagate into the proposal path
        (the encoder auxiliary loss supervises it instead).
        """
        cfg = self.config
        if cfg.selection_active:
            b = memory.shape[0]
            tokens = memory.shape[1]
            k = min(cfg.n_qs, tokens)
            sel = torch.stack([
                query_select(proposal_scores[i], k, known_cols) for i in range(b)
            ])  # (B, k)
            if cfg.n_qs > tokens:
                # query budget exceeds the token grid (pure-selection configs
                # at toy scale): reuse the ranking round-robin
                reps = -(-cfg.n_qs // tokens)
                sel = sel.repeat(1, reps)[:, :cfg.n_qs]
            gather = sel.unsqueeze(-1)
            content_qs = torch.take_along_dim(memory, gather.expand(-1, -1, self.dim), dim=1)
            content_qs = self.content_norm(self.content_proj(content_qs))
            ref_qs = torch.take_along_dim(proposal_boxes, gather.expand(-1, -1, 4), dim=1).detach()
        else:
            b = memory.shape[0]
            sel = None
            content_qs = memory.new_zeros(b, 0, self.dim)
            ref_qs = memory.new_zeros(b, 0, 4)

        content_lq = self.learnable_content.to(memory.dtype).unsqueeze(0).expand(b, -1, -1)
        ref_lq = torch.sigmoid(self.learnable_ref_logits.to(memory.dtype)) \
            .clamp(min=1e-6, max=1 - 1e-6).unsqueeze(0).expand(b, -1, -1)
        content = torch.cat([content_qs, content_lq], dim=1)
        reference = torch.cat([ref_qs, ref_lq], dim=1)
        return content, reference, self.origins(), sel


def origin_attribution(records, confidence_threshold: float):
    """Fraction of known / unknown detections contributed by each query origin.

    records: iterables of dicts with keys "label", "confidence", "origin"
    (the evaluator's flattened detection records). Categories with no
    detections above threshold are reported as None rather than NaN.
    """
    counts = {"known": {name: 0 for name in ORIGIN_NAMES.values()},
              "unknown": {name: 0 for name in ORIGIN_NAMES.values()}}
    for rec in records:
        if rec["confidence"] < confidence_threshold:
            continue
        category = "unknown" if rec["label"] == "unknown" else "known"
        counts[category][rec["origin"]] += 1
    out = {}
    for category, per_origin in counts.items():
        total = sum(per_origin.values())
        out[category] = None if total == 0 else {o: c / total for o, c in per_origin.items()}
    return out

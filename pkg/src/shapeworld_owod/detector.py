"""The miniature query-based detector.

A 3-block strided conv backbone (stride 8 overall) feeds a single-scale
deformable-attention encoder. Encoder tokens optionally produce class/box
proposals for query selection; the 6-layer decoder runs self-attention,
deformable cross-attention around each query's reference box, and per-layer
class/box heads with iterative, between-layer-detached box refinement.
Objectness scores are attached to the layers the schedule asks for, computed
from the layer's query embeddings under the running Gaussian statistics.
"""

import hashlib
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .layers import (DecoderLayer, DeformableAttention, EncoderLayer, Mlp,
                     grid_anchors, inverse_sigmoid, sine_embed)
from .queries import QueryInit, TdqiConfig


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    num_heads: int = 4
    num_points: int = 4
    ffn_dim: int = 128
    num_encoder_layers: int = 2
    num_decoder_layers: int = 6
    num_classes: int = 6          # total class vocabulary; head width is num_classes + 1
    image_size: int = 64
    anchor_extent: float = 0.1    # w = h of token anchor boxes and initial learnable boxes

    def validate(self):
        if self.embed_dim % 8:
            raise ValueError("embed_dim must be divisible by 8 (sine features)")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must divide num_heads")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by the backbone stride (8)")
        if self.num_decoder_layers < 1 or self.num_encoder_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")


def iterative_refine(reference_box: torch.Tensor, delta: torch.Tensor,
                     eps: float = 1e-6) -> torch.Tensor:
    """Per-coordinate logit-space box update: sigmoid(logit(box) + delta).

    Inputs at exactly 0 or 1 are clamped into (eps, 1-eps) before the logit;
    the output is clamped the same way so emitted boxes stay strictly inside
    the unit interval even when the sigmoid saturates in floating point.
    """
    out = torch.sigmoid(inverse_sigmoid(reference_box, eps) + delta)
    return out.clamp(min=eps, max=1 - eps)


@dataclass
class LayerOutput:
    class_logits: torch.Tensor   # (B, N, C+1) or None on DOL objectness-only layers
    boxes: torch.Tensor          # (B, N, 4)
    embeddings: torch.Tensor     # (B, N, d)
    objectness: torch.Tensor     # (B, N) or None


@dataclass
class ForwardOutputs:
    layers: list
    enc_class_logits: torch.Tensor  # (B, T, C+1) or None when selection inactive
    enc_boxes: torch.Tensor         # (B, T, 4) or None
    enc_anchor_boxes: torch.Tensor  # (T, 4) or None
    query_origins: torch.Tensor     # (N,)
    selected_indices: torch.Tensor  # (B, n_qs) or None
    spatial_shape: tuple
    memory: torch.Tensor = field(repr=False, default=None)
    # reference tensors as consumed per decoder layer, plus the selected
    # proposal boxes; both already detached. Feeding them back through
    # `frozen_references` / `frozen_qs_reference` reruns the forward with the
    # stop-gradient inputs held constant, which is what finite-difference
    # verification of a stop-gradient function requires.
    reference_inputs: list = field(repr=False, default=None)
    qs_reference: torch.Tensor = field(repr=False, default=None)

    def validate(self, etop_config):
        obj_mask = etop_config.objectness_layer_mask()
        cb_mask = etop_config.class_box_layer_mask()
        if len(self.layers) != len(obj_mask):
            raise AssertionError("layer count does not match schedule")
        for idx, layer in enumerate(self.layers):
            if (layer.objectness is not None) != obj_mask[idx]:
                raise AssertionError(f"objectness presence wrong at layer {idx + 1}")
            if (layer.class_logits is not None) != cb_mask[idx]:
                raise AssertionError(f"class logits presence wrong at layer {idx + 1}")
            if not torch.isfinite(layer.boxes).all():
                raise AssertionError(f"non-finite boxes at layer {idx + 1}")
            if layer.boxes.min() <= 0 or layer.boxes.max() >= 1:
                raise AssertionError(f"boxes outside (0,1) at layer {idx + 1}")
            if layer.objectness is not None:
                if layer.objectness.min() <= 0 or layer.objectness.max() > 1:
                    raise AssertionError(f"objectness outside (0,1] at layer {idx + 1}")


class Backbone(nn.Module):
    """Three stride-2 conv blocks: H x W -> H/8 x W/8, `dim` channels."""

    def __init__(self, dim: int):
        super().__init__()
        c1, c2 = max(8, dim // 4), max(16, dim // 2)
        def block(cin, cout):
            return nn.ModuleDict({
                "conv": nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                "norm": nn.GroupNorm(max(1, cout // 8), cout),
            })
        self.blocks = nn.ModuleList([block(1, c1), block(c1, c2), block(c2, dim)])

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for blk in self.blocks:
            x = torch.relu(blk["norm"](blk["conv"](x)))
        return x


class Detector(nn.Module):
    def __init__(self, config: ModelConfig, tdqi: TdqiConfig):
        super().__init__()
        config.validate()
        tdqi.validate()
        self.config = config
        self.tdqi = tdqi
        d = config.embed_dim

        self.backbone = Backbone(d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.num_heads, config.num_points, config.ffn_dim)
            for _ in range(config.num_encoder_layers))
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.num_points, config.ffn_dim)
            for _ in range(config.num_decoder_layers))
        width = config.num_classes + 1
        self.class_heads = nn.ModuleList(
            nn.Linear(d, width) for _ in range(config.num_decoder_layers))
        self.box_heads = nn.ModuleList(
            Mlp(d, d, 4, layers=3) for _ in range(config.num_decoder_layers))
        self.enc_class_head = nn.Linear(d, width)
        self.enc_box_head = Mlp(d, d, 4, layers=3)
        self.query_init = QueryInit(d, tdqi)
        self.query_pos_mlp = Mlp(d, d, d, layers=2)

    # -- forward pieces -----------------------------------------------------

    def backbone_forward(self, images: torch.Tensor):
        """images: (B, 1, H, W) -> tokens (B, T, d), anchors (T, 2), (H', W')."""
        feat = self.backbone(images)
        b, d, h, w = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)
        anchors = grid_anchors(h, w, dtype=feat.dtype).to(feat.device)
        return tokens, anchors, (h, w)

    def encoder_forward(self, tokens, anchors, spatial_shape):
        pos = sine_embed(anchors, self.config.embed_dim // 2).unsqueeze(0)
        memory = tokens
        for layer in self.encoder:
            memory = layer(memory, pos, anchors.unsqueeze(0).expand(memory.shape[0], -1, -1),
                           spatial_shape)
        return memory

    def encoder_proposals(self, memory, anchors):
        """Per-token class logits and anchor-refined proposal boxes."""
        extent = torch.full_like(anchors, self.config.anchor_extent)
        anchor_boxes = torch.cat([anchors, extent], dim=-1)
        logits = self.enc_class_head(memory)
        boxes = iterative_refine(anchor_boxes.unsqueeze(0), self.enc_box_head(memory))
        return logits, boxes, anchor_boxes

    def forward(self, images, stats=None, etop=None, known_class_ids=None,
                frozen_references=None, frozen_qs_reference=None) -> ForwardOutputs:
        """Full forward pass.

        stats: GaussianStats for objectness scores (None skips objectness).
        etop: EtopConfig deciding which layers carry objectness / class+box.
        known_class_ids: class columns eligible for query selection ranking;
        defaults to the full vocabulary.
        frozen_references / frozen_qs_reference: recorded stop-gradient inputs
        from a previous forward, substituted as constants (gradient
        verification support; see ForwardOutputs).
        """
        cfg = self.config
        if etop is not None:
            etop.validate()
            if etop.total_layers != cfg.num_decoder_layers:
                raise ValueError("schedule layer count does not match the decoder")
            obj_mask = etop.objectness_layer_mask()
            cb_mask = etop.class_box_layer_mask()
        else:
            obj_mask = [False] * cfg.num_decoder_layers
            cb_mask = [True] * cfg.num_decoder_layers
        if known_class_ids is None:
            known_class_ids = list(range(cfg.num_classes))

        tokens, anchors, spatial_shape = self.backbone_forward(images)
        memory = self.encoder_forward(tokens, anchors, spatial_shape)

        if self.tdqi.selection_active:
            enc_logits, enc_boxes, enc_anchor_boxes = self.encoder_proposals(memory, anchors)
            content, reference, origins, selected = self.query_init.init_queries(
                memory, torch.sigmoid(enc_logits.detach()), enc_boxes, known_class_ids)
            if frozen_qs_reference is not None:
                n_qs = self.tdqi.n_qs
                reference = torch.cat([frozen_qs_reference, reference[:, n_qs:]], dim=1)
            qs_reference = reference[:, :self.tdqi.n_qs].detach()
        else:
            enc_logits = enc_boxes = enc_anchor_boxes = selected = None
            qs_reference = None
            content, reference, origins, _ = self.query_init.init_queries(
                memory, None, None, known_class_ids)

        layers = []
        reference_inputs = []
        d = cfg.embed_dim
        for idx, layer in enumerate(self.decoder):
            if frozen_references is not None and frozen_references[idx] is not None:
                reference = frozen_references[idx]
            reference_inputs.append(reference.detach())
            qpos = self.query_pos_mlp(sine_embed(reference, d // 4))
            content = layer(content, qpos, reference, memory, spatial_shape)
            if cb_mask[idx]:
                logits = self.class_heads[idx](content)
                boxes = iterative_refine(reference, self.box_heads[idx](content))
                reference = boxes.detach()
            else:
                logits = None
                boxes = reference
            objectness = None
            if obj_mask[idx] and stats is not None:
                objectness = stats.objectness_score(content)
            layers.append(LayerOutput(logits, boxes, content, objectness))

        return ForwardOutputs(
            layers=layers,
            enc_class_logits=enc_logits,
            enc_boxes=enc_boxes,
            enc_anchor_boxes=enc_anchor_boxes,
            query_origins=origins,
            selected_indices=selected,
            spatial_shape=spatial_shape,
            memory=memory,
            reference_inputs=reference_inputs,
            qs_reference=qs_reference,
        )


# ---------------------------------------------------------------------------
# deterministic parameter initialization
# ---------------------------------------------------------------------------

def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


def _offset_grid_bias(num_heads: int, num_points: int) -> torch.Tensor:
    """Directional spread for deformable sampling offsets (one ray per head)."""
    thetas = torch.arange(num_heads, dtype=torch.float64) * (2 * math.pi / num_heads)
    rays = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
    rays = rays / rays.abs().max(dim=-1, keepdim=True).values
    grid = rays[:, None, :].repeat(1, num_points, 1)
    scale = torch.arange(1, num_points + 1, dtype=torch.float64)[None, :, None]
    return (grid * scale).reshape(-1)


def init_detector_params(model: Detector, seed: int):
    """Name-keyed deterministic init: every tensor gets its own generator, so
    two builds sharing a parameter name initialize it identically regardless
    of which other modules exist or the registration order."""
    cfg = model.config
    focal_bias = -math.log((1 - 0.01) / 0.01)
    n_lq = model.tdqi.n_lq
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            g = torch.Generator().manual_seed(_name_seed(seed, name))
            if "sampling_offsets.weight" in name or "attention_weights" in name:
                p.zero_()
            elif "sampling_offsets.bias" in name:
                p.copy_(_offset_grid_bias(cfg.num_heads, cfg.num_points).to(p.dtype))
            elif ("class_head" in name or "class_heads" in name) and name.endswith(".bias"):
                p.fill_(focal_bias)
            elif ("box_head" in name) and (".layers.2." in name):
                p.zero_()
            elif name.endswith("learnable_content"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float32).to(p.dtype))
            elif name.endswith("learnable_ref_logits"):
                side = math.ceil(math.sqrt(max(n_lq, 1)))
                centers = []
                for i in range(n_lq):
                    r, c = divmod(i, side)
                    centers.append(((c + 0.5) / side, (r + 0.5) / side))
                ref = torch.tensor(centers, dtype=torch.float64) if n_lq else torch.zeros(0, 2)
                wh = torch.full((n_lq, 2), cfg.anchor_extent, dtype=torch.float64)
                boxes = torch.cat([ref, wh], dim=-1) if n_lq else torch.zeros(0, 4)
                p.copy_(inverse_sigmoid(boxes).to(p.dtype))
            elif name.endswith(".bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)  # norm scales
            else:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.ndim > 2 else 1)
                fan_out = p.shape[0] * (p[0, 0].numel() if p.ndim > 2 else 1)
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float32) * 2 - 1)
                        .to(p.dtype) * bound)
    return model


def build_detector(config: ModelConfig, tdqi: TdqiConfig, seed: int,
                   dtype=torch.float32) -> Detector:
    model = Detector(config, tdqi)
    init_detector_params(model, seed)
    return model.to(dtype)


def jitter_params(model: nn.Module, seed: int, scale: float = 0.02):
    """Perturb every parameter slightly, for gradient verification.

    The structured init is intentionally degenerate (zero box deltas, sampling
    points exactly on grid nodes, tied costs); finite differences must be
    taken at a generic point where the matching is locally constant and no
    sampling location sits on an interpolation kink.
    """
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            g = torch.Generator().manual_seed(_name_seed(seed ^ 0x5EED, name))
            p.add_(torch.randn(p.shape, generator=g, dtype=torch.float32).to(p.dtype) * scale)
    return model

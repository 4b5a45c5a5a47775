"""Building blocks for the query-based detector.

Everything is written against plain torch ops (no fused attention kernels) so
the whole model runs identically in float32 and float64 and every gradient
path is visible to the finite-difference harness.
"""

import math

import torch
from torch import nn

from .numerics import bilinear_sample_batched


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x) - torch.log1p(-x)


def sine_embed(coords: torch.Tensor, num_feats: int, temperature: float = 20.0) -> torch.Tensor:
    """Sinusoidal features for normalized coordinates.

    coords: (..., k) in [0, 1]; returns (..., k * num_feats).
    """
    if num_feats % 2:
        raise ValueError("num_feats must be even")
    half = num_feats // 2
    freqs = temperature ** (torch.arange(half, dtype=coords.dtype, device=coords.device) / half)
    ang = coords.unsqueeze(-1) * (2 * math.pi) / freqs
    emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
    return emb.flatten(-2)


def grid_anchors(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized (x, y) centers of an H x W token grid, row-major, (H*W, 2)."""
    ys = (torch.arange(height, dtype=dtype) + 0.5) / height
    xs = (torch.arange(width, dtype=dtype) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


class Mlp(nn.Module):
    """Simple ReLU MLP; `layers` counts Linear layers."""

    def __init__(self, in_dim, hidden_dim, out_dim, layers=3):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(layers))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention over a token set."""

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must divide num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        b, q, _ = query.shape
        k = key.shape[1]

        def split(x, n):
            return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

        qh = split(self.q_proj(query), q)
        kh = split(self.k_proj(key), k)
        vh = split(self.v_proj(value), k)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, q, -1)
        return self.out_proj(out)


class DeformableAttention(nn.Module):
    """Single-scale deformable attention.

    Each query predicts, per head, `num_points` sampling locations around its
    reference (a 2-d point for encoder self-attention, a 4-d box for decoder
    cross-attention) plus softmax weights, and aggregates bilinear samples of
    the projected memory. Point references scale offsets by the grid size;
    box references scale by half the box extent per point, so a query reads
    inside (and around) its current box.
    """

    def __init__(self, dim, num_heads, num_points):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must divide num_heads")
        self.num_heads = num_heads
        self.num_points = num_points
        self.head_dim = dim // num_heads
        self.sampling_offsets = nn.Linear(dim, num_heads * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)

    def forward(self, query, reference, memory, spatial_shape):
        """query: (B, Q, d); reference: (B, Q, 2) or (B, Q, 4) normalized;
        memory: (B, H*W, d); spatial_shape: (H, W)."""
        b, nq, _ = query.shape
        h, w = spatial_shape
        offsets = self.sampling_offsets(query).reshape(b, nq, self.num_heads, self.num_points, 2)
        weights = torch.softmax(
            self.attention_weights(query).reshape(b, nq, self.num_heads, self.num_points), dim=-1)

        if reference.shape[-1] == 2:
            norm = torch.tensor([w, h], dtype=query.dtype, device=query.device)
            loc = reference[:, :, None, None, :] + offsets / norm
        else:
            center = reference[..., :2]
            extent = reference[..., 2:]
            loc = center[:, :, None, None, :] \
                + offsets / self.num_points * extent[:, :, None, None, :] * 0.5

        # normalized -> pixel coordinates (align_corners=False convention)
        scale = torch.tensor([w, h], dtype=query.dtype, device=query.device)
        pix = loc * scale - 0.5

        value = self.value_proj(memory).reshape(b, h, w, self.num_heads, self.head_dim)
        value = value.permute(0, 3, 1, 2, 4).reshape(b * self.num_heads, h, w, self.head_dim)
        pts = pix.permute(0, 2, 1, 3, 4).reshape(b * self.num_heads, nq * self.num_points, 2)
        sampled = bilinear_sample_batched(value, pts)
        sampled = sampled.reshape(b, self.num_heads, nq, self.num_points, self.head_dim)
        out = (weights.permute(0, 2, 1, 3).unsqueeze(-1) * sampled).sum(dim=3)
        out = out.permute(0, 2, 1, 3).reshape(b, nq, -1)
        return self.output_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Deformable self-attention over the token grid, post-norm residuals."""

    def __init__(self, dim, num_heads, num_points, ffn_dim):
        super().__init__()
        self.attn = DeformableAttention(dim, num_heads, num_points)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, tokens, pos, anchors, spatial_shape):
        attended = self.attn(tokens + pos, anchors, tokens, spatial_shape)
        tokens = self.norm1(tokens + attended)
        tokens = self.norm2(tokens + self.ffn(tokens))
        return tokens


class DecoderLayer(nn.Module):
    """Query self-attention followed by deformable cross-attention into memory."""

    def __init__(self, dim, num_heads, num_points, ffn_dim):
        super().__init__()
        self.self_attn = SelfAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = DeformableAttention(dim, num_heads, num_points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, content, query_pos, reference_box, memory, spatial_shape):
        q = content + query_pos
        content = self.norm1(content + self.self_attn(q, q, content))
        attended = self.cross_attn(content + query_pos, reference_box, memory, spatial_shape)
        content = self.norm2(content + attended)
        content = self.norm3(content + self.ffn(content))
        return content

"""Renderable shape archetypes.

Each archetype renders a boolean mask on the pixel grid; class identity in
the dataset maps to archetype identity, so classes are visually disjoint.
"""

import numpy as np

ARCHETYPES = ("square", "disc", "triangle", "cross", "ring", "bar")


def render_mask(archetype: str, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    """Boolean H x W mask of a shape centered at (cx, cy) pixels with extent `size`."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    half = size / 2.0
    if archetype == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if archetype == "disc":
        return dx * dx + dy * dy <= half * half
    if archetype == "triangle":
        # upright triangle: apex at cy - half, base width `size` at cy + half
        t = (dy + half) / max(size, 1e-9)
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= t * half)
    if archetype == "cross":
        arm = max(1.0, size / 4.0)
        horiz = (np.abs(dx) <= half) & (np.abs(dy) <= arm / 2.0)
        vert = (np.abs(dy) <= half) & (np.abs(dx) <= arm / 2.0)
        return horiz | vert
    if archetype == "ring":
        r2 = dx * dx + dy * dy
        inner = 0.55 * half
        return (r2 <= half * half) & (r2 >= inner * inner)
    if archetype == "bar":
        bh = max(1.0, size / 3.0)
        return (np.abs(dx) <= half) & (np.abs(dy) <= bh / 2.0)
    raise ValueError(f"unknown archetype {archetype!r}")

"""Differentiable substrate contract and independent gradient verification.

The substrate is torch; this module pins down what the rest of the code is
allowed to rely on and provides the machinery that checks it:

* ``REQUIRED_PRIMITIVES`` enumerates every differentiable operation used
  anywhere in the model. Each entry carries a small reference invocation that
  the test suite runs through ``grad_check`` in 64-bit mode at 1e-4 relative
  tolerance. Top-k / gather index selection is non-differentiable by contract.
* ``bilinear_sample`` is the sampling primitive underlying deformable
  attention. Points use continuous pixel coordinates; sampling at an integer
  grid point returns that row exactly, and neighbors outside
  [0, H-1] x [0, W-1] contribute zeros.
* ``grad_check`` compares reverse-mode gradients against central finite
  differences. It is the one oracle the substrate is held to.

Also owns the raw checkpoint blob codec (little-endian, row-major, described
by a JSON-able table of {name, shape, dtype, byte_offset, byte_length}).
"""

from dataclasses import dataclass, field

import numpy as np
import torch


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(feature_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample an H x W x d feature map at continuous pixel points.

    points: (..., 2) tensor of (x, y) pixel coordinates; x indexes W, y
    indexes H. Returns a (..., d) tensor. Each sample is the bilinear blend
    of the 4 surrounding grid values; neighbors falling outside the valid
    grid contribute zero (the sample fades to zero rather than clamping).
    """
    if feature_map.ndim != 3:
        raise ValueError(f"feature_map must be H x W x d, got {tuple(feature_map.shape)}")
    h, w, d = feature_map.shape
    pts = points.reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    tx = x - x0
    ty = y - y0

    out = feature_map.new_zeros(pts.shape[0], d)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0.long() + dx
            yi = y0.long() + dy
            wgt = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = xi.clamp(0, w - 1)
            yi_c = yi.clamp(0, h - 1)
            vals = feature_map[yi_c, xi_c]
            out = out + torch.where(valid, wgt, torch.zeros_like(wgt)).unsqueeze(-1) * vals
    return out.reshape(*points.shape[:-1], d)


def bilinear_sample_batched(value: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Batched variant used by deformable attention.

    value: (B, H, W, d); points: (B, ..., 2) in pixel coordinates.
    Returns (B, ..., d). Same out-of-range-is-zero convention as
    ``bilinear_sample``.
    """
    b, h, w, d = value.shape
    pts = points.reshape(b, -1, 2)
    n = pts.shape[1]
    x, y = pts[..., 0], pts[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    tx = x - x0
    ty = y - y0

    flat = value.reshape(b * h * w, d)
    base = (torch.arange(b, device=value.device) * (h * w)).unsqueeze(1)
    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0.long() + dx
            yi = y0.long() + dy
            wgt = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            rows = (base + yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(-1)
            vals = flat.index_select(0, rows).reshape(b, n, d)
            term = (wgt * valid.to(wgt.dtype)).unsqueeze(-1) * vals
            out = term if out is None else out + term
    return out.reshape(*points.shape[:-1], d)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Outcome of one reverse-mode vs finite-difference comparison."""

    max_abs_err: float
    max_rel_err: float
    per_parameter: dict = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1.0)
    return abs(a - b) / denom


def grad_check(fn, params, eps: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None, seed: int = 0) -> GradReport:
    """Compare autograd gradients of a scalar function against central differences.

    fn: callable taking no arguments, reading the (leaf, requires_grad)
    tensors in ``params`` and returning a scalar tensor. ``params`` is a dict
    name -> tensor or an iterable of (name, tensor) pairs.

    For large parameters ``max_entries_per_param`` limits the finite-difference
    probes to a deterministic random subset of entries per tensor.

    Raises FloatingPointError if the function value or any gradient is
    non-finite.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = list(params)

    for _, p in items:
        if p.grad is not None:
            p.grad = None
    value = fn()
    if value.numel() != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not torch.isfinite(value):
        raise FloatingPointError("function value is non-finite")
    value.backward()

    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    per_param = {}
    for name, p in items:
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(grad).all():
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        if not p.is_contiguous():
            raise ValueError(f"grad_check requires contiguous parameters ({name})")
        flat = p.detach().view(-1)
        n = flat.numel()
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        p_abs = 0.0
        p_rel = 0.0
        gflat = grad.reshape(-1)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite probe value for {name}[{i}]")
            fd = (f_plus - f_minus) / (2 * eps)
            an = gflat[i].item()
            p_abs = max(p_abs, abs(fd - an))
            p_rel = max(p_rel, _rel_err(fd, an))
        per_param[name] = {"max_abs_err": p_abs, "max_rel_err": p_rel, "checked": int(len(idx))}
        max_abs = max(max_abs, p_abs)
        max_rel = max(max_rel, p_rel)
    return GradReport(max_abs_err=max_abs, max_rel_err=max_rel, per_parameter=per_param)


# ---------------------------------------------------------------------------
# required primitive contract
# ---------------------------------------------------------------------------

def _ref_attention(q, k, v):
    d = q.shape[-1]
    attn = torch.softmax(q @ k.transpose(-1, -2) / d ** 0.5, dim=-1)
    return attn @ v


def required_primitives():
    """Reference invocations for every differentiable primitive in use.

    Returns name -> (fn, param dict builder). The test suite runs each
    through grad_check in float64. top-k/gather index selection is listed for
    completeness but its index path is non-differentiable by contract (only
    the gathered values carry gradient).
    """
    g = torch.Generator().manual_seed(1234)

    def t(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)

    specs = {
        "matmul": (lambda a, b: (a @ b).sum(), {"a": t(4, 5), "b": t(5, 3)}),
        "conv2d": (
            lambda x, w, bias: torch.nn.functional.conv2d(x, w, bias, stride=2, padding=1).sum(),
            {"x": t(1, 2, 8, 8), "w": t(3, 2, 3, 3), "bias": t(3)},
        ),
        "add": (lambda a, b: (a + b).pow(2).sum(), {"a": t(6), "b": t(6)}),
        "mul": (lambda a, b: (a * b).sum(), {"a": t(6), "b": t(6)}),
        "exp": (lambda a: a.exp().sum(), {"a": t(6)}),
        "log": (lambda a: (a.pow(2) + 1.0).log().sum(), {"a": t(6)}),
        "sigmoid": (lambda a: a.sigmoid().sum(), {"a": t(6)}),
        "softmax": (lambda a: (torch.softmax(a, dim=-1) * torch.arange(5.0, dtype=torch.float64)).sum(),
                    {"a": t(3, 5)}),
        "layer_norm": (
            lambda x, w, b: (torch.nn.functional.layer_norm(x, (6,), w, b) * torch.arange(6.0, dtype=torch.float64)).sum(),
            {"x": t(4, 6), "w": t(6), "b": t(6)},
        ),
        "attention": (
            lambda q, k, v: (_ref_attention(q, k, v) * torch.arange(4.0, dtype=torch.float64)).sum(),
            {"q": t(3, 4), "k": t(3, 4), "v": t(3, 4)},
        ),
        "gather_topk_values": (
            lambda x: torch.gather(x, 0, torch.topk(x.detach(), 3, dim=0).indices).sum(),
            {"x": t(8)},
        ),
        "bilinear_sample": (
            lambda fmap, pts: (bilinear_sample(fmap, pts) * torch.arange(3.0, dtype=torch.float64)).sum(),
            {"fmap": t(5, 4, 3), "pts": t(7, 2) * 2.0 + 1.5},
        ),
    }
    out = {}
    for name, (fn, tensors) in specs.items():
        tensors = {k: v.detach().clone().requires_grad_(True) for k, v in tensors.items()}
        out[name] = (lambda fn=fn, tensors=tensors: fn(**tensors), tensors)
    return out


# ---------------------------------------------------------------------------
# checkpoint blob codec
# ---------------------------------------------------------------------------

_DTYPES = {"f4": "<f4", "f8": "<f8", "u8": "u1", "i8": "<i8"}


def write_blob(entries):
    """Pack named arrays into one blob.

    entries: iterable of (name, numpy array). Returns (blob bytes, table)
    where table is a list of manifest dicts {name, shape, dtype, byte_offset,
    byte_length}. Arrays are stored row-major little-endian; float64 inputs
    keep full precision with dtype "f8", float32 as "f4".
    """
    parts = []
    table = []
    offset = 0
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            code = "f8"
        elif arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype == np.uint8:
            code = "u8"
        elif arr.dtype == np.int64:
            code = "i8"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(_DTYPES[code]).tobytes(order="C")
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        parts.append(raw)
        offset += len(raw)
    return b"".join(parts), table


def read_blob(blob: bytes, table):
    """Inverse of write_blob. Returns dict name -> numpy array."""
    out = {}
    for entry in table:
        code = entry["dtype"]
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code!r} for {entry['name']}")
        start = entry["byte_offset"]
        end = start + entry["byte_length"]
        if end > len(blob):
            raise ValueError(f"blob too short for {entry['name']}")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPES[code]).reshape(entry["shape"])
        out[entry["name"]] = arr.copy()
    return out

"""Sequence-level embedding head.

Frame features are collapsed over time by elementwise max, split into
horizontal strips pooled with max+mean, and each strip is mapped by its
own fully connected layer. No normalization is applied inside the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, accumulate_grad, linear, narrow, reshape, stack


@dataclass(frozen=True)
class HeadConfig:
    strips: int = 16
    embed_dim: int = 256
    include_classifier: bool = False
    num_classes: int = 0

    def __post_init__(self):
        if self.strips < 1:
            raise ValueError(f"HeadConfig: strips must be >= 1, got {self.strips}")
        if self.embed_dim < 1:
            raise ValueError(
                f"HeadConfig: embed_dim must be >= 1, got {self.embed_dim}")
        if self.include_classifier and self.num_classes < 2:
            raise ValueError(
                "HeadConfig: classifier needs num_classes >= 2, got "
                f"{self.num_classes}")


@dataclass
class Embedding:
    """One sequence's strip embedding matrix plus identity bookkeeping."""

    matrix: np.ndarray  # [strips, embed_dim]
    subject_id: str
    sequence_id: str

    def flat(self) -> np.ndarray:
        return self.matrix.reshape(-1)


def temporal_max_pool(x: Tensor, seq_len: int | None = None) -> Tensor:
    """Elementwise max over the time axis.

    x is [N, C, H, W] for a single sequence (returns [C, H, W]); with
    seq_len given, axis 0 is B*N and each length-N block pools
    independently (returns [B, C, H, W]). Ties route the gradient to the
    earliest frame.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"temporal_max_pool: expected 4D input, got {xd.shape}")
    total = xd.shape[0]
    if total < 1:
        raise ValueError("temporal_max_pool: empty time axis")
    squeeze = seq_len is None
    n = total if squeeze else int(seq_len)
    if n < 1 or total % n != 0:
        raise ValueError(
            f"temporal_max_pool: axis 0 ({total}) not a multiple of "
            f"seq_len {n}")
    b = total // n
    v = xd.reshape(b, n, *xd.shape[1:])
    arg = v.argmax(axis=1)
    out = np.take_along_axis(v, arg[:, None], axis=1)[:, 0]

    def bw(g):
        gfull = np.zeros_like(v)
        gb = g.reshape(out.shape)
        np.put_along_axis(gfull, arg[:, None], gb[:, None], axis=1)
        accumulate_grad(x, gfull.reshape(xd.shape), own=True)

    result = Tensor.from_op(out, (x,), bw)
    if squeeze:
        result = reshape(result, out.shape[1:])
    return result


def horizontal_pyramid_pool(x: Tensor, strips: int) -> Tensor:
    """Per-strip max pooling plus mean pooling over a feature map.

    x is [C, H, W] (returns [strips, C]) or [B, C, H, W] (returns
    [B, strips, C]). H must be divisible by the strip count; each strip
    vector is maxpool(strip) + meanpool(strip) over its H/strips x W cells.
    """
    xd = x.data
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4:
        raise ValueError(
            f"horizontal_pyramid_pool: expected [C,H,W] or [B,C,H,W], got "
            f"{x.shape}")
    b, c, h, w = xd.shape
    if strips < 1 or h % strips != 0:
        raise ValueError(
            f"horizontal_pyramid_pool: height {h} not divisible by "
            f"{strips} strips")
    hs = h // strips
    v = xd.reshape(b, c, strips, hs * w)
    arg = v.argmax(axis=3)
    mx = np.take_along_axis(v, arg[..., None], axis=3)[..., 0]
    mean = v.mean(axis=3)
    out = np.ascontiguousarray((mx + mean).transpose(0, 2, 1))  # [B, s, C]

    cells = hs * w

    def bw(g):
        gb = g.reshape(out.shape).transpose(0, 2, 1)  # [B, C, s]
        dv = np.broadcast_to(gb[..., None] / cells, v.shape).copy()
        np.put_along_axis(dv, arg[..., None],
                          np.take_along_axis(dv, arg[..., None], axis=3)
                          + gb[..., None], axis=3)
        g_in = dv.reshape(b, c, h, w)
        accumulate_grad(x, g_in if not squeeze else g_in[0], own=not squeeze)

    result = Tensor.from_op(out, (x,), bw)
    if squeeze:
        result = reshape(result, out.shape[1:])
    return result


def project(strips: Tensor, weights: list[tuple[Tensor, Tensor | None]]) -> Tensor:
    """Map strip i by its own fully connected layer (no sharing).

    strips is [s, C] or [B, s, C]; weights holds s (weight, bias) pairs
    with weight [d, C]. Returns [s, d] or [B, s, d].
    """
    squeeze = strips.ndim == 2
    sx = reshape(strips, (1,) + strips.shape) if squeeze else strips
    b, s, c = sx.shape
    if len(weights) != s:
        raise ValueError(
            f"project: got {len(weights)} strip layers for {s} strips")
    rows = []
    for i, (w, bias) in enumerate(weights):
        xi = reshape(narrow(sx, 1, i, 1), (b, c))
        rows.append(linear(xi, w, bias))
    out = stack(rows, axis=1)  # [B, s, d]
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out

"""Multi-hop temporal switch: channel exchange between frames.

A switch with hop j rebuilds each frame's feature map by pulling its
leading channel group from the frame j steps back (and, in the
bi-directional style, its trailing group from the frame j steps ahead)
while the middle group stays put. Convolving the switched copies with
the layer's own 2D kernel and summing over hops gives temporal modeling
at several scales without any extra parameters: both branches reuse the
same weight tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import Tensor, accumulate_grad, add, conv2d, leaky_relu, mul

DIRECTIONS = ("uni", "bi")
BOUNDARIES = ("zero_fill", "replicate")


@dataclass(frozen=True)
class MTSConfig:
    """Switch operator settings.

    hops: temporal strides of the switch branches, e.g. (1, 3).
    direction: "uni" pulls only from past frames; "bi" splits the
        switched channels evenly between past and future sources.
    proportion: fraction of channels exchanged, as an exact rational.
    boundary: what fills channels sourced from frames outside the
        sequence. "zero_fill" uses zeros, "replicate" clamps the frame
        index into range.
    """

    hops: tuple[int, ...] = (1, 3)
    direction: str = "bi"
    proportion: Fraction = field(default_factory=lambda: Fraction(1, 4))
    boundary: str = "zero_fill"

    def __post_init__(self):
        hops = tuple(sorted(set(int(j) for j in self.hops)))
        object.__setattr__(self, "hops", hops)
        object.__setattr__(self, "proportion", Fraction(self.proportion))
        if not self.hops:
            raise ValueError("MTSConfig: hop set must be non-empty")
        if any(j < 1 for j in self.hops):
            raise ValueError(f"MTSConfig: hops must be >= 1, got {self.hops}")
        if self.direction not in DIRECTIONS:
            raise ValueError(
                f"MTSConfig: direction must be one of {DIRECTIONS}, "
                f"got {self.direction!r}")
        if not (0 <= self.proportion <= 1):
            raise ValueError(
                f"MTSConfig: proportion must be in [0, 1], got {self.proportion}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(
                f"MTSConfig: boundary must be one of {BOUNDARIES}, "
                f"got {self.boundary!r}")

    @property
    def partition_parts(self) -> int:
        """Number of equal channel parts implied by the proportion.

        Bi-direction exchanges the first and last of m parts (2/m of the
        channels), uni-direction only the first (1/m).
        """
        if self.proportion == 0:
            return 1
        per_group = (self.proportion / 2 if self.direction == "bi"
                     else self.proportion)
        m = 1 / per_group
        return int(m) if m.denominator == 1 else -1

    def switched_counts(self, channels: int) -> tuple[int, int]:
        """(past_group, future_group) channel counts for a given width."""
        total = int(channels * self.proportion)  # floor
        if self.direction == "bi":
            half = total // 2
            return half, half
        return total, 0

    def validate_channels(self, channels: int) -> None:
        """Reject widths the proportion cannot split into whole groups."""
        if self.proportion == 0:
            return
        exact = self.proportion * channels
        if exact.denominator != 1:
            raise ValueError(
                f"switch proportion {self.proportion} does not divide "
                f"{channels} channels into a whole switched count")
        total = int(exact)
        if total < 1:
            raise ValueError(
                f"switch proportion {self.proportion} selects zero of "
                f"{channels} channels")
        if self.direction == "bi" and total % 2 != 0:
            raise ValueError(
                f"bi-direction switch needs an even switched count, got "
                f"{total} of {channels} channels")


def switch_channels(x: Tensor, hop: int, direction: str = "bi",
                    proportion: Fraction | float = Fraction(1, 4),
                    boundary: str = "zero_fill",
                    seq_len: int | None = None) -> Tensor:
    """Exchange leading/trailing channel groups between frames.

    x holds frames along axis 0 as [N, c, h, w]; with `seq_len` given,
    axis 0 is B*N and the switch acts independently within each length-N
    block (sequences in a batch never mix). For frame t the first group
    comes from frame t-hop and, in bi-direction, the last group from
    frame t+hop. Out-of-range sources follow the boundary policy. The
    input is never mutated; a proportion of 0 returns the input as-is.
    """
    if hop < 1:
        raise ValueError(f"switch_channels: hop must be >= 1, got {hop}")
    if direction not in DIRECTIONS:
        raise ValueError(f"switch_channels: unknown direction {direction!r}")
    if boundary not in BOUNDARIES:
        raise ValueError(f"switch_channels: unknown boundary {boundary!r}")
    r = Fraction(proportion)
    if r == 0:
        return x
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"switch_channels: expected [N,c,h,w], got {xd.shape}")
    total_frames, c = xd.shape[0], xd.shape[1]
    n = total_frames if seq_len is None else int(seq_len)
    if n < 1 or total_frames % n != 0:
        raise ValueError(
            f"switch_channels: axis 0 ({total_frames}) is not a multiple "
            f"of seq_len {n}")
    g_past = int(c * r)  # floor
    if g_past < 1:
        raise ValueError(
            f"switch_channels: proportion {r} selects zero of {c} channels")
    if direction == "bi":
        if g_past % 2 != 0:
            raise ValueError(
                f"switch_channels: bi-direction needs an even switched "
                f"count, got {g_past} of {c} channels")
        g_past, g_fut = g_past // 2, g_past // 2
    else:
        g_fut = 0

    b = total_frames // n
    v = xd.reshape(b, n, *xd.shape[1:])
    out = v.copy()
    t = np.arange(n)
    replicate = boundary == "replicate"

    src_p = t - hop
    if replicate:
        out[:, :, :g_past] = v[:, np.clip(src_p, 0, n - 1), :g_past]
    else:
        valid = src_p >= 0
        out[:, ~valid, :g_past] = 0
        out[:, valid, :g_past] = v[:, src_p[valid], :g_past]
    if g_fut:
        src_f = t + hop
        if replicate:
            out[:, :, c - g_fut:] = v[:, np.clip(src_f, 0, n - 1), c - g_fut:]
        else:
            valid = src_f <= n - 1
            out[:, ~valid, c - g_fut:] = 0
            out[:, valid, c - g_fut:] = v[:, src_f[valid], c - g_fut:]
    out = out.reshape(xd.shape)

    def bw(g):
        gv = g.reshape(b, n, *xd.shape[1:])
        gin = gv.copy()
        gin[:, :, :g_past] = 0
        if g_fut:
            gin[:, :, c - g_fut:] = 0
        for tt in range(n):
            sp = tt - hop
            if replicate:
                sp = min(max(sp, 0), n - 1)
            if 0 <= sp < n:
                gin[:, sp, :g_past] += gv[:, tt, :g_past]
            if g_fut:
                sf = tt + hop
                if replicate:
                    sf = min(max(sf, 0), n - 1)
                if 0 <= sf < n:
                    gin[:, sf, c - g_fut:] += gv[:, tt, c - g_fut:]
        accumulate_grad(x, gin.reshape(xd.shape), own=True)

    return Tensor.from_op(out, (x,), bw)


def mts_forward(x: Tensor, weight: Tensor, bias: Tensor | None,
                cfg: MTSConfig, stride: int = 1, padding: int = 0,
                seq_len: int | None = None) -> Tensor:
    """Sum of convolutions over per-hop switched copies of the input.

    Each hop switches a fresh copy of x and convolves it with the shared
    weight; outputs are summed in ascending hop order so results are
    reproducible bit for bit.
    """
    out = None
    for j in cfg.hops:
        switched = switch_channels(x, j, cfg.direction, cfg.proportion,
                                   cfg.boundary, seq_len=seq_len)
        y = conv2d(switched, weight, bias, stride=stride, padding=padding)
        out = y if out is None else add(out, y)
    return out


def extractor_block(x: Tensor, weight: Tensor, bias: Tensor | None,
                    cfg: MTSConfig | None, stride: int = 1, padding: int = 0,
                    slope: float = 0.01, seq_len: int | None = None,
                    include_spatial: bool = True) -> Tensor:
    """One spatial+temporal extractor stage.

    Adds the switch branch output to a plain convolution of the same
    input (both share `weight`) and applies LeakyReLU after the sum.
    With cfg None the block degenerates to the spatial-only baseline,
    LeakyReLU(conv(x)). `include_spatial=False` keeps only the switch
    branches (an ablation mode).

    Because every branch convolves with the same weight, the branch sum
    is evaluated as one convolution of the summed branch inputs (with
    the bias counted once per branch); convolution is linear, so this
    computes the same function with a third of the kernel work.
    """
    if cfg is None:
        if not include_spatial:
            raise ValueError("extractor_block: no branches selected")
        return leaky_relu(conv2d(x, weight, bias, stride=stride,
                                 padding=padding), slope)
    total = x if include_spatial else None
    for j in cfg.hops:
        switched = switch_channels(x, j, cfg.direction, cfg.proportion,
                                   cfg.boundary, seq_len=seq_len)
        total = switched if total is None else add(total, switched)
    branches = len(cfg.hops) + (1 if include_spatial else 0)
    scaled_bias = None if bias is None else mul(bias, float(branches))
    y = conv2d(total, weight, scaled_bias, stride=stride, padding=padding)
    return leaky_relu(y, slope)

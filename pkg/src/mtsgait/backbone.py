"""Frame-level CNN: initial conv plus stacked extractor blocks.

The backbone runs each frame through shared 2D convolutions; layers
flagged for temporal switching add the multi-hop branch on top of the
spatial one with the same weights, so enabling it never changes the
parameter table. Spatial downsampling is a 2x2 max pool after selected
layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _toml, checkpoint
from .head import HeadConfig, horizontal_pyramid_pool, project, temporal_max_pool
from .mts import MTSConfig, extractor_block
from .tensor import (DEFAULT_DTYPE, Parameter, Tensor, kaiming_uniform,
                     linear, max_pool2d)

CONFIG_ENTRY = "meta.config"
META_PREFIX = ("meta.", "optim.")

POOL_KERNEL = 2


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int
    padding: int
    stride: int = 1
    mts: MTSConfig | None = None
    pool_after: bool = False


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    head: HeadConfig = field(default_factory=HeadConfig)
    input_hw: tuple[int, int] = (64, 44)
    activation_slope: float = 0.01
    preset: str | None = None


def _layer_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(channels, h, w) after each layer including its pool."""
    h, w = config.input_hw
    shapes = []
    for i, layer in enumerate(config.layers):
        a, p, s = layer.kernel, layer.padding, layer.stride
        if h + 2 * p < a or w + 2 * p < a:
            raise ValueError(
                f"layer {i}: kernel {a} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        h = (h + 2 * p - a) // s + 1
        w = (w + 2 * p - a) // s + 1
        if layer.pool_after:
            h = (h - POOL_KERNEL) // POOL_KERNEL + 1
            w = (w - POOL_KERNEL) // POOL_KERNEL + 1
        shapes.append((layer.out_channels, h, w))
    return shapes


def feature_shape(config: ModelConfig) -> tuple[int, int, int]:
    """Final (channels, h, w) the head sees."""
    return _layer_shapes(config)[-1]


def validate_config(config: ModelConfig) -> None:
    if not config.layers:
        raise ValueError("model config has no layers")
    cin = 1
    for i, layer in enumerate(config.layers):
        if layer.mts is not None:
            try:
                layer.mts.validate_channels(cin)
            except ValueError as exc:
                raise ValueError(f"layer {i}: {exc}") from exc
        cin = layer.out_channels
    c, h, w = feature_shape(config)
    if h % config.head.strips != 0:
        raise ValueError(
            f"final feature height {h} not divisible by "
            f"{config.head.strips} strips")


class Model:
    """Parameter table plus the forward passes that use it."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _strip_fcs(self) -> list[tuple[Parameter, Parameter]]:
        s = self.config.head.strips
        return [(self.params[f"head.fc{i}.weight"], self.params[f"head.fc{i}.bias"])
                for i in range(s)]

    def forward(self, frames: Tensor, seq_len: int | None = None) -> Tensor:
        """Per-frame feature maps for [N, 1, H, W] input.

        The time length is preserved; with seq_len given, axis 0 is B*N
        and temporal switching stays within each length-N block.
        """
        h, w = self.config.input_hw
        if frames.ndim != 4 or frames.shape[1] != 1:
            raise ValueError(
                f"forward: expected [N, 1, {h}, {w}], got {frames.shape}")
        if frames.shape[2] != h or frames.shape[3] != w:
            raise ValueError(
                f"forward: expected {h}x{w} frames, got "
                f"{frames.shape[2]}x{frames.shape[3]} (no implicit resize)")
        x = frames
        for i, layer in enumerate(self.config.layers):
            weight = self.params[f"backbone.layer{i}.weight"]
            bias = self.params[f"backbone.layer{i}.bias"]
            x = extractor_block(x, weight, bias, layer.mts,
                                stride=layer.stride, padding=layer.padding,
                                slope=self.config.activation_slope,
                                seq_len=seq_len)
            if layer.pool_after:
                x = max_pool2d(x, POOL_KERNEL, POOL_KERNEL)
        return x

    def embed(self, frames: Tensor, seq_len: int | None = None) -> Tensor:
        """Strip embeddings: [s, d] for one sequence, [B, s, d] batched."""
        feats = self.forward(frames, seq_len=seq_len)
        pooled = temporal_max_pool(feats, seq_len=seq_len)
        strips = horizontal_pyramid_pool(pooled, self.config.head.strips)
        return project(strips, self._strip_fcs())

    def logits(self, embeddings: Tensor) -> Tensor:
        """Identity logits averaged over per-strip classifiers, [B, classes]."""
        head = self.config.head
        if not head.include_classifier:
            raise ValueError("model was built without a classifier head")
        if embeddings.ndim != 3:
            raise ValueError(
                f"logits: expected [B, s, d], got {embeddings.shape}")
        b, s, d = embeddings.shape
        total = None
        for i in range(s):
            strip = embeddings.narrow(1, i, 1).reshape(b, d)
            w = self.params[f"head.cls{i}.weight"]
            bias = self.params[f"head.cls{i}.bias"]
            li = linear(strip, w, bias)
            total = li if total is None else total + li
        return total / s


def build(config: ModelConfig, seed: int, dtype=DEFAULT_DTYPE) -> Model:
    """Deterministically initialize a model for the given seed.

    Conv and FC weights use fan-in Kaiming-uniform draws in a fixed
    order; biases start at zero.
    """
    validate_config(config)
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def register(name: str, data: np.ndarray) -> None:
        params[name] = Parameter(data, name=name, dtype=dtype)

    cin = 1
    for i, layer in enumerate(config.layers):
        a = layer.kernel
        fan_in = cin * a * a
        register(f"backbone.layer{i}.weight",
                 kaiming_uniform(rng, (layer.out_channels, cin, a, a), fan_in,
                                 dtype))
        register(f"backbone.layer{i}.bias",
                 np.zeros(layer.out_channels, dtype=dtype))
        cin = layer.out_channels

    c_last, _, _ = feature_shape(config)
    head = config.head
    for i in range(head.strips):
        register(f"head.fc{i}.weight",
                 kaiming_uniform(rng, (head.embed_dim, c_last), c_last, dtype))
        register(f"head.fc{i}.bias", np.zeros(head.embed_dim, dtype=dtype))
    if head.include_classifier:
        for i in range(head.strips):
            register(f"head.cls{i}.weight",
                     kaiming_uniform(rng, (head.num_classes, head.embed_dim),
                                     head.embed_dim, dtype))
            register(f"head.cls{i}.bias",
                     np.zeros(head.num_classes, dtype=dtype))
    return Model(config, params)


def count_parameters(model: Model) -> int:
    return sum(p.size for p in model.params.values())


# ---- cost model --------------------------------------------------------------


@dataclass(frozen=True)
class LayerCost:
    index: int
    c_in: int
    c_out: int
    kernel: int
    out_h: int
    out_w: int
    hops: int                 # number of switch branches (0 when disabled)
    macs_spatial: int         # per-frame MACs of one plain conv
    macs_total: int           # per-frame MACs including switch branches
    macs_3d_reference: int    # per-frame MACs of a kernel^3 3D conv
    factor_total: int         # a^2 * (hops + 1)
    factor_3d: int            # a^3


@dataclass(frozen=True)
class CostReport:
    layers: tuple[LayerCost, ...]
    total_macs: int
    total_macs_3d: int

    def text_table(self) -> str:
        header = (f"{'layer':>5} {'cin':>5} {'cout':>5} {'k':>3} {'out':>9} "
                  f"{'hops':>4} {'macs':>14} {'macs3d':>14} "
                  f"{'factor':>7} {'factor3d':>8}")
        lines = [header]
        for l in self.layers:
            lines.append(
                f"{l.index:>5} {l.c_in:>5} {l.c_out:>5} {l.kernel:>3} "
                f"{l.out_h:>4}x{l.out_w:<4} {l.hops:>4} {l.macs_total:>14} "
                f"{l.macs_3d_reference:>14} {l.factor_total:>7} {l.factor_3d:>8}")
        lines.append(f"total MACs/frame {self.total_macs}  "
                     f"3D reference {self.total_macs_3d}")
        return "\n".join(lines)


def flops_estimate(config: ModelConfig) -> CostReport:
    """Per-layer multiply-accumulate counts and the 3D-conv comparison.

    A switch-enabled layer convolves hops+1 copies of its input with the
    shared kernel, so its cost is (hops+1) times the plain conv; the 3D
    reference for the same shapes carries a factor of kernel instead.
    """
    validate_config(config)
    h, w = config.input_hw
    cin = 1
    rows = []
    for i, layer in enumerate(config.layers):
        a, p, s = layer.kernel, layer.padding, layer.stride
        oh = (h + 2 * p - a) // s + 1
        ow = (w + 2 * p - a) // s + 1
        spatial = oh * ow * a * a * cin * layer.out_channels
        k = len(layer.mts.hops) if layer.mts is not None else 0
        rows.append(LayerCost(
            index=i, c_in=cin, c_out=layer.out_channels, kernel=a,
            out_h=oh, out_w=ow, hops=k,
            macs_spatial=spatial,
            macs_total=spatial * (k + 1),
            macs_3d_reference=spatial * a,
            factor_total=a * a * (k + 1),
            factor_3d=a * a * a,
        ))
        h, w = oh, ow
        if layer.pool_after:
            h = (h - POOL_KERNEL) // POOL_KERNEL + 1
            w = (w - POOL_KERNEL) // POOL_KERNEL + 1
        cin = layer.out_channels
    return CostReport(
        layers=tuple(rows),
        total_macs=sum(r.macs_total for r in rows),
        total_macs_3d=sum(r.macs_3d_reference for r in rows),
    )


# ---- presets -----------------------------------------------------------------

_PRESPECS = {
    # name: (channels, pool_after_indices, head_strips, head_dim)
    "tiny": ((8, 16), (0, 1), 4, 64),
    "gait3d": ((64, 64, 128, 128, 256, 256), (1, 3), 16, 256),
    "grew": ((32, 32, 64, 64, 128, 128, 256, 256), (1, 3), 16, 256),
}


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESPECS)


_DEFAULT_MTS = MTSConfig()


def preset_config(name: str, mts: MTSConfig | None = _DEFAULT_MTS,
                  include_classifier: bool = False,
                  num_classes: int = 0) -> ModelConfig:
    """Build a named architecture, optionally with temporal switching.

    `mts` defaults to the standard switch settings; pass None for the
    spatial-only baseline. The first layer is a plain 5x5 conv; every
    later layer is an extractor block carrying the switch when enabled.
    """
    if name not in _PRESPECS:
        raise ValueError(
            f"unknown preset {name!r}, expected one of {tuple(_PRESPECS)}")
    channels, pool_idx, strips, dim = _PRESPECS[name]
    layers = []
    for i, c in enumerate(channels):
        kernel = 5 if i == 0 else 3
        layers.append(LayerSpec(
            out_channels=c, kernel=kernel, padding=kernel // 2, stride=1,
            mts=mts if i > 0 else None,
            pool_after=i in pool_idx,
        ))
    head = HeadConfig(strips=strips, embed_dim=dim,
                      include_classifier=include_classifier,
                      num_classes=num_classes)
    return ModelConfig(layers=tuple(layers), head=head, preset=name)


# ---- config (de)serialization --------------------------------------------------


def model_config_to_dict(config: ModelConfig) -> dict:
    d: dict = {
        "input_height": config.input_hw[0],
        "input_width": config.input_hw[1],
        "activation_slope": config.activation_slope,
    }
    if config.preset:
        d["preset"] = config.preset
    mts_cfgs = [l.mts for l in config.layers if l.mts is not None]
    if mts_cfgs:
        cfg = mts_cfgs[0]
        d["mts"] = {
            "hops": list(cfg.hops),
            "direction": cfg.direction,
            "proportion": str(cfg.proportion),
            "boundary": cfg.boundary,
        }
    d["head"] = {
        "strips": config.head.strips,
        "embed_dim": config.head.embed_dim,
        "include_classifier": config.head.include_classifier,
        "num_classes": config.head.num_classes,
    }
    d["layers"] = [{
        "out_channels": l.out_channels,
        "kernel": l.kernel,
        "padding": l.padding,
        "stride": l.stride,
        "mts": l.mts is not None,
        "pool_after": l.pool_after,
    } for l in config.layers]
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    mts_cfg = None
    if "mts" in d:
        m = d["mts"]
        mts_cfg = MTSConfig(
            hops=tuple(m.get("hops", (1, 3))),
            direction=m.get("direction", "bi"),
            proportion=Fraction(str(m.get("proportion", "1/4"))),
            boundary=m.get("boundary", "zero_fill"),
        )
    h = d.get("head", {})
    head = HeadConfig(
        strips=h.get("strips", 16),
        embed_dim=h.get("embed_dim", 256),
        include_classifier=h.get("include_classifier", False),
        num_classes=h.get("num_classes", 0),
    )
    layers = []
    for l in d["layers"]:
        uses_mts = l.get("mts", False)
        if uses_mts and mts_cfg is None:
            mts_cfg = MTSConfig()
        layers.append(LayerSpec(
            out_channels=l["out_channels"],
            kernel=l["kernel"],
            padding=l["padding"],
            stride=l.get("stride", 1),
            mts=mts_cfg if uses_mts else None,
            pool_after=l.get("pool_after", False),
        ))
    return ModelConfig(
        layers=tuple(layers),
        head=head,
        input_hw=(d.get("input_height", 64), d.get("input_width", 44)),
        activation_slope=d.get("activation_slope", 0.01),
        preset=d.get("preset"),
    )


# ---- persistence ----------------------------------------------------------------


def save_model(path, model: Model,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters plus the embedded model config (and extras)."""
    table: dict[str, np.ndarray] = {name: p.data for name, p in
                                    model.params.items()}
    table[CONFIG_ENTRY] = checkpoint.encode_text(
        _toml.dumps(model_config_to_dict(model.config)))
    if extra:
        for name, arr in extra.items():
            if not name.startswith(META_PREFIX):
                raise ValueError(
                    f"extra checkpoint entry {name!r} must be namespaced "
                    f"under one of {META_PREFIX}")
            table[name] = arr
    checkpoint.save_table(path, table)


def load_model(path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, extra entries)."""
    table = checkpoint.load_table(path)
    if CONFIG_ENTRY not in table:
        raise checkpoint.CheckpointError(
            f"{path}: missing {CONFIG_ENTRY} entry")
    config = model_config_from_dict(
        _toml.loads(checkpoint.decode_text(table.pop(CONFIG_ENTRY))))
    extra = {k: table.pop(k) for k in list(table)
             if k.startswith(META_PREFIX)}
    model = build(config, seed=0)
    expected = set(model.params)
    got = set(table)
    if expected != got:
        missing = sorted(expected - got)
        surplus = sorted(got - expected)
        raise checkpoint.CheckpointError(
            f"{path}: parameter table mismatch (missing {missing}, "
            f"unexpected {surplus})")
    for name, arr in table.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise checkpoint.CheckpointError(
                f"{path}: {name} has shape {arr.shape}, expected "
                f"{p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return model, extra

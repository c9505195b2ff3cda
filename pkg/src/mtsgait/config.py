"""Run configuration: one TOML file wiring every module together.

A `[preset]` section picks a named architecture and training recipe;
explicit sections override individual keys. Unknown keys are rejected
rather than ignored, and the fully resolved configuration can be echoed
back out as TOML that reproduces the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import _toml, backbone
from .data import SplitSpec
from .head import HeadConfig
from .losses import LossConfig
from .mts import MTSConfig
from .sampling import BatchSpec, SamplerConfig
from .trainer import TrainConfig, train_preset


class ConfigError(ValueError):
    pass


_LAYER_SCHEMA = {"out_channels": int, "kernel": int, "padding": int,
                 "stride": int, "mts": bool, "pool_after": bool}

_SCHEMA: dict = {
    "preset": {"model": str, "train": str},
    "model": {
        "input_height": int, "input_width": int, "activation_slope": float,
        "mts": {"enabled": bool, "hops": list, "direction": str,
                "proportion": (str, float, int), "boundary": str},
        "head": {"strips": int, "embed_dim": int},
        "layers": [_LAYER_SCHEMA],
    },
    "sampler": {"strategy": str, "frames": int},
    "batch": {"p": int, "k": int},
    "loss": {"margin": float, "alpha": float, "beta": float},
    "train": {"optimizer": str, "lr": float, "lr_milestones": list,
              "lr_gamma": float, "weight_decay": float, "iterations": int,
              "momentum": float, "checkpoint_interval": int, "seed": int},
    "data": {"train_seqs": int, "protocol": str, "max_frames": int},
}


def _check_keys(section: dict, schema: dict, path: str) -> None:
    for key, value in section.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            _check_keys(value, expected, where)
        elif isinstance(expected, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be an array")
            if expected and isinstance(expected[0], dict):
                for i, entry in enumerate(value):
                    if not isinstance(entry, dict):
                        raise ConfigError(f"{where}[{i}] must be a table")
                    _check_keys(entry, expected[0], f"{where}[{i}]")
        else:
            types = expected if isinstance(expected, tuple) else (expected,)
            if float in types:
                types = types + (int,)
            if not isinstance(value, types) or isinstance(value, bool) and bool not in types:
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(
                    f"{where} must be {names}, got {type(value).__name__}")


@dataclass(frozen=True)
class RunConfig:
    model: backbone.ModelConfig   # classifier-free template
    sampler: SamplerConfig
    batch: BatchSpec
    loss: LossConfig
    train: TrainConfig
    split: SplitSpec
    seed: int = 0
    max_frames: int = 720


_TRAIN_DEFAULT_SAMPLING = {
    "desk": (SamplerConfig("noncyclic", 8), BatchSpec(4, 4)),
    "gait3d": (SamplerConfig("noncyclic", 30), BatchSpec(32, 4)),
    "grew": (SamplerConfig("noncyclic", 30), BatchSpec(32, 4)),
}


def _parse_mts(section: dict) -> MTSConfig | None:
    if not section.get("enabled", True):
        return None
    try:
        hops = tuple(int(h) for h in section.get("hops", (1, 3)))
        proportion = Fraction(str(section.get("proportion", "1/4")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model.mts: {exc}") from exc
    return MTSConfig(
        hops=hops,
        direction=section.get("direction", "bi"),
        proportion=proportion,
        boundary=section.get("boundary", "zero_fill"),
    )


def run_config_from_dict(raw: dict) -> RunConfig:
    _check_keys(raw, _SCHEMA, "")
    preset = raw.get("preset", {})
    model_preset = preset.get("model", "tiny")
    train_preset_name = preset.get("train", "desk")
    if model_preset not in backbone.preset_names():
        raise ConfigError(
            f"preset.model must be one of {backbone.preset_names()}, got "
            f"{model_preset!r}")

    msec = dict(raw.get("model", {}))
    mts_cfg = _parse_mts(msec.get("mts", {}))
    base = backbone.preset_config(model_preset, mts=mts_cfg)
    head = base.head
    hsec = msec.get("head", {})
    head = HeadConfig(strips=hsec.get("strips", head.strips),
                      embed_dim=hsec.get("embed_dim", head.embed_dim))
    if "layers" in msec:
        layers = tuple(backbone.LayerSpec(
            out_channels=l["out_channels"],
            kernel=l["kernel"],
            padding=l["padding"],
            stride=l.get("stride", 1),
            mts=mts_cfg if l.get("mts", False) else None,
            pool_after=l.get("pool_after", False),
        ) for l in msec["layers"])
    else:
        layers = base.layers
    model_cfg = backbone.ModelConfig(
        layers=layers,
        head=head,
        input_hw=(msec.get("input_height", base.input_hw[0]),
                  msec.get("input_width", base.input_hw[1])),
        activation_slope=msec.get("activation_slope", base.activation_slope),
        preset=model_preset if "layers" not in msec else None,
    )
    try:
        backbone.validate_config(model_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    tbase = train_preset(train_preset_name)
    tsec = raw.get("train", {})
    try:
        tcfg = TrainConfig(
            optimizer=tsec.get("optimizer", tbase.optimizer),
            lr=float(tsec.get("lr", tbase.lr)),
            lr_milestones=tuple(int(m) for m in
                                tsec.get("lr_milestones",
                                         tbase.lr_milestones)),
            lr_gamma=float(tsec.get("lr_gamma", tbase.lr_gamma)),
            weight_decay=float(tsec.get("weight_decay", tbase.weight_decay)),
            iterations=tsec.get("iterations", tbase.iterations),
            momentum=float(tsec.get("momentum", tbase.momentum)),
            checkpoint_interval=tsec.get("checkpoint_interval",
                                         tbase.checkpoint_interval),
            preset=train_preset_name,
        )
        sdef, bdef = _TRAIN_DEFAULT_SAMPLING[train_preset_name]
        ssec = raw.get("sampler", {})
        sampler = SamplerConfig(strategy=ssec.get("strategy", sdef.strategy),
                                frames=ssec.get("frames", sdef.frames))
        bsec = raw.get("batch", {})
        batch = BatchSpec(p=bsec.get("p", bdef.p), k=bsec.get("k", bdef.k))
        lsec = raw.get("loss", {})
        loss = LossConfig(margin=float(lsec.get("margin", 0.2)),
                          alpha=float(lsec.get("alpha", 1.0)),
                          beta=float(lsec.get("beta", 0.1)))
        dsec = raw.get("data", {})
        split = SplitSpec(train_seqs=dsec.get("train_seqs", 0),
                          protocol=dsec.get("protocol", "gait3d"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        model=model_cfg, sampler=sampler, batch=batch, loss=loss, train=tcfg,
        split=split,
        seed=tsec.get("seed", 0),
        max_frames=dsec.get("max_frames", 720),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        raw = _toml.loads(path.read_text(encoding="utf-8"))
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return run_config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def run_config_to_dict(cfg: RunConfig, seed: int | None = None) -> dict:
    """Fully resolved config, suitable for echoing and re-loading."""
    mts_cfgs = [l.mts for l in cfg.model.layers if l.mts is not None]
    mts_section: dict = {"enabled": bool(mts_cfgs)}
    if mts_cfgs:
        m = mts_cfgs[0]
        mts_section.update(hops=list(m.hops), direction=m.direction,
                           proportion=str(m.proportion), boundary=m.boundary)
    d: dict = {
        "preset": {"train": cfg.train.preset or "desk"},
        "model": {
            "input_height": cfg.model.input_hw[0],
            "input_width": cfg.model.input_hw[1],
            "activation_slope": cfg.model.activation_slope,
            "mts": mts_section,
            "head": {"strips": cfg.model.head.strips,
                     "embed_dim": cfg.model.head.embed_dim},
        },
        "sampler": {"strategy": cfg.sampler.strategy,
                    "frames": cfg.sampler.frames},
        "batch": {"p": cfg.batch.p, "k": cfg.batch.k},
        "loss": {"margin": cfg.loss.margin, "alpha": cfg.loss.alpha,
                 "beta": cfg.loss.beta},
        "train": {
            "optimizer": cfg.train.optimizer,
            "lr": cfg.train.lr,
            "lr_milestones": list(cfg.train.lr_milestones),
            "lr_gamma": cfg.train.lr_gamma,
            "weight_decay": cfg.train.weight_decay,
            "iterations": cfg.train.iterations,
            "momentum": cfg.train.momentum,
            "checkpoint_interval": cfg.train.checkpoint_interval,
            "seed": cfg.seed if seed is None else seed,
        },
        "data": {"train_seqs": cfg.split.train_seqs,
                 "protocol": cfg.split.protocol,
                 "max_frames": cfg.max_frames},
    }
    if cfg.model.preset:
        # layers are derivable from the preset name plus the mts section
        d["preset"]["model"] = cfg.model.preset
    else:
        d["model"]["layers"] = [{
            "out_channels": l.out_channels,
            "kernel": l.kernel,
            "padding": l.padding,
            "stride": l.stride,
            "mts": l.mts is not None,
            "pool_after": l.pool_after,
        } for l in cfg.model.layers]
    return d


def echo_config(path, cfg: RunConfig, seed: int | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_toml.dumps(run_config_to_dict(cfg, seed)),
                          encoding="utf-8")


def with_classifier(model_cfg: backbone.ModelConfig,
                    num_classes: int) -> backbone.ModelConfig:
    head = dataclasses.replace(model_cfg.head, include_classifier=True,
                               num_classes=num_classes)
    return dataclasses.replace(model_cfg, head=head)

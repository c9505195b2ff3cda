"""Optimization loop: PK batches through the model with step-decay LR.

Every iteration derives its own random stream from (seed, iteration), so
resuming from a checkpoint with the same seed continues the exact run;
optimizer moments ride along inside the checkpoint under "optim." names.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone
from .losses import LossConfig, batch_all_triplet, combine, cross_entropy
from .sampling import BatchSpec, SamplerConfig, pk_batch, sample_indices
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, batch: list[tuple[str, str]]):
        self.iteration = iteration
        self.batch = batch
        ids = ", ".join(f"{s}/{q}" for s, q in batch)
        super().__init__(
            f"non-finite loss at iteration {iteration}; batch: {ids}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    weight_decay: float = 5e-4
    iterations: int = 2000
    momentum: float = 0.9
    checkpoint_interval: int = 0   # 0 writes only the final checkpoint
    preset: str | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"TrainConfig: optimizer must be one of {OPTIMIZERS}, got "
                f"{self.optimizer!r}")
        if self.iterations < 1:
            raise ValueError("TrainConfig: iterations must be >= 1")
        ms = tuple(self.lr_milestones)
        object.__setattr__(self, "lr_milestones", ms)
        if any(m <= 0 or m >= self.iterations for m in ms):
            raise ValueError(
                f"TrainConfig: milestones {ms} must lie in "
                f"(0, {self.iterations})")
        if list(ms) != sorted(set(ms)):
            raise ValueError(
                f"TrainConfig: milestones {ms} must be strictly increasing")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 1-based iteration under step decay."""
        decays = sum(1 for m in self.lr_milestones if iteration >= m)
        return self.lr * (self.lr_gamma ** decays)


_TRAIN_PRESETS = {
    "desk": TrainConfig(optimizer="adam", lr=1e-3, lr_milestones=(1500,),
                        iterations=2000, preset="desk"),
    "gait3d": TrainConfig(optimizer="adam", lr=1e-3,
                          lr_milestones=(30_000, 90_000),
                          iterations=180_000, preset="gait3d"),
    "grew": TrainConfig(optimizer="sgd_momentum", lr=1e-2,
                        lr_milestones=(150_000, 250_000),
                        iterations=300_000, preset="grew"),
}


def train_preset(name: str) -> TrainConfig:
    if name not in _TRAIN_PRESETS:
        raise ValueError(
            f"unknown train preset {name!r}, expected one of "
            f"{tuple(_TRAIN_PRESETS)}")
    return _TRAIN_PRESETS[name]


# ---- optimizers ---------------------------------------------------------------


def _decayed_grad(p: Parameter, weight_decay: float) -> np.ndarray:
    g = p.grad
    if weight_decay and p.name.endswith(".weight"):
        g = g + p.data * p.data.dtype.type(weight_decay)
    return g


def adam_step(params: list[Parameter], state: dict, lr: float,
              weight_decay: float = 0.0) -> None:
    """One Adam update; weight decay enters as an L2 gradient term.

    Decay applies to ".weight" parameters only, never biases. `state`
    carries first/second moments per parameter and the step count.
    """
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        if p.grad is None:
            continue
        g = _decayed_grad(p, weight_decay)
        m = m_all.setdefault(p.name, np.zeros_like(p.data))
        v = v_all.setdefault(p.name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        mhat = m / m.dtype.type(bc1)
        vhat = v / v.dtype.type(bc2)
        p.data -= (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.data.dtype)


def sgd_momentum_step(params: list[Parameter], state: dict, lr: float,
                      weight_decay: float = 0.0, momentum: float = 0.9) -> None:
    """Classic momentum update: buf = mu*buf + g; p -= lr*buf."""
    state.setdefault("t", 0)
    state["t"] += 1
    bufs = state.setdefault("buf", {})
    for p in params:
        if p.grad is None:
            continue
        g = _decayed_grad(p, weight_decay)
        buf = bufs.setdefault(p.name, np.zeros_like(p.data))
        buf *= momentum
        buf += g
        p.data -= (lr * buf).astype(p.data.dtype)


def _optimizer_to_extra(cfg: TrainConfig, state: dict,
                        iteration: int) -> dict[str, np.ndarray]:
    extra = {"meta.iteration": np.array([float(iteration)], dtype=np.float32),
             "optim.t": np.array([float(state.get("t", 0))], dtype=np.float32)}
    for group in ("m", "v", "buf"):
        for name, arr in state.get(group, {}).items():
            extra[f"optim.{group}.{name}"] = arr
    return extra


def _optimizer_from_extra(extra: dict[str, np.ndarray]) -> tuple[dict, int]:
    state: dict = {"t": int(extra.get("optim.t", [0.0])[0])}
    for key, arr in extra.items():
        if key in ("optim.t", "meta.iteration") or not key.startswith("optim."):
            continue
        _, group, name = key.split(".", 2)
        state.setdefault(group, {})[name] = arr.copy()
    iteration = int(extra.get("meta.iteration", [0.0])[0])
    return state, iteration


# ---- training data in memory -----------------------------------------------------


@dataclass
class TrainingSet:
    """All training sequences resident in memory with integer labels."""

    frames: dict[tuple[str, str], np.ndarray]  # (subject, seq) -> [L, H, W]
    by_subject: dict[str, list[str]]
    label_of: dict[str, int]

    @property
    def num_classes(self) -> int:
        return len(self.label_of)

    @staticmethod
    def from_pairs(index, pairs: list[tuple[str, str]]) -> "TrainingSet":
        from .data import load_sequence
        frames = {}
        by_subject: dict[str, list[str]] = {}
        for subject, seq in pairs:
            frames[(subject, seq)] = load_sequence(index, subject, seq).frames
            by_subject.setdefault(subject, []).append(seq)
        label_of = {s: i for i, s in enumerate(sorted(by_subject))}
        return TrainingSet(frames, by_subject, label_of)


@dataclass
class CurveRow:
    iteration: int
    l_tri: float
    l_ce: float
    l_final: float
    nonzero_fraction: float

    def csv(self) -> str:
        return (f"{self.iteration},{self.l_tri:.9g},{self.l_ce:.9g},"
                f"{self.l_final:.9g},{self.nonzero_fraction:.9g}")


@dataclass
class TrainResult:
    curve: list[CurveRow] = field(default_factory=list)
    checkpoint_path: Path | None = None
    seconds: float = 0.0


CURVE_HEADER = "iteration,l_tri,l_ce,l_final,nonzero_fraction"


def write_curve(path, rows: list[CurveRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CURVE_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(2, iteration)))


def _compose_batch(tset: TrainingSet, batch: list[tuple[str, str]],
                   sampler: SamplerConfig, rng: np.random.Generator,
                   dtype) -> tuple[Tensor, np.ndarray]:
    n = sampler.frames
    chunks = []
    labels = []
    for subject, seq in batch:
        seq_frames = tset.frames[(subject, seq)]
        idx = sample_indices(sampler.strategy, len(seq_frames), n, rng)
        chunk = seq_frames[np.asarray(idx) - 1]
        chunks.append(chunk[:, None].astype(dtype))
        labels.append(tset.label_of[subject])
    data = np.concatenate(chunks, axis=0)
    return Tensor(data, dtype=dtype), np.asarray(labels)


def train(model: backbone.Model, tset: TrainingSet, cfg: TrainConfig,
          sampler: SamplerConfig, batch_spec: BatchSpec, loss_cfg: LossConfig,
          seed: int, out_checkpoint, curve_path=None,
          resume_from=None, progress_every: int = 100) -> TrainResult:
    """Run the optimization loop and write the final checkpoint.

    Deterministic for a given seed with one worker: batches, frame
    sampling, and optimizer state are all functions of (seed,
    iteration). Aborts on a non-finite loss, naming the batch.
    """
    if len(tset.by_subject) < batch_spec.p:
        raise ValueError(
            f"train: dataset has {len(tset.by_subject)} subjects, batch "
            f"needs {batch_spec.p}")
    if not model.config.head.include_classifier and loss_cfg.beta > 0:
        raise ValueError("train: loss has beta > 0 but the model was built "
                         "without a classifier head")
    state: dict = {}
    start_iter = 0
    if resume_from is not None:
        loaded, extra = backbone.load_model(resume_from)
        if set(loaded.params) != set(model.params):
            raise ValueError("train: resume checkpoint does not match model")
        for name, p in model.params.items():
            p.data = loaded.params[name].data.astype(p.data.dtype)
        state, start_iter = _optimizer_from_extra(extra)
        logger.info("resumed from %s at iteration %d", resume_from, start_iter)

    dtype = next(iter(model.params.values())).data.dtype
    params = model.parameters()
    result = TrainResult()
    t0 = time.perf_counter()

    for iteration in range(start_iter + 1, cfg.iterations + 1):
        rng = _iteration_rng(seed, iteration)
        batch = pk_batch(tset.by_subject, batch_spec, rng)
        frames, labels = _compose_batch(tset, batch, sampler, rng, dtype)

        embeddings = model.embed(frames, seq_len=sampler.frames)
        l_tri, stats = batch_all_triplet(embeddings, labels, loss_cfg.margin)
        if loss_cfg.beta > 0:
            logits = model.logits(embeddings)
            l_ce = cross_entropy(logits, labels)
        else:
            l_ce = Tensor(np.zeros((), dtype=dtype))
        loss = combine(l_tri, l_ce, loss_cfg.alpha, loss_cfg.beta)

        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(iteration, batch)

        model.zero_grad()
        loss.backward()
        lr = cfg.lr_at(iteration)
        if cfg.optimizer == "adam":
            adam_step(params, state, lr, cfg.weight_decay)
        else:
            sgd_momentum_step(params, state, lr, cfg.weight_decay,
                              cfg.momentum)

        result.curve.append(CurveRow(
            iteration, l_tri.item(), l_ce.item(), value,
            stats["nonzero_fraction"]))
        if progress_every and iteration % progress_every == 0:
            print(f"iter {iteration}/{cfg.iterations} "
                  f"loss {value:.4f} tri {l_tri.item():.4f} "
                  f"ce {l_ce.item():.4f} lr {lr:.2e}", file=sys.stderr)
        if (cfg.checkpoint_interval and out_checkpoint is not None
                and iteration % cfg.checkpoint_interval == 0
                and iteration < cfg.iterations):
            backbone.save_model(out_checkpoint, model,
                                _optimizer_to_extra(cfg, state, iteration))

    result.seconds = time.perf_counter() - t0
    if out_checkpoint is not None:
        backbone.save_model(out_checkpoint, model,
                            _optimizer_to_extra(cfg, state, cfg.iterations))
        result.checkpoint_path = Path(out_checkpoint)
    if curve_path is not None:
        write_curve(curve_path, result.curve)
    return result

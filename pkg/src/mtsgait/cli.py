"""Operator surface: synth, train, extract, eval, bench, sample-dump.

Every subcommand is reproducible given identical inputs, config, and
seed. Errors exit with a category-specific code and one machine
parseable line on stderr: 2 config, 3 missing file, 4 protocol
violation, 1 anything else.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, backbone, config, data, metrics, trainer
from .head import Embedding
from .sampling import sample_indices
from .tensor import Tensor, no_grad

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_PROTOCOL = 4


class ProtocolError(RuntimeError):
    pass


class CliError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _worker_count() -> int:
    raw = os.environ.get("MTSGAIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"MTSGAIT_THREADS={raw!r} is not an integer")


def _parse_frames(text: str) -> int | tuple[int, int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        return (int(lo), int(hi))
    return int(text)


def cmd_synth(args) -> int:
    written = data.synth_generate(args.subjects, args.seqs,
                                  _parse_frames(args.frames), args.seed,
                                  args.out, shape_jitter=args.shape_jitter)
    print(f"wrote {written} frames under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = config.load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    index = data.scan(args.data)
    pairs = data.split_pairs(index, "train", cfg.split)
    tset = trainer.TrainingSet.from_pairs(index, pairs)

    model_cfg = cfg.model
    if cfg.loss.beta > 0:
        model_cfg = config.with_classifier(model_cfg, tset.num_classes)
    model = backbone.build(model_cfg, seed=seed)

    out = Path(args.out)
    result = trainer.train(
        model, tset, cfg.train, cfg.sampler, cfg.batch, cfg.loss,
        seed=seed, out_checkpoint=out,
        curve_path=out.with_suffix(out.suffix + ".curve.csv"),
        resume_from=args.resume)
    config.echo_config(out.with_suffix(out.suffix + ".effective.toml"),
                       cfg, seed=seed)
    print(f"trained {cfg.train.iterations} iterations in "
          f"{result.seconds:.1f}s; checkpoint at {out}")
    return 0


def _load_split_sequences(index, pairs, max_frames, workers):
    def load(pair):
        return data.load_sequence(index, pair[0], pair[1],
                                  max_frames=max_frames)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(load, pairs))
    return [load(p) for p in pairs]


def extract_embeddings(model: backbone.Model, sequences) -> list[Embedding]:
    dtype = next(iter(model.params.values())).data.dtype
    out = []
    with no_grad():
        for seq in sequences:
            frames = Tensor(seq.frames[:, None].astype(dtype), dtype=dtype)
            emb = model.embed(frames)
            out.append(Embedding(np.asarray(emb.data, dtype=np.float32),
                                 seq.subject_id, seq.sequence_id))
    return out


def cmd_extract(args) -> int:
    model, _ = backbone.load_model(args.ckpt)
    index = data.scan(args.data)
    spec = data.SplitSpec(train_seqs=args.train_seqs, protocol=args.protocol)
    pairs = data.split_pairs(index, args.split, spec)
    if not pairs:
        raise CliError(EXIT_PROTOCOL,
                       f"split {args.split!r} selected no sequences")
    sequences = _load_split_sequences(index, pairs, args.max_frames,
                                      _worker_count())
    embeddings = extract_embeddings(model, sequences)
    if args.format == "text":
        data.write_embeddings_text(args.out, embeddings)
    else:
        data.write_embeddings_binary(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings to {args.out}")
    return 0


def cmd_eval(args) -> int:
    probe = data.read_embeddings(args.probe)
    gallery = data.read_embeddings(args.gallery)
    probe_ids = [(e.subject_id, e.sequence_id) for e in probe]
    gallery_ids = [(e.subject_id, e.sequence_id) for e in gallery]
    pset, gset = set(probe_ids), set(gallery_ids)
    overlap = pset & gset
    if overlap and pset != gset:
        raise ProtocolError(
            f"probe and gallery overlap on {len(overlap)} sequences without "
            f"being identical; split the data or pass the same file twice "
            f"for leave-one-out")
    ks = tuple(int(k) for k in args.ks.split(","))
    report = metrics.evaluate(
        probe_ids, np.stack([e.matrix for e in probe]),
        gallery_ids, np.stack([e.matrix for e in gallery]),
        metric=args.metric, ks=ks)
    print(report.text_table())
    if args.out:
        metrics.write_report_csv(args.out, report)
    if args.per_query:
        metrics.write_per_query_csv(args.per_query, report)
    return 0


def cmd_bench(args) -> int:
    cfg = config.load_run_config(args.config)
    model = backbone.build(cfg.model, seed=0)
    report = backbone.flops_estimate(cfg.model)
    print(f"parameters: {backbone.count_parameters(model)}")
    print(report.text_table())
    spatial_only = backbone.ModelConfig(
        layers=tuple(backbone.LayerSpec(
            l.out_channels, l.kernel, l.padding, l.stride, None, l.pool_after)
            for l in cfg.model.layers),
        head=cfg.model.head, input_hw=cfg.model.input_hw,
        activation_slope=cfg.model.activation_slope)
    plain = backbone.build(spatial_only, seed=0)
    print(f"parameters without switch branches: "
          f"{backbone.count_parameters(plain)}")
    return 0


def cmd_sample_dump(args) -> int:
    rng = np.random.default_rng(args.seed)
    idx = sample_indices(args.strategy, args.len, args.n, rng)
    print(" ".join(str(i) for i in idx))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtsgait",
        description="Gait embeddings with multi-hop temporal switching")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic walker dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--seqs", type=int, required=True)
    p.add_argument("--frames", type=str, required=True,
                   help="frames per sequence; fixed N or a range LO:HI")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--shape-jitter", type=float, default=1.0,
                   help="body-shape variation in [0, 1]; low values make "
                        "identity depend on gait dynamics")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a silhouette dataset")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True,
                   help="checkpoint path; curve and config echo are siblings")
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed from the config file")
    p.add_argument("--resume", type=str, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="embed a dataset split")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=("train", "probe", "gallery"),
                   required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.add_argument("--train-seqs", type=int, default=0,
                   help="sequences per subject in the train pool (0 = none "
                        "held out; protocol splits the whole set)")
    p.add_argument("--protocol", choices=data.PROTOCOLS, default="gait3d")
    p.add_argument("--max-frames", type=int, default=720)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score probe embeddings against a gallery")
    p.add_argument("--probe", type=str, required=True)
    p.add_argument("--gallery", type=str, required=True)
    p.add_argument("--metric", choices=metrics.METRICS, default="euclidean")
    p.add_argument("--ks", type=str, default="1,5,10,20")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--per-query", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="report parameters and per-layer MACs")
    p.add_argument("--config", type=str, required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sample-dump", help="print sampler indices")
    p.add_argument("--strategy", choices=("uniform", "cyclic", "noncyclic"),
                   required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_sample_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mtsgait: error({exc.code}): {exc}", file=sys.stderr)
        return exc.code
    except (config.ConfigError, ValueError) as exc:
        print(f"mtsgait: error({EXIT_CONFIG}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"mtsgait: error({EXIT_MISSING}): {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ProtocolError as exc:
        print(f"mtsgait: error({EXIT_PROTOCOL}): {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except trainer.TrainingDivergedError as exc:
        print(f"mtsgait: error(1): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

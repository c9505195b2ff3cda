"""Dataset ingestion, silhouette normalization, and synthetic walkers.

On-disk layout: root/<subject>/<sequence>/<frame>.pgm with binary P5
frames. Frames of any size are thresholded, cropped to the silhouette
bounding box (horizontally centered), and nearest-neighbor resized to
64x44. The synthetic generator renders parameterized ellipse-and-limb
walkers whose body proportions and gait dynamics identify the subject.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import Embedding

logger = logging.getLogger(__name__)

FRAME_H, FRAME_W = 64, 44

EMBED_TEXT_HEADER = "mts-embed v1"
EMBED_MAGIC = b"MTSE"


class PgmError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


# ---- PGM (P5) ------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Parse a binary PGM (P5, 8-bit) into a uint8 [h, w] array."""
    path = Path(path)
    blob = path.read_bytes()
    pos = 0

    def fail(msg: str):
        raise PgmError(f"{path}: {msg} at byte {pos}")

    def skip_separators():
        nonlocal pos
        while pos < len(blob):
            c = blob[pos:pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                return

    def read_token() -> bytes:
        nonlocal pos
        skip_separators()
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("unexpected end of header")
        return blob[start:pos]

    if blob[:2] != b"P5":
        fail(f"expected magic 'P5', got {blob[:2]!r}")
    pos = 2
    dims = []
    for _ in range(3):
        tok = read_token()
        if not tok.isdigit():
            fail(f"expected integer, got {tok!r}")
        dims.append(int(tok))
    w, h, maxval = dims
    if w < 1 or h < 1:
        fail(f"bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        fail(f"unsupported maxval {maxval} (only 8-bit supported)")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        fail("expected single whitespace before pixel data")
    pos += 1
    if len(blob) - pos < w * h:
        fail(f"pixel data truncated, need {w * h} bytes, have {len(blob) - pos}")
    img = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return img.reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"write_pgm: expected 2D image, got {img.shape}")
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def normalize_silhouette(binary: np.ndarray) -> np.ndarray:
    """Crop to the silhouette's bounding box, center horizontally, resize.

    The vertical crop spans the nonzero rows; the horizontal window is
    centered on the bounding box and sized to the 44:64 aspect of the
    target, padding with background where it overruns the frame. Resize
    is nearest-neighbor. An empty frame maps to zeros.
    """
    binary = np.asarray(binary)
    ys, xs = np.nonzero(binary)
    if ys.size == 0:
        return np.zeros((FRAME_H, FRAME_W), dtype=np.uint8)
    r0, r1 = int(ys.min()), int(ys.max())
    hb = r1 - r0 + 1
    wb = max(1, round(hb * FRAME_W / FRAME_H))
    cx = (int(xs.min()) + int(xs.max()) + 1) / 2
    x0 = int(round(cx - wb / 2))
    window = np.zeros((hb, wb), dtype=np.uint8)
    src_lo = max(0, x0)
    src_hi = min(binary.shape[1], x0 + wb)
    if src_lo < src_hi:
        window[:, src_lo - x0:src_hi - x0] = binary[r0:r1 + 1, src_lo:src_hi]
    iy = np.minimum((np.arange(FRAME_H) + 0.5) * hb / FRAME_H, hb - 1).astype(int)
    ix = np.minimum((np.arange(FRAME_W) + 0.5) * wb / FRAME_W, wb - 1).astype(int)
    return window[iy][:, ix].astype(np.uint8)


def load_frame(path) -> np.ndarray:
    """Read one frame as a {0,1} uint8 map of 64x44.

    Pixels are thresholded at 128. Frames already 64x44 pass through
    unchanged; others go through bounding-box normalization.
    """
    img = read_pgm(path)
    binary = (img >= 128).astype(np.uint8)
    if binary.shape == (FRAME_H, FRAME_W):
        return binary
    return normalize_silhouette(binary)


# ---- dataset index ---------------------------------------------------------


@dataclass
class SilhouetteSequence:
    subject_id: str
    sequence_id: str
    frames: np.ndarray  # [L, 64, 44] uint8 in {0, 1}
    source: Path | None = None

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("SilhouetteSequence: needs at least one frame")


@dataclass
class DatasetIndex:
    root: Path
    counts: dict[str, dict[str, int]]  # subject -> sequence -> frame count
    skipped_files: int = 0
    skipped_sequences: int = 0

    def subjects(self) -> list[str]:
        return sorted(self.counts)

    def sequences(self, subject: str) -> list[str]:
        return sorted(self.counts[subject])

    def all_pairs(self) -> list[tuple[str, str]]:
        return [(s, q) for s in self.subjects() for q in self.sequences(s)]


def scan(root) -> DatasetIndex:
    """Index root/<subject>/<sequence>/<frame>.pgm deterministically.

    Ordering is explicit lexicographic sorting, never directory order.
    Frames with unparseable headers are skipped and counted; sequences
    left empty are dropped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    counts: dict[str, dict[str, int]] = {}
    skipped_files = 0
    skipped_sequences = 0
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        seq_map: dict[str, int] = {}
        for seq_dir in sorted(p for p in subj_dir.iterdir() if p.is_dir()):
            n = 0
            for frame in sorted(seq_dir.glob("*.pgm")):
                try:
                    with open(frame, "rb") as fh:
                        head = fh.read(2)
                    if head != b"P5":
                        raise PgmError(f"{frame}: not a P5 file")
                    n += 1
                except (OSError, PgmError):
                    skipped_files += 1
            if n > 0:
                seq_map[seq_dir.name] = n
            else:
                skipped_sequences += 1
                logger.warning("scan: skipping empty sequence %s", seq_dir)
        if seq_map:
            counts[subj_dir.name] = seq_map
    if not counts:
        raise ValueError(f"dataset root {root} contains no subjects")
    return DatasetIndex(root=root, counts=counts, skipped_files=skipped_files,
                        skipped_sequences=skipped_sequences)


def load_sequence(index: DatasetIndex, subject: str, sequence: str,
                  max_frames: int | None = None) -> SilhouetteSequence:
    seq_dir = index.root / subject / sequence
    paths = sorted(seq_dir.glob("*.pgm"))
    if max_frames is not None:
        paths = paths[:max_frames]
    if not paths:
        raise FileNotFoundError(f"no frames under {seq_dir}")
    frames = np.stack([load_frame(p) for p in paths])
    return SilhouetteSequence(subject, sequence, frames, source=seq_dir)


# ---- probe/gallery splits -----------------------------------------------------


PROTOCOLS = ("gait3d", "grew")


@dataclass(frozen=True)
class SplitSpec:
    """How sequences divide into train and probe/gallery pools.

    With train_seqs == 0 the whole dataset is the test pool and the
    protocol assigns probes per subject (gait3d: first sequence; grew:
    first two) with the remainder as gallery; `train` then means every
    sequence. With train_seqs = M > 0 the lexicographically first M
    sequences of each subject are the train pool, the held-out rest are
    the probe set, and the train pool doubles as the gallery.
    """

    train_seqs: int = 0
    protocol: str = "gait3d"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(
                f"SplitSpec: protocol must be one of {PROTOCOLS}, got "
                f"{self.protocol!r}")
        if self.train_seqs < 0:
            raise ValueError("SplitSpec: train_seqs must be >= 0")


def split_pairs(index: DatasetIndex, split: str,
                spec: SplitSpec) -> list[tuple[str, str]]:
    if split not in ("train", "probe", "gallery"):
        raise ValueError(f"unknown split {split!r}")
    pairs: list[tuple[str, str]] = []
    probes_per_subject = 1 if spec.protocol == "gait3d" else 2
    for subject in index.subjects():
        seqs = index.sequences(subject)
        if spec.train_seqs > 0:
            train = seqs[:spec.train_seqs]
            held_out = seqs[spec.train_seqs:]
            chosen = {"train": train, "probe": held_out,
                      "gallery": train}[split]
        else:
            probes = seqs[:probes_per_subject]
            gallery = seqs[probes_per_subject:]
            chosen = {"train": seqs, "probe": probes,
                      "gallery": gallery}[split]
        pairs.extend((subject, q) for q in chosen)
    return pairs


# ---- synthetic walker generator ------------------------------------------------

# (name, low, high, is_shape); ranges are pixels unless noted
_SUBJECT_PARAMS = (
    ("leg_len", 17.0, 24.0, True),
    ("torso_h", 13.0, 19.0, True),
    ("torso_w", 4.5, 7.5, True),
    ("head_r", 3.0, 5.2, True),
    ("leg_thick", 1.5, 2.9, True),
    ("arm_len", 10.0, 15.0, True),
    ("arm_thick", 1.1, 2.1, True),
    ("stride_amp", 0.35, 0.72, False),   # radians
    ("arm_factor", 0.5, 0.95, False),
    ("freq", 0.07, 0.16, False),         # gait cycles per frame
    ("bob_amp", 0.3, 1.2, False),
)

_MIN_SUBJECT_DISTANCE = 0.35  # normalized parameter-space separation


def _param_ranges(shape_jitter: float) -> list[tuple[str, float, float]]:
    """Parameter ranges, with shape variation shrunk around midpoints.

    shape_jitter 1.0 keeps the full body-shape ranges; smaller values
    make subjects near-identical in build so identity rides on gait
    dynamics (swing amplitude, cadence, arm ratio, bob).
    """
    out = []
    for name, lo, hi, is_shape in _SUBJECT_PARAMS:
        if is_shape:
            mid, half = (lo + hi) / 2, (hi - lo) / 2 * shape_jitter
            out.append((name, mid - half, mid + half))
        else:
            out.append((name, lo, hi))
    return out


def _draw_subject(rng: np.random.Generator,
                  shape_jitter: float = 1.0) -> dict[str, float]:
    return {name: float(rng.uniform(lo, hi))
            for name, lo, hi in _param_ranges(shape_jitter)}


def _normalized_vector(params: dict[str, float]) -> np.ndarray:
    # normalized by the full ranges so separation thresholds stay
    # meaningful whatever the jitter setting
    return np.array([(params[name] - lo) / (hi - lo)
                     for name, lo, hi, _ in _SUBJECT_PARAMS])


def _capsule_mask(xe, yy, x0, y0, x1, y1, thick):
    dx, dy = x1 - x0, y1 - y0
    norm2 = dx * dx + dy * dy
    if norm2 == 0:
        dist2 = (xe - x0) ** 2 + (yy - y0) ** 2
        return dist2 <= thick * thick
    t = ((xe - x0) * dx + (yy - y0) * dy) / norm2
    t = np.clip(t, 0.0, 1.0)
    px = x0 + t * dx
    py = y0 + t * dy
    return (xe - px) ** 2 + (yy - py) ** 2 <= thick * thick


def render_walker_frame(params: dict[str, float], phase: float,
                        shear: float) -> np.ndarray:
    """Rasterize one 64x44 binary frame of the walker at a gait phase."""
    yy, xx = np.mgrid[0:FRAME_H, 0:FRAME_W].astype(np.float64)
    ground = FRAME_H - 3.0
    hip_y = ground - params["leg_len"] + params["bob_amp"] * np.cos(2 * phase)
    cx = FRAME_W / 2.0
    # viewpoint shear maps grid x into the walker's canonical frame
    xe = xx - shear * (yy - hip_y)

    mask = np.zeros((FRAME_H, FRAME_W), dtype=bool)
    torso_top = hip_y - params["torso_h"]
    mask |= ((xe - cx) / params["torso_w"]) ** 2 + \
        ((yy - (hip_y + torso_top) / 2) / (params["torso_h"] / 2 + 1.5)) ** 2 <= 1
    head_y = torso_top - params["head_r"] - 1.0
    mask |= (xe - cx) ** 2 + (yy - head_y) ** 2 <= params["head_r"] ** 2

    swing = params["stride_amp"] * np.sin(phase)
    for sign in (1.0, -1.0):
        ang = sign * swing
        fx = cx + params["leg_len"] * np.sin(ang)
        fy = hip_y + params["leg_len"] * np.cos(ang)
        mask |= _capsule_mask(xe, yy, cx, hip_y, fx, fy, params["leg_thick"])

    shoulder_y = torso_top + 2.0
    arm_swing = params["arm_factor"] * params["stride_amp"] * np.sin(phase + np.pi)
    for sign in (1.0, -1.0):
        ang = sign * arm_swing
        hx = cx + params["arm_len"] * np.sin(ang)
        hy = shoulder_y + params["arm_len"] * np.cos(ang)
        mask |= _capsule_mask(xe, yy, cx, shoulder_y, hx, hy,
                              params["arm_thick"])
    return mask.astype(np.uint8)


def synth_generate(subjects: int, seqs_per_subject: int,
                   frames: int | tuple[int, int], seed: int,
                   out_dir, shape_jitter: float = 1.0) -> int:
    """Write a synthetic walker dataset; returns the number of frames.

    Body proportions and gait dynamics are drawn per subject (rejection
    keeps subjects apart in parameter space); viewpoint shear, walking
    speed, and starting phase are drawn per sequence. `shape_jitter`
    below 1 shrinks body variation so identity is carried mostly by
    motion. Output is deterministic for a given seed, byte for byte.
    """
    if subjects < 1 or seqs_per_subject < 1:
        raise ValueError("synth_generate: need at least one subject and "
                         "sequence")
    if not 0.0 <= shape_jitter <= 1.0:
        raise ValueError(f"synth_generate: shape_jitter must be in [0, 1], "
                         f"got {shape_jitter}")
    frange = frames if isinstance(frames, tuple) else (frames, frames)
    if frange[0] < 1 or frange[1] < frange[0]:
        raise ValueError(f"synth_generate: bad frame range {frange}")
    out_dir = Path(out_dir)
    written = 0
    min_dist = _MIN_SUBJECT_DISTANCE * max(shape_jitter, 0.3)
    chosen: list[np.ndarray] = []
    for si in range(subjects):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(0, si)))
        for attempt in range(200):
            params = _draw_subject(rng, shape_jitter)
            vec = _normalized_vector(params)
            if all(np.linalg.norm(vec - other) >= min_dist
                   for other in chosen):
                break
        else:
            raise RuntimeError(
                "synth_generate: could not separate subjects in parameter "
                "space; lower the subject count")
        chosen.append(vec)
        for qi in range(seqs_per_subject):
            srng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(1, si, qi)))
            shear = float(srng.uniform(-0.22, 0.22))
            speed = float(srng.uniform(0.85, 1.2))
            phase0 = float(srng.uniform(0, 2 * np.pi))
            length = int(srng.integers(frange[0], frange[1] + 1))
            seq_dir = out_dir / f"{si:04d}" / f"seq{qi:02d}"
            for t in range(length):
                phase = phase0 + 2 * np.pi * params["freq"] * speed * t
                frame = render_walker_frame(params, phase, shear)
                write_pgm(seq_dir / f"{t:04d}.pgm", frame * 255)
                written += 1
    return written


# ---- embedding persistence ------------------------------------------------------


def write_embeddings_text(path, embeddings: list[Embedding]) -> None:
    """One line per sequence: ids then strips*dim floats, comma separated."""
    if not embeddings:
        raise ValueError("write_embeddings_text: nothing to write")
    s, d = embeddings[0].matrix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMBED_TEXT_HEADER} {s} {d}\n")
        for emb in embeddings:
            if emb.matrix.shape != (s, d):
                raise ValueError(
                    f"embedding shape {emb.matrix.shape} != ({s}, {d})")
            values = ",".join(f"{v:.9g}" for v in
                              emb.matrix.astype(np.float32).reshape(-1))
            fh.write(f"{emb.subject_id},{emb.sequence_id},{values}\n")


def write_embeddings_binary(path, embeddings: list[Embedding]) -> None:
    import struct
    if not embeddings:
        raise ValueError("write_embeddings_binary: nothing to write")
    s, d = embeddings[0].matrix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<HIII", 1, s, d, len(embeddings)))
        for emb in embeddings:
            if emb.matrix.shape != (s, d):
                raise ValueError(
                    f"embedding shape {emb.matrix.shape} != ({s}, {d})")
            sub = emb.subject_id.encode("utf-8")
            seq = emb.sequence_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sub)))
            fh.write(sub)
            fh.write(struct.pack("<H", len(seq)))
            fh.write(seq)
            fh.write(emb.matrix.astype("<f4", copy=False).tobytes())


def _read_embeddings_text(path) -> list[Embedding]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if parts[:2] != EMBED_TEXT_HEADER.split() or len(parts) != 4:
            raise EmbeddingFormatError(
                f"{path}: bad header {header!r}, expected "
                f"'{EMBED_TEXT_HEADER} <s> <d>'")
        try:
            s, d = int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise EmbeddingFormatError(f"{path}: bad header {header!r}") from exc
        out = []
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 2 + s * d:
                raise EmbeddingFormatError(
                    f"{path}:{ln}: expected {2 + s * d} fields, got "
                    f"{len(fields)}")
            matrix = np.array(fields[2:], dtype=np.float32).reshape(s, d)
            out.append(Embedding(matrix, fields[0], fields[1]))
    if not out:
        raise EmbeddingFormatError(f"{path}: no records")
    return out


def _read_embeddings_binary(path) -> list[Embedding]:
    import struct
    blob = Path(path).read_bytes()
    if blob[:4] != EMBED_MAGIC:
        raise EmbeddingFormatError(
            f"{path}: bad magic {blob[:4]!r}, expected {EMBED_MAGIC!r}")
    version, s, d, count = struct.unpack_from("<HIII", blob, 4)
    if version != 1:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIII")
    out = []
    for _ in range(count):
        (sub_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        sub = blob[off:off + sub_len].decode("utf-8")
        off += sub_len
        (seq_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        seq = blob[off:off + seq_len].decode("utf-8")
        off += seq_len
        matrix = np.frombuffer(blob, dtype="<f4", count=s * d,
                               offset=off).copy().reshape(s, d)
        off += 4 * s * d
        out.append(Embedding(matrix, sub, seq))
    if off != len(blob):
        raise EmbeddingFormatError(
            f"{path}: {len(blob) - off} trailing bytes")
    if not out:
        raise EmbeddingFormatError(f"{path}: no records")
    return out


def read_embeddings(path) -> list[Embedding]:
    """Load either the text or the binary embedding format (autodetected)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EMBED_MAGIC:
        return _read_embeddings_binary(path)
    return _read_embeddings_text(path)

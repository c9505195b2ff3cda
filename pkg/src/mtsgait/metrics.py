"""Open-set retrieval evaluation: Rank-k, mAP, mINP over probe/gallery.

Each probe queries the gallery by distance between concatenated strip
embeddings. A gallery entry with the same (subject, sequence) identity
as the query is treated as the query itself and excluded, which makes
leave-one-out evaluation over a single embedding set possible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")
DEFAULT_KS = (1, 5, 10, 20)

SeqId = tuple[str, str]  # (subject_id, sequence_id)


@dataclass
class QueryRow:
    query: SeqId
    first_hit_rank: int  # 1-based rank of the nearest correct subject
    ap: float            # average precision in [0, 1]
    inp: float           # inverse negative penalty in [0, 1]


@dataclass
class RetrievalReport:
    metric: str
    rank_k: dict[int, float]          # k -> accuracy in percent
    mean_ap: float                    # percent
    mean_inp: float                   # percent
    queries: list[QueryRow] = field(default_factory=list)
    excluded: list[SeqId] = field(default_factory=list)
    zero_norm_count: int = 0

    def csv_header(self) -> str:
        ranks = ",".join(f"rank{k}" for k in sorted(self.rank_k))
        return f"{ranks},map,minp"

    def csv_row(self) -> str:
        ranks = ",".join(f"{self.rank_k[k]:.2f}" for k in sorted(self.rank_k))
        return f"{ranks},{self.mean_ap:.2f},{self.mean_inp:.2f}"

    def text_table(self) -> str:
        cols = [f"Rank-{k}" for k in sorted(self.rank_k)] + ["mAP", "mINP"]
        vals = [f"{self.rank_k[k]:.2f}" for k in sorted(self.rank_k)]
        vals += [f"{self.mean_ap:.2f}", f"{self.mean_inp:.2f}"]
        width = max(len(c) for c in cols + vals) + 2
        head = "".join(c.rjust(width) for c in cols)
        body = "".join(v.rjust(width) for v in vals)
        lines = [head, body]
        if self.excluded:
            lines.append(f"excluded {len(self.excluded)} probes with no "
                         f"gallery positive")
        if self.zero_norm_count:
            lines.append(f"flagged {self.zero_norm_count} zero-norm "
                         f"embeddings under cosine")
        return "\n".join(lines)


def _concat(embs: np.ndarray) -> np.ndarray:
    embs = np.asarray(embs, dtype=np.float64)
    if embs.ndim != 3:
        raise ValueError(f"expected embeddings [n, s, d], got {embs.shape}")
    return embs.reshape(embs.shape[0], -1)


def pairwise_distance(query: np.ndarray, gallery: np.ndarray,
                      metric: str = "euclidean") -> np.ndarray:
    """Distance matrix [q, g] between strip-embedding stacks [n, s, d].

    Strips are concatenated per sequence before measuring. Cosine
    distance is 1 - cosine similarity; a zero-norm vector is treated as
    orthogonal to everything (distance 1) and logged.
    """
    if metric not in METRICS:
        raise ValueError(f"pairwise_distance: metric must be one of {METRICS}")
    q = _concat(query)
    g = _concat(gallery)
    if q.shape[1] != g.shape[1]:
        raise ValueError(
            f"pairwise_distance: dimension mismatch {q.shape[1]} vs "
            f"{g.shape[1]}")
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] - 2.0 * (q @ g.T) + (g * g).sum(1)[None, :]
        return np.sqrt(np.maximum(sq, 0.0))
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    zeros = int((qn == 0).sum() + (gn == 0).sum())
    if zeros:
        logger.warning("pairwise_distance: %d zero-norm embeddings under "
                       "cosine; their distances default to 1", zeros)
    qs = q / np.where(qn == 0, 1.0, qn)[:, None]
    gs = g / np.where(gn == 0, 1.0, gn)[:, None]
    return 1.0 - qs @ gs.T


def count_zero_norms(query: np.ndarray, gallery: np.ndarray) -> int:
    qn = np.linalg.norm(_concat(query), axis=1)
    gn = np.linalg.norm(_concat(gallery), axis=1)
    return int((qn == 0).sum() + (gn == 0).sum())


def evaluate(probe_ids: list[SeqId], probe_embs: np.ndarray,
             gallery_ids: list[SeqId], gallery_embs: np.ndarray,
             metric: str = "euclidean",
             ks: tuple[int, ...] = DEFAULT_KS) -> RetrievalReport:
    """Score probes against the gallery and report Rank-k, mAP, mINP.

    Per query: gallery entries are ranked by ascending distance (stable
    order on ties); the entry with the query's own (subject, sequence)
    id is dropped. AP is the mean of precision at each positive's rank;
    INP is the positive count divided by the rank of the last-retrieved
    positive. Probes whose subject never appears in the remaining
    gallery are excluded and listed in the report.
    """
    if len(probe_ids) != len(probe_embs):
        raise ValueError("evaluate: probe ids and embeddings disagree")
    if len(gallery_ids) != len(gallery_embs):
        raise ValueError("evaluate: gallery ids and embeddings disagree")
    if not probe_ids or not gallery_ids:
        raise ValueError("evaluate: empty probe or gallery")
    ks = tuple(sorted(set(int(k) for k in ks)))
    dist = pairwise_distance(probe_embs, gallery_embs, metric)
    zero_norms = count_zero_norms(probe_embs, gallery_embs) \
        if metric == "cosine" else 0
    g_subjects = np.array([s for s, _ in gallery_ids])

    rows: list[QueryRow] = []
    excluded: list[SeqId] = []
    hits_at = {k: 0 for k in ks}
    for qi, qid in enumerate(probe_ids):
        keep = np.array([gid != qid for gid in gallery_ids])
        order = np.argsort(dist[qi], kind="stable")
        order = order[keep[order]]
        matches = g_subjects[order] == qid[0]
        if not matches.any():
            excluded.append(qid)
            continue
        pos_ranks = np.nonzero(matches)[0] + 1  # 1-based
        first = int(pos_ranks[0])
        num_pos = int(matches.sum())
        cum_hits = np.arange(1, num_pos + 1)
        ap = float((cum_hits / pos_ranks).mean())
        inp = float(num_pos / pos_ranks[-1])
        rows.append(QueryRow(qid, first, ap, inp))
        for k in ks:
            if first <= k:
                hits_at[k] += 1

    if not rows:
        raise ValueError("evaluate: no probe subject appears in the gallery")
    n = len(rows)
    report = RetrievalReport(
        metric=metric,
        rank_k={k: 100.0 * hits_at[k] / n for k in ks},
        mean_ap=100.0 * float(np.mean([r.ap for r in rows])),
        mean_inp=100.0 * float(np.mean([r.inp for r in rows])),
        queries=rows,
        excluded=excluded,
        zero_norm_count=zero_norms,
    )
    return report


def write_report_csv(path, report: RetrievalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.csv_header() + "\n")
        fh.write(report.csv_row() + "\n")


def write_per_query_csv(path, report: RetrievalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("subject,sequence,first_hit_rank,ap,inp\n")
        for r in report.queries:
            fh.write(f"{r.query[0]},{r.query[1]},{r.first_hit_rank},"
                     f"{r.ap * 100:.4f},{r.inp * 100:.4f}\n")

"""Retrieval evaluation: gallery ranking, CMC, mAP and report serialization."""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from corrreid import kernels
from corrreid.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10)
REPORT_FIELDS = ("cmc", "config_fingerprint", "map", "num_excluded_queries", "num_gallery",
                 "num_queries", "per_query_ap", "seeds")


def rank_gallery(query, gallery):
    """Gallery indices by descending inner product; ties by ascending index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ShapeError("rank_gallery needs a non-empty (N, d) gallery")
    sims = gallery @ np.asarray(query, dtype=np.float64)
    return kernels.topk_rows(sims[None], gallery.shape[0])[0]


def rank_all(queries, gallery):
    """Rankings ``(Q, G)`` and the similarity matrix ``(Q, G)``."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ShapeError("rank_all needs a non-empty (N, d) gallery")
    sims = queries @ gallery.T
    return kernels.topk_rows(sims, gallery.shape[0]), sims


def _relevance(rankings, query_labels, gallery_labels, keep=None):
    rankings = np.asarray(rankings)
    q = np.asarray(query_labels)
    g = np.asarray(gallery_labels)
    matches = (g[rankings] == q[:, None])
    if keep is not None:
        # drop excluded gallery entries from each query's list, preserving order
        kept = keep[np.arange(len(q))[:, None], rankings]
        out = np.zeros_like(matches)
        for i in range(len(q)):
            row = matches[i][kept[i]]
            out[i, :row.size] = row
        matches = out
    return matches


def same_camera_keep(query_labels, gallery_labels, query_cams, gallery_cams):
    """``keep[q, j]`` is false when gallery ``j`` shares query ``q``'s label and camera."""
    ql = np.asarray(query_labels)[:, None]
    gl = np.asarray(gallery_labels)[None, :]
    qc = np.asarray(query_cams)[:, None]
    gc = np.asarray(gallery_cams)[None, :]
    return ~((ql == gl) & (qc == gc))


def _stats(rankings, query_labels, gallery_labels, keep=None):
    matches = _relevance(rankings, query_labels, gallery_labels, keep)
    ap, first, num_rel = kernels.ranked_matches_stats(matches)
    valid = num_rel > 0
    if not valid.any():
        raise DataError("no query has a relevant gallery item")
    excluded = int((~valid).sum())
    if excluded:
        logger.warning("%d queries without a relevant gallery item excluded", excluded)
    return ap, first, valid, excluded


def cmc(rankings, query_labels, gallery_labels, ranks=DEFAULT_RANKS, keep=None):
    """Fraction of valid queries whose first correct match is within each rank."""
    _, first, valid, _ = _stats(rankings, query_labels, gallery_labels, keep)
    pos = first[valid]
    return {int(k): float(np.mean(pos < k)) for k in ranks}


def mean_ap(rankings, query_labels, gallery_labels, keep=None):
    ap, _, valid, _ = _stats(rankings, query_labels, gallery_labels, keep)
    return float(ap[valid].mean())


@dataclass
class RetrievalReport:
    cmc: dict
    map_score: float
    per_query_ap: list
    num_queries: int
    num_gallery: int
    num_excluded_queries: int = 0
    config_fingerprint: str = ""
    seeds: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "map": self.map_score,
            "per_query_ap": list(self.per_query_ap),
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
            "num_excluded_queries": self.num_excluded_queries,
            "config_fingerprint": self.config_fingerprint,
            "seeds": dict(self.seeds),
        }


def evaluate(queries, gallery, query_labels, gallery_labels, ranks=DEFAULT_RANKS,
             keep=None, fingerprint="", seeds=None):
    """Rank, score and package a ``RetrievalReport``; also returns the rankings."""
    rankings, sims = rank_all(queries, gallery)
    ap, first, valid, excluded = _stats(rankings, query_labels, gallery_labels, keep)
    pos = first[valid]
    report = RetrievalReport(
        cmc={int(k): float(np.mean(pos < k)) for k in ranks},
        map_score=float(ap[valid].mean()),
        per_query_ap=[float(x) for x in ap[valid]],
        num_queries=int(valid.sum()),
        num_gallery=int(np.asarray(gallery).shape[0]),
        num_excluded_queries=excluded,
        config_fingerprint=fingerprint,
        seeds=seeds or {},
    )
    return report, rankings, sims


def config_fingerprint(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _dump(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(_dump(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        return f"{float(obj):.6f}"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return json.dumps(obj)


def report_json(report):
    """Deterministic JSON text: sorted keys, floats with 6 decimals."""
    data = report.to_dict() if isinstance(report, RetrievalReport) else report
    return _dump(data) + "\n"


def emit_report(report, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_json(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path):
    data = json.loads(Path(path).read_text())
    missing = [f for f in REPORT_FIELDS if f not in data]
    if missing:
        raise DataError(f"{path}: report is missing fields {missing}")
    return data


def write_ranking_table(path, rankings, sims, query_ids, gallery_ids, query_labels,
                        gallery_labels, top=10):
    """TSV: query_id, rank (1-based), gallery_id, similarity, correct."""
    lines = ["query_id\trank\tgallery_id\tsimilarity\tcorrect"]
    for qi, row in enumerate(rankings):
        for r, gi in enumerate(row[:top]):
            correct = int(gallery_labels[gi] == query_labels[qi])
            lines.append(f"{query_ids[qi]}\t{r + 1}\t{gallery_ids[gi]}\t{sims[qi, gi]:.6f}\t{correct}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)

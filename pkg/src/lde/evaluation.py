"""Query-vs-gallery ranking metrics (mAP and CMC) with the usual junk rule.

A gallery item sharing both identity and camera with the query is junk: it is
removed from the ranking before anything is counted. Queries left without a
positive are dropped and reported.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TOPK = (1, 5, 10)


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[int, float]
    num_queries: int
    num_dropped: int

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "cmc": {f"r{k}": v for k, v in sorted(self.cmc.items())},
                "num_queries": self.num_queries, "num_dropped": self.num_dropped}


def _normalize(x: np.ndarray, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EvaluationError(f"{what} contains a zero-norm embedding (row {int(np.flatnonzero(norms == 0)[0])})")
    return x / norms


def cosine_distances(query_embs, gallery_embs) -> np.ndarray:
    return 1.0 - _normalize(query_embs, "query") @ _normalize(gallery_embs, "gallery").T


def rank_gallery(query_emb, gallery_embs) -> np.ndarray:
    """Gallery indices by ascending cosine distance; ties keep gallery order."""
    g = np.atleast_2d(gallery_embs)
    if g.shape[0] < 1:
        raise EvaluationError("empty gallery")
    return np.argsort(cosine_distances(query_emb, g)[0], kind="stable")


def average_precision(ranking: Sequence[int], positives, junk=()) -> float:
    """Mean precision at each positive's position, counted after removing junk entries."""
    positives, junk = set(positives), set(junk)
    if not positives - junk:
        raise EvaluationError("no positives to score")
    hits, precs = 0, []
    pos = 0
    for item in ranking:
        if item in junk:
            continue
        pos += 1
        if item in positives:
            hits += 1
            precs.append(hits / pos)
    return float(np.mean(precs))


def _query_metrics(order_match: np.ndarray, topk) -> tuple[float, np.ndarray]:
    hit_pos = np.flatnonzero(order_match)
    precs = (np.arange(len(hit_pos)) + 1) / (hit_pos + 1)
    cmc = np.array([hit_pos[0] < k for k in topk], dtype=float)
    return float(precs.mean()), cmc


def evaluate_distmat(distmat, q_pids, q_cams, g_pids, g_cams, topk=TOPK) -> EvalReport:
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, q_cams = np.asarray(q_pids), np.asarray(q_cams)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    if distmat.shape != (len(q_pids), len(g_pids)):
        raise EvaluationError(f"distance matrix {distmat.shape} does not match {len(q_pids)} queries x {len(g_pids)} gallery")
    aps, cmcs, dropped = [], [], 0
    for i in range(len(q_pids)):
        order = np.argsort(distmat[i], kind="stable")
        junk = (g_pids[order] == q_pids[i]) & (g_cams[order] == q_cams[i])
        match = (g_pids[order] == q_pids[i])[~junk]
        if not match.any():
            dropped += 1
            continue
        ap, cmc = _query_metrics(match, topk)
        aps.append(ap)
        cmcs.append(cmc)
    if not aps:
        raise EvaluationError(f"no evaluable queries ({dropped} dropped for lack of a cross-camera positive)")
    cmc = np.mean(cmcs, axis=0)
    return EvalReport(float(np.mean(aps)), {k: float(v) for k, v in zip(topk, cmc)}, len(aps), dropped)


def evaluate(q_pids, q_cams, g_pids, g_cams, q_embs, g_embs, topk=TOPK) -> EvalReport:
    """mAP and CMC of cosine-distance retrieval."""
    return evaluate_distmat(cosine_distances(q_embs, g_embs), q_pids, q_cams, g_pids, g_cams, topk)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def write_embeddings(paths: Sequence[str], embs: np.ndarray, out) -> None:
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for p, e in zip(paths, np.asarray(embs, dtype=np.float64)):
            fh.write(json.dumps({"path": p, "embedding": [float(v) for v in e]}) + "\n")


def read_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[obj["path"]] = np.asarray(obj["embedding"], dtype=np.float64)
            except (ValueError, KeyError, TypeError) as e:
                raise EvaluationError(f"{path}:{lineno}: bad embedding row ({e})") from None
    return out


def report_csv_row(report: EvalReport) -> str:
    d = report.to_dict()
    row = {"mAP": d["mAP"], **d["cmc"], "num_queries": d["num_queries"], "num_dropped": d["num_dropped"]}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    return buf.getvalue()


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        Path(csv_path).write_text(report_csv_row(report))

"""Top-k accuracy and MRR per familiarity subset, and per-region Top-1 for heatmaps."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import FAMILIAR, UNFAMILIAR, Poi
from .numerics import ops
from .regions import RegionGrid, decode_region, region_of
from .training import TrainingWindow, batch_arrays, length_batches

SUBSETS = ("familiar", "unfamiliar", "total")
KS = (1, 5, 10)


@dataclass(frozen=True)
class MetricReport:
    subset: str
    top1: float
    top5: float
    top10: float
    mrr: float
    n_queries: int


def topk_hit(ranked: Sequence[int], truth: int, k: int) -> int:
    return int(truth in list(ranked[:k]))


def mrr(ranks: Sequence[int]) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ValueError("mrr of an empty query set")
    if np.any(ranks < 1):
        raise ValueError("ranks start at 1")
    return float(np.mean(1.0 / ranks))


def ranks_from_scores(scores: np.ndarray, truths: Sequence[int]) -> np.ndarray:
    """1-based rank of each truth under descending score, ties to the smaller id."""
    scores = np.atleast_2d(scores)
    truths = np.asarray(truths)
    rows = np.arange(len(truths))
    s_true = scores[rows, truths][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_true) | ((scores == s_true) & (ids < truths[:, None]))
    return 1 + ahead.sum(axis=1)


def model_ranks(model, windows: Sequence[TrainingWindow], batch_size: int = 256) -> np.ndarray:
    """Rank of each window's target under ``model``.

    Neural models are ranked on softmax probabilities, as ``predict_topk`` does.
    Any object with a ``truth_ranks(windows)`` method supplies ranks directly.
    """
    if hasattr(model, "truth_ranks"):
        return np.asarray(model.truth_ranks(windows))
    out = np.zeros(len(windows), dtype=np.int64)
    for idx in length_batches(windows, batch_size):
        ids, tp, _ = batch_arrays([windows[i] for i in idx])
        probs = ops.softmax_np(model.poi_logits(ids), axis=-1)
        out[idx] = ranks_from_scores(probs, tp)
    return out


def report_from_ranks(subset: str, ranks: Sequence[int]) -> MetricReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        nan = float("nan")
        return MetricReport(subset, nan, nan, nan, nan, 0)
    hits = [float(np.mean(ranks <= k)) for k in KS]
    return MetricReport(subset, *hits, mrr(ranks), int(ranks.size))


def evaluate(model, windows: Sequence[TrainingWindow], subsets: Sequence[str] = SUBSETS) -> dict[str, MetricReport]:
    """Metrics per familiarity subset; ``total`` covers every window."""
    unknown = set(subsets) - set(SUBSETS)
    if unknown:
        raise ValueError(f"unknown subsets {sorted(unknown)}; valid: {SUBSETS}")
    ranks = model_ranks(model, windows)
    labels = np.array([w.familiarity for w in windows])
    masks = {
        "familiar": labels == FAMILIAR,
        "unfamiliar": labels == UNFAMILIAR,
        "total": np.ones(len(windows), dtype=bool),
    }
    return {s: report_from_ranks(s, ranks[masks[s]]) for s in subsets}


def region_accuracy(
    model, windows: Sequence[TrainingWindow], pois: Sequence[Poi], grid: RegionGrid
) -> dict[int, tuple[float, int]]:
    """Top-1 per region of the target POI: ``region_id -> (top1, n)``."""
    ranks = model_ranks(model, windows)
    hits: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for w, r in zip(windows, ranks):
        poi = pois[w.target_poi]
        cell = hits[region_of(poi.lat, poi.lon, grid)]
        cell[0] += int(r == 1)
        cell[1] += 1
    return {rid: (h / n, n) for rid, (h, n) in sorted(hits.items())}


def write_region_rows(path, regions: Mapping[int, tuple[float, int]]) -> None:
    """``region_id<TAB>lat_cell<TAB>lon_cell<TAB>top1<TAB>n`` per region."""
    rows = []
    for rid in sorted(regions):
        top1, n = regions[rid]
        row, col = decode_region(rid)
        rows.append(f"{rid}\t{row}\t{col}\t{top1:.6f}\t{n}\n")
    Path(path).write_text("".join(rows), encoding="utf-8")


REPORT_HEADER = "model\tsubset\ttop1\ttop5\ttop10\tmrr\tn\n"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def format_report(rows: Sequence[tuple[str, MetricReport]]) -> str:
    lines = [REPORT_HEADER]
    for name, r in rows:
        lines.append(f"{name}\t{r.subset}\t{_fmt(r.top1)}\t{_fmt(r.top5)}\t{_fmt(r.top10)}\t{_fmt(r.mrr)}\t{r.n_queries}\n")
    return "".join(lines)


def write_report(path, rows: Sequence[tuple[str, MetricReport]]) -> None:
    Path(path).write_text(format_report(rows), encoding="utf-8")


def read_report(path) -> list[tuple[str, MetricReport]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        name, subset, t1, t5, t10, m, n = line.split("\t")
        out.append((name, MetricReport(subset, float(t1), float(t5), float(t10), float(m), int(n))))
    return out

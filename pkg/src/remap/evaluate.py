"""Retrieval evaluation: exhaustive search, mAP, Recall@4, query expansion.

Rankings never contain the query itself.  Junk ids are removed from a
ranking before precision is computed, so they neither help nor hurt.
Relevant items that never show up contribute zero precision, which
keeps AP honest for truncated or approximate rankings.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .aggregate import l2_normalize
from .errors import ContractError, DataError
from . import pq as pqmod
from .tensorio import DatasetManifest


def search_exhaustive(ids: list[str], matrix: np.ndarray, query: np.ndarray,
                      exclude_id: str | None = None) -> list[tuple[str, float]]:
    """Squared-distance scan over all descriptors, ascending, ties by id."""
    X = np.asarray(matrix, dtype=np.float64)
    if X.shape[0] != len(ids):
        raise ContractError(f"{X.shape[0]} descriptors vs {len(ids)} ids")
    d2 = np.sum((X - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    order = sorted(range(len(ids)), key=lambda i: (d2[i], ids[i]))
    return [(ids[i], float(d2[i])) for i in order if ids[i] != exclude_id]


def average_precision(ranking_ids: list[str], relevant_ids, junk_ids=()) -> float:
    """Mean precision at each relevant rank, junk stripped first.

    Relevant items absent from the ranking count as zero, so the
    denominator is always the full relevant set size.
    """
    junk = set(junk_ids)
    relevant = set(relevant_ids) - junk
    if not relevant:
        raise ContractError("average_precision needs a non-empty relevant set")
    hits = 0
    total = 0.0
    rank = 0
    for image_id in ranking_ids:
        if image_id in junk:
            continue
        rank += 1
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def recall_at_4(ranking_ids: list[str], relevant_ids, query_id: str,
                include_self: bool = True) -> int:
    """Relevant hits in the top four, 4-per-class style.

    With include_self the query occupies one of the four slots as its
    own trivially correct result (the ranking itself never contains it),
    leaving three slots for retrieved images.
    """
    relevant = set(relevant_ids) - {query_id}
    slots = 3 if include_self else 4
    hits = sum(1 for i in ranking_ids[:slots] if i in relevant)
    return hits + (1 if include_self else 0)


def query_expand(query: np.ndarray, ranking_ids: list[str],
                 descriptors: dict[str, np.ndarray], topk: int) -> np.ndarray:
    """Average query expansion: renormalized mean of query and top-k hits."""
    if topk < 0:
        raise ContractError(f"qe topk must be >= 0, got {topk}")
    if topk == 0:
        return np.asarray(query, dtype=np.float64)
    stack = [np.asarray(query, dtype=np.float64)]
    stack += [descriptors[i] for i in ranking_ids[:topk]]
    return l2_normalize(np.mean(stack, axis=0))


@dataclass
class EvalOptions:
    search: str = "exhaustive"  # exhaustive | truncate | pq
    truncate_dim: int | None = None
    qe_topk: int = 0
    multiscale: bool = False
    include_self: bool = True
    with_recall4: bool = False
    pq_m: int = 16
    pq_k: int = 256
    pq_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.search not in ("exhaustive", "truncate", "pq"):
            problems.append(f"unknown search mode {self.search!r}")
        if self.search == "truncate" and (self.truncate_dim or 0) < 1:
            problems.append("truncate search needs truncate_dim >= 1")
        if self.qe_topk < 0:
            problems.append(f"qe_topk must be >= 0, got {self.qe_topk}")
        if problems:
            raise ContractError("; ".join(problems))


def _rank_ids(pairs: list[tuple[str, float]]) -> list[str]:
    return [i for i, _ in pairs]


def evaluate(manifest: DatasetManifest, ids: list[str], matrix: np.ndarray,
             options: EvalOptions) -> dict:
    """Score every query entry against the descriptor set.

    ids/matrix hold one descriptor per manifest entry (already fused if
    multiscale was requested at extraction time).  Returns a plain dict
    ready for JSON serialization.
    """
    X = np.asarray(matrix, dtype=np.float64)
    index = {image_id: X[i] for i, image_id in enumerate(ids)}
    queries = manifest.queries()
    if not queries:
        raise ContractError("manifest has no query entries")
    missing = [e.image_id for e in queries if e.image_id not in index]
    if missing:
        raise DataError(f"queries missing from descriptor set: {missing}")

    degenerate = bool(all(np.array_equal(X[0], X[i]) for i in range(len(ids))))

    if options.search == "truncate":
        base = np.stack([pqmod.truncate(X[i], options.truncate_dim)
                         for i in range(len(ids))])
        trunc_index = {image_id: base[i] for i, image_id in enumerate(ids)}
        def ranking_for(q_id):
            q = trunc_index[q_id]
            if options.qe_topk > 0:
                first = search_exhaustive(ids, base, q, exclude_id=q_id)
                q = query_expand(q, _rank_ids(first), trunc_index, options.qe_topk)
            return search_exhaustive(ids, base, q, exclude_id=q_id)
    elif options.search == "pq":
        codebook = pqmod.pq_train(X, m=options.pq_m, k=options.pq_k,
                                  iters=options.pq_iters, seed=options.seed)
        codes = pqmod.pq_encode(codebook, X)
        def ranking_for(q_id):
            q = index[q_id]
            pairs = [(i, d) for i, d in pqmod.adc_search(codebook, q, codes, ids)
                     if i != q_id]
            if options.qe_topk > 0:
                q = query_expand(q, _rank_ids(pairs), index, options.qe_topk)
                pairs = [(i, d) for i, d in pqmod.adc_search(codebook, q, codes, ids)
                         if i != q_id]
            return pairs
    else:
        def ranking_for(q_id):
            q = index[q_id]
            pairs = search_exhaustive(ids, X, q, exclude_id=q_id)
            if options.qe_topk > 0:
                q = query_expand(q, _rank_ids(pairs), index, options.qe_topk)
                pairs = search_exhaustive(ids, X, q, exclude_id=q_id)
            return pairs

    per_query = {}
    recall_scores = {}
    for entry in queries:
        ranked = _rank_ids(ranking_for(entry.image_id))
        relevant = set(entry.relevant_ids) - {entry.image_id}
        per_query[entry.image_id] = average_precision(
            ranked, relevant, entry.junk_ids)
        if options.with_recall4:
            recall_scores[entry.image_id] = recall_at_4(
                ranked, entry.relevant_ids, entry.image_id,
                include_self=options.include_self)

    report = {
        "map": float(np.mean(list(per_query.values()))),
        "per_query": per_query,
        "num_queries": len(queries),
        "num_images": len(ids),
        "degenerate": degenerate,
        "options": asdict(options),
    }
    if options.with_recall4:
        report["recall4_mean"] = float(np.mean(list(recall_scores.values())))
        report["recall4_per_query"] = recall_scores
    if options.search == "pq":
        exhaustive = evaluate(manifest, ids, matrix,
                              EvalOptions(search="exhaustive",
                                          qe_topk=options.qe_topk,
                                          include_self=options.include_self))
        report["exhaustive_map"] = exhaustive["map"]
        report["pq_map_gap"] = exhaustive["map"] - report["map"]
    return report


def format_report(report: dict) -> str:
    """Small fixed-width table for terminal output."""
    lines = []
    lines.append(f"{'images':>12}  {report['num_images']}")
    lines.append(f"{'queries':>12}  {report['num_queries']}")
    lines.append(f"{'search':>12}  {report['options']['search']}")
    lines.append(f"{'mAP':>12}  {report['map']:.4f}")
    if "recall4_mean" in report:
        lines.append(f"{'recall@4':>12}  {report['recall4_mean']:.4f}")
    if "pq_map_gap" in report:
        lines.append(f"{'exhaustive':>12}  {report['exhaustive_map']:.4f}")
        lines.append(f"{'pq gap':>12}  {report['pq_map_gap']:+.4f}")
    if report.get("degenerate"):
        lines.append(f"{'warning':>12}  all descriptors identical; ranking is "
                     "tie-break order only")
    return "\n".join(lines)

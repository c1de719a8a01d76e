"""Language-bias measurement for bilingual retrieval.

LBKL compares, per query, the L1/L2 proportions of the ground-truth list
with those of the predicted list using KL(gt || pred), then averages over
queries. The histogram counts languages among the top-K retrieved
candidates, ignoring relevance.
"""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from recruitenc._io import write_csv
from recruitenc.corpus import LangTag, SynonymBenchmark, dominant_script
from recruitenc.evalkit import CandidatePool, EmbeddingSource, PoolMode, embed_items, rank

SMOOTHING_EPS = 1e-9
LOG_BASES = {"e": math.e, "2": 2.0, "10": 10.0}


@dataclass(frozen=True)
class LanguageDistribution:
    p_l1: float
    p_l2: float

    def __post_init__(self):
        if self.p_l1 < 0 or self.p_l2 < 0 or abs(self.p_l1 + self.p_l2 - 1.0) > 1e-9:
            raise ValueError(f"not a distribution: ({self.p_l1}, {self.p_l2})")


def language_proportions(items: Sequence[LangTag]) -> LanguageDistribution:
    """Share of L1 and L2 tags. Code-switched items must be resolved beforehand."""
    if len(items) == 0:
        raise ValueError("cannot take proportions of an empty list")
    n1 = n2 = 0
    for t in items:
        t = LangTag(t)
        if t == LangTag.L1:
            n1 += 1
        elif t == LangTag.L2:
            n2 += 1
        else:
            raise ValueError("code-switched items must be resolved to L1 or L2 by dominant script")
    n = n1 + n2
    return LanguageDistribution(n1 / n, n2 / n)


def _smooth(q: tuple[float, float], eps: float) -> tuple[float, float]:
    q = tuple(x if x > 0 else eps for x in q)
    s = sum(q)
    return q[0] / s, q[1] / s


def lbkl_per_query(gt: LanguageDistribution, pred: LanguageDistribution, log_base: float | str = math.e,
                   eps: float = SMOOTHING_EPS) -> float:
    """``sum_x P(x) log(P(x) / Q(x))`` over the two languages, P = ground truth.

    Terms with ``P(x) = 0`` vanish; if some ``Q(x) = 0`` where ``P(x) > 0`` the
    zero entries of Q are raised to ``eps`` and Q is renormalized.
    """
    base = LOG_BASES[str(log_base)] if isinstance(log_base, str) else float(log_base)
    p = (gt.p_l1, gt.p_l2)
    q = (pred.p_l1, pred.p_l2)
    if any(pi > 0 and qi == 0 for pi, qi in zip(p, q)):
        q = _smooth(q, eps)
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return max(total, 0.0) / math.log(base)


@dataclass
class LBKLReport:
    per_query: list[float]
    query_ids: list[str]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    benchmark: str = ""

    @property
    def q(self) -> int:
        return len(self.per_query)

    @property
    def mean(self) -> float:
        return sum(self.per_query) / self.q if self.q else float("nan")

    def to_csv(self, path) -> None:
        vals = self.per_query or [float("nan")]
        write_csv(path, ("benchmark", "q", "mean_lbkl", "min_lbkl", "max_lbkl", "skipped"),
                  [[self.benchmark, self.q, self.mean, min(vals), max(vals), len(self.skipped)]])

    def per_query_csv(self, path) -> None:
        write_csv(path, ("query_id", "lbkl"), zip(self.query_ids, self.per_query))


def lbkl(queries: Sequence[tuple[Sequence[LangTag], Sequence[LangTag]]], pred_k: int | None = None,
         log_base: float | str = math.e, query_ids: Sequence[str] | None = None,
         benchmark: str = "") -> LBKLReport:
    """Mean per-query LBKL over ``(ground-truth tags, predicted tags)`` pairs.

    Predicted tags are in rank order and are cut to the ground-truth length,
    or to ``pred_k`` when given.
    """
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(queries))]
    vals, kept, skipped = [], [], []
    for qid, (gt, pred) in zip(ids, queries):
        if len(gt) == 0:
            raise ValueError(f"query {qid} has an empty ground-truth list")
        cut = list(pred)[:pred_k if pred_k is not None else len(gt)]
        if not cut:
            skipped.append((qid, "empty prediction"))
            continue
        vals.append(lbkl_per_query(language_proportions(gt), language_proportions(cut), log_base))
        kept.append(qid)
    return LBKLReport(vals, kept, skipped, benchmark)


def _resolved(pool: CandidatePool) -> list[LangTag]:
    return pool.pool_langs


def lbkl_for_benchmark(source: EmbeddingSource, benchmark: SynonymBenchmark, pool_mode="combined",
                       pred_k: int | None = None, log_base: float | str = math.e) -> LBKLReport:
    """Rank each query against the pool and score the language mix of its results."""
    qv = embed_items(source, benchmark.queries)
    pool = CandidatePool.build(benchmark.candidates, embed_items(source, benchmark.candidates), pool_mode)
    langs = _resolved(pool)
    by_group = defaultdict(list)
    for i, g in enumerate(pool.groups):
        by_group[g].append(i)
    items, ids, skipped = [], [], []
    for q, vec in sorted(zip(benchmark.queries, qv), key=lambda t: t[0].id):
        gt_idx = [i for i in by_group.get(q.group, []) if pool.ids[i] != q.id]
        if not gt_idx:
            skipped.append((q.id, "no ground-truth candidates in pool"))
            continue
        ranked = rank(vec, pool, q.id)
        items.append(([langs[i] for i in gt_idx], [langs[i] for i in ranked.positions]))
        ids.append(q.id)
    report = lbkl(items, pred_k, log_base, ids, benchmark.name)
    report.skipped = skipped + report.skipped
    return report


@dataclass
class HistogramReport:
    """Per query subcategory, how many queries retrieved ``b`` L1 candidates in their top K."""

    top_k: int
    counts_l1: dict[str, list[int]]
    hist_l1: dict[str, np.ndarray]
    hist_l2: dict[str, np.ndarray]

    def mean_count_l1(self, subcategory: str | None = None) -> float:
        vals = [c for s, cs in self.counts_l1.items() if subcategory in (None, s) for c in cs]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[list]:
        out = []
        for sub in sorted(self.hist_l1):
            for lang, hist in (("L1", self.hist_l1[sub]), ("L2", self.hist_l2[sub])):
                out.extend([sub, lang, b, int(c)] for b, c in enumerate(hist))
        return out

    def to_csv(self, path) -> None:
        write_csv(path, ("subcategory", "language", "bin", "count"), self.rows())


def language_histogram(source: EmbeddingSource, benchmark: SynonymBenchmark, top_k: int = 100) -> HistogramReport:
    """Language frequencies among each query's top-K in the combined pool."""
    qv = embed_items(source, benchmark.queries)
    pool = CandidatePool.build(benchmark.candidates, embed_items(source, benchmark.candidates),
                               PoolMode.COMBINED)
    if len(pool) < top_k:
        warnings.warn(f"pool has {len(pool)} entries; top_k clamped from {top_k}", stacklevel=2)
        top_k = len(pool)
    langs = np.array([l == LangTag.L1 for l in _resolved(pool)])
    counts: dict[str, list[int]] = defaultdict(list)
    for q, vec in sorted(zip(benchmark.queries, qv), key=lambda t: t[0].id):
        ranked = rank(vec, pool, q.id)
        counts[q.lang.value].append(int(langs[ranked.positions[:top_k]].sum()))
    h1 = {s: np.bincount(c, minlength=top_k + 1) for s, c in counts.items()}
    h2 = {s: np.bincount([top_k - x for x in c], minlength=top_k + 1) for s, c in counts.items()}
    return HistogramReport(top_k, dict(counts), h1, h2)

"""Retrieval and probe evaluation for any embedding source.

An *embedding source* is either a callable mapping a list of texts to a
``(n, d)`` array (an :class:`~recruitenc.encoder.EncoderModel` qualifies) or a
mapping from item id to vector, e.g. one loaded with :func:`load_embedding_dump`.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from recruitenc._io import atomic_write_text, write_csv
from recruitenc.corpus import LangTag, SynonymBenchmark, SynonymEntry, dominant_script
from recruitenc.numcore import AdamState, adam_step

logger = logging.getLogger(__name__)

DUMP_VERSION = 1
NORM_WARN_TOL = 1e-3

EmbeddingSource = Union[Callable[[Sequence[str]], np.ndarray], Mapping[str, np.ndarray]]


class PoolMode(str, enum.Enum):
    L1_ONLY = "l1"
    L2_ONLY = "l2"
    COMBINED = "combined"

    @classmethod
    def parse(cls, value) -> "PoolMode":
        if isinstance(value, PoolMode):
            return value
        v = str(value).lower()
        aliases = {"l1": cls.L1_ONLY, "l1_only": cls.L1_ONLY, "l2": cls.L2_ONLY,
                   "l2_only": cls.L2_ONLY, "combined": cls.COMBINED}
        if v not in aliases:
            raise ValueError(f"unknown pool mode {value!r}")
        return aliases[v]


def embed_items(source: EmbeddingSource, items: Sequence[SynonymEntry | tuple]) -> np.ndarray:
    """Vectors for benchmark items, by text (callable source) or id (mapping source)."""
    if isinstance(source, Mapping):
        missing = [it.id for it in items if it.id not in source]
        if missing:
            raise KeyError(f"{len(missing)} item ids missing from embedding source, e.g. {missing[0]!r}")
        return np.stack([np.asarray(source[it.id], dtype=np.float64) for it in items])
    return np.asarray(source([it.text for it in items]), dtype=np.float64)


@dataclass
class CandidatePool:
    """Embedded candidates restricted to one language or combined.

    Code-switched candidates join the single-language pool of their dominant script.
    """

    mode: PoolMode
    ids: list[str]
    langs: list[LangTag]
    vectors: np.ndarray
    groups: list[str]
    texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("candidate ids must be unique")
        if self.mode != PoolMode.COMBINED:
            want = LangTag.L1 if self.mode == PoolMode.L1_ONLY else LangTag.L2
            if any(l != want for l in self.pool_langs):
                raise ValueError(f"{self.mode.value} pool contains entries of another language")
        # rank of each id in ascending id order, for tie-breaking
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._index = {cid: i for i, cid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def pool_langs(self) -> list[LangTag]:
        """Languages with code-switched entries resolved by dominant script."""
        out = []
        for i, l in enumerate(self.langs):
            if l == LangTag.CODE_SWITCHED:
                l = dominant_script(self.texts[i]) if self.texts else LangTag.L1
            out.append(l)
        return out

    def index_of(self, cid: str) -> int:
        return self._index[cid]

    @classmethod
    def build(cls, entries: Sequence[SynonymEntry], vectors: np.ndarray, mode) -> "CandidatePool":
        mode = PoolMode.parse(mode)
        keep = []
        for i, e in enumerate(entries):
            lang = dominant_script(e.text) if e.lang == LangTag.CODE_SWITCHED else e.lang
            if mode == PoolMode.COMBINED or (mode == PoolMode.L1_ONLY) == (lang == LangTag.L1):
                keep.append(i)
        return cls(mode, [entries[i].id for i in keep], [entries[i].lang for i in keep],
                   np.asarray(vectors)[keep], [entries[i].group for i in keep],
                   [entries[i].text for i in keep])


@dataclass
class RankedList:
    query_id: str
    ids: list[str]
    scores: np.ndarray
    positions: np.ndarray = None

    def __len__(self):
        return len(self.ids)


def rank(query_embedding: np.ndarray, pool: CandidatePool, query_id: str | None = None,
         exclude_self: bool = True) -> RankedList:
    """All pool candidates by descending cosine; ties go to the smaller candidate id."""
    if len(pool) == 0:
        raise ValueError("cannot rank against an empty pool")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape[-1] != pool.vectors.shape[1]:
        raise ValueError(f"query dim {q.shape[-1]} does not match pool dim {pool.vectors.shape[1]}")
    # einsum sums each row the same way wherever it sits; BLAS gemv does not,
    # and identical candidates must tie exactly for the id tie-break to apply
    scores = np.einsum("ij,j->i", pool.vectors, q)
    order = np.lexsort((pool._id_rank, -scores))
    if exclude_self and query_id is not None and query_id in pool._index:
        order = order[order != pool.index_of(query_id)]
    return RankedList(query_id, [pool.ids[i] for i in order], scores[order], order)


def _ids(ranked) -> Sequence[str]:
    return ranked.ids if isinstance(ranked, RankedList) else ranked


def recall_at_k(ranked, relevant_ids: Iterable[str], k: int, capped: bool = False) -> float:
    """Share of relevant ids found in the top ``k`` (denominator ``min(|rel|, k)`` when ``capped``)."""
    rel = set(relevant_ids)
    if not rel:
        raise ValueError("relevant set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for c in list(_ids(ranked))[:k] if c in rel)
    return hits / (min(len(rel), k) if capped else len(rel))


def average_precision_at_k(ranked, relevant_ids: Iterable[str], k: int = 25) -> float:
    """Truncated AP: ``sum_{r<=k} P(r) rel(r) / min(|rel|, k)``."""
    rel = set(relevant_ids)
    if not rel:
        raise ValueError("relevant set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits, total = 0, 0.0
    for r, c in enumerate(list(_ids(ranked))[:k], start=1):
        if c in rel:
            hits += 1
            total += hits / r
    return total / min(len(rel), k)


# ---------------------------------------------------------------------------
# synonym retrieval


@dataclass
class MetricsReport:
    """Per-query metrics with micro averages overall and per query language."""

    pool_mode: PoolMode
    metric_names: list[str]
    per_query: list[dict]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    benchmark: str = ""

    def average(self, metric: str, subcategory: str | None = None) -> float:
        vals = [r[metric] for r in self.per_query if subcategory is None or r["lang"] == subcategory]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def averages(self) -> dict[str, dict[str, float]]:
        out = {}
        for sub in (None, "L1", "L2", "CS"):
            if sub is not None and not any(r["lang"] == sub for r in self.per_query):
                continue
            out[sub or "all"] = {m: self.average(m, sub) for m in self.metric_names}
        return out

    def summary_rows(self) -> list[list]:
        rows = []
        for sub, vals in self.averages.items():
            n = sum(1 for r in self.per_query if sub == "all" or r["lang"] == sub)
            for m in self.metric_names:
                rows.append([sub, self.pool_mode.value, m, vals[m], n])
        return rows

    def to_csv(self, path) -> None:
        write_csv(path, ("subcategory", "pool_mode", "metric", "value", "n_queries"), self.summary_rows())

    def per_query_csv(self, path) -> None:
        header = ["query_id", "lang", "pool_mode", "n_relevant"] + self.metric_names
        write_csv(path, header, ([r["query_id"], r["lang"], self.pool_mode.value, r["n_relevant"]]
                                 + [r[m] for m in self.metric_names] for r in self.per_query))


def evaluate_synonym(source: EmbeddingSource, benchmark: SynonymBenchmark, pool_mode="combined",
                     recall_ks: Sequence[int] = (5, 10), map_k: int = 25, capped_recall: bool = False,
                     exclude_self: bool = True) -> MetricsReport:
    """R@k and mAP@k of each query against a pool; relevance is group membership.

    Queries whose group has no candidate in the selected pool are skipped and
    listed in ``report.skipped``.
    """
    mode = PoolMode.parse(pool_mode)
    qv = embed_items(source, benchmark.queries)
    cv = embed_items(source, benchmark.candidates)
    pool = CandidatePool.build(benchmark.candidates, cv, mode)
    by_group = defaultdict(set)
    for cid, g in zip(pool.ids, pool.groups):
        by_group[g].add(cid)
    names = [f"R@{k}" for k in recall_ks] + [f"mAP@{map_k}"]
    rows, skipped = [], []
    for q, vec in sorted(zip(benchmark.queries, qv), key=lambda t: t[0].id):
        rel = by_group.get(q.group, set()) - ({q.id} if exclude_self else set())
        if not rel:
            skipped.append((q.id, f"group {q.group} has no candidate in {mode.value} pool"))
            continue
        ranked = rank(vec, pool, q.id, exclude_self)
        row = {"query_id": q.id, "lang": q.lang.value, "n_relevant": len(rel)}
        for k in recall_ks:
            row[f"R@{k}"] = recall_at_k(ranked, rel, k, capped_recall)
        row[f"mAP@{map_k}"] = average_precision_at_k(ranked, rel, map_k)
        rows.append(row)
    if skipped:
        logger.info("%d queries skipped in %s pool", len(skipped), mode.value)
    return MetricsReport(mode, names, rows, skipped, benchmark.name)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    weights: np.ndarray  # (n_classes, d)
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias


def _softmax_ce(scores: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n


def train_probe(embeddings: np.ndarray, labels: Sequence[int], n_classes: int | None = None,
                epochs: int = 100, seed: int = 0, lr: float = 1e-2, batch_size: int = 64) -> LinearProbe:
    """Softmax-regression probe on frozen embeddings, trained with Adam."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    rng = np.random.default_rng(seed)
    params = {"w": np.zeros((n_classes, x.shape[1])), "b": np.zeros(n_classes)}
    opt = AdamState(lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            _, g = _softmax_ce(x[idx] @ params["w"].T + params["b"], y[idx])
            adam_step(opt, params, {"w": g.T @ x[idx], "b": g.sum(axis=0)})
    return LinearProbe(params["w"], params["b"])


def probe_acc_at_k(probe: LinearProbe, embeddings: np.ndarray, labels: Sequence[int], k: int,
                   train_labels: Sequence[int] | None = None) -> float:
    """Fraction of samples whose label is among the top ``k`` scores (ties: lower class first)."""
    y = np.asarray(labels, dtype=np.int64)
    if train_labels is not None:
        unseen = set(y.tolist()) - set(np.asarray(train_labels).tolist())
        if unseen:
            warnings.warn(f"{len(unseen)} test classes never appear in training", stacklevel=2)
    s = probe.scores(embeddings)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


# ---------------------------------------------------------------------------
# embedding dumps


@dataclass
class EmbeddingRecord:
    id: str
    lang: str
    vector: np.ndarray


def write_embedding_dump(path, ids: Sequence[str], langs: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    lines = [json.dumps({"format_version": DUMP_VERSION, "dim": int(vectors.shape[1]), "count": len(ids)})]
    for i, l, v in zip(ids, langs, vectors):
        lines.append(json.dumps({"id": i, "lang": str(getattr(l, "value", l)),
                                 "vector": [float(x) for x in v]}, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + "\n")


class DumpError(ValueError):
    pass


def load_embedding_dump(path, report: dict | None = None) -> list[EmbeddingRecord]:
    """Read a JSON-lines dump and L2-normalize every vector.

    ``report["renormalized"]`` receives the number of vectors whose norm was
    off by more than 1e-3.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [l for l in fh if l.strip()]
    if not lines:
        raise DumpError(f"{path}: empty dump")
    header = json.loads(lines[0])
    for k in ("format_version", "dim", "count"):
        if k not in header:
            raise DumpError(f"{path}: header missing {k}")
    if header["format_version"] != DUMP_VERSION:
        raise DumpError(f"{path}: unsupported format_version {header['format_version']}")
    dim = int(header["dim"])
    out, off = [], 0
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        vec = np.asarray(rec["vector"], dtype=np.float64)
        if vec.shape != (dim,):
            raise DumpError(f"{path}: record {lineno - 1} (line {lineno}) has dim {vec.size}, expected {dim}")
        if not np.all(np.isfinite(vec)):
            raise DumpError(f"{path}: record {lineno - 1} (line {lineno}) has non-finite entries")
        n = math.sqrt(float(vec @ vec))
        if n == 0.0:
            raise DumpError(f"{path}: record {lineno - 1} (line {lineno}) is a zero vector")
        if abs(n - 1.0) > NORM_WARN_TOL:
            off += 1
        out.append(EmbeddingRecord(str(rec["id"]), str(rec.get("lang", "")), vec / n))
    if len(out) != int(header["count"]):
        raise DumpError(f"{path}: header count {header['count']} but {len(out)} records")
    if off:
        warnings.warn(f"{off} vectors in {path} were not unit norm and were renormalized", stacklevel=2)
    if report is not None:
        report["renormalized"] = off
    return out


def dump_source(records: Sequence[EmbeddingRecord]) -> dict[str, np.ndarray]:
    """Id-keyed embedding source built from dump records."""
    return {r.id: r.vector for r in records}

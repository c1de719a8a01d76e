"""Recruitment text data: postings, language tagging, training pairs and benchmarks.

Data files are UTF-8 JSON-lines. A posting record carries ``id``, ``title_l1``,
``title_l2``, ``description`` and ``job_fields``; a synonym record carries
``text``, ``lang``, ``group`` (plus ``role`` and optional ``id``); an
occupation record carries ``text``, ``label`` and an optional ``split``.

Language 1 is the Thai script by default and language 2 is Latin, but both
ranges are configurable through :class:`ScriptRanges`.
"""
from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_JOB_FIELDS = 28
IOU_THRESHOLD = 0.5
MAX_SAMPLING_ATTEMPTS = 100
# 4641 / 580 / 580 samples for train / validation / test
DEFAULT_SPLIT_RATIO = (0.8, 0.1, 0.1)
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


class LangTag(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    CODE_SWITCHED = "CS"

    @classmethod
    def parse(cls, value: str) -> "LangTag":
        v = str(value).strip().upper()
        aliases = {"L1": cls.L1, "TH": cls.L1, "L2": cls.L2, "EN": cls.L2,
                   "CS": cls.CODE_SWITCHED, "CODE_SWITCHED": cls.CODE_SWITCHED}
        if v not in aliases:
            raise CorpusError(f"unknown language tag {value!r}")
        return aliases[v]


@dataclass(frozen=True)
class ScriptRanges:
    """Unicode ranges that identify letters of each script (inclusive bounds)."""

    l1: tuple[tuple[int, int], ...] = ((0x0E00, 0x0E7F),)
    l2: tuple[tuple[int, int], ...] = ((0x41, 0x5A), (0x61, 0x7A))

    def is_l1(self, ch: str) -> bool:
        o = ord(ch)
        return any(lo <= o <= hi for lo, hi in self.l1) and not ch.isdigit()

    def is_l2(self, ch: str) -> bool:
        o = ord(ch)
        return any(lo <= o <= hi for lo, hi in self.l2)


DEFAULT_SCRIPTS = ScriptRanges()


def script_counts(text: str, scripts: ScriptRanges = DEFAULT_SCRIPTS) -> tuple[int, int]:
    """Number of script-1 and script-2 letters in ``text``."""
    n1 = n2 = 0
    for ch in text:
        if scripts.is_l1(ch):
            n1 += 1
        elif scripts.is_l2(ch):
            n2 += 1
    return n1, n2


def tag_language(text: str, scripts: ScriptRanges = DEFAULT_SCRIPTS) -> LangTag:
    """Tag ``text`` as L1, L2 or code-switched from the scripts of its letters.

    Digits and punctuation are ignored. Raises :class:`CorpusError` when the
    text has no letter from either script.
    """
    if not text or not text.strip():
        raise CorpusError("cannot tag empty text")
    n1, n2 = script_counts(text, scripts)
    if n1 and n2:
        return LangTag.CODE_SWITCHED
    if n1:
        return LangTag.L1
    if n2:
        return LangTag.L2
    raise CorpusError(f"untaggable text {text!r}: no letters from either script")


def dominant_script(text: str, scripts: ScriptRanges = DEFAULT_SCRIPTS) -> LangTag:
    """Resolve a text to L1 or L2 by majority of letters; ties go to L1."""
    n1, n2 = script_counts(text, scripts)
    if n1 == 0 and n2 == 0:
        raise CorpusError(f"untaggable text {text!r}: no letters from either script")
    return LangTag.L1 if n1 >= n2 else LangTag.L2


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class JobPosting:
    id: str
    title_l1: str
    title_l2: str
    description: str
    job_fields: frozenset[str]

    def __post_init__(self):
        if not self.job_fields:
            raise CorpusError(f"posting {self.id!r} has empty job_fields")
        if not (self.title_l1.strip() or self.title_l2.strip()):
            raise CorpusError(f"posting {self.id!r} has no title")

    def to_record(self) -> dict:
        return {"id": self.id, "title_l1": self.title_l1, "title_l2": self.title_l2,
                "description": self.description, "job_fields": sorted(self.job_fields)}


@dataclass(frozen=True)
class TitlePair:
    l1_text: str
    l2_text: str
    source_id: str


@dataclass(frozen=True)
class MatchPair:
    description: str
    title: str
    label: int
    iou_at_sampling: float
    source_id: str = ""
    title_source_id: str = ""

    def to_record(self) -> dict:
        return {"description": self.description, "title": self.title, "label": self.label,
                "iou_at_sampling": self.iou_at_sampling, "source_id": self.source_id,
                "title_source_id": self.title_source_id}


@dataclass(frozen=True)
class SynonymEntry:
    id: str
    text: str
    lang: LangTag
    group: str


@dataclass
class SynonymBenchmark:
    queries: list[SynonymEntry]
    candidates: list[SynonymEntry]
    name: str = "synonym"

    def __post_init__(self):
        groups = {c.group for c in self.candidates}
        for q in self.queries:
            if q.group not in groups:
                raise CorpusError(f"query group {q.group!r} has no candidate")
        for role, items in (("query", self.queries), ("candidate", self.candidates)):
            ids = [e.id for e in items]
            if len(set(ids)) != len(ids):
                raise CorpusError(f"duplicate {role} ids in benchmark")

    def to_records(self) -> list[dict]:
        out = []
        for role, items in (("query", self.queries), ("candidate", self.candidates)):
            for e in items:
                out.append({"id": e.id, "role": role, "text": e.text,
                            "lang": e.lang.value, "group": e.group})
        return out


@dataclass
class OccupationDataset:
    texts: list[str]
    labels: list[str]
    split: list[str]
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.texts) == len(self.labels) == len(self.split)):
            raise CorpusError("texts, labels and split must have equal length")
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise CorpusError(f"unknown split names {sorted(bad)}")
        if not self.classes:
            self.classes = sorted(set(self.labels))
        unknown = set(self.labels) - set(self.classes)
        if unknown:
            raise CorpusError(f"labels outside the class vocabulary: {sorted(unknown)}")

    @property
    def samples(self) -> list[tuple[str, str]]:
        return list(zip(self.texts, self.labels))

    def subset(self, name: str) -> tuple[list[str], np.ndarray]:
        """Texts and integer class indices of one split."""
        index = {c: i for i, c in enumerate(self.classes)}
        rows = [i for i, s in enumerate(self.split) if s == name]
        return [self.texts[i] for i in rows], np.array([index[self.labels[i]] for i in rows], dtype=np.int64)

    def to_records(self) -> list[dict]:
        return [{"text": t, "label": l, "split": s}
                for t, l, s in zip(self.texts, self.labels, self.split)]


# ---------------------------------------------------------------------------
# file io


def _read_jsonl(path) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}: line {lineno}: record is not an object")
            out.append((lineno, rec))
    if not out:
        warnings.warn(f"{path} contains no records", stacklevel=3)
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    from recruitenc._io import atomic_write_text

    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in records]
    atomic_write_text(path, "".join(l + "\n" for l in lines))


def load_postings(path, format: str = "json_lines") -> list[JobPosting]:
    """Read and validate job postings, keeping file order."""
    if format != "json_lines":
        raise CorpusError(f"unsupported format {format!r}")
    postings, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        missing = [k for k in ("id", "title_l1", "title_l2", "description", "job_fields") if k not in rec]
        if missing:
            raise CorpusError(f"{path}: line {lineno}: missing key(s) {', '.join(missing)}")
        pid = str(rec["id"])
        if pid in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate id {pid!r}")
        fields = rec["job_fields"]
        if not isinstance(fields, list) or not fields:
            raise CorpusError(f"{path}: line {lineno}: job_fields must be a non-empty array")
        try:
            p = JobPosting(pid, str(rec["title_l1"] or ""), str(rec["title_l2"] or ""),
                           str(rec["description"] or ""), frozenset(map(str, fields)))
        except CorpusError as exc:
            raise CorpusError(f"{path}: line {lineno}: {exc}") from None
        seen.add(pid)
        postings.append(p)
    return postings


def load_synonym_benchmark(path, name: str | None = None) -> SynonymBenchmark:
    """Read a synonym benchmark; records with ``role: query`` are queries, all others candidates."""
    queries, candidates = [], []
    for lineno, rec in _read_jsonl(path):
        for k in ("text", "group"):
            if k not in rec:
                raise CorpusError(f"{path}: line {lineno}: missing key {k}")
        text = str(rec["text"])
        role = str(rec.get("role", "candidate")).lower()
        if role not in ("query", "candidate"):
            raise CorpusError(f"{path}: line {lineno}: unknown role {role!r}")
        try:
            lang = LangTag.parse(rec["lang"]) if rec.get("lang") else tag_language(text)
        except CorpusError as exc:
            raise CorpusError(f"{path}: line {lineno}: {exc}") from None
        bucket = queries if role == "query" else candidates
        eid = str(rec["id"]) if "id" in rec else f"{role[0]}{len(bucket):06d}"
        bucket.append(SynonymEntry(eid, text, lang, str(rec["group"])))
    return SynonymBenchmark(queries, candidates, name=name or Path(path).stem)


def split_indices(n: int, seed: int, ratio: Sequence[float] = DEFAULT_SPLIT_RATIO) -> list[str]:
    """Stable seeded assignment of ``n`` items to train/val/test."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratio[0]))
    n_val = int(round(n * ratio[1]))
    names = ["test"] * n
    for rank, i in enumerate(order):
        names[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return names


def load_occupation_dataset(path, seed: int = 0, classes: Sequence[str] | None = None) -> OccupationDataset:
    """Read an occupation dataset, splitting 80/10/10 when no record has a split."""
    texts, labels, splits = [], [], []
    for lineno, rec in _read_jsonl(path):
        for k in ("text", "label"):
            if k not in rec:
                raise CorpusError(f"{path}: line {lineno}: missing key {k}")
        split = rec.get("split")
        if split is not None and split not in SPLITS:
            raise CorpusError(f"{path}: line {lineno}: unknown split {split!r}")
        texts.append(str(rec["text"]))
        labels.append(str(rec["label"]))
        splits.append(split)
    given = [s is not None for s in splits]
    if any(given) and not all(given):
        raise CorpusError(f"{path}: split given for some records but not all")
    if not any(given):
        splits = split_indices(len(texts), seed)
    return OccupationDataset(texts, labels, splits, classes=list(classes) if classes else [])


# ---------------------------------------------------------------------------
# training pairs


def iou(fields_a, fields_b) -> float:
    """Intersection over union of two non-empty sets."""
    a, b = set(fields_a), set(fields_b)
    if not a or not b:
        raise CorpusError("iou is undefined for an empty set")
    return len(a & b) / len(a | b)


def build_translation_pairs(postings: Sequence[JobPosting]) -> tuple[list[TitlePair], int]:
    """One title pair per bilingual posting. Returns the pairs and the skip count."""
    pairs, skipped = [], 0
    for p in postings:
        if p.title_l1.strip() and p.title_l2.strip():
            pairs.append(TitlePair(p.title_l1, p.title_l2, p.id))
        else:
            skipped += 1
    if skipped:
        logger.info("skipped %d postings lacking a title in one language", skipped)
    return pairs, skipped


def _pick_title(p: JobPosting, rng: np.random.Generator) -> str:
    titles = [t for t in (p.title_l1, p.title_l2) if t.strip()]
    return titles[int(rng.integers(len(titles)))]


@dataclass
class SamplingReport:
    positives: int = 0
    negatives: int = 0
    shortfall: int = 0
    anchors_without_negatives: int = 0


def sample_match_pairs(postings: Sequence[JobPosting], negatives_per_positive: int = 1,
                       threshold: float = IOU_THRESHOLD, seed: int = 0,
                       max_attempts: int = MAX_SAMPLING_ATTEMPTS,
                       report: SamplingReport | None = None) -> list[MatchPair]:
    """Positive description/title pairs plus IoU-certified negatives.

    Each posting contributes its own (description, title) as a positive. Negatives
    take the title of another posting drawn uniformly at random whose field IoU
    with the anchor is strictly below ``threshold``; each slot gets at most
    ``max_attempts`` draws. The title language is chosen at random per pair.
    """
    if len(postings) < 2:
        raise CorpusError("need at least two postings to sample negatives")
    if not 0.0 < threshold <= 1.0:
        raise CorpusError("threshold must be in (0, 1]")
    rng = np.random.default_rng(seed)
    report = report if report is not None else SamplingReport()
    n = len(postings)
    pairs = []
    for i, anchor in enumerate(postings):
        pairs.append(MatchPair(anchor.description, _pick_title(anchor, rng), 1,
                               1.0, anchor.id, anchor.id))
        report.positives += 1
        got = 0
        for _ in range(negatives_per_positive):
            for _ in range(max_attempts):
                j = int(rng.integers(n - 1))
                j += j >= i
                other = postings[j]
                score = iou(anchor.job_fields, other.job_fields)
                if score < threshold:
                    pairs.append(MatchPair(anchor.description, _pick_title(other, rng), 0,
                                           score, anchor.id, other.id))
                    got += 1
                    break
            else:
                report.shortfall += 1
        report.negatives += got
        if negatives_per_positive and not got:
            report.anchors_without_negatives += 1
    if report.negatives == 0 and negatives_per_positive:
        warnings.warn("no eligible negatives found for any anchor", stacklevel=2)
    elif report.shortfall:
        logger.info("negative sampling shortfall: %d slots unfilled", report.shortfall)
    return pairs


def field_targets(fields_per_item: Sequence[Iterable[str]], vocabulary: Sequence[str]) -> np.ndarray:
    """Multi-hot matrix (items x len(vocabulary))."""
    index = {f: k for k, f in enumerate(vocabulary)}
    out = np.zeros((len(fields_per_item), len(vocabulary)), dtype=np.float64)
    for r, fs in enumerate(fields_per_item):
        for f in fs:
            if f not in index:
                raise CorpusError(f"job field {f!r} not in the field vocabulary")
            out[r, index[f]] = 1.0
    return out


def build_field_samples(postings: Sequence[JobPosting]) -> tuple[list[str], list[frozenset[str]]]:
    """Every available title of every posting, paired with the posting's fields."""
    titles, fields = [], []
    for p in postings:
        for t in (p.title_l1, p.title_l2):
            if t.strip():
                titles.append(t)
                fields.append(p.job_fields)
    return titles, fields


def field_vocabulary(postings: Sequence[JobPosting]) -> list[str]:
    return sorted({f for p in postings for f in p.job_fields})


# ---------------------------------------------------------------------------
# synthetic data

_L1_LETTERS = [chr(c) for c in range(0x0E01, 0x0E2F)]
_L2_LETTERS = [chr(c) for c in range(ord("a"), ord("z") + 1)]


def _make_vocab(rng: np.random.Generator, letters: list[str], size: int, lo: int, hi: int) -> list[str]:
    seen: set[str] = set()
    out = []
    while len(out) < size:
        n = int(rng.integers(lo, hi + 1))
        w = "".join(letters[int(k)] for k in rng.integers(len(letters), size=n))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticLexicon:
    """Bijective token lexicon behind a synthetic corpus."""

    l1: list[str]
    l2: list[str]
    token_field: np.ndarray
    fields: list[str]

    def field_tokens(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.token_field == f)

    def render(self, tokens: Sequence[int], lang: LangTag) -> str:
        words = self.l1 if lang == LangTag.L1 else self.l2
        return " ".join(words[t] for t in tokens)


def _draw_title(rng, lex: SyntheticLexicon, primary: int, secondary: int | None,
                lo: int = 1, hi: int = 4) -> list[int]:
    n = int(rng.integers(lo, hi + 1))
    toks = [int(rng.choice(lex.field_tokens(primary)))]
    for _ in range(n - 1):
        f = secondary if secondary is not None and rng.random() < 0.4 else primary
        toks.append(int(rng.choice(lex.field_tokens(f))))
    return toks


def _dominant_field(lex: SyntheticLexicon, tokens: Sequence[int]) -> int:
    counts = np.bincount(lex.token_field[list(tokens)], minlength=len(lex.fields))
    # ties resolve to the field of the first token
    best = counts.max()
    first = int(lex.token_field[tokens[0]])
    return first if counts[first] == best else int(np.argmax(counts))


def generate_synthetic_corpus(n_postings: int, n_fields: int = N_JOB_FIELDS, vocab_size: int = 400,
                              seed: int = 0, n_synonym_groups: int | None = None,
                              n_occupation: int | None = None,
                              ) -> tuple[list[JobPosting], SynonymBenchmark, OccupationDataset]:
    """Bilingual synthetic postings, a held-out synonym benchmark and an occupation set.

    The L1 vocabulary (Thai-block letters) and the L2 vocabulary (Latin letters)
    are in bijection token by token, so every L1 title is the token-wise
    translation of its L2 title. Each token belongs to one job field; titles and
    descriptions draw their tokens from the posting's fields. Synonym groups
    are fresh token combinations (not posting titles) rendered in both
    languages, reordered and with a token dropped; occupation labels are the
    field holding most of a title's tokens.
    """
    if n_postings < 10:
        raise CorpusError("n_postings must be >= 10")
    if vocab_size < 50:
        raise CorpusError("vocab_size must be >= 50")
    if n_fields < 2 or n_fields > vocab_size:
        raise CorpusError("n_fields must be in [2, vocab_size]")
    rng = np.random.default_rng(seed)
    fields = [f"field_{k:02d}" for k in range(n_fields)]
    l2 = _make_vocab(rng, _L2_LETTERS, vocab_size, 3, 7)
    l1 = _make_vocab(rng, _L1_LETTERS, vocab_size, 3, 6)
    token_field = np.arange(vocab_size) % n_fields
    rng.shuffle(token_field)
    lex = SyntheticLexicon(l1, l2, token_field, fields)

    def draw_fields():
        primary = int(rng.integers(n_fields))
        secondary = None
        if rng.random() < 0.3:
            secondary = int(rng.integers(n_fields - 1))
            secondary += secondary >= primary
        return primary, secondary

    postings = []
    for i in range(n_postings):
        primary, secondary = draw_fields()
        toks = _draw_title(rng, lex, primary, secondary)
        own = {primary} if secondary is None else {primary, secondary}
        n_desc = int(rng.integers(12, 25))
        desc_toks = []
        for _ in range(n_desc):
            if rng.random() < 0.75:
                f = int(rng.choice(sorted(own)))
            else:
                f = int(rng.integers(n_fields))
            desc_toks.append(int(rng.choice(lex.field_tokens(f))))
        desc_lang = LangTag.L1 if rng.random() < 0.5 else LangTag.L2
        postings.append(JobPosting(
            id=f"p{i:06d}",
            title_l1=lex.render(toks, LangTag.L1),
            title_l2=lex.render(toks, LangTag.L2),
            description=lex.render(desc_toks, desc_lang),
            job_fields=frozenset(fields[f] for f in own),
        ))

    benchmark = _synthetic_synonyms(rng, lex, n_synonym_groups or max(10, n_postings // 10))
    occupation = _synthetic_occupation(rng, lex, n_occupation or max(50, n_postings // 2), draw_fields)
    return postings, benchmark, occupation


def _variants(rng, toks: list[int]) -> list[list[int]]:
    out = [list(toks)]
    if len(toks) > 1:
        perm = list(toks)
        while perm == list(toks):
            perm = [toks[k] for k in rng.permutation(len(toks))]
        out.append(perm)
    if len(toks) > 2:
        drop = int(rng.integers(len(toks)))
        out.append([t for k, t in enumerate(toks) if k != drop])
    return out


def _synthetic_synonyms(rng, lex: SyntheticLexicon, n_groups: int) -> SynonymBenchmark:
    queries, candidates = [], []
    used: set[tuple[int, ...]] = set()
    n_fields = len(lex.fields)
    g = 0
    while g < n_groups:
        primary = int(rng.integers(n_fields))
        toks = _draw_title(rng, lex, primary, None, lo=2, hi=4)
        key = tuple(sorted(toks))
        if key in used or len(set(toks)) != len(toks):
            continue
        used.add(key)
        group = f"g{g:05d}"
        u = rng.random()
        if u < 0.03 and len(toks) > 1:
            cut = int(rng.integers(1, len(toks)))
            q_text = lex.render(toks[:cut], LangTag.L2) + " " + lex.render(toks[cut:], LangTag.L1)
            q_lang = LangTag.CODE_SWITCHED
        else:
            q_lang = LangTag.L1 if u < 0.515 else LangTag.L2
            q_text = lex.render(toks, q_lang)
        queries.append(SynonymEntry(f"q{g:05d}", q_text, q_lang, group))
        variants = _variants(rng, toks)
        for lang in (LangTag.L1, LangTag.L2):
            for v in variants:
                text = lex.render(v, lang)
                if lang == q_lang and text == q_text:
                    continue
                candidates.append(SynonymEntry(f"c{len(candidates):06d}", text, lang, group))
        g += 1
    return SynonymBenchmark(queries, candidates, name="synthetic-synonym")


def _synthetic_occupation(rng, lex: SyntheticLexicon, n: int, draw_fields) -> OccupationDataset:
    texts, labels = [], []
    for _ in range(n):
        primary, secondary = draw_fields()
        toks = _draw_title(rng, lex, primary, secondary)
        lang = LangTag.L1 if rng.random() < 0.5 else LangTag.L2
        texts.append(lex.render(toks, lang))
        labels.append(lex.fields[_dominant_field(lex, toks)])
    split = split_indices(n, int(rng.integers(2**31)))
    return OccupationDataset(texts, labels, split, classes=list(lex.fields))

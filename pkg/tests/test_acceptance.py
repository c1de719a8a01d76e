"""Acceptance criteria 1-9. Each test carries a ``criterion`` mark; the
session summary prints one PASS/FAIL line per criterion."""
import math
import time
from itertools import combinations

import numpy as np
import pytest

from recruitenc import bias, cli, corpus, evalkit, trainer
from recruitenc.bias import LanguageDistribution as D
from recruitenc.corpus import LangTag, SynonymBenchmark, SynonymEntry
from recruitenc.encoder import EncoderModel, encode, field_head, match_head
from recruitenc.numcore import finite_difference_check

from oracles import brute_ap, brute_iou, brute_rank, brute_recall

FIELDS = [f"field_{k:02d}" for k in range(corpus.N_JOB_FIELDS)]


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.mark.criterion(1, "metric oracles on 200 random cases")
def test_c1_metric_oracles():
    rng = np.random.default_rng(2024)
    with Timer(10):
        for case in range(200):
            n = int(rng.integers(1, 101))
            dim = int(rng.integers(2, 9))
            v = _unit(rng.normal(size=(n, dim)))
            # duplicated vectors force exact score ties
            dup = rng.random(n) < 0.2
            v[dup] = v[0]
            ids = [f"c{i:03d}" for i in rng.permutation(1000)[:n]]
            q = _unit(rng.normal(size=dim))
            pool = evalkit.CandidatePool(evalkit.PoolMode.COMBINED, ids, [LangTag.L2] * n, v, ["g"] * n)
            ranked = evalkit.rank(q, pool)
            oracle = brute_rank(q.tolist(), v.tolist(), ids)
            assert ranked.ids == oracle, f"case {case}"
            rel = set(rng.choice(ids, size=int(rng.integers(1, n + 1)), replace=False).tolist())
            for k in (1, 5, 10, 25, int(rng.integers(1, n + 1))):
                assert abs(evalkit.recall_at_k(ranked, rel, k) - float(brute_recall(oracle, rel, k))) <= 1e-12
                assert abs(evalkit.average_precision_at_k(ranked, rel, k) - float(brute_ap(oracle, rel, k))) <= 1e-12


@pytest.mark.criterion(2, "LBKL scalar cases")
def test_c2_lbkl_scalars():
    with Timer(1):
        assert bias.lbkl_per_query(D(0.5, 0.5), D(0.5, 0.5)) == 0.0
        assert abs(bias.lbkl_per_query(D(0.5, 0.5), D(0.25, 0.75)) - 0.143841) <= 1e-6
        assert abs(bias.lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5)) - 0.693147) <= 1e-6
        for p in (D(1.0, 0.0), D(0.3, 0.7), D(0.0, 1.0)):
            assert bias.lbkl_per_query(p, p) == 0.0
        forward = bias.lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5))
        backward = bias.lbkl_per_query(D(0.5, 0.5), D(1.0, 0.0))
        assert abs(backward - forward) > 1.0


@pytest.fixture(scope="module")
def gc_data():
    posts, _, _ = corpus.generate_synthetic_corpus(40, vocab_size=60, seed=1)
    pairs, _ = corpus.build_translation_pairs(posts)
    matches = corpus.sample_match_pairs(posts, 1, seed=0)
    titles, fs = corpus.build_field_samples(posts)
    return pairs, matches, titles, corpus.field_targets(fs, FIELDS)


@pytest.mark.criterion(3, "finite-difference gradient checks")
def test_c3_gradients(gc_data):
    pairs, matches, titles, y = gc_data
    worst = {}
    with Timer(60):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            for b in (2, 8):
                m = EncoderModel.init(dim=4, hash_size=64, seed=seed, dtype=np.float64)
                mh = match_head(4, width=8, seed=seed, dtype=np.float64)
                fh = field_head(4, len(FIELDS), width=8, seed=seed, dtype=np.float64)
                for tau in (0.05, 1.0):
                    t, f = _unit(rng.normal(size=(2, b, 6)))

                    def raw(p, tau=tau):
                        loss, gt, gf = trainer.contrastive_loss(p["t"], p["f"], tau)
                        return loss, {"t": gt, "f": gf}

                    worst[("contrastive", seed, b, tau)] = finite_difference_check(raw, {"t": t, "f": f})
                    batch = [pairs[i] for i in rng.choice(len(pairs), b, replace=False)]
                    worst[("jt", seed, b, tau)] = finite_difference_check(
                        lambda p: trainer.jt_loss(m, batch, tau), m.parameters(), max_entries=32)
                mb = [matches[i] for i in rng.choice(len(matches), b, replace=False)]
                worst[("jd", seed, b)] = finite_difference_check(
                    lambda p: trainer.jd_loss(mh, m, mb), {**m.parameters(), **mh.parameters()}, max_entries=32)
                idx = rng.choice(len(titles), b, replace=False)
                worst[("jf", seed, b)] = finite_difference_check(
                    lambda p: trainer.jf_loss(fh, m, [titles[i] for i in idx], y[idx]),
                    {**m.parameters(), **fh.parameters()}, max_entries=32)
    bad = {k: v for k, v in worst.items() if not v <= 1e-5}
    print(f"max relative error {max(worst.values()):.2e} over {len(worst)} checks")
    assert not bad


@pytest.mark.criterion(4, "contrastive closed forms")
def test_c4_closed_forms():
    with Timer(1):
        t = np.eye(2, 16)
        assert trainer.contrastive_loss(t, t.copy(), 0.05)[0] <= 1e-6
        for b in (2, 4):
            e = np.tile(_unit(np.arange(1.0, 9.0)), (b, 1))
            assert abs(trainer.contrastive_loss(e, e.copy(), 0.05)[0] - math.log(b)) <= 1e-6


@pytest.mark.criterion(5, "IoU negative sampling soundness")
def test_c5_iou_soundness():
    with Timer(10):
        posts, _, _ = corpus.generate_synthetic_corpus(500, seed=11)
        by_id = {p.id: p for p in posts}
        boundary = {(a.id, b.id) for a, b in combinations(posts, 2) if brute_iou(a.job_fields, b.job_fields) == 0.5}
        assert boundary, "corpus should contain IoU = 0.5 pairs"
        pairs = corpus.sample_match_pairs(posts, negatives_per_positive=3, threshold=0.5, seed=11)
        negatives = [m for m in pairs if m.label == 0]
        assert len(negatives) >= 1000
        for m in negatives:
            a, b = by_id[m.source_id], by_id[m.title_source_id]
            assert brute_iou(a.job_fields, b.job_fields) < 0.5
            assert (a.id, b.id) not in boundary and (b.id, a.id) not in boundary


@pytest.fixture(scope="module")
def c6_run():
    start = time.perf_counter()
    posts, bench, occ = corpus.generate_synthetic_corpus(2000, seed=7)
    cfg = trainer.TrainConfig(dim=128, batch_size=64, steps=200, learning_rate=1e-3, seed=7)
    data = trainer.TrainingData.from_postings(posts, cfg, FIELDS)
    untrained, _ = trainer.init_model(cfg, len(FIELDS))
    before = evalkit.evaluate_synonym(untrained, bench, "combined").average("R@10")
    result = trainer.train(cfg, data)
    after = evalkit.evaluate_synonym(result.model, bench, "combined").average("R@10")
    xtr, ytr = occ.subset("train")
    xte, yte = occ.subset("test")
    probe = evalkit.train_probe(encode(result.model, xtr), ytr, len(occ.classes), epochs=100, seed=7)
    ete = encode(result.model, xte)
    accs = [evalkit.probe_acc_at_k(probe, ete, yte, k) for k in (1, 3, 5)]
    return dict(before=before, after=after, log=result.log, accs=accs, elapsed=time.perf_counter() - start)


@pytest.mark.criterion(6, "end-to-end learning on 2,000 synthetic postings")
def test_c6_end_to_end(c6_run):
    r = c6_run
    print(f"R@10 {r['before']:.3f} -> {r['after']:.3f}; Acc@1/3/5 {r['accs']}; {r['elapsed']:.0f}s")
    assert r["elapsed"] < 180
    assert r["after"] - r["before"] >= 0.20
    first, last = r["log"][0], r["log"][-1]
    for task in trainer.TASKS:
        assert getattr(last, f"loss_{task}") < getattr(first, f"loss_{task}")
    assert r["accs"][0] >= 0.80
    assert r["accs"][0] <= r["accs"][1] <= r["accs"][2]


def _blind_benchmark(lam, n_groups=40, per_group=4, dim=24, seed=0):
    """Concepts shared across languages; ``lam`` weights a +1/-1 language coordinate."""
    rng = np.random.default_rng(seed)
    queries, cands, vecs = [], [], {}
    for g in range(n_groups):
        center = rng.normal(size=dim)
        for c in range(per_group + 1):
            base = center + 0.6 * rng.normal(size=dim)
            base /= np.linalg.norm(base)
            for lang, text, sign in ((LangTag.L1, "งาน", 1.0), (LangTag.L2, "job", -1.0)):
                role = "q" if c == 0 else "c"
                entry = SynonymEntry(f"{role}{g:03d}{c}{lang.value}", text, lang, f"g{g}")
                (queries if c == 0 else cands).append(entry)
                vec = np.append(base, lam * sign)
                vecs[entry.id] = vec / np.linalg.norm(vec)
    return SynonymBenchmark(queries, cands, f"blind-{lam}"), vecs


@pytest.mark.criterion(7, "LBKL detects a language-biased embedding source")
def test_c7_bias_detection():
    with Timer(30):
        vals = []
        for lam in (0.0, 0.5, 1.0, 2.0):
            bench, vecs = _blind_benchmark(lam)
            vals.append(bias.lbkl_for_benchmark(vecs, bench, "combined").mean)
    print("LBKL by lambda:", [round(v, 4) for v in vals])
    assert vals[0] < 0.05
    assert all(a <= b for a, b in zip(vals, vals[1:]))


@pytest.mark.criterion(8, "histogram invariants and blind midpoint")
def test_c8_histogram():
    with Timer(30):
        bench, vecs = _blind_benchmark(0.0, n_groups=60)
        rep = bias.language_histogram(vecs, bench, top_k=100)
        pool = evalkit.CandidatePool.build(bench.candidates, evalkit.embed_items(vecs, bench.candidates), "combined")
        langs = pool.pool_langs
        seen = {}
        for q in sorted(bench.queries, key=lambda e: e.id):
            top = evalkit.rank(vecs[q.id], pool, q.id).positions[:100]
            n1 = sum(1 for i in top if langs[i] == LangTag.L1)
            n2 = sum(1 for i in top if langs[i] == LangTag.L2)
            assert n1 + n2 == 100
            seen.setdefault(q.lang.value, []).append(n1)
        assert rep.counts_l1 == seen
        for sub, counts in rep.counts_l1.items():
            assert rep.hist_l1[sub].sum() == rep.hist_l2[sub].sum() == len(counts)
        assert abs(rep.mean_count_l1() - 50) <= 5


def _pipeline(root, seed=13):
    data, pairs, model = root / "data", root / "pairs", root / "train"
    steps = [
        ["gen-synthetic", "--n", 400, "--vocab-size", 200, "--out", data],
        ["build-pairs", "--postings", data / "postings.jsonl", "--out", pairs],
        ["train", "--postings", data / "postings.jsonl", "--pairs", pairs, "--n-fields", 28, "--steps", 30,
         "--batch-size", 32, "--dim", 32, "--hash-size", 2 ** 14, "--head-width", 64, "--learning-rate", 1e-3,
         "--out", model],
        ["eval-synonym", "--benchmark", data / "synonyms.jsonl", "--model", model / "model.npz", "--out", root / "ev"],
        ["probe", "--occupation", data / "occupation.jsonl", "--model", model / "model.npz", "--epochs", 20,
         "--out", root / "probe"],
        ["bias-lbkl", "--benchmark", data / "synonyms.jsonl", "--model", model / "model.npz", "--out", root / "lbkl"],
        ["bias-histogram", "--benchmark", data / "synonyms.jsonl", "--model", model / "model.npz", "--top-k", 50,
         "--out", root / "hist"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv + ["--seed", seed]]) == 0, argv[0]
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


@pytest.mark.criterion(9, "pipeline determinism")
def test_c9_determinism(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert a == b and len(a) >= 6
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

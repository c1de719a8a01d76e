import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from recruitenc import bias
from recruitenc.bias import LanguageDistribution as D, language_histogram, language_proportions, lbkl, lbkl_per_query
from recruitenc.corpus import LangTag, SynonymBenchmark, SynonymEntry

L1, L2 = LangTag.L1, LangTag.L2

# high-precision references (50-digit mpmath)
KL_HALF_VS_QUARTER = 0.14384103622589046
KL_HALF_VS_ONE_SIDED = 9.66848573891326


class TestProportions:
    def test_examples(self):
        assert language_proportions([L1, L1, L2, L2]) == D(0.5, 0.5)
        assert language_proportions([L1, L1, L1]) == D(1.0, 0.0)
        d = language_proportions([L1] * 7 + [L2] * 3)
        assert (d.p_l1, d.p_l2) == pytest.approx((0.7, 0.3), abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            language_proportions([])
        with pytest.raises(ValueError):
            language_proportions([LangTag.CODE_SWITCHED])
        with pytest.raises(ValueError):
            D(0.7, 0.7)


class TestLBKLPerQuery:
    def test_identity_is_exactly_zero(self):
        for p in (D(0.5, 0.5), D(1.0, 0.0), D(0.3, 0.7)):
            assert lbkl_per_query(p, p) == 0.0

    def test_scalar_oracles(self):
        assert lbkl_per_query(D(0.5, 0.5), D(0.25, 0.75)) == pytest.approx(KL_HALF_VS_QUARTER, abs=1e-12)
        assert lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5)) == pytest.approx(math.log(2), abs=1e-15)
        assert lbkl_per_query(D(0.7, 0.3), D(0.5, 0.5)) == pytest.approx(0.08228287850505185, abs=1e-15)

    def test_asymmetric(self):
        forward = lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5))
        backward = lbkl_per_query(D(0.5, 0.5), D(1.0, 0.0))
        assert forward == pytest.approx(math.log(2), abs=1e-12)
        assert backward == pytest.approx(KL_HALF_VS_ONE_SIDED, abs=1e-9)
        assert forward != backward

    def test_smoothing_keeps_it_finite(self):
        v = lbkl_per_query(D(0.5, 0.5), D(0.0, 1.0))
        assert math.isfinite(v) and v == pytest.approx(KL_HALF_VS_ONE_SIDED, abs=1e-9)

    def test_log_bases(self):
        nat = lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5))
        assert lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5), "2") == pytest.approx(1.0, abs=1e-15)
        assert lbkl_per_query(D(1.0, 0.0), D(0.5, 0.5), 10) == pytest.approx(nat / math.log(10), abs=1e-15)

    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
    def test_non_negative(self, a, b, c, d):
        if a + b == 0 or c + d == 0:
            return
        v = lbkl_per_query(D(a / (a + b), b / (a + b)), D(c / (c + d), d / (c + d)))
        assert v >= 0.0
        if (a / (a + b)) == (c / (c + d)):
            assert v == 0.0


class TestLBKLMean:
    def test_matching_mix_is_zero(self):
        rep = lbkl([([L1, L2], [L2, L1]), ([L1], [L1, L2])])
        assert rep.mean == 0.0 and rep.q == 2

    def test_mean_of_two(self):
        gt = [L1, L1, L2, L2]
        rep = lbkl([(gt, list(gt)), (gt, [L1, L2, L2, L2])])
        assert rep.per_query[0] == 0.0
        assert rep.mean == pytest.approx(KL_HALF_VS_QUARTER / 2, abs=1e-6)
        assert rep.mean == pytest.approx(0.07192051811294523, abs=1e-15)

    def test_query_language_ranker_on_balanced_gt(self):
        # a ranker that only ever returns the query's language, gt half and half
        gt = [L1, L2] * 3
        rep = lbkl([(gt, [L1] * 20), (gt, [L2] * 20)])
        assert rep.per_query == pytest.approx([KL_HALF_VS_ONE_SIDED] * 2, abs=1e-9)

    def test_truncation_to_gt_length(self):
        gt = [L1, L2]
        assert lbkl([(gt, [L1, L2, L1, L1, L1])]).mean == 0.0
        assert lbkl([(gt, [L1, L2, L1, L1, L1])], pred_k=5).mean > 0.0

    def test_permutation_within_window(self, rng):
        gt = [L1] * 3 + [L2] * 5
        pred = [L1, L2, L2, L1, L2, L2, L2, L2, L1, L1]
        base = lbkl([(gt, pred)]).mean
        for _ in range(5):
            window = [pred[i] for i in rng.permutation(8)]
            assert lbkl([(gt, window + pred[8:])]).mean == base

    def test_empty_gt_and_empty_prediction(self):
        with pytest.raises(ValueError):
            lbkl([([], [L1])])
        rep = lbkl([([L1], []), ([L1], [L1])], query_ids=["a", "b"])
        assert rep.query_ids == ["b"] and [s[0] for s in rep.skipped] == ["a"]

    def test_csv(self, tmp_path):
        rep = lbkl([([L1, L2], [L1, L2]), ([L1, L1], [L1, L2])], benchmark="toy")
        rep.to_csv(tmp_path / "l.csv")
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "benchmark,q,mean_lbkl,min_lbkl,max_lbkl,skipped"
        assert lines[1].startswith("toy,2,")


def _balanced(n_groups=20, per_lang=3, dim=12, seed=0, lam=0.0):
    rng = np.random.default_rng(seed)
    queries, cands, vecs = [], [], {}
    for g in range(n_groups):
        center = rng.normal(size=dim)
        for c in range(per_lang + 1):
            v = center + 0.5 * rng.normal(size=dim)
            for lang, text in ((L1, "กขค"), (L2, "abc")):
                ind = 1.0 if lang == L1 else -1.0
                vec = np.append(v, lam * ind)
                tag = lang.value
                eid = f"g{g:02d}{c}{tag}"
                entry = SynonymEntry(("q" if c == 0 else "c") + eid, text, lang, f"g{g}")
                (queries if c == 0 else cands).append(entry)
                vecs[entry.id] = vec / np.linalg.norm(vec)
    return SynonymBenchmark(queries, cands, "balanced"), vecs


class TestBenchmarkLBKL:
    def test_blind_embeddings_low(self):
        bench, vecs = _balanced()
        assert bias.lbkl_for_benchmark(vecs, bench).mean < 0.05

    def test_indicator_raises_lbkl(self):
        vals = []
        for lam in (0.0, 1.0, 4.0):
            bench, vecs = _balanced(lam=lam)
            vals.append(bias.lbkl_for_benchmark(vecs, bench).mean)
        assert vals == sorted(vals) and vals[-1] > vals[0]


class TestHistogram:
    def test_all_l1_pool(self):
        bench, vecs = _balanced(n_groups=10)
        cands = [c for c in bench.candidates if c.lang == L1]
        rep = language_histogram(vecs, SynonymBenchmark(bench.queries, cands), top_k=20)
        assert all(c == 20 for cs in rep.counts_l1.values() for c in cs)

    def test_invariants(self):
        bench, vecs = _balanced(n_groups=30)
        rep = language_histogram(vecs, bench, top_k=100)
        for sub, counts in rep.counts_l1.items():
            n = sum(1 for q in bench.queries if q.lang.value == sub)
            assert rep.hist_l1[sub].sum() == rep.hist_l2[sub].sum() == n
            np.testing.assert_array_equal(rep.hist_l2[sub], rep.hist_l1[sub][::-1])
        rows = rep.rows()
        assert all(r[2] <= 100 for r in rows)

    def test_clamped_with_warning(self):
        bench, vecs = _balanced(n_groups=3)
        with pytest.warns(UserWarning, match="clamped"):
            rep = language_histogram(vecs, bench, top_k=100)
        assert rep.top_k == len(bench.candidates)

    def test_deterministic_csv(self, tmp_path):
        bench, vecs = _balanced(n_groups=30)
        for name in ("a", "b"):
            language_histogram(vecs, bench, top_k=50).to_csv(tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "subcategory,language,bin,count"

"""
Measuring language bias
=======================

An encoder that places same-language texts together retrieves lopsided
lists. LBKL compares the language mix of what was retrieved against the
mix of the true synonyms.
"""
import numpy as np

from recruitenc import bias
from recruitenc.bias import LanguageDistribution
from recruitenc.corpus import LangTag, SynonymBenchmark, SynonymEntry

print(bias.lbkl_per_query(LanguageDistribution(0.5, 0.5), LanguageDistribution(0.25, 0.75)))
print(bias.lbkl_per_query(LanguageDistribution(1.0, 0.0), LanguageDistribution(0.5, 0.5)))
# not symmetric, and the smoothed zero makes the reverse direction large
print(bias.lbkl_per_query(LanguageDistribution(0.5, 0.5), LanguageDistribution(1.0, 0.0)))

rng = np.random.default_rng(0)


def benchmark(lam, n_groups=40):
    # each concept has one vector shared by its Thai and English rendering;
    # lam adds a coordinate that separates the two languages
    queries, cands, vecs = [], [], {}
    for g in range(n_groups):
        center = rng.normal(size=24)
        for c in range(5):
            base = center + 0.6 * rng.normal(size=24)
            for lang, text, sign in ((LangTag.L1, "งาน", 1.0), (LangTag.L2, "job", -1.0)):
                e = SynonymEntry(f"{'qc'[c > 0]}{g:03d}{c}{lang.value}", text, lang, f"g{g}")
                (queries if c == 0 else cands).append(e)
                v = np.append(base / np.linalg.norm(base), lam * sign)
                vecs[e.id] = v / np.linalg.norm(v)
    return SynonymBenchmark(queries, cands), vecs


for lam in (0.0, 0.25, 0.5, 1.0, 2.0):
    bench, vecs = benchmark(lam)
    lbkl = bias.lbkl_for_benchmark(vecs, bench).mean
    hist = bias.language_histogram(vecs, bench, top_k=100)
    print(f"lambda {lam:4.2f}  LBKL {lbkl:.3f}  mean Thai in top-100 "
          f"(Thai queries) {hist.mean_count_l1('L1'):.1f}  (English queries) {hist.mean_count_l1('L2'):.1f}")

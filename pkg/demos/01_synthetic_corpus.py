"""
A synthetic bilingual job-posting corpus
========================================

Builds postings with a Thai-script title, an English title, a description
and a set of job fields, then derives the training pairs from them.
"""
from collections import Counter

from recruitenc import corpus

postings, synonyms, occupation = corpus.generate_synthetic_corpus(300, seed=0)

p = postings[0]
print(p.title_l1, "|", p.title_l2)
print(p.description[:70], "...")
print(sorted(p.job_fields))

# every token of an English title has exactly one Thai counterpart
print(corpus.tag_language(p.title_l1).value, corpus.tag_language(p.title_l2).value)

# how many fields a posting carries
print(Counter(len(q.job_fields) for q in postings))

# translation pairs come straight from the two titles
pairs, skipped = corpus.build_translation_pairs(postings)
print(len(pairs), "translation pairs,", skipped, "skipped")

# negatives pair a description with a title whose fields overlap by IoU < 0.5
report = corpus.SamplingReport()
matches = corpus.sample_match_pairs(postings, negatives_per_positive=2, seed=0, report=report)
print(report.positives, "positives,", report.negatives, "negatives")
neg = next(m for m in matches if m.label == 0)
print("a negative with IoU", neg.iou_at_sampling)

# the synonym benchmark mixes Thai, English and a few code-switched queries
print(Counter(q.lang.value for q in synonyms.queries))
print(len(synonyms.candidates), "candidates in", len({c.group for c in synonyms.candidates}), "groups")

# occupation titles for the linear probe, split 80/10/10
print(Counter(occupation.split))

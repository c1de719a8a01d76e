"""
Synonym retrieval and the occupation probe
==========================================

Compares a randomly initialised encoder with a trained one on separate
and combined candidate pools.
"""
from recruitenc import corpus, evalkit, trainer
from recruitenc.encoder import encode

postings, synonyms, occupation = corpus.generate_synthetic_corpus(1000, seed=2)
fields = [f"field_{k:02d}" for k in range(corpus.N_JOB_FIELDS)]
config = trainer.TrainConfig(dim=64, hash_size=2 ** 16, head_width=128, steps=120, learning_rate=1e-3, seed=2)

untrained, _ = trainer.init_model(config, len(fields))
trained = trainer.train(config, trainer.TrainingData.from_postings(postings, config, fields)).model

for name, model in (("random init", untrained), ("trained", trained)):
    for pool in ("l1", "l2", "combined"):
        rep = evalkit.evaluate_synonym(model, synonyms, pool)
        av = rep.averages["all"]
        print(f"{name:12s} {pool:9s} R@5 {av['R@5']:.3f}  R@10 {av['R@10']:.3f}  mAP@25 {av['mAP@25']:.3f}"
              f"  skipped {len(rep.skipped)}")

# breakdown by query language on the combined pool
rep = evalkit.evaluate_synonym(trained, synonyms, "combined")
for sub, vals in rep.averages.items():
    print(sub, round(vals["R@10"], 3))

# a linear probe on frozen embeddings
xtr, ytr = occupation.subset("train")
xte, yte = occupation.subset("test")
for name, model in (("random init", untrained), ("trained", trained)):
    probe = evalkit.train_probe(encode(model, xtr), ytr, len(occupation.classes), epochs=60, seed=0)
    emb = encode(model, xte)
    print(name, [round(evalkit.probe_acc_at_k(probe, emb, yte, k), 3) for k in (1, 3, 5)])

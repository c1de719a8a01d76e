"""
Multi-task training of the shared encoder
=========================================

Each mini-batch runs three updates in turn: title translation ranking,
description/title matching and job-field classification.
"""
import numpy as np

from recruitenc import corpus, trainer
from recruitenc.encoder import encode

postings, _, _ = corpus.generate_synthetic_corpus(1000, seed=1)
fields = [f"field_{k:02d}" for k in range(corpus.N_JOB_FIELDS)]

config = trainer.TrainConfig(dim=64, hash_size=2 ** 16, head_width=128, batch_size=64,
                             steps=120, learning_rate=1e-3, seed=1)
data = trainer.TrainingData.from_postings(postings, config, fields)
result = trainer.train(config, data)

for row in result.log[::20] + result.log[-1:]:
    print(f"step {row.step:4d}  jt {row.loss_jt:.4f}  jd {row.loss_jd:.4f}  jf {row.loss_jf:.4f}")

# translations should now sit next to each other
pairs = data.title_pairs[:200]
en = encode(result.model, [p.l2_text for p in pairs])
th = encode(result.model, [p.l1_text for p in pairs])
hits = [pairs[j].l1_text == pairs[i].l1_text for i, j in enumerate((en @ th.T).argmax(axis=1))]
print("translation top-1:", np.mean(hits))

# ablation: the contrastive task alone
solo = trainer.train(trainer.TrainConfig(**{**config.to_dict(), "task_jd": False, "task_jf": False}), data)
print("jt only, final loss", solo.log[-1].loss_jt)

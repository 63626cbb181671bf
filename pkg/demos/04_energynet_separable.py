"""
Training an EnergyNet
=====================

On maps where only the true concept has a dense blob, the learned energy
should rank the true concept first. Training keeps the hardest 16 of each
candidate pool plus 4 random ones, and the pool grows once the loss is low.
"""

import numpy as np

from attnxfer import embedding, synthdata
from attnxfer import energynet as en

vocab = embedding.one_hot_vocabulary(synthdata.concept_names(4))
samples = [en.TrainSample(vid, f, label, stacks[f])
           for vid, label, stacks in synthdata.separable_maps(seed=0) for f in range(len(stacks))]
result = en.train_energynet(samples, vocab, en.EnergyNetConfig(lr=0.01, epochs=20, seed=0))

log = result.log
print("iterations:", len(log))
print("first joint loss %.3f, last %.3f" % (log[0]["joint_loss"], log[-1]["joint_loss"]))
print("candidate pool grew at iteration", next(e["iter"] for e in log if e["batch_size"] == 256))

test = synthdata.separable_maps(videos_per_class=8, seed=100)
hits = [en.classify_energynet(stacks, vocab, result.params)[0] == label for _, label, stacks in test]
print("held-out video accuracy:", np.mean(hits))

# mining on its own
losses = np.array([0.1, 0.9, 0.5, 0.0, 0.7, 0.2])
print("mined:", en.mine_hard_negatives(losses, k=2, r=1, rng=np.random.default_rng(0)))

"""
Image-to-video transfer on synthetic data
=========================================

A classifier trained on source images meets target videos with different
contrast, noise and glyph placement. We compare three ways of turning it
into a video classifier: voting over frame predictions, the unsupervised
attention energy, and an EnergyNet trained on two videos per class.

Runs the whole pipeline once (about half a minute).
"""

import tempfile

from attnxfer import pipeline
from attnxfer.config import RunConfig

cfg = RunConfig(seed=0)
workdir = tempfile.mkdtemp()

pipeline.run_synth(cfg, workdir)
losses = pipeline.run_pretrain(cfg, workdir)
print("source training loss: %.3f -> %.3f" % (losses[0], losses[-1]))
cache = pipeline.run_cache(cfg, workdir)
print("cached maps:", len(cache))

pipeline.run_classify_cnn(cfg, workdir)
pipeline.run_classify_unatt(cfg, workdir)
pipeline.run_train_energynet(cfg, workdir)
pipeline.run_classify_energynet(cfg, workdir)

for method in pipeline.METHODS:
    r = pipeline.run_eval(cfg, workdir, method)
    print(f"{method:10s} top-1 {r.top1:.3f}  mAP {r.mAP:.3f}")
print("artefacts in", workdir)

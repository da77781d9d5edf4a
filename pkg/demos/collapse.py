"""Why the views are shifted: a joint-embedding model trained on aligned
crops can match frames by position alone and its outputs stop depending
on the image. The collapse probe measures that."""

import sys

from textssl.backbone import HeadSpec, ModelConfig, build_model
from textssl.dataset import synth_corpus
from textssl.pretrain import JointConfig, collapse_probe, probe_set, train_joint
from textssl.schedule import Schedule, Stage

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
corpus = synth_corpus(128, "printed", seed=51)
probe = probe_set(synth_corpus(32, "printed", seed=52), 16, 128)

for shift in (False, True):
    model = build_model(ModelConfig(backbone="vit", dim=64, layers=2, heads=4, head=HeadSpec.linear(64)), seed=0)
    before = collapse_probe(model, probe)
    hist = train_joint(model, corpus, Schedule((Stage(0, steps, 5e-4, 16),), warmup=50),
                       JointConfig("ntxent", crop_width=128, shift=shift), probe=probe, log_every=max(1, steps // 5))
    trace = " ".join(f"{s}:{c:.3f}" for s, c in hist["collapse"])
    print(f"shift={shift!s:<5} init {before:.3f} -> {collapse_probe(model, probe):.3f}   [{trace}]")

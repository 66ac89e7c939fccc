"""
Two-stage detector on synthetic images
======================================

Takes a few minutes on one core. Set STEPS lower for a quicker look.
"""

import numpy as np

from nask.data import random_sample
from nask.pipeline import PipelineConfig, evaluate_model, nask_forward, prepare_example, train

STEPS = 300
cfg = PipelineConfig.toy()
train_set = [random_sample(1000 + i) for i in range(20)]
test_set = [random_sample(5000 + i) for i in range(10)]
examples = [prepare_example(s, cfg) for s in train_set]

# %% train
result = train(examples, cfg, steps=STEPS, warmup_steps=50)
print("loss", round(result.initial_loss["total"], 3), "->", round(result.final_loss["total"], 3))

# %% detect on one held-out image
dets = nask_forward(test_set[0].image, result.model)
print(len(dets), "detections, scores", [round(d.score, 3) for d in dets])

# %% held-out accuracy and the effect of samples per side
for n in (2, 8):
    rep = evaluate_model(result.model, test_set, n=n)
    print("n =", n, {k: round(rep[k], 3) for k in ("precision", "recall", "hmean")})

# %% dropping the first stage
# examples carry head targets, so they are rebuilt for the other layout
plain_cfg = PipelineConfig.toy(use_tis=False)
plain = train([prepare_example(s, plain_cfg) for s in train_set], plain_cfg,
              steps=STEPS, warmup_steps=0)
print("without first stage", evaluate_model(plain.model, test_set)["hmean"])

"""
Grouped spatial attention with channel weights
==============================================

Splitting C channels into G groups shrinks the attention work by a factor G.
"""

from fractions import Fraction

import numpy as np

from nask.gsca import (GscaConfig, GscaParams, attention_cost, attention_map,
                       bench_attention, gsca_forward, measure_attention_macs)
from nask.tensor import Tensor

rng = np.random.default_rng(1)

# %% forward pass keeps the feature shape
cfg = GscaConfig(groups=4, channels=16)
params = GscaParams.init(16, rng)
x = Tensor(rng.normal(size=(16, 10, 12)))
print("output shape", gsca_forward(x, params, cfg).shape)

# %% attention rows sum to one
th, ph = Tensor(rng.normal(size=(4, 6, 6))), Tensor(rng.normal(size=(4, 6, 6)))
print("row sums", attention_map(th, ph).sum(axis=1)[:4])

# %% cost relative to one group
for g in (1, 2, 4, 8, 16):
    print(g, Fraction(attention_cost(16, 16, 32, g), attention_cost(16, 16, 32, 1)))

# %% counted multiply-adds agree with the implemented cost formula
for shape in [(4, 4, 8, 2), (5, 3, 12, 4)]:
    print(shape, measure_attention_macs(*shape), attention_cost(*shape, cost_model="implemented"))

# %% wall-clock timing on small maps
for row in bench_attention([(16, 16, 32, g) for g in (1, 4)], rng=rng, repeats=2):
    print(row)

"""
Training losses: hard-negative mining and smoothed L1 terms
===========================================================
"""

import numpy as np

from nask.geometry import encode_geometry
from nask.data import random_sample
from nask.losses import PredictedMaps, ohem_cross_entropy, ohem_selection, total_loss
from nask.tensor import Tensor

rng = np.random.default_rng(2)

# %% mining keeps every positive and three negatives per positive
gt = np.zeros((8, 8))
gt[2, 2:6] = 1
keep = ohem_selection(rng.random(gt.shape), gt)
print("kept", int(keep.sum()), "of", gt.size)
print("uninformative prediction", ohem_cross_entropy(np.full(gt.shape, 0.5), gt).item())

# %% full loss on a perturbed copy of real targets
s = random_sample(3)
maps = encode_geometry(s.annotations, s.shape)
def jitter(c):
    arr = np.asarray(getattr(maps, c), float) + rng.normal(0, 0.05, s.shape)
    if c in ("tr", "tcl"):
        arr = np.clip(arr, 0.01, 0.99)
    elif c == "s_map":
        arr = np.clip(arr, 0.01, None)
    return Tensor(arr)


noisy = PredictedMaps(*(jitter(c) for c in maps.CHANNELS))
for name, value in total_loss(noisy, maps).values().items():
    print(f"{name:8s} {value:.4f}")

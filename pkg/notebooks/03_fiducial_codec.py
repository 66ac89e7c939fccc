"""
Encoding text ribbons as per-pixel geometry and decoding them back
==================================================================
"""

import math

import numpy as np

from nask.data import random_sample
from nask.evaluation import polygon_iou
from nask.geometry import decode, encode_geometry, fiducial_points

# %% one synthetic ribbon
s = random_sample(7, max_instances=1)
ann = s.annotations[0]
maps = encode_geometry([ann], s.shape, n=8)
print("region pixels", int(maps.tr.sum()), "center pixels", int(maps.tcl.sum()))

# %% decode and compare
polys = decode(maps, n=8)
print("decoded", len(polys), "IoU", max(polygon_iou(p, ann.boundary) for p in polys))

# %% fewer samples per side lose detail on bent ribbons
for n in (2, 4, 8):
    m = encode_geometry([ann], s.shape, n=n)
    print(n, round(max((polygon_iou(p, ann.boundary) for p in decode(m, n=n)), default=0.0), 4))

# %% fiducial pair around a center point
top, bot = fiducial_points((10.0, 10.0), 2.0, math.pi / 2)
print(top, bot, np.add(top, bot) / 2)

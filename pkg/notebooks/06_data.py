"""
Synthetic samples, annotation parsers and augmentation
======================================================
"""

import tempfile
from pathlib import Path

import numpy as np

from nask.data import (augment, format_polygon_list, parse_polygon_list,
                       random_sample, write_synthetic_set)
from nask.errors import ParseError

s = random_sample(11)
print("image", s.image.shape, "instances", len(s.annotations))

# %% text formats round trip
text = format_polygon_list(s.annotations)
back = parse_polygon_list(text)
print("points per polygon", [len(a.boundary) for a in back])

try:
    parse_polygon_list("1,2,3,4,5\n")
except ParseError as exc:
    print("error:", exc)

# %% augmentation moves image and labels together
a = augment(s, seed=4, out_size=96)
print("augmented", a.image.shape, [np.round(x.boundary.mean(0), 1) for x in a.annotations])

# %% write a small set with a manifest
with tempfile.TemporaryDirectory() as d:
    manifest = write_synthetic_set(Path(d), 3, seed=1)
    lines = Path(manifest).read_text().splitlines()
    print(len(lines), "manifest lines, first image", lines[0][-30:])

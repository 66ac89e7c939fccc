"""
Reverse-mode gradients on numpy tensors
=======================================

Operations run eagerly and, inside a ``Tape`` block, record how to push
gradients back. ``backward`` walks the tape in reverse.
"""

import numpy as np

from nask import tensor as T
from nask.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# %% a tiny conv + relu + mean
x = Tensor(rng.normal(size=(3, 8, 8)))
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.1, requires_grad=True)
with Tape() as tape:
    y = T.mean(T.relu(T.conv2d(x, w)))
T.backward(tape, y)
print("loss", y.item(), "grad shape", w.grad.shape)

# %% compare one entry against a central difference
h = 1e-6
idx = (1, 2, 0, 1)
old = w.data[idx]
with T.no_tape():
    w.data[idx] = old + h
    up = T.mean(T.relu(T.conv2d(x, w))).item()
    w.data[idx] = old - h
    down = T.mean(T.relu(T.conv2d(x, w))).item()
w.data[idx] = old
print("analytic", w.grad[idx], "numeric", (up - down) / (2 * h))

# %% bilinear sampling is exact on a constant map
c = Tensor(np.full((2, 5, 5), 0.3))
ys, xs = np.meshgrid(np.linspace(0, 4, 7), np.linspace(0, 4, 9), indexing="ij")
print("max deviation", np.abs(T.bilinear_sample(c, ys, xs).data - 0.3).max())

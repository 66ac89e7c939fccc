"""Group spatial and channel attention block.

Channels are split into ``G`` contiguous groups. Inside each group an
(HW) x (HW) attention map is built from two 1x1-convolved projections and
applied to a third; a squeeze-and-excitation style branch produces one
weight per channel, the groups are concatenated with those weights and the
input is added back through a shortcut.
"""

import time
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

NORMALIZATIONS = ("softmax", "linear")
COST_MODELS = ("paper", "implemented")


@dataclass(frozen=True)
class GscaConfig:
    groups: int = 4
    channels: int = 32
    normalization: str = "softmax"

    def __post_init__(self):
        if self.groups < 1 or self.channels < 1:
            raise ConfigurationError("groups and channels must be positive")
        if self.channels % self.groups:
            raise ConfigurationError(
                f"{self.groups} groups do not divide {self.channels} channels")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")

    @property
    def group_width(self):
        return self.channels // self.groups


@dataclass
class GscaParams:
    """Weights of one block.

    ``theta_w``, ``phi_w`` and ``g_w`` are C x C x 1 x 1 kernels. The channel
    branch is conv3x3 -> relu -> conv3x3 -> relu -> global mean -> fc -> sigmoid.
    """

    theta_w: Tensor
    phi_w: Tensor
    g_w: Tensor
    branch_w1: Tensor
    branch_b1: Tensor
    branch_w2: Tensor
    branch_b2: Tensor
    fc_w: Tensor
    fc_b: Tensor

    @classmethod
    def init(cls, channels, rng, reduction=4):
        c = channels
        cb = max(c // reduction, 1)

        def w(*shape, fan_in):
            return Tensor(rng.normal(scale=np.sqrt(1.0 / fan_in), size=shape),
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        return cls(
            theta_w=w(c, c, 1, 1, fan_in=c),
            phi_w=w(c, c, 1, 1, fan_in=c),
            g_w=w(c, c, 1, 1, fan_in=c),
            branch_w1=w(cb, c, 3, 3, fan_in=9 * c),
            branch_b1=zeros(cb),
            branch_w2=w(cb, cb, 3, 3, fan_in=9 * cb),
            branch_b2=zeros(cb),
            fc_w=w(c, cb, fan_in=cb),
            fc_b=zeros(c),
        )

    @property
    def channels(self):
        return self.theta_w.shape[0]

    def named_tensors(self) -> Dict[str, Tensor]:
        return dict(vars(self))


def group_attention(theta_out, phi_out, g_out, normalization="softmax"):
    """Attend within one channel group; all inputs are C' x H x W."""
    if not (theta_out.shape == phi_out.shape == g_out.shape) or theta_out.ndim != 3:
        raise DimensionError(
            f"group_attention: {theta_out.shape}, {phi_out.shape}, {g_out.shape}")
    if normalization not in NORMALIZATIONS:
        raise ConfigurationError(f"unknown normalization {normalization!r}")
    cg, h, w = theta_out.shape
    hw = h * w
    theta = theta_out.reshape(cg, hw).T  # HW x C'
    phi = phi_out.reshape(cg, hw)  # C' x HW
    g = g_out.reshape(cg, hw).T  # HW x C'
    attn = T.matmul(theta, phi)
    if normalization == "softmax":
        attn = T.softmax(attn, axis=1)
    return T.matmul(attn, g).T.reshape(cg, h, w)


def attention_map(theta_out, phi_out, normalization="softmax"):
    """The (HW) x (HW) map of one group, as a numpy array."""
    cg, h, w = theta_out.shape
    with T.no_tape():
        a = T.matmul(theta_out.reshape(cg, h * w).T, phi_out.reshape(cg, h * w))
        if normalization == "softmax":
            a = T.softmax(a, axis=1)
    return a.data


def global_channel_weights(x, params):
    """Per-channel weights in (0, 1) from the global branch."""
    y = T.relu(T.conv2d(x, params.branch_w1, params.branch_b1))
    y = T.relu(T.conv2d(y, params.branch_w2, params.branch_b2))
    pooled = T.mean(y, axis=(1, 2)).reshape(-1, 1)
    logits = T.matmul(params.fc_w, pooled).reshape(-1) + params.fc_b
    return T.sigmoid(logits)


def gsca_forward(x, params, config, bypass_channel_weights=False):
    """Apply the block to a C x H x W tensor; the output has the same shape.

    With ``bypass_channel_weights`` every channel weight is forced to 0, so
    the block reduces to its shortcut.
    """
    if x.ndim != 3 or x.shape[0] != config.channels:
        raise DimensionError(f"gsca_forward: input {x.shape}, config C={config.channels}")
    if params.channels != config.channels:
        raise DimensionError("parameter and config channel counts differ")
    theta = T.conv2d(x, params.theta_w)
    phi = T.conv2d(x, params.phi_w)
    g = T.conv2d(x, params.g_w)
    cg = config.group_width
    groups = []
    for i in range(config.groups):
        sl = slice(i * cg, (i + 1) * cg)
        groups.append(group_attention(theta[sl], phi[sl], g[sl], config.normalization))
    y = groups[0] if len(groups) == 1 else T.concat(groups, axis=0)
    if bypass_channel_weights:
        lam = Tensor(np.zeros(config.channels))
    else:
        lam = global_channel_weights(x, params)
    return x + T.scale_channels(y, lam)


def attention_cost(h, w, c, g, cost_model="paper"):
    """Multiply-accumulate count of the grouped attention.

    ``paper`` is the nominal (H*W*C)**2 / G estimate; ``implemented`` counts
    the two (HW) x (HW) products this module actually performs per group.
    """
    if g < 1 or c % g:
        raise ConfigurationError(f"{g} groups do not divide {c} channels")
    hw = h * w
    if cost_model == "paper":
        return (hw * c) ** 2 // g
    if cost_model == "implemented":
        return 2 * hw * hw * c
    raise ConfigurationError(f"unknown cost model {cost_model!r}")


def measure_attention_macs(h, w, c, g, rng=None):
    """Run the per-group attention on random data under the MAC counter."""
    rng = np.random.default_rng(0) if rng is None else rng
    cg = c // g
    total = 0
    for _ in range(g):
        parts = [Tensor(rng.normal(size=(cg, h, w))) for _ in range(3)]
        with T.count_macs() as counter:
            group_attention(*parts)
        total += counter.macs
    return total


def bench_attention(shapes, rng=None, repeats=3):
    """Yield one dict per (H, W, C, G): both cost models and wall time in ns."""
    rng = np.random.default_rng(0) if rng is None else rng
    for h, w, c, g in shapes:
        config = GscaConfig(groups=g, channels=c)
        params = GscaParams.init(c, rng)
        x = Tensor(rng.normal(size=(c, h, w)))
        best = None
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            gsca_forward(x, params, config)
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
        yield {
            "H": h, "W": w, "C": c, "G": g,
            "paper_cost": attention_cost(h, w, c, g, "paper"),
            "implemented_cost": attention_cost(h, w, c, g, "implemented"),
            "wall_ns": best,
        }

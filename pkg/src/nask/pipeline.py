"""Two-stage detector: a small FCN with grouped attention segments text
regions, rectangles around the regions are resampled to a fixed size and a
second head regresses center-line geometry inside each rectangle.

Coordinates: feature cell ``f`` covers image pixels ``[4f, 4f + 4)``.
Boxes are given in feature units on cell edges, so a box spanning cells
``a..b`` has ``x0 = a`` and ``x1 = b + 1``. A head output of size
``4*out_h x 4*out_w`` covers its box exactly; head pixel ``J`` has its
center at image ``x = 4*x0 - 0.5 + (J + 0.5) * (x1 - x0) / out_w``.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import polygon as P
from . import tensor as T
from .errors import ConfigurationError, DimensionError, NumericError
from .geometry import GeometryMaps, decode_instances, encode_geometry
from .gsca import GscaConfig, GscaParams, gsca_forward
from .losses import (TERMS, LossReport, LossWeights, PredictedMaps, combine, ohem_cross_entropy,
                     total_loss)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STRIDE = 4
HEAD_CHANNELS = ("tcl", "s_map", "sin_t", "cos_t", "sin_p", "cos_p")
LOG_SCALE_LIMIT = 4.0


@dataclass(frozen=True)
class PipelineConfig:
    """Architecture, inference and optimizer settings.

    ``groups = 0`` swaps the attention block for two stacked 1x1 convs.
    ``use_tis = False`` runs the geometry head over the whole feature map
    with no proposals. ``roi_gradient`` lets the second-stage loss reach the
    backbone through RoI pooling.
    """

    channels: int = 32
    groups: int = 4
    normalization: str = "softmax"
    roi_h: int = 32
    roi_w: int = 128
    n: int = 8
    t_tr: float = 0.7
    t_tcl: float = 0.6
    min_area: int = 16
    margin_ratio: float = 0.1
    s_unit: float = 4.0
    use_tis: bool = True
    roi_gradient: bool = True
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.groups < 0:
            raise ConfigurationError("groups must be >= 0")
        if self.groups and self.channels % self.groups:
            raise ConfigurationError(f"{self.groups} groups do not divide {self.channels} channels")
        if self.roi_h < 1 or self.roi_w < 1:
            raise ConfigurationError("RoI size must be positive")
        if self.n < 2:
            raise ConfigurationError("n must be >= 2")
        for name in ("t_tr", "t_tcl"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if self.margin_ratio < 0 or self.min_area < 1:
            raise ConfigurationError("bad proposal settings")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    @classmethod
    def toy(cls, **kw):
        """Settings for 128x128 synthetic images: small RoIs and a larger
        step size so a few hundred updates are enough."""
        base = dict(roi_h=8, roi_w=16, lr=2e-3)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class RoiBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float = 1.0

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0


@dataclass
class Detection:
    polygon: np.ndarray
    score: float
    fiducials: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# parameters


def _he(rng, *shape):
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _small(rng, *shape, scale=1e-2):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class TisModel:
    """Backbone, attention block and text-region head."""

    def __init__(self, config: PipelineConfig, rng):
        c = config.channels
        h = max(c // 2, 1)
        self.config = config
        self.p: Dict[str, Tensor] = {
            "conv1.w": _he(rng, h, 3, 3, 3), "conv1.b": _zeros(h),
            "conv2.w": _he(rng, c, h, 3, 3), "conv2.b": _zeros(c),
            "conv3.w": _he(rng, c, c, 3, 3), "conv3.b": _zeros(c),
            "conv4.w": _he(rng, c, c, 3, 3), "conv4.b": _zeros(c),
            "conv5.w": _he(rng, c, c, 3, 3), "conv5.b": _zeros(c),
            "fuse.w": _he(rng, c, 2 * c, 1, 1), "fuse.b": _zeros(c),
            "tr.w": _small(rng, 1, c, 1, 1), "tr.b": _zeros(1),
        }
        if config.groups:
            self.gsca_config = GscaConfig(config.groups, c, config.normalization)
            self.gsca = GscaParams.init(c, rng)
        else:
            self.gsca_config = self.gsca = None
            self.p.update({"mix1.w": _he(rng, c, c, 1, 1), "mix1.b": _zeros(c),
                           "mix2.w": _he(rng, c, c, 1, 1), "mix2.b": _zeros(c)})

    def parameters(self):
        out = {f"tis.{k}": v for k, v in self.p.items()}
        if self.gsca is not None:
            out.update({f"tis.gsca.{k}": v for k, v in self.gsca.named_tensors().items()})
        return out


class FoxHead:
    """Two (upsample, 3x3 conv, relu) stages and a 1x1 conv to six channels."""

    def __init__(self, config: PipelineConfig, rng):
        c = config.channels
        self.config = config
        self.p: Dict[str, Tensor] = {
            "up1.w": _he(rng, c, c, 3, 3), "up1.b": _zeros(c),
            "up2.w": _he(rng, c, c, 3, 3), "up2.b": _zeros(c),
            "out.w": _small(rng, len(HEAD_CHANNELS), c, 1, 1), "out.b": _zeros(len(HEAD_CHANNELS)),
        }

    def parameters(self):
        return {f"fox.{k}": v for k, v in self.p.items()}


class NaskModel:
    def __init__(self, config: PipelineConfig, seed: Optional[int] = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.config = config
        self.tis = TisModel(config, rng)
        self.fox = FoxHead(config, rng)

    def parameters(self) -> Dict[str, Tensor]:
        out = self.tis.parameters()
        out.update(self.fox.parameters())
        return out

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None


# ---------------------------------------------------------------------------
# forward passes


def _conv_relu(x, p, name):
    return T.relu(T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"]))


def tis_forward(image, model: NaskModel):
    """Shared features (C x H/4 x W/4) and the text-region map (H/4 x W/4)."""
    image = T.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    if h % STRIDE or w % STRIDE:
        raise ConfigurationError(f"image size {h}x{w} is not divisible by {STRIDE}")
    tis = model.tis
    p = tis.p
    x = _conv_relu(image - 0.5, p, "conv1")
    x = _conv_relu(T.avg_pool2(x), p, "conv2")
    skip = _conv_relu(x, p, "conv3")
    x = _conv_relu(T.avg_pool2(skip), p, "conv4")
    x = _conv_relu(x, p, "conv5")
    if tis.gsca is not None:
        x = gsca_forward(x, tis.gsca, tis.gsca_config)
    else:
        x = _conv_relu(_conv_relu(x, p, "mix1"), p, "mix2")
    feats = _conv_relu(T.concat([x, T.avg_pool2(skip)], axis=0), p, "fuse")
    tr = T.sigmoid(T.conv2d(feats, p["tr.w"], p["tr.b"]))
    return feats, tr.reshape(h // STRIDE, w // STRIDE)


def _box_around(ys, xs, shape, margin_ratio, score=1.0):
    h, w = shape
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    my = margin_ratio * (y1 - y0)
    mx = margin_ratio * (x1 - x0)
    return RoiBox(float(max(x0 - mx, 0)), float(max(y0 - my, 0)),
                  float(min(x1 + mx, w)), float(min(y1 + my, h)), float(score))


def extract_proposals(tr, t_tr=0.7, min_area=16, margin_ratio=0.1):
    """Boxes around 8-connected regions of ``tr >= t_tr``, sorted by (y0, x0)."""
    if not 0.0 < t_tr < 1.0:
        raise ConfigurationError("t_tr must lie in (0, 1)")
    tr = np.asarray(tr.data if isinstance(tr, Tensor) else tr, dtype=np.float64)
    labels, count = ndimage.label(tr >= t_tr, structure=np.ones((3, 3), dtype=int))
    boxes = []
    for k in range(1, count + 1):
        ys, xs = np.nonzero(labels == k)
        if len(ys) < min_area:
            continue
        boxes.append(_box_around(ys, xs, tr.shape, margin_ratio, tr[ys, xs].mean()))
    return sorted(boxes, key=lambda b: (b.y0, b.x0, b.x1, b.y1))


def roi_grid(box: RoiBox, out_h, out_w):
    """Feature-map sample positions (pixel-center units) for ``box``."""
    ys = box.y0 + (np.arange(out_h) + 0.5) * (box.height / out_h) - 0.5
    xs = box.x0 + (np.arange(out_w) + 0.5) * (box.width / out_w) - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def text_roi_pool(features, box: RoiBox, out_h, out_w):
    """Bilinear resampling of ``box`` to ``out_h x out_w``."""
    _, h, w = features.shape
    x0, x1 = max(box.x0, 0.0), min(box.x1, float(w))
    y0, y1 = max(box.y0, 0.0), min(box.y1, float(h))
    if not (x1 > x0 and y1 > y0):
        raise DimensionError(f"degenerate RoI {box}")
    ys, xs = roi_grid(RoiBox(x0, y0, x1, y1, box.score), out_h, out_w)
    return T.bilinear_sample(features, ys, xs)


def head_forward(patch, model: NaskModel) -> Dict[str, Tensor]:
    """Six geometry channels at four times the patch size."""
    p = model.fox.p
    y = _conv_relu(T.upsample2(patch), p, "up1")
    y = _conv_relu(T.upsample2(y), p, "up2")
    out = T.conv2d(y, p["out.w"], p["out.b"])
    ch = {name: out[i] for i, name in enumerate(HEAD_CHANNELS)}
    ch["tcl"] = T.sigmoid(ch["tcl"])
    log_s = T.clamp(ch["s_map"], -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
    ch["s_map"] = T.exp(log_s) * model.config.s_unit
    return ch


@dataclass(frozen=True)
class HeadFrame:
    """Affine map between head pixels (col J, row I) and image pixels."""

    ax: float
    ay: float
    sx: float
    sy: float

    @classmethod
    def for_box(cls, box: RoiBox, out_h, out_w):
        sx = box.width / out_w
        sy = box.height / out_h
        return cls(STRIDE * box.x0 - 0.5 + 0.5 * sx, STRIDE * box.y0 - 0.5 + 0.5 * sy, sx, sy)

    def to_image(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([self.ax + pts[:, 0] * self.sx, self.ay + pts[:, 1] * self.sy], axis=1)

    def to_head(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([(pts[:, 0] - self.ax) / self.sx, (pts[:, 1] - self.ay) / self.sy], axis=1)


def _feature_box(feats):
    _, h, w = feats.shape
    return RoiBox(0.0, 0.0, float(w), float(h))


def _roi_size(model, feats):
    if model.config.use_tis:
        return model.config.roi_h, model.config.roi_w
    return feats.shape[1], feats.shape[2]


def _pooled_tr(tr, frame: HeadFrame, shape):
    hh, ww = shape
    rows, cols = np.mgrid[0:hh, 0:ww].astype(np.float64)
    img = frame.to_image(np.stack([cols.ravel(), rows.ravel()], axis=1))
    fx = (img[:, 0] - (STRIDE - 1) / 2) / STRIDE
    fy = (img[:, 1] - (STRIDE - 1) / 2) / STRIDE
    tr = T.as_tensor(tr)
    with T.no_tape():
        out = T.bilinear_sample(tr.reshape(1, *tr.shape), fy.reshape(hh, ww), fx.reshape(hh, ww))
    return out.data[0]


def nask_forward(image, model: NaskModel, n=None, t_tr=None, t_tcl=None, diagnostics=None):
    """Detect text in one image; polygons are in image pixel coordinates."""
    cfg = model.config
    n = cfg.n if n is None else n
    t_tr = cfg.t_tr if t_tr is None else t_tr
    t_tcl = cfg.t_tcl if t_tcl is None else t_tcl
    with T.no_tape():
        feats, tr = tis_forward(image, model)
        if cfg.use_tis:
            boxes = extract_proposals(tr.data, t_tr, cfg.min_area, cfg.margin_ratio)
        else:
            boxes = [_feature_box(feats)]
        oh, ow = _roi_size(model, feats)
        out = []
        for k, box in enumerate(boxes):
            patch = text_roi_pool(feats, box, oh, ow) if cfg.use_tis else feats
            ch = head_forward(patch, model)
            frame = HeadFrame.for_box(box, oh, ow)
            shape = ch["tcl"].shape
            region = _pooled_tr(tr, frame, shape) if cfg.use_tis else np.ones(shape)
            maps = GeometryMaps(tr=region, **{c: ch[c].data for c in HEAD_CHANNELS})
            notes = []
            try:
                decoded = decode_instances(maps, n, t_tr, t_tcl,
                                           max_instances=1 if cfg.use_tis else None,
                                           diagnostics=notes)
            except Exception as exc:  # one bad proposal must not sink the image
                notes.append(f"decode failed: {exc}")
                decoded = []
            if diagnostics is not None:
                diagnostics.extend(f"box {k}: {m}" for m in notes)
            for d in decoded:
                poly = frame.to_image(d.polygon)
                out.append(Detection(poly, float(np.clip(d.score, 0.0, 1.0)),
                                     frame.to_image(d.fiducials)))
    return out


# ---------------------------------------------------------------------------
# targets


@dataclass
class TrainingExample:
    image: np.ndarray
    tr: np.ndarray  # H/4 x W/4 text-region target
    boxes: List[RoiBox]
    targets: List[GeometryMaps]
    annotations: list = field(default_factory=list)


def _to_feature(pts):
    return (np.asarray(pts, dtype=np.float64) - (STRIDE - 1) / 2) / STRIDE


def region_target(annotations, feat_shape):
    tr = np.zeros(feat_shape)
    for ann in annotations:
        if not ann.ignore:
            tr[P.rasterize(_to_feature(ann.boundary), feat_shape)] = 1.0
    return tr


def prepare_example(sample, config: PipelineConfig) -> TrainingExample:
    """Precompute region and geometry targets for one sample.

    Training uses one box per annotated instance (the box the proposal
    step would produce from a perfect region map).
    """
    _, h, w = sample.image.shape
    fshape = (h // STRIDE, w // STRIDE)
    anns = list(sample.annotations)
    tr = region_target(anns, fshape)
    boxes, targets = [], []
    if config.use_tis:
        oh, ow = config.roi_h, config.roi_w
        for ann in anns:
            if ann.ignore:
                continue
            mask = P.rasterize(_to_feature(ann.boundary), fshape)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            box = _box_around(ys, xs, fshape, config.margin_ratio)
            boxes.append(box)
            targets.append(_head_target(anns, box, oh, ow, config.n))
    else:
        box = RoiBox(0.0, 0.0, float(fshape[1]), float(fshape[0]))
        boxes.append(box)
        g = _head_target(anns, box, *fshape, config.n)
        # no proposals at inference, so the center line is supervised everywhere
        g.tr = np.ones(g.shape)
        targets.append(g)
    return TrainingExample(np.asarray(sample.image, dtype=np.float64), tr, boxes, targets, anns)


def _head_target(annotations, box, out_h, out_w, n):
    frame = HeadFrame.for_box(box, out_h, out_w)
    local = [a.transformed(frame.to_head) for a in annotations]
    return encode_geometry(local, (STRIDE * out_h, STRIDE * out_w), n)


# ---------------------------------------------------------------------------
# loss and optimization


def _hcat(items):
    return items[0] if len(items) == 1 else T.concat(items, axis=1)


def example_loss(example: TrainingExample, model: NaskModel, weights: LossWeights,
                 tis_only=False) -> LossReport:
    """Loss of one example; must run inside a tape to be differentiable."""
    cfg = model.config
    feats, tr = tis_forward(example.image, model)
    zero = tr.sum() * 0.0
    if tis_only or not example.boxes:
        terms = {name: zero for name in TERMS}
        terms["L_TIS"] = ohem_cross_entropy(tr, example.tr)
        total = terms["L_TIS"] * weights.tis
        return LossReport(terms, total)
    src = feats if cfg.roi_gradient else Tensor(feats.data)
    oh, ow = _roi_size(model, feats)
    outs = []
    for box in example.boxes:
        patch = text_roi_pool(src, box, oh, ow) if cfg.use_tis else src
        outs.append(head_forward(patch, model))
    pred = PredictedMaps(tr=tr, **{c: _hcat([o[c] for o in outs]) for c in HEAD_CHANNELS})
    gt = GeometryMaps(*(np.concatenate([getattr(g, c) for g in example.targets], axis=1)
                        for c in GeometryMaps.CHANNELS))
    rep = total_loss(pred, gt, weights, tis_pred=tr, tis_gt=example.tr)
    if not cfg.use_tis:
        # without the first stage the region term is not part of the objective
        rep.terms["L_TIS"] = zero
        rep.total = combine(rep.terms, weights)
    return rep


class AdamState:
    """Adaptive-moment optimizer state keyed by parameter name."""

    def __init__(self, config: PipelineConfig, lr=None):
        self.lr = config.lr if lr is None else lr
        self.b1 = config.beta1
        self.b2 = config.beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, params: Dict[str, Tensor]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _diagnose(report, model):
    info = {k: float(v.item()) for k, v in report.terms.items()}
    info["param_norms"] = {k: float(np.linalg.norm(t.data)) for k, t in model.parameters().items()}
    return json.dumps(info, sort_keys=True)


def train_step(batch: Sequence[TrainingExample], model: NaskModel, optimizer: AdamState,
               weights: Optional[LossWeights] = None, tis_only=False, dump_path=None):
    """One update on the mean loss of ``batch``; returns per-term values."""
    weights = weights or LossWeights()
    params = model.parameters()
    model.zero_grad()
    sums = {name: 0.0 for name in TERMS + ("total",)}
    for ex in batch:
        with Tape() as tape:
            rep = example_loss(ex, model, weights, tis_only)
            loss = rep.total * (1.0 / len(batch))
        vals = rep.values()
        if not all(np.isfinite(v) for v in vals.values()):
            dump = _diagnose(rep, model)
            if dump_path is not None:
                Path(dump_path).write_text(dump + "\n")
            raise NumericError(f"non-finite loss: {dump}")
        if loss.requires_grad:
            T.backward(tape, loss)
        for k, v in vals.items():
            sums[k] += v / len(batch)
    if any(p.grad is not None and not np.all(np.isfinite(p.grad)) for p in params.values()):
        raise NumericError("non-finite gradient")
    optimizer.update(params)
    return sums


def evaluate_loss(examples, model, weights=None):
    """Mean per-term loss over ``examples`` without updating anything."""
    weights = weights or LossWeights()
    sums = {name: 0.0 for name in TERMS + ("total",)}
    with T.no_tape():
        for ex in examples:
            for k, v in example_loss(ex, model, weights).values().items():
                sums[k] += v / len(examples)
    return sums


@dataclass
class TrainResult:
    model: NaskModel
    history: List[dict]
    initial_loss: dict
    final_loss: dict


def train(examples: Sequence[TrainingExample], config: PipelineConfig, steps=500,
          warmup_steps=50, batch_size=1, weights=None, log_path=None, model=None):
    """Deterministic training loop: region-only warm-up, then joint updates.

    Examples are visited in a seeded shuffled order. When ``log_path`` is
    given, one JSON line per step is appended.
    """
    weights = weights or LossWeights()
    model = model or NaskModel(config)
    opt = AdamState(config)
    rng = np.random.default_rng(config.seed)
    initial = evaluate_loss(examples, model, weights)
    history = []
    order: List[int] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(steps):
            batch = []
            for _ in range(batch_size):
                if not order:
                    order = list(rng.permutation(len(examples)))
                batch.append(examples[order.pop()])
            tis_only = config.use_tis and step < warmup_steps
            vals = train_step(batch, model, opt, weights, tis_only=tis_only)
            rec = {"step": step, **{k: vals[k] for k in TERMS}, "total": vals["total"]}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    final = evaluate_loss(examples, model, weights)
    return TrainResult(model, history, initial, final)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model: NaskModel):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(model.parameters())
    for name in names:
        T.save_tensor(d / f"{name}.tensor", model.parameters()[name], name)
    (d / "config.json").write_text(json.dumps(
        {"config": model.config.to_dict(), "parameters": names}, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> NaskModel:
    d = Path(directory)
    meta = json.loads((d / "config.json").read_text())
    model = NaskModel(PipelineConfig.from_dict(meta["config"]))
    params = model.parameters()
    if sorted(params) != sorted(meta["parameters"]):
        raise ConfigurationError("checkpoint parameters do not match the configuration")
    for name, t in params.items():
        loaded = T.load_tensor(d / f"{name}.tensor")
        if loaded.shape != t.shape:
            raise DimensionError(f"{name}: checkpoint {loaded.shape} vs model {t.shape}")
        t.data[...] = loaded.data
    return model


def detect_all(model, images, **kw):
    return [nask_forward(img, model, **kw) for img in images]


def evaluate_model(model, samples, iou_threshold=0.5, **kw):
    """Pooled P/R/H of ``model`` on samples with annotations."""
    from .evaluation import evaluate
    pairs = [(s.annotations, [d.polygon for d in nask_forward(s.image, model, **kw)])
             for s in samples]
    return evaluate(pairs, iou_threshold)

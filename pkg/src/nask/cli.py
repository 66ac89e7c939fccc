"""``nask`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command that writes into ``--out`` also writes the resolved run
configuration there as ``config.json``.
"""

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigurationError, NaskError

log = logging.getLogger("nask")

PRESETS = {"total-text": (0.7, 0.6), "ctw": (0.8, 0.4)}
DEFAULT_SHAPES = "8,8,32,1;8,8,32,2;8,8,32,4;8,8,32,8;16,16,32,4"


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # help strings that already state their default are left alone
    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text:
            return text
        return super()._get_help_string(action)


@dataclass
class RunConfig:
    n: int = 8
    groups: int = 4
    t_tr: float = PRESETS["total-text"][0]
    t_tcl: float = PRESETS["total-text"][1]
    loss_weights: list = field(default_factory=lambda: [1.0] * 7)
    train_count: int = 20
    test_count: int = 20
    steps: int = 500
    warmup_steps: int = 50
    image_size: int = 128
    seed: int = 0
    out: Optional[str] = None

    def validate(self):
        if self.n < 2:
            raise UsageError("--n must be >= 2")
        if self.groups < 0 or (self.groups and 32 % self.groups):
            raise UsageError("--groups must be 0 or divide 32")
        for name in ("t_tr", "t_tcl"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise UsageError(f"{name} must lie in (0, 1), got {v}")
        if len(self.loss_weights) != 7 or any(w < 0 for w in self.loss_weights):
            raise UsageError("loss_weights must be 7 non-negative numbers")
        if self.image_size % 4 or self.image_size < 32:
            raise UsageError("image_size must be a multiple of 4 and >= 32")
        if min(self.train_count, self.test_count, self.steps) < 1 or self.warmup_steps < 0:
            raise UsageError("counts and steps must be positive")
        return self

    def pipeline_config(self, **kw):
        from .pipeline import PipelineConfig
        return PipelineConfig.toy(n=self.n, groups=self.groups, t_tr=self.t_tr,
                                  t_tcl=self.t_tcl, seed=self.seed, **kw)

    def weights(self):
        from .losses import LossWeights
        return LossWeights(*self.loss_weights)


# ---------------------------------------------------------------------------
# configuration


def _common_parser():
    d = RunConfig()
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", metavar="JSON", help="JSON file with RunConfig fields (default: none)")
    g.add_argument("--seed", type=int, help=f"random seed (default: {d.seed})")
    g.add_argument("--n", type=int, help=f"center-line sample points (default: {d.n})")
    g.add_argument("--groups", type=int,
                   help=f"attention groups, 0 = two 1x1 convs (default: {d.groups})")
    g.add_argument("--preset", choices=sorted(PRESETS),
                   help="threshold preset: total-text = (T_tr 0.7, T_tcl 0.6), "
                        "ctw = (T_tr 0.8, T_tcl 0.4) (default: total-text)")
    g.add_argument("--t-tr", type=float, dest="t_tr",
                   help=f"text-region threshold (default: {d.t_tr})")
    g.add_argument("--t-tcl", type=float, dest="t_tcl",
                   help=f"center-line threshold (default: {d.t_tcl})")
    g.add_argument("--out", help="output directory or file (default: none)")
    return p


def resolve_config(args) -> RunConfig:
    """Defaults, then --config, then --preset, then explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read --config: {exc}") from None
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **data)
    if getattr(args, "preset", None):
        cfg.t_tr, cfg.t_tcl = PRESETS[args.preset]
    for name in ("seed", "n", "groups", "t_tr", "t_tcl", "out"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    for name in ("steps", "warmup_steps", "train_count", "test_count", "image_size"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg.validate()


def _out_dir(cfg, required=True):
    if cfg.out is None:
        if required:
            raise UsageError("--out is required for this command")
        return None
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(directory, cfg, command):
    if directory is None:
        return
    rec = {"command": command, "version": __version__, **asdict(cfg)}
    (Path(directory) / "config.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_encode_labels(args, cfg):
    from .data import read_manifest
    from .geometry import encode_geometry
    from .tensor import save_tensor
    out = _out_dir(cfg)
    entries = read_manifest(args.manifest)
    index, failed = [], 0
    for i, entry in enumerate(entries):
        rec = {"index": i, "image_path": entry.image_path, "maps": None, "error": None}
        try:
            shape = np.load(entry.image_path, mmap_mode="r").shape[-2:]
            maps = encode_geometry(entry.annotations, shape, cfg.n)
            name = f"maps_{i:05d}.tensor"
            save_tensor(out / name, maps.stack(), name="geometry")
            rec["maps"] = name
        except (NaskError, OSError, ValueError) as exc:
            rec["error"] = str(exc)
            failed += 1
            log.error("sample %d: %s", i, exc)
        index.append(rec)
    (out / "index.json").write_text(json.dumps({"channels": list(_channels()), "samples": index},
                                               indent=2, sort_keys=True) + "\n")
    _write_config(out, cfg, "encode-labels")
    return 1 if failed else 0


def _channels():
    from .geometry import GeometryMaps
    return GeometryMaps.CHANNELS


def cmd_synth(args, cfg):
    from .data import write_synthetic_set
    out = _out_dir(cfg)
    path = write_synthetic_set(out, args.count, seed=cfg.seed,
                               canvas=(cfg.image_size, cfg.image_size), **_ribbon_kw(cfg))
    _write_config(out, cfg, "synth")
    print(path)
    return 0


def _ribbon_kw(cfg):
    # ribbon sizes are tuned for 128 px images; scale them with the canvas
    f = cfg.image_size / 128
    return {"length": (45.0 * f, 95.0 * f), "half_thickness": (5.0 * f, 9.0 * f)}


def _toy_samples(cfg, base, count):
    from .data import random_sample
    size = (cfg.image_size, cfg.image_size)
    return [random_sample(base + i, size, **_ribbon_kw(cfg)) for i in range(count)]


def _train_seed_base(cfg):
    return 1000 + 100003 * cfg.seed


def _test_seed_base(cfg):
    return 5000 + 100003 * cfg.seed


def _samples_from(args, cfg, base, count):
    from .data import Sample, read_manifest
    if getattr(args, "manifest", None):
        return [Sample(e.load_image(), e.annotations) for e in read_manifest(args.manifest)]
    return _toy_samples(cfg, base, count)


def _train(cfg, samples, log_path=None, **overrides):
    from .pipeline import prepare_example, train
    pcfg = cfg.pipeline_config(**overrides)
    examples = [prepare_example(s, pcfg) for s in samples]
    return train(examples, pcfg, steps=cfg.steps, warmup_steps=cfg.warmup_steps,
                 weights=cfg.weights(), log_path=log_path)


def cmd_train_toy(args, cfg):
    from .pipeline import save_checkpoint
    out = _out_dir(cfg)
    _write_config(out, cfg, "train-toy")
    samples = _samples_from(args, cfg, _train_seed_base(cfg), cfg.train_count)
    start = time.perf_counter()
    result = _train(cfg, samples, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "checkpoint", result.model)
    summary = {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
               "seconds": round(time.perf_counter() - start, 3)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _detections_jsonl(dets):
    lines = []
    for d in dets:
        lines.append(json.dumps({"points": np.round(d.polygon, 6).tolist(),
                                 "score": round(float(d.score), 6)}))
    return "".join(line + "\n" for line in lines)


def cmd_decode(args, cfg):
    from .geometry import GeometryMaps, decode_instances
    from .pipeline import Detection, load_checkpoint, nask_forward
    from .tensor import load_tensor
    if bool(args.maps) == bool(args.image):
        raise UsageError("give exactly one of --maps or --image")
    if args.maps:
        maps = GeometryMaps.from_stack(load_tensor(args.maps).data)
        dets = [Detection(d.polygon, d.score)
                for d in decode_instances(maps, cfg.n, cfg.t_tr, cfg.t_tcl)]
    else:
        if not args.checkpoint:
            raise UsageError("--image needs --checkpoint")
        model = load_checkpoint(args.checkpoint)
        dets = nask_forward(np.load(args.image), model, n=cfg.n, t_tr=cfg.t_tr, t_tcl=cfg.t_tcl)
    text = _detections_jsonl(dets)
    if cfg.out:
        out = Path(cfg.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_config(out.parent, cfg, "decode")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args, cfg):
    from .data import read_manifest
    from .evaluation import evaluate, format_table, measure_fps, report_json
    from .pipeline import load_checkpoint, nask_forward
    gts = read_manifest(args.manifest)
    if bool(args.detections) == bool(args.checkpoint):
        raise UsageError("give exactly one of --detections or --checkpoint")
    fps = None
    if args.detections:
        dets = read_manifest(args.detections)
        if len(dets) != len(gts):
            raise UsageError(f"{len(dets)} detection records for {len(gts)} images")
        det_polys = [[a.boundary for a in d.annotations if not a.ignore] for d in dets]
    else:
        model = load_checkpoint(args.checkpoint)
        images = [e.load_image() for e in gts]
        run = lambda img: nask_forward(img, model, n=cfg.n, t_tr=cfg.t_tr, t_tcl=cfg.t_tcl)
        det_polys = [[d.polygon for d in run(img)] for img in images]
        if len(images) >= 2:
            fps = measure_fps(run, images)
    rep = evaluate(zip([e.annotations for e in gts], det_polys), fps=fps)
    out = _out_dir(cfg, required=False)
    if out:
        (out / "report.json").write_text(report_json(rep) + "\n")
        _write_config(out, cfg, "eval")
    if args.format == "table":
        print(format_table({args.name: rep}))
    else:
        print(report_json(rep))
    return 0


def _parse_shapes(text):
    shapes = []
    for part in text.split(";"):
        try:
            h, w, c, g = (int(v) for v in part.split(","))
        except ValueError:
            raise UsageError(f"bad shape {part!r}; expected H,W,C,G") from None
        if min(h, w, c, g) < 1 or c % g:
            raise UsageError(f"bad shape {part!r}")
        shapes.append((h, w, c, g))
    return shapes


def cmd_bench_attention(args, cfg):
    from .gsca import bench_attention
    rows = list(bench_attention(_parse_shapes(args.shapes), np.random.default_rng(cfg.seed),
                                repeats=args.repeats))
    header = ["H", "W", "C", "G", "paper_cost", "implemented_cost", "wall_ns"]
    if not args.timing:
        header = header[:-1]
        rows = [{k: r[k] for k in header} for r in rows]
    text = _csv(rows, header)
    out = _out_dir(cfg, required=False)
    if out:
        (out / "attention_cost.csv").write_text(text)
        _write_config(out, cfg, "bench-attention")
    sys.stdout.write(text)
    return 0


def _axis_values(axis, text):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError("--values is empty")
    if axis in ("G", "n"):
        try:
            vals = [int(v) for v in vals]
        except ValueError:
            raise UsageError(f"--values for {axis} must be integers") from None
    elif axis == "first-stage":
        if set(vals) - {"on", "off"}:
            raise UsageError("--values for first-stage must be on/off")
    return vals


def cmd_ablate(args, cfg):
    from .pipeline import evaluate_model
    values = _axis_values(args.axis, args.values)
    if args.axis == "G":
        for g in values:
            replace(cfg, groups=g).validate()
    if args.axis == "n" and min(values) < 2:
        raise UsageError("n values must be >= 2")
    train_set = _toy_samples(cfg, _train_seed_base(cfg), cfg.train_count)
    test_set = _toy_samples(cfg, _test_seed_base(cfg), cfg.test_count)
    rows = []
    shared = None
    for v in values:
        if args.axis == "G":
            model = _train(replace(cfg, groups=v), train_set).model
            rep = evaluate_model(model, test_set)
        elif args.axis == "first-stage":
            model = _train(cfg, train_set, use_tis=(v == "on")).model
            rep = evaluate_model(model, test_set)
        else:
            shared = shared or _train(cfg, train_set).model
            rep = evaluate_model(shared, test_set, n=v)
        rows.append({"axis": args.axis, "value": v, "precision": round(rep["precision"], 6),
                     "recall": round(rep["recall"], 6), "hmean": round(rep["hmean"], 6)})
    text = _csv(rows, ["axis", "value", "precision", "recall", "hmean"])
    out = _out_dir(cfg, required=False)
    if out:
        (out / f"ablate_{args.axis}.csv").write_text(text)
        _write_config(out, cfg, "ablate")
    sys.stdout.write(text)
    return 0


def svg_document(size, gt_polys, det_polys, fiducials=()):
    h, w = size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']

    def pts(poly):
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in np.asarray(poly, float))

    for poly in gt_polys:
        parts.append(f'<polygon class="gt" points="{pts(poly)}" fill="none" '
                     f'stroke="#1b9e77" stroke-width="1"/>')
    for poly in det_polys:
        parts.append(f'<polygon class="det" points="{pts(poly)}" fill="none" '
                     f'stroke="#d95f02" stroke-width="1"/>')
    for fid in fiducials:
        for x, y in np.asarray(fid, float):
            parts.append(f'<circle class="fiducial" cx="{x:.2f}" cy="{y:.2f}" r="1" '
                         f'fill="#7570b3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(args, cfg):
    from .data import read_manifest
    from .pipeline import load_checkpoint, nask_forward
    out = _out_dir(cfg)
    entries = read_manifest(args.manifest)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    dets = read_manifest(args.detections) if args.detections else None
    if dets is not None and len(dets) != len(entries):
        raise UsageError(f"{len(dets)} detection records for {len(entries)} images")
    for i, e in enumerate(entries):
        img = e.load_image()
        gt = [a.boundary for a in e.annotations]
        det, fids = [], []
        if model is not None:
            found = nask_forward(img, model, n=cfg.n, t_tr=cfg.t_tr, t_tcl=cfg.t_tcl)
            det = [d.polygon for d in found]
            fids = [d.fiducials for d in found if d.fiducials is not None]
        elif dets is not None:
            det = [a.boundary for a in dets[i].annotations]
        (out / f"image_{i:05d}.svg").write_text(svg_document(img.shape[-2:], gt, det, fids))
    _write_config(out, cfg, "render")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = _common_parser()
    fmt = _HelpFormatter
    d = RunConfig()
    parser = argparse.ArgumentParser(
        prog="nask", formatter_class=fmt,
        description="Curved text detection toolkit.",
        epilog="Threshold presets: total-text = (0.7, 0.6), ctw = (0.8, 0.4). "
               f"Defaults: n={d.n}, groups={d.groups}, T_tr={d.t_tr}, T_tcl={d.t_tcl}, "
               f"seed={d.seed}.")
    parser.add_argument("--version", action="version", version=f"nask {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], formatter_class=fmt, help=help_text,
                           description=help_text)
        p.set_defaults(func=func)
        return p

    def training_flags(p):
        p.add_argument("--steps", type=int, help=f"optimizer steps (default: {d.steps})")
        p.add_argument("--warmup-steps", type=int, dest="warmup_steps",
                       help=f"region-only warm-up steps (default: {d.warmup_steps})")
        p.add_argument("--train-count", type=int, dest="train_count",
                       help=f"synthetic training images (default: {d.train_count})")
        p.add_argument("--image-size", type=int, dest="image_size",
                       help=f"synthetic image side (default: {d.image_size})")

    p = add("encode-labels", cmd_encode_labels, "write ground-truth geometry maps for a manifest")
    p.add_argument("manifest", help="JSON-lines manifest")

    p = add("synth", cmd_synth, "write a synthetic image set and manifest")
    p.add_argument("--count", type=int, default=20, help="number of images")
    p.add_argument("--image-size", type=int, dest="image_size",
                   help=f"image side (default: {d.image_size})")

    p = add("train-toy", cmd_train_toy, "train the two-stage model on synthetic data")
    training_flags(p)
    p.add_argument("--manifest", help="train on this manifest instead of generated images")

    p = add("decode", cmd_decode, "decode geometry maps or run a checkpoint on an image")
    p.add_argument("--maps", help="7 x H x W geometry tensor file")
    p.add_argument("--image", help="3 x H x W .npy image")
    p.add_argument("--checkpoint", help="checkpoint directory (with --image)")

    p = add("eval", cmd_eval, "precision / recall / H-mean report")
    p.add_argument("manifest", help="ground-truth manifest")
    p.add_argument("--detections", help="manifest whose annotations are the detections")
    p.add_argument("--checkpoint", help="run this checkpoint on the manifest images")
    p.add_argument("--format", choices=("json", "table"), default="json", help="report format")
    p.add_argument("--name", default="nask", help="row label for the table format")

    p = add("bench-attention", cmd_bench_attention, "attention cost models as CSV")
    p.add_argument("--shapes", default=DEFAULT_SHAPES, help="H,W,C,G tuples separated by ';'")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats (best is kept)")
    p.add_argument("--timing", action=argparse.BooleanOptionalAction, default=True,
                   help="include wall-clock column (off for byte-stable output)")

    p = add("ablate", cmd_ablate, "train and evaluate over one axis, CSV output")
    p.add_argument("--axis", required=True, choices=("G", "first-stage", "n"), help="swept axis")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0,2,4,8 or on,off")
    p.add_argument("--test-count", type=int, dest="test_count",
                   help=f"held-out synthetic images (default: {d.test_count})")
    training_flags(p)

    p = add("render", cmd_render, "one SVG per image: ground truth and detections")
    p.add_argument("manifest", help="ground-truth manifest")
    p.add_argument("--detections", help="manifest of detections to draw")
    p.add_argument("--checkpoint", help="run this checkpoint and draw its detections")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"nask {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NaskError, OSError, ValueError) as exc:
        print(f"nask {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

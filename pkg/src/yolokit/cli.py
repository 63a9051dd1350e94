"""Batch command-line front end.

Commands: netinfo (cfg census), augment (dataset expansion), labels
(format conversion and CSV aggregation), encode (ground-truth head
tensors), detect (head tensors to detection lines), eval (detections vs
ground truth), synth (scenario dataset generation), bench (post-processing
latency).

Exit codes: 0 success, 1 evaluation found failures, 2 usage/parse error,
3 I/O error. Data goes to stdout or files; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import cfg as cfgmod
from . import data, metrics, postprocess
from .boxes import Anchor, BoxNorm, corner_to_norm, norm_to_corner
from .tensor import ShapeError, Tensor

HEAD_MAGIC = b"YF01"

DEFAULT_ANCHORS = (
    Anchor(12, 16), Anchor(19, 36), Anchor(40, 28),
    Anchor(36, 75), Anchor(76, 55), Anchor(72, 146),
    Anchor(142, 110), Anchor(192, 243), Anchor(459, 401),
)

DEFAULT_CLASS_NAMES = (
    "bolt", "nut", "washer", "gear", "bearing", "bracket", "spring",
    "clip", "rivet", "spacer", "flange", "dowel", "shim",
)

SCENARIO_BY_NUMBER = {1: "single-class", 2: "multi-class-group", 3: "all-classes"}


# ---------------------------------------------------------------------------
# Binary head-tensor format: magic, grid_n and channels as little-endian
# u32, then float32 values in (row, column, channel) order.

def write_head_bytes(head: Tensor) -> bytes:
    if head.height != head.width:
        raise ShapeError(f"head must be square, got {head.height}x{head.width}")
    header = HEAD_MAGIC + struct.pack("<II", head.height, head.channels)
    return header + head.data.astype("<f4").tobytes()


def read_head_bytes(blob: bytes) -> Tensor:
    if blob[:4] != HEAD_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r} (expected {HEAD_MAGIC!r})")
    if len(blob) < 12:
        raise ValueError("truncated header")
    grid_n, channels = struct.unpack("<II", blob[4:12])
    expect = 12 + grid_n * grid_n * channels * 4
    if len(blob) != expect:
        raise ValueError(f"payload is {len(blob)} bytes, expected {expect}")
    values = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64)
    return Tensor(values.reshape(grid_n, grid_n, channels), copy=False)


# ---------------------------------------------------------------------------
# Flat key=value run configuration

@dataclass(frozen=True)
class RunConfig:
    """Pipeline settings shared by the commands."""

    input_n: int = 608
    classes_path: str = ""
    anchors: tuple = DEFAULT_ANCHORS
    objectness_threshold: float = 0.25
    iou_threshold: float = 0.45
    confidence_floor: float = 0.5
    per_class_nms: bool = False
    rotations: tuple = ()
    flips: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.input_n % 32 != 0 or self.input_n <= 0:
            raise ValueError(f"input_n {self.input_n} is not a positive multiple of 32")
        if len(self.anchors) != 9:
            raise ValueError(f"need 9 anchors, got {len(self.anchors)}")
        for t in (self.objectness_threshold, self.iou_threshold,
                  self.confidence_floor):
            if not (0.0 <= t <= 1.0):
                raise ValueError(f"threshold {t} outside [0, 1]")

    def detect_config(self) -> postprocess.DetectConfig:
        return postprocess.DetectConfig(
            nms=postprocess.NmsConfig(
                objectness_threshold=self.objectness_threshold,
                iou_threshold=self.iou_threshold,
                per_class=self.per_class_nms),
            confidence_floor=self.confidence_floor)


def parse_run_config(text: str) -> RunConfig:
    """Parse `key=value` lines (#-comments allowed) into a RunConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value

    kwargs = {}
    for key, value in values.items():
        if key == "input_n":
            kwargs["input_n"] = int(value)
        elif key == "classes":
            kwargs["classes_path"] = value
        elif key == "anchors":
            nums = [float(v) for v in value.split(",")]
            if len(nums) != 18:
                raise ValueError(f"anchors needs 18 numbers, got {len(nums)}")
            kwargs["anchors"] = tuple(Anchor(nums[i], nums[i + 1])
                                      for i in range(0, 18, 2))
        elif key in ("objectness_threshold", "iou_threshold", "confidence_floor"):
            kwargs[key] = float(value)
        elif key == "per_class_nms":
            kwargs["per_class_nms"] = value.lower() in ("1", "true", "yes")
        elif key == "rotations":
            kwargs["rotations"] = tuple(float(v) for v in value.split(",")) if value else ()
        elif key == "flips":
            kwargs["flips"] = tuple(_flip_name(v) for v in value.split(",")) if value else ()
        elif key == "seed":
            kwargs["seed"] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return RunConfig(**kwargs)


def format_run_config(config: RunConfig) -> str:
    """Canonical config text; parse_run_config(format_run_config(c)) == c."""
    anchors = ",".join(f"{a.p_w:g},{a.p_h:g}" for a in config.anchors)
    lines = [
        f"input_n={config.input_n}",
        f"classes={config.classes_path}",
        f"anchors={anchors}",
        f"objectness_threshold={config.objectness_threshold!r}",
        f"iou_threshold={config.iou_threshold!r}",
        f"confidence_floor={config.confidence_floor!r}",
        f"per_class_nms={1 if config.per_class_nms else 0}",
        f"rotations={','.join(f'{r:g}' for r in config.rotations)}",
        f"flips={','.join(config.flips)}",
        f"seed={config.seed}",
    ]
    return "\n".join(lines) + "\n"


def _flip_name(token: str) -> str:
    token = token.strip().lower()
    if token in ("h", "horizontal"):
        return "horizontal"
    if token in ("v", "vertical"):
        return "vertical"
    raise ValueError(f"unknown flip axis {token!r}")


def _load_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = parse_run_config(_read_text(args.config))
    return config


# ---------------------------------------------------------------------------
# I/O helpers

def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path: str, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)


def _load_registry(path: str) -> data.ClassRegistry:
    return data.ClassRegistry.from_text(_read_text(path))


def _load_dataset_dir(directory: str):
    """Read a dataset directory: classes.txt plus <stem>.ppm/<stem>.txt
    pairs (a missing label file means an unlabeled image)."""
    classes_path = os.path.join(directory, "classes.txt")
    if not os.path.exists(classes_path):
        raise ValueError(f"{directory}: missing classes.txt")
    registry = _load_registry(classes_path)
    samples = []
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".ppm"):
            continue
        image = data.read_ppm(_read_bytes(os.path.join(directory, name)))
        stem = os.path.splitext(name)[0]
        label_path = os.path.join(directory, stem + ".txt")
        labels = ()
        if os.path.exists(label_path):
            labels = tuple(data.read_yolo_labels(_read_text(label_path), registry))
        samples.append(data.LabeledImage(image, labels, name))
    return registry, samples


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        _write_text(out_path, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands

def cmd_netinfo(args) -> int:
    graph = cfgmod.parse_cfg(_read_text(args.cfg))
    if args.input is not None:
        net = graph.layers[0]
        attrs = dict(net.attributes)
        attrs["width"] = args.input
        attrs["height"] = args.input
        graph = cfgmod.NetGraph(
            (cfgmod.LayerSpec("net", attrs, net.source_line),) + graph.layers[1:])
    graph = cfgmod.propagate_shapes(graph)
    report = cfgmod.census(graph)

    rows = [("idx", "kind", "out shape", "neurons", "params")]
    for stat in report.per_layer:
        h, w, c = stat.out_shape
        rows.append((str(stat.index), stat.kind, f"{h}x{w}x{c}",
                     str(stat.neurons), str(stat.params)))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    for row in rows:
        print("  ".join(cell.rjust(widths[i]) if i != 1 else cell.ljust(widths[i])
                        for i, cell in enumerate(row)).rstrip())
    in_h, in_w, in_c = graph.shapes[0]
    print(f"input: {in_h}x{in_w}x{in_c}")
    print(f"input neurons: {report.input_neurons}")
    print(f"conv layers: {report.conv_layer_count}")
    print(f"hidden neurons: {report.hidden_neurons}")
    print(f"total parameters: {report.total_parameters}")
    return 0


def cmd_augment(args) -> int:
    registry, samples = _load_dataset_dir(args.dataset)
    rotations = [float(v) for v in args.rotations.split(",")] if args.rotations else []
    flips = [_flip_name(v) for v in args.flips.split(",")] if args.flips else []
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "classes.txt"), registry.to_text())
    count = 0
    expanded = []
    # keep only labels for the report; the pixel payloads would not fit in
    # memory for large expansions
    stub = data.Image(np.zeros((1, 1, 3), dtype=np.uint8))
    for variant in data.iter_expanded(samples, rotations, flips):
        stem = variant.stem
        _write_bytes(os.path.join(args.out, stem + ".ppm"),
                     data.write_ppm(variant.image))
        _write_text(os.path.join(args.out, stem + ".txt"),
                    data.write_yolo_labels(variant.labels))
        expanded.append(data.LabeledImage(stub, variant.labels,
                                          variant.source_path))
        count += 1
    report = data.expansion_report(expanded, registry, floor=args.floor)
    print(f"wrote {count} images to {args.out}")
    for name in registry:
        marker = "" if report.per_class[name] >= args.floor else "  BELOW FLOOR"
        print(f"{name}: {report.per_class[name]}{marker}")
    if report.below_floor:
        print(f"classes below the {args.floor}-image floor: "
              f"{', '.join(report.below_floor)}", file=sys.stderr)
    return 0


def cmd_labels_convert(args) -> int:
    registry = _load_registry(args.classes)
    os.makedirs(args.out, exist_ok=True)
    converted = 0
    for name in sorted(os.listdir(args.dir)):
        if not name.endswith(".txt") or name == "classes.txt":
            continue
        stem = os.path.splitext(name)[0]
        ppm_path = os.path.join(args.dir, stem + ".ppm")
        image = data.read_ppm(_read_bytes(ppm_path))
        text = _read_text(os.path.join(args.dir, name))
        if args.src == "labelimg" and args.dst == "yolo":
            corners = data.read_labelimg_corners(text, (image.width, image.height))
            labels = [(registry.index(cls), corner_to_norm(
                box, image.width, image.height)) for cls, box in corners]
            out_text = data.write_yolo_labels(labels)
        elif args.src == "yolo" and args.dst == "labelimg":
            labels = data.read_yolo_labels(text, registry)
            corners = [(registry[cid], norm_to_corner(box, image.width, image.height))
                       for cid, box in labels]
            out_text = data.write_labelimg_corners(corners)
        else:
            raise ValueError(f"unsupported conversion {args.src} -> {args.dst}")
        _write_text(os.path.join(args.out, name), out_text)
        converted += 1
    print(f"converted {converted} label files to {args.out}")
    return 0


def cmd_labels_csv(args) -> int:
    registry, samples = _load_dataset_dir(args.dir)
    _emit(data.aggregate_csv(samples, registry), args.out)
    return 0


def cmd_encode(args) -> int:
    config = _load_config(args)
    registry, samples = _load_dataset_dir(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    input_n = args.input if args.input is not None else config.input_n
    for sample in samples:
        if sample.image.width != input_n or sample.image.height != input_n:
            raise ValueError(
                f"{sample.source_path}: image is {sample.image.width}x"
                f"{sample.image.height}, expected {input_n}x{input_n}")
        heads = postprocess.ground_truth_heads(
            sample.labels, len(registry), input_n, config.anchors)
        for k, head in enumerate(heads):
            _write_bytes(os.path.join(args.out, f"{sample.stem}.h{k}"),
                         write_head_bytes(head))
    print(f"encoded {len(samples)} images into head tensors at {args.out}")
    return 0


def cmd_detect(args) -> int:
    config = _load_config(args)
    if args.dump_config:
        sys.stdout.write(format_run_config(config))
        return 0
    registry = _load_registry(args.classes)
    heads = [read_head_bytes(_read_bytes(p)) for p in args.heads]
    dets = postprocess.detect_frame(heads, config.anchors,
                                    config.detect_config(), registry.names)
    if args.json:
        _emit(postprocess.detections_to_json(dets) + "\n", args.out)
    else:
        _emit(postprocess.format_detections(dets), args.out)
    return 0


def cmd_eval(args) -> int:
    registry, truth = _load_dataset_dir(args.truth)
    samples = []
    for sample in truth:
        gts = [metrics.GroundTruth(
            norm_to_corner(box, sample.image.width, sample.image.height), cid)
            for cid, box in sample.labels]
        det_path = os.path.join(args.detections, sample.stem + ".txt")
        dets = []
        if os.path.exists(det_path):
            dets = postprocess.parse_detection_lines(_read_text(det_path),
                                                     registry.names)
        samples.append((dets, gts))
    scenario = SCENARIO_BY_NUMBER.get(args.scenario, args.scenario)
    report = metrics.scenario_report(
        samples, scenario, metrics.EvalConfig(error_iou_threshold=args.iou))
    sys.stdout.write(metrics.report_table(report, registry.names))
    if args.json:
        _write_text(args.json, metrics.report_to_json(report, registry.names) + "\n")
    return 1 if report.failed_images else 0


def cmd_synth(args) -> int:
    config = _load_config(args)
    registry = (_load_registry(args.classes) if args.classes
                else data.ClassRegistry(DEFAULT_CLASS_NAMES))
    scenario = SCENARIO_BY_NUMBER[args.scenario]
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "classes.txt"), registry.to_text())
    base_seed = args.seed if args.seed is not None else config.seed
    for i in range(args.count):
        seed = base_seed + i
        if scenario == "single-class":
            pool = [i % len(registry)]
            scene = data.generate_synthetic_scene(
                seed, registry, count_range=(3, 6), min_gap=4.0,
                class_pool=pool)
        elif scenario == "multi-class-group":
            start = i % len(registry)
            pool = [(start + k) % len(registry) for k in range(4)]
            scene = data.generate_synthetic_scene(
                seed, registry, count_range=(4, 4), min_gap=1.0,
                class_pool=pool)
        else:
            scene = data.generate_synthetic_scene(
                seed, registry, count_range=(len(registry), len(registry)),
                min_gap=2.0)
        _write_bytes(os.path.join(args.out, scene.stem + ".ppm"),
                     data.write_ppm(scene.image))
        _write_text(os.path.join(args.out, scene.stem + ".txt"),
                    data.write_yolo_labels(scene.labels))
    print(f"wrote {args.count} {scenario} scenes to {args.out}")
    return 0


def _bench_frame(rng, num_classes: int, input_n: int, anchors):
    """Head tensors shaped like a trained detector's output: a few hot
    object slots over a quiet background, with unit Gaussian noise on
    every logit."""
    labels = []
    for _ in range(int(rng.integers(3, 9))):
        w = float(rng.uniform(0.05, 0.3))
        h = float(rng.uniform(0.05, 0.3))
        cx = float(rng.uniform(w / 2, 1.0 - w / 2))
        cy = float(rng.uniform(h / 2, 1.0 - h / 2))
        labels.append((int(rng.integers(num_classes)), BoxNorm(cx, cy, w, h)))
    heads = postprocess.ground_truth_heads(labels, num_classes, input_n, anchors)
    return tuple(
        Tensor(head.data + rng.normal(0.0, 1.0, head.data.shape), copy=False)
        for head in heads)


def cmd_bench(args) -> int:
    config = _load_config(args)
    input_n = args.input
    num_classes = args.classes_count
    rng = np.random.default_rng(config.seed)
    frames = [_bench_frame(rng, num_classes, input_n, config.anchors)
              for _ in range(args.frames)]
    names = [f"c{i}" for i in range(num_classes)]
    det_config = config.detect_config()
    timings = []
    for heads in frames:
        start = time.perf_counter()
        postprocess.detect_frame(heads, config.anchors, det_config, names)
        timings.append((time.perf_counter() - start) * 1000.0)
    timings.sort()
    candidates = cfgmod.total_grid_cells(input_n) * 3
    p50 = timings[len(timings) // 2]
    p99 = timings[min(len(timings) - 1, int(len(timings) * 0.99))]
    print(f"frames: {args.frames}  candidates/frame: {candidates}")
    print(f"post-processing latency ms: p50 {p50:.2f}  p99 {p99:.2f}  "
          f"max {timings[-1]:.2f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yolokit",
        description="Desk-scale detection pipeline toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("netinfo", help="parse a darknet cfg and print a census")
    p.add_argument("cfg")
    p.add_argument("--input", type=int, default=None,
                   help="override input width/height")
    p.set_defaults(func=cmd_netinfo)

    p = sub.add_parser("augment", help="expand a dataset by rotations and flips")
    p.add_argument("dataset")
    p.add_argument("--rotations", default="", help="comma-separated degrees")
    p.add_argument("--flips", default="", help="comma-separated axes (h,v)")
    p.add_argument("--out", required=True)
    p.add_argument("--floor", type=int, default=300,
                   help="per-class image floor to check")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("labels", help="label format tools")
    labels_sub = p.add_subparsers(dest="labels_command", required=True)
    pc = labels_sub.add_parser("convert", help="convert between label formats")
    pc.add_argument("--from", dest="src", required=True,
                    choices=("labelimg", "yolo"))
    pc.add_argument("--to", dest="dst", required=True,
                    choices=("labelimg", "yolo"))
    pc.add_argument("--dir", required=True)
    pc.add_argument("--classes", required=True)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_labels_convert)
    pv = labels_sub.add_parser("csv", help="aggregate a dataset into one CSV")
    pv.add_argument("--dir", required=True)
    pv.add_argument("--out", default=None)
    pv.set_defaults(func=cmd_labels_csv)

    p = sub.add_parser("encode",
                       help="encode ground-truth labels as head tensors")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--input", type=int, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("detect", help="run post-processing on head tensors")
    p.add_argument("--heads", nargs=3, metavar="HEAD",
                   help="three head files, fine to coarse")
    p.add_argument("--classes", help="classes.txt path")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--json", action="store_true",
                   help="emit JSON instead of detection lines")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration and exit")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--scenario", default="all-classes",
                   help="1|2|3 or a scenario name")
    p.add_argument("--iou", type=float, default=0.5,
                   help="IoU threshold for failure counting")
    p.add_argument("--json", default=None, help="also write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scenario", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="measure post-processing latency")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--input", type=int, default=416)
    p.add_argument("--classes-count", type=int, default=13)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "detect" and not args.dump_config:
        if not args.heads or not args.classes:
            parser.error("detect requires --heads and --classes")
    if args.command == "eval":
        try:
            args.scenario = int(args.scenario)
        except ValueError:
            pass
    try:
        return args.func(args)
    except OSError as exc:
        print(f"yolokit: I/O error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ShapeError) as exc:
        print(f"yolokit: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()

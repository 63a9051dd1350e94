"""Dataset tooling: PPM image I/O, label formats (normalized-center text,
pixel-corner text, aggregate CSV), rotation/flip augmentation with label
transforms, and a seeded synthetic scene generator.

Label coordinate conventions follow the two text formats in the wild:
per-image `class_id cx cy w h` lines in normalized center form, and
`class_name x_min y_min x_max y_max` lines in pixel corners. The CSV
aggregate uses pixel corners with one row per box.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .boxes import BoxCorner, BoxNorm, corner_to_norm, norm_to_corner

# label coordinates are quantized to this grid so that the flip and exact
# 90-degree label maps (x -> 1-x and coordinate swaps) are closed and
# bit-exact over repeated application; 1/4096 of a 608 px canvas is under
# 0.15 px, far inside every stated tolerance
COORD_GRID = 4096


class PlacementError(RuntimeError):
    """Scene generator could not fit the requested shapes."""


class Image:
    """RGB raster; pixels stored as an (height, width, 3) uint8 array."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"pixels must be (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dims must be positive, got {arr.shape}")
        self.pixels = arr

    @classmethod
    def new(cls, width: int, height: int, color=(0, 0, 0)) -> "Image":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:, :] = color
        return cls(arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height})"


@dataclass(frozen=True)
class LabeledImage:
    """An image plus its (class_id, BoxNorm) labels and source name."""

    image: Image
    labels: tuple
    source_path: str

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def stem(self) -> str:
        base = os.path.basename(self.source_path)
        return os.path.splitext(base)[0]


class ClassRegistry:
    """Ordered class names; a name's position is its class_id."""

    __slots__ = ("names",)

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if not names:
            raise ValueError("registry needs at least one class name")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if any(not n or n.split() != [n] for n in names):
            raise ValueError("class names must be non-empty, without whitespace")
        self.names = names

    @classmethod
    def from_text(cls, text: str) -> "ClassRegistry":
        return cls([line.strip() for line in text.splitlines() if line.strip()])

    def to_text(self) -> str:
        return "".join(name + "\n" for name in self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, class_id: int) -> str:
        return self.names[class_id]

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassRegistry):
            return NotImplemented
        return self.names == other.names


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

def read_ppm(data: bytes) -> Image:
    """Parse a binary P6 PPM with maxval 255.

    Header tokens may be separated by any whitespace and `#` comments.
    """
    pos = 0
    n = len(data)

    def token() -> bytes:
        nonlocal pos
        while pos < n:
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < n and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        return data[start:pos]

    magic = token()
    if magic != b"P6":
        raise ValueError(f"unsupported format {magic!r} (need binary P6)")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise ValueError(f"bad header field: {exc}") from None
    if width < 1 or height < 1:
        raise ValueError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} (need 255)")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + width * height * 3]
    if len(payload) != width * height * 3:
        raise ValueError(
            f"truncated payload: need {width * height * 3} bytes, "
            f"have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.copy())


def write_ppm(image: Image) -> bytes:
    """Canonical P6 serialization (bit-exact round trip with read_ppm)."""
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.pixels.tobytes()


# ---------------------------------------------------------------------------
# Label text formats

def read_yolo_labels(text: str, registry) -> list[tuple[int, BoxNorm]]:
    """Parse `class_id cx cy w h` lines (normalized center form).

    Raises ValueError with the line number for a wrong field count, a
    class_id outside the registry, or coordinates outside their ranges.
    """
    num_classes = len(registry)
    out: list[tuple[int, BoxNorm]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
        except ValueError:
            raise ValueError(f"line {lineno}: class_id {parts[0]!r} is not an integer") from None
        if not (0 <= class_id < num_classes):
            raise ValueError(
                f"line {lineno}: class_id {class_id} outside 0..{num_classes - 1}")
        try:
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric coordinate") from None
        try:
            box = BoxNorm(cx, cy, w, h)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        out.append((class_id, box))
    return out


def write_yolo_labels(labels: Iterable[tuple[int, BoxNorm]]) -> str:
    """One `class_id cx cy w h` line per label, 6 decimals, LF endings."""
    return "".join(
        f"{cid} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n"
        for cid, b in labels)


def read_labelimg_corners(text: str, image_dims: tuple[int, int]) -> list[tuple[str, BoxCorner]]:
    """Parse `class_name x_min y_min x_max y_max` pixel-corner lines.

    `image_dims` is (width, height). Corners may exceed the image by at
    most one pixel (they are clamped); beyond that is an error, as are
    inverted corners.
    """
    img_w, img_h = image_dims
    out: list[tuple[str, BoxCorner]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        name = parts[0]
        try:
            x_min, y_min, x_max, y_max = (float(p) for p in parts[1:])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric coordinate") from None
        if x_max < x_min or y_max < y_min:
            raise ValueError(
                f"line {lineno}: inverted corners ({x_min}, {y_min}, {x_max}, {y_max})")
        if (x_min < -1.0 or y_min < -1.0 or x_max > img_w + 1.0
                or y_max > img_h + 1.0):
            raise ValueError(
                f"line {lineno}: corners outside {img_w}x{img_h} image "
                f"beyond 1 px tolerance")
        out.append((name, BoxCorner(
            min(max(x_min, 0.0), float(img_w)),
            min(max(y_min, 0.0), float(img_h)),
            min(max(x_max, 0.0), float(img_w)),
            min(max(y_max, 0.0), float(img_h)))))
    return out


def write_labelimg_corners(labels: Iterable[tuple[str, BoxCorner]]) -> str:
    """Inverse of read_labelimg_corners (shortest-repr floats)."""
    return "".join(
        f"{name} {b.x_min} {b.y_min} {b.x_max} {b.y_max}\n"
        for name, b in labels)


# ---------------------------------------------------------------------------
# CSV aggregation

CSV_HEADER = ("filename", "width", "height", "class",
              "x_min", "y_min", "x_max", "y_max")


@dataclass(frozen=True)
class CsvRow:
    """One bounding box of one image, pixel corners."""

    filename: str
    width: int
    height: int
    class_name: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float


def dataset_to_rows(dataset: Sequence[LabeledImage], registry) -> list[CsvRow]:
    rows: list[CsvRow] = []
    for sample in dataset:
        filename = os.path.basename(sample.source_path)
        w, h = sample.image.width, sample.image.height
        for class_id, box in sample.labels:
            corner = norm_to_corner(box, w, h)
            rows.append(CsvRow(filename, w, h, registry[class_id],
                               corner.x_min, corner.y_min,
                               corner.x_max, corner.y_max))
    rows.sort(key=lambda r: r.filename)  # stable: keeps label order per file
    return rows


def format_csv(rows: Sequence[CsvRow]) -> str:
    """Header plus one row per box; shortest-repr floats so that
    format(parse(format(x))) is byte-identical to format(x)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.filename, r.width, r.height, r.class_name,
                         repr(r.x_min), repr(r.y_min),
                         repr(r.x_max), repr(r.y_max)])
    return buf.getvalue()


def parse_csv(text: str) -> list[CsvRow]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty CSV (missing header)") from None
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"bad CSV header {header!r}")
    rows: list[CsvRow] = []
    for record in reader:
        if not record:
            continue
        if len(record) != len(CSV_HEADER):
            raise ValueError(f"CSV row with {len(record)} fields: {record!r}")
        rows.append(CsvRow(record[0], int(record[1]), int(record[2]), record[3],
                           float(record[4]), float(record[5]),
                           float(record[6]), float(record[7])))
    return rows


def aggregate_csv(dataset: Sequence[LabeledImage], registry) -> str:
    """All boxes of a dataset as CSV text."""
    return format_csv(dataset_to_rows(dataset, registry))


# ---------------------------------------------------------------------------
# Augmentation

def flip(sample: LabeledImage, axis: str) -> LabeledImage:
    """Mirror pixels and labels. 'horizontal' mirrors x (cx -> 1-cx),
    'vertical' mirrors y (cy -> 1-cy). An involution on both."""
    if axis == "horizontal":
        pixels = sample.image.pixels[:, ::-1]
        labels = tuple((cid, BoxNorm(1.0 - b.cx, b.cy, b.w, b.h))
                       for cid, b in sample.labels)
    elif axis == "vertical":
        pixels = sample.image.pixels[::-1, :]
        labels = tuple((cid, BoxNorm(b.cx, 1.0 - b.cy, b.w, b.h))
                       for cid, b in sample.labels)
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return LabeledImage(Image(pixels.copy()), labels, sample.source_path)


def _rotate_quarter_labels(labels, quarter: int):
    """Exact label maps for k clockwise quarter turns on a square canvas."""
    out = []
    for cid, b in labels:
        if quarter == 1:
            nb = BoxNorm(1.0 - b.cy, b.cx, b.h, b.w)
        elif quarter == 2:
            nb = BoxNorm(1.0 - b.cx, 1.0 - b.cy, b.w, b.h)
        else:
            nb = BoxNorm(b.cy, 1.0 - b.cx, b.h, b.w)
        out.append((cid, nb))
    return tuple(out)


def rotate(sample: LabeledImage, degrees: float, clockwise: bool = True,
           min_visible: float = 0.2) -> LabeledImage:
    """Rotate about the image center onto a same-size canvas.

    Square-canvas multiples of 90 degrees use an exact pixel permutation
    and exact label coordinate maps. Any other angle resamples nearest
    neighbor (off-canvas source pixels become black) and replaces each
    label with the axis-aligned enclosing box of its rotated corners,
    clipped to the canvas; a label whose clipped box area falls below
    `min_visible` of its original box area is dropped.
    """
    deg = float(degrees) % 360.0 if clockwise else (-float(degrees)) % 360.0
    img = sample.image
    h, w = img.height, img.width
    if deg == 0.0:
        return LabeledImage(Image(img.pixels.copy()), sample.labels,
                            sample.source_path)
    if deg % 90.0 == 0.0 and h == w:
        quarter = int(deg // 90.0)
        pixels = np.rot90(img.pixels, k=-quarter)
        labels = _rotate_quarter_labels(sample.labels, quarter)
        return LabeledImage(Image(pixels.copy()), labels, sample.source_path)

    theta = math.radians(deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx0, cy0 = w / 2.0, h / 2.0

    # inverse map: for each destination pixel center, rotate back by theta
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx0
    dy = ys + 0.5 - cy0
    # clockwise forward is (x cos - y sin, x sin + y cos) with y down, so
    # the inverse uses the transpose
    src_x = np.floor(cos_t * dx + sin_t * dy + cx0).astype(np.int64)
    src_y = np.floor(-sin_t * dx + cos_t * dy + cy0).astype(np.int64)
    valid = (0 <= src_x) & (src_x < w) & (0 <= src_y) & (src_y < h)
    pixels = np.zeros_like(img.pixels)
    pixels[valid] = img.pixels[src_y[valid], src_x[valid]]

    labels = []
    for cid, b in sample.labels:
        corner = norm_to_corner(b, w, h)
        xs4 = np.array([corner.x_min, corner.x_max, corner.x_max, corner.x_min])
        ys4 = np.array([corner.y_min, corner.y_min, corner.y_max, corner.y_max])
        rx = cos_t * (xs4 - cx0) - sin_t * (ys4 - cy0) + cx0
        ry = sin_t * (xs4 - cx0) + cos_t * (ys4 - cy0) + cy0
        x_min = max(float(rx.min()), 0.0)
        x_max = min(float(rx.max()), float(w))
        y_min = max(float(ry.min()), 0.0)
        y_max = min(float(ry.max()), float(h))
        if x_max <= x_min or y_max <= y_min:
            continue
        clipped_area = (x_max - x_min) * (y_max - y_min)
        if clipped_area < min_visible * corner.area:
            continue
        labels.append((cid, corner_to_norm(
            BoxCorner(x_min, y_min, x_max, y_max), w, h)))
    return LabeledImage(Image(pixels), tuple(labels), sample.source_path)


def _angle_tag(angle: float) -> str:
    return f"{angle:g}"


def iter_expanded(samples: Iterable[LabeledImage], rotations: Sequence[float],
                  flips: Sequence[str]) -> Iterator[LabeledImage]:
    """Lazily yield every (rotation x flip-state) variant of every sample.

    Flip states are identity plus each requested axis; an empty rotation
    list behaves as a single 0-degree rotation (flips-only expansion).
    Variant names follow `<stem>_r<deg>_f<axis>`.
    """
    angles = list(rotations) or [0.0]
    flip_states: list[str | None] = [None] + list(flips)
    for sample in samples:
        ext = os.path.splitext(sample.source_path)[1] or ".ppm"
        for angle in angles:
            rotated = rotate(sample, angle)
            for state in flip_states:
                variant = rotated if state is None else flip(rotated, state)
                tag = "none" if state is None else state[0]
                name = f"{sample.stem}_r{_angle_tag(angle)}_f{tag}{ext}"
                yield LabeledImage(variant.image, variant.labels, name)


def expand_dataset(samples: Sequence[LabeledImage], rotations: Sequence[float],
                   flips: Sequence[str]) -> list[LabeledImage]:
    """Materialized iter_expanded."""
    return list(iter_expanded(samples, rotations, flips))


@dataclass(frozen=True)
class ExpansionReport:
    """Per-class image counts of a dataset and which classes miss a floor."""

    per_class: dict
    floor: int
    below_floor: tuple


def expansion_report(samples: Iterable[LabeledImage], registry,
                     floor: int = 300) -> ExpansionReport:
    """Count images containing each class; flag classes under the floor."""
    counts = {name: 0 for name in registry}
    for sample in samples:
        present = {cid for cid, _ in sample.labels}
        for cid in present:
            counts[registry[cid]] += 1
    below = tuple(name for name in registry if counts[name] < floor)
    return ExpansionReport(counts, floor, below)


# ---------------------------------------------------------------------------
# Synthetic scenes

# 13 visually distinct colors, one per class_id
PALETTE = (
    (230, 40, 40), (40, 200, 60), (60, 90, 230), (240, 200, 40),
    (200, 60, 220), (40, 210, 210), (240, 130, 40), (130, 220, 60),
    (90, 60, 200), (220, 80, 140), (100, 180, 120), (180, 160, 90),
    (150, 150, 230),
)

SHAPE_KINDS = ("block", "disc", "wedge", "diamond", "ring", "cross")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask of one parametric shape."""
    ii, jj = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = (size - 1) / 2.0
    if kind == "block":
        return np.ones((size, size), dtype=bool)
    if kind == "disc":
        return (ii - c) ** 2 + (jj - c) ** 2 <= r * r
    if kind == "wedge":
        return jj <= ii
    if kind == "diamond":
        return np.abs(ii - c) + np.abs(jj - c) <= r
    if kind == "ring":
        d2 = (ii - c) ** 2 + (jj - c) ** 2
        return (d2 <= r * r) & (d2 >= (r / 2.0) ** 2)
    if kind == "cross":
        arm = max(1.0, r / 3.0)
        return (np.abs(ii - c) <= arm) | (np.abs(jj - c) <= arm)
    raise ValueError(f"unknown shape kind {kind!r}")


def class_shape(class_id: int) -> tuple[str, tuple[int, int, int]]:
    """Deterministic (shape kind, color) for a class id."""
    return (SHAPE_KINDS[class_id % len(SHAPE_KINDS)],
            PALETTE[class_id % len(PALETTE)])


def _quantize(value: float) -> float:
    """Snap to the 1/COORD_GRID coordinate lattice (exact: the grid step is
    a power of two)."""
    return round(value * COORD_GRID) / COORD_GRID


def _box_gap(a: tuple, b: tuple) -> float:
    """Largest axis separation between two pixel boxes; negative when the
    boxes overlap on both axes."""
    gap_x = max(a[0] - b[2], b[0] - a[2])
    gap_y = max(a[1] - b[3], b[1] - a[3])
    return max(gap_x, gap_y)


def generate_synthetic_scene(seed: int, registry, count_range=(3, 8),
                             min_gap: float = 4.0, *, canvas: int = 608,
                             margin: int = 10,
                             class_pool=None) -> LabeledImage:
    """Render a deterministic scene of parametric shapes with exact labels.

    Each shape's ground-truth box is the tight box of its own rendered
    pixel mask. Classes are assigned round-robin from `class_pool`
    (default: the whole registry), so scenes with count <= pool size get
    all-distinct classes. `min_gap` is the minimum box separation in
    pixels; negative values allow overlap. Raises PlacementError when a
    shape cannot be placed after bounded retries.
    """
    rng = np.random.default_rng(seed)
    lo, hi = count_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad count_range {count_range}")
    count = int(rng.integers(lo, hi + 1))
    pool = list(class_pool) if class_pool is not None else list(range(len(registry)))
    start = int(rng.integers(0, len(pool)))
    class_ids = [pool[(start + i) % len(pool)] for i in range(count)]

    pixels = np.zeros((canvas, canvas, 3), dtype=np.uint8)
    placed: list[tuple] = []
    labels: list[tuple[int, BoxNorm]] = []
    for class_id in class_ids:
        kind, color = class_shape(class_id)
        ok = False
        for _ in range(200):
            size = int(rng.integers(24, 81))
            limit = canvas - margin - size
            if limit <= margin:
                continue
            x0 = int(rng.integers(margin, limit + 1))
            y0 = int(rng.integers(margin, limit + 1))
            mask = _shape_mask(kind, size)
            rows_any = np.nonzero(mask.any(axis=1))[0]
            cols_any = np.nonzero(mask.any(axis=0))[0]
            box = (x0 + float(cols_any[0]), y0 + float(rows_any[0]),
                   x0 + float(cols_any[-1] + 1), y0 + float(rows_any[-1] + 1))
            if all(_box_gap(box, other) >= min_gap for other in placed):
                ok = True
                break
        if not ok:
            raise PlacementError(
                f"could not place shape {len(placed) + 1}/{count} "
                f"after 200 attempts (min_gap={min_gap})")
        pixels[y0:y0 + size, x0:x0 + size][mask] = color
        placed.append(box)
        norm = corner_to_norm(BoxCorner(*box), canvas, canvas)
        labels.append((class_id, BoxNorm(
            _quantize(norm.cx), _quantize(norm.cy),
            _quantize(norm.w), _quantize(norm.h))))
    return LabeledImage(Image(pixels), tuple(labels),
                        f"scene_{seed:06d}.ppm")

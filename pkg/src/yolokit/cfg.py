"""Parser and analyzer for darknet `.cfg` network descriptions.

The format is INI-like: `[section]` headers, `key=value` lines, `#` or `;`
comments, blank lines ignored. Section order is the layer order; `[net]`
must come first and exactly once. Layer indices in `route`/`shortcut`
references follow the darknet convention: the first layer after `[net]` is
index 0, and negative values are relative to the referencing layer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

KNOWN_KINDS = ("net", "convolutional", "shortcut", "route", "maxpool",
               "upsample", "yolo")

_HEADER_RE = re.compile(r"^\[([^\[\]]+)\]$")


class CfgError(ValueError):
    """Malformed cfg text or unresolvable network graph."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LayerSpec:
    """One cfg section: its kind, attribute map and 1-based source line."""

    kind: str
    attributes: Mapping
    source_line: int


class NetGraph:
    """Ordered layer list plus (once propagated) per-layer output shapes.

    `layers[0]` is always the net section; `shapes` aligns with `layers`
    and holds (height, width, channels) tuples, or None before shape
    propagation.
    """

    __slots__ = ("layers", "shapes")

    def __init__(self, layers: Sequence[LayerSpec], shapes=None):
        self.layers = tuple(layers)
        self.shapes = tuple(shapes) if shapes is not None else None

    @property
    def input(self) -> tuple[int, int, int]:
        net = self.layers[0].attributes
        return (int(net.get("height", 0)), int(net.get("width", 0)),
                int(net.get("channels", 3)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetGraph):
            return NotImplemented
        return (self.layers == other.layers and self.shapes == other.shapes)

    def __repr__(self) -> str:
        return f"NetGraph({len(self.layers)} sections)"


def _parse_value(text: str):
    """Attribute value: integer, real, comma list of numbers, else string."""
    if "," in text:
        return tuple(_parse_value(part.strip()) for part in text.split(","))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_cfg(text: str) -> NetGraph:
    """Parse cfg text into an ordered NetGraph (shapes unresolved).

    Unknown section names are kept as-is so real published files parse.
    Raises CfgError with a line number for grammar violations: a key=value
    line before any header, a line with no `=`, or a duplicate key within
    one section. The net section must exist, be unique and come first.
    """
    layers: list[LayerSpec] = []
    current: dict | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        header = _HEADER_RE.match(line)
        if header:
            name = header.group(1).strip().lower()
            current = {}
            layers.append(LayerSpec(name, current, lineno))
            continue
        if current is None:
            raise CfgError(f"key=value before any [section]: {line!r}", lineno)
        if "=" not in line:
            raise CfgError(f"expected key=value, got {line!r}", lineno)
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key in current:
            raise CfgError(f"duplicate key {key!r} in [{layers[-1].kind}]", lineno)
        current[key] = _parse_value(value.strip())

    if not layers or layers[0].kind != "net":
        raise CfgError("missing [net] section (must be first)")
    for spec in layers[1:]:
        if spec.kind == "net":
            raise CfgError("[net] declared more than once", spec.source_line)
    return NetGraph(layers)


def serialize_cfg(graph: NetGraph) -> str:
    """Canonical text form: sections in order, keys in stored order."""
    chunks = []
    for spec in graph.layers:
        lines = [f"[{spec.kind}]"]
        lines.extend(f"{k}={_format_value(v)}" for k, v in spec.attributes.items())
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def _as_int(attrs: Mapping, key: str, default: int | None, spec: LayerSpec) -> int:
    if key not in attrs:
        if default is None:
            raise CfgError(f"[{spec.kind}] missing required key {key!r}",
                           spec.source_line)
        return default
    value = attrs[key]
    if not isinstance(value, int):
        raise CfgError(f"[{spec.kind}] key {key!r} must be an integer, got {value!r}",
                       spec.source_line)
    return value


def _window_out(size: int, kernel: int, stride: int, total_pad: int,
                spec: LayerSpec, axis: str) -> int:
    out = (size + total_pad - kernel) // stride + 1
    if out < 1:
        raise CfgError(
            f"[{spec.kind}] {axis} collapses: ({size} + {total_pad} - {kernel})"
            f"//{stride} + 1 = {out}", spec.source_line)
    return out


def _resolve_ref(ref: int, own_index: int, n_layers: int, spec: LayerSpec) -> int:
    """Darknet layer reference to absolute darknet index (earlier only)."""
    target = own_index + ref if ref < 0 else ref
    if not (0 <= target < own_index):
        raise CfgError(
            f"[{spec.kind}] reference {ref} resolves to layer {target}, "
            f"which is not an earlier layer (own index {own_index})",
            spec.source_line)
    return target


def propagate_shapes(graph: NetGraph) -> NetGraph:
    """Resolve every layer's output (height, width, channels).

    Fails fast (CfgError with the layer's source line) on the first layer
    whose shape cannot be determined. Unknown layer kinds pass their input
    shape through unchanged. Idempotent.
    """
    net = graph.layers[0]
    width = _as_int(net.attributes, "width", None, net)
    height = _as_int(net.attributes, "height", None, net)
    channels = _as_int(net.attributes, "channels", 3, net)
    if width % 32 != 0 or height % 32 != 0:
        raise CfgError(
            f"input {width}x{height} is not a multiple of 32", net.source_line)

    shapes: list[tuple[int, int, int]] = [(height, width, channels)]
    for list_idx in range(1, len(graph.layers)):
        spec = graph.layers[list_idx]
        attrs = spec.attributes
        own = list_idx - 1  # darknet layer index
        prev = shapes[list_idx - 1]
        h, w, c = prev

        if spec.kind == "convolutional":
            filters = _as_int(attrs, "filters", None, spec)
            size = _as_int(attrs, "size", 1, spec)
            stride = _as_int(attrs, "stride", 1, spec)
            if _as_int(attrs, "pad", 0, spec):
                pad = size // 2
            else:
                pad = _as_int(attrs, "padding", 0, spec)
            out = (_window_out(h, size, stride, 2 * pad, spec, "height"),
                   _window_out(w, size, stride, 2 * pad, spec, "width"),
                   filters)
        elif spec.kind == "maxpool":
            # darknet defaults: stride 1, size = stride, padding = size - 1
            # (total padding, not per side)
            stride = _as_int(attrs, "stride", 1, spec)
            size = _as_int(attrs, "size", stride, spec)
            padding = _as_int(attrs, "padding", size - 1, spec)
            out = (_window_out(h, size, stride, padding, spec, "height"),
                   _window_out(w, size, stride, padding, spec, "width"),
                   c)
        elif spec.kind == "route":
            refs = attrs.get("layers")
            if refs is None:
                raise CfgError("[route] missing 'layers'", spec.source_line)
            if isinstance(refs, int):
                refs = (refs,)
            targets = [_resolve_ref(r, own, len(shapes), spec) for r in refs]
            parts = [shapes[t + 1] for t in targets]
            rh, rw = parts[0][0], parts[0][1]
            for t, part in zip(targets, parts):
                if (part[0], part[1]) != (rh, rw):
                    raise CfgError(
                        f"[route] spatial mismatch: layer {targets[0]} is "
                        f"{rh}x{rw} but layer {t} is {part[0]}x{part[1]}",
                        spec.source_line)
            total_c = sum(part[2] for part in parts)
            groups = _as_int(attrs, "groups", 1, spec)
            if groups > 1:
                if total_c % groups:
                    raise CfgError(
                        f"[route] channels {total_c} not divisible by groups {groups}",
                        spec.source_line)
                total_c //= groups
            out = (rh, rw, total_c)
        elif spec.kind == "shortcut":
            ref = attrs.get("from")
            if not isinstance(ref, int):
                raise CfgError("[shortcut] missing integer 'from'", spec.source_line)
            target = _resolve_ref(ref, own, len(shapes), spec)
            other = shapes[target + 1]
            if other != prev:
                raise CfgError(
                    f"[shortcut] shape mismatch: previous layer is {prev}, "
                    f"layer {target} is {other}", spec.source_line)
            out = prev
        elif spec.kind == "upsample":
            stride = _as_int(attrs, "stride", 2, spec)
            out = (h * stride, w * stride, c)
        elif spec.kind == "yolo":
            out = prev
        else:
            # unknown kinds (e.g. [sam]) pass the shape through
            out = prev
        shapes.append(out)
    return NetGraph(graph.layers, shapes)


@dataclass(frozen=True)
class LayerStat:
    """Census row for one layer (darknet index, net excluded)."""

    index: int
    kind: str
    out_shape: tuple[int, int, int]
    neurons: int
    params: int


@dataclass(frozen=True)
class NetCensus:
    """Aggregate network statistics derived from a shape-resolved graph."""

    conv_layer_count: int
    total_parameters: int
    input_neurons: int
    hidden_neurons: int
    per_layer: tuple


def census(graph: NetGraph) -> NetCensus:
    """Count layers, parameters and neurons.

    Conv parameters: filters*in_channels*k*k weights + filters biases,
    plus 3 per filter (scale, rolling mean, rolling variance) when
    batch_normalize=1. Neurons per conv layer: out_h * out_w * filters.
    """
    if graph.shapes is None:
        graph = propagate_shapes(graph)
    in_h, in_w, in_c = graph.shapes[0]
    rows: list[LayerStat] = []
    conv_count = 0
    total_params = 0
    hidden = 0
    for list_idx in range(1, len(graph.layers)):
        spec = graph.layers[list_idx]
        out = graph.shapes[list_idx]
        params = 0
        neurons = out[0] * out[1] * out[2]
        if spec.kind == "convolutional":
            conv_count += 1
            hidden += neurons
            filters = int(spec.attributes["filters"])
            size = int(spec.attributes.get("size", 1))
            prev_c = graph.shapes[list_idx - 1][2]
            params = filters * prev_c * size * size + filters
            if spec.attributes.get("batch_normalize", 0) == 1:
                params += 3 * filters
        total_params += params
        rows.append(LayerStat(list_idx - 1, spec.kind, out, neurons, params))
    return NetCensus(
        conv_layer_count=conv_count,
        total_parameters=total_params,
        input_neurons=in_h * in_w * in_c,
        hidden_neurons=hidden,
        per_layer=tuple(rows),
    )


def head_channels(num_classes: int) -> int:
    """Channels of one detection head: 3 anchor slots x (4 box terms +
    1 objectness + num_classes)."""
    if num_classes < 1:
        raise ValueError(f"need at least one class, got {num_classes}")
    return 3 * (4 + 1 + num_classes)


def grid_sizes(input_n: int) -> tuple[int, int, int]:
    """The three detection grid edge lengths (strides 8, 16, 32)."""
    if input_n <= 0 or input_n % 32 != 0:
        raise ValueError(f"input {input_n} is not a positive multiple of 32")
    return input_n // 8, input_n // 16, input_n // 32


def total_grid_cells(input_n: int) -> int:
    """Total grid cells across the three scales: (N/8)^2+(N/16)^2+(N/32)^2."""
    return sum(n * n for n in grid_sizes(input_n))

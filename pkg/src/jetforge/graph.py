"""Network graph IR: typed layer nodes, shape inference, validation and the
serialized model container every other stage exchanges.

Layout is N,C,H,W row-major with batch fixed to 1. Graphs are treated as
immutable after construction: rewrite passes copy, never mutate in place.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FORMAT_MAGIC = b"UIR1"
FORMAT_VERSION = 1

# node kinds
CONV = "conv"
BATCHNORM = "batchnorm"
ACTIVATION = "activation"
SCALE = "scale"
UPSAMPLE = "upsample"
ADD = "add"
CONCAT = "concat"
MAXPOOL = "maxpool"
YOLO_HEAD = "yolo_head"

KINDS = {CONV, BATCHNORM, ACTIVATION, SCALE, UPSAMPLE, ADD, CONCAT, MAXPOOL, YOLO_HEAD}

# activation functions (also valid as a conv node's inline `act` attribute)
LINEAR = "linear"
RELU = "relu"
LEAKY = "leaky"

QUANTIZABLE = "quantizable"
PLUGIN_ONLY = "plugin_only"

# weight roles, in on-disk blob order per kind
WEIGHT_ROLES = {
    CONV: ("kernel", "bias"),
    BATCHNORM: ("bn_gamma", "bn_beta", "bn_mean", "bn_var"),
    SCALE: ("scale_factors",),
}


class GraphError(Exception):
    pass


class ShapeMismatch(GraphError):
    pass


class UnderflowShape(GraphError):
    pass


class BadMagic(GraphError):
    pass


class VersionUnsupported(GraphError):
    pass


class TruncatedFile(GraphError):
    pass


class ManifestWeightMismatch(GraphError):
    pass


class TensorShape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


@dataclass(frozen=True)
class QuantParams:
    """Affine per-tensor activation range: lo maps to -128, hi to 127."""

    lo: float
    hi: float
    scale: float
    zero_point: int

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        if not lo < hi:
            raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
        scale = (hi - lo) / 255.0
        zero_point = int(-128 - _round_half_up(lo / scale))
        return cls(lo=float(lo), hi=float(hi), scale=scale, zero_point=zero_point)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = _round_half_up(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, -128, 127).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return ((q.astype(np.float64) - self.zero_point) * self.scale).astype(np.float32)


def _round_half_up(x):
    # deterministic scalar/array rounding, halves toward +inf
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    output: str
    attrs: dict = field(default_factory=dict)
    precision_class: str = QUANTIZABLE

    def copy(self) -> "LayerNode":
        return LayerNode(
            id=self.id,
            kind=self.kind,
            inputs=list(self.inputs),
            output=self.output,
            attrs=dict(self.attrs),
            precision_class=self.precision_class,
        )


def conv_node(nid, inputs, output, out_ch, kernel, stride, pad, has_bias, act=LINEAR, alpha=None):
    attrs = {"out_ch": out_ch, "kernel": kernel, "stride": stride, "pad": pad,
             "has_bias": has_bias, "act": act}
    if alpha is not None:
        attrs["alpha"] = alpha
    return LayerNode(nid, CONV, list(inputs), output, attrs)


def activation_node(nid, inputs, output, act, alpha=None):
    attrs = {"act": act}
    if alpha is not None:
        attrs["alpha"] = alpha
    return LayerNode(nid, ACTIVATION, list(inputs), output, attrs)


@dataclass
class GraphMetadata:
    class_names: list[str] = field(default_factory=list)
    anchors: list[tuple[float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class Graph:
    """Directed acyclic network plus its weights.

    `weights` maps (layer id, role) -> flat float32 array. `qparams`, when
    present, carries per-tensor activation ranges produced by calibration.
    """

    nodes: list[LayerNode]
    input_id: str | None = "input"
    input_shape: TensorShape | None = None
    weights: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    metadata: GraphMetadata = field(default_factory=GraphMetadata)
    qparams: dict[str, QuantParams] | None = None

    def node_by_id(self, nid: str) -> LayerNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def producers(self) -> dict[str, LayerNode]:
        return {n.output: n for n in self.nodes}

    def consumers(self) -> dict[str, list[LayerNode]]:
        out: dict[str, list[LayerNode]] = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def copy(self) -> "Graph":
        return Graph(
            nodes=[n.copy() for n in self.nodes],
            input_id=self.input_id,
            input_shape=self.input_shape,
            weights={k: v.copy() for k, v in self.weights.items()},
            metadata=GraphMetadata(
                class_names=list(self.metadata.class_names),
                anchors=[tuple(a) for a in self.metadata.anchors],
                extra=dict(self.metadata.extra),
            ),
            qparams=dict(self.qparams) if self.qparams is not None else None,
        )

    def head_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == YOLO_HEAD]

    def output_tensors(self) -> list[str]:
        """Head outputs if any, otherwise tensors nothing consumes."""
        heads = [n.output for n in self.head_nodes()]
        if heads:
            return heads
        consumed = {t for n in self.nodes for t in n.inputs}
        return [n.output for n in self.nodes if n.output not in consumed]


def conv_out_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def infer_shapes(graph: Graph) -> dict[str, TensorShape]:
    """Resolve every tensor's shape; order-independent over valid topo orders."""
    if graph.input_id is None or graph.input_shape is None:
        raise ShapeMismatch("graph has no input")
    shapes: dict[str, TensorShape] = {graph.input_id: graph.input_shape}
    pending = list(graph.nodes)
    while pending:
        progressed = False
        remaining = []
        for node in pending:
            if all(t in shapes for t in node.inputs):
                shapes[node.output] = _node_output_shape(node, [shapes[t] for t in node.inputs])
                progressed = True
            else:
                remaining.append(node)
        if not progressed:
            stuck = ", ".join(n.id for n in remaining)
            raise ShapeMismatch(f"unresolvable inputs (cycle or dangling reference): {stuck}")
        pending = remaining
    return shapes


def _node_output_shape(node: LayerNode, in_shapes: list[TensorShape]) -> TensorShape:
    kind = node.kind
    s = in_shapes[0]
    if kind == CONV:
        a = node.attrs
        oh = conv_out_dim(s.h, a["kernel"], a["stride"], a["pad"])
        ow = conv_out_dim(s.w, a["kernel"], a["stride"], a["pad"])
        if oh < 1 or ow < 1:
            raise UnderflowShape(f"{node.id}: conv output {oh}x{ow} underflows")
        return TensorShape(s.n, a["out_ch"], oh, ow)
    if kind == MAXPOOL:
        a = node.attrs
        oh = (s.h - a["kernel"]) // a["stride"] + 1
        ow = (s.w - a["kernel"]) // a["stride"] + 1
        if oh < 1 or ow < 1:
            raise UnderflowShape(f"{node.id}: maxpool output {oh}x{ow} underflows")
        return TensorShape(s.n, s.c, oh, ow)
    if kind == UPSAMPLE:
        f = node.attrs["factor"]
        return TensorShape(s.n, s.c, s.h * f, s.w * f)
    if kind == ADD:
        for other in in_shapes[1:]:
            if other != s:
                raise ShapeMismatch(f"{node.id}: add inputs {s} vs {other}")
        return s
    if kind == CONCAT:
        c = s.c
        for other in in_shapes[1:]:
            if (other.n, other.h, other.w) != (s.n, s.h, s.w):
                raise ShapeMismatch(f"{node.id}: concat inputs {s} vs {other}")
            c += other.c
        return TensorShape(s.n, c, s.h, s.w)
    if kind in (BATCHNORM, ACTIVATION, SCALE, YOLO_HEAD):
        return s
    raise GraphError(f"{node.id}: unknown kind {kind}")


@dataclass(frozen=True)
class Diagnostic:
    node_id: str
    reason: str

    def __str__(self):
        return f"{self.node_id}: {self.reason}"


def validate(graph: Graph) -> list[Diagnostic]:
    """Structural + invariant checks. Empty list means the graph is sound.

    Weight-length checks only run once any weights are attached, so skeleton
    graphs straight from the cfg parser validate before loading weights.
    """
    diags: list[Diagnostic] = []
    if graph.input_id is None or graph.input_shape is None or not graph.nodes:
        diags.append(Diagnostic("<graph>", "no input"))
        return diags

    ishape = graph.input_shape
    if min(ishape) < 1:
        diags.append(Diagnostic("<graph>", f"input dims must be >= 1, got {ishape}"))
    if ishape.h % 32 or ishape.w % 32:
        diags.append(Diagnostic("<graph>", f"input h,w must be multiples of 32, got {ishape.h}x{ishape.w}"))

    seen_ids = set()
    producers: dict[str, str] = {}
    for n in graph.nodes:
        if n.id in seen_ids:
            diags.append(Diagnostic(n.id, "duplicate node id"))
        seen_ids.add(n.id)
        if n.output in producers or n.output == graph.input_id:
            diags.append(Diagnostic(n.id, f"tensor '{n.output}' produced more than once"))
        producers[n.output] = n.id
        if n.kind not in KINDS:
            diags.append(Diagnostic(n.id, f"unknown kind '{n.kind}'"))

    known = set(producers) | {graph.input_id}
    for n in graph.nodes:
        for t in n.inputs:
            if t not in known:
                diags.append(Diagnostic(n.id, f"input tensor '{t}' is never produced"))

    cycle_nodes = _unreachable_in_topo(graph)
    if cycle_nodes:
        diags.append(Diagnostic(cycle_nodes[0], "cycle involving nodes: " + ", ".join(cycle_nodes)))

    for n in graph.nodes:
        diags.extend(_check_node_attrs(n))

    if graph.weights:
        try:
            shapes = infer_shapes(graph)
        except GraphError as e:
            diags.append(Diagnostic("<graph>", f"shape inference failed: {e}"))
            return diags
        diags.extend(_check_weights(graph, shapes))
        diags.extend(_check_shape_invariants(graph, shapes))
    elif not diags:
        try:
            shapes = infer_shapes(graph)
        except GraphError as e:
            diags.append(Diagnostic("<graph>", f"shape inference failed: {e}"))
            return diags
        diags.extend(_check_shape_invariants(graph, shapes))
    return diags


def _unreachable_in_topo(graph: Graph) -> list[str]:
    resolved = {graph.input_id}
    pending = list(graph.nodes)
    while pending:
        remaining = [n for n in pending if not all(t in resolved for t in n.inputs)]
        if len(remaining) == len(pending):
            return [n.id for n in pending]
        for n in pending:
            if all(t in resolved for t in n.inputs):
                resolved.add(n.output)
        pending = remaining
    return []


def _check_node_attrs(n: LayerNode) -> list[Diagnostic]:
    out = []
    a = n.attrs
    if n.kind == CONV:
        for key in ("out_ch", "kernel", "stride"):
            if a.get(key, 0) < 1:
                out.append(Diagnostic(n.id, f"conv {key} must be >= 1"))
        if a.get("pad", 0) < 0:
            out.append(Diagnostic(n.id, "conv pad must be >= 0"))
        if a.get("act") == LEAKY and not (0.0 < a.get("alpha", 0.0) < 1.0):
            out.append(Diagnostic(n.id, f"leaky alpha must be in (0,1), got {a.get('alpha')}"))
    elif n.kind == ACTIVATION:
        if a.get("act") not in (LINEAR, RELU, LEAKY):
            out.append(Diagnostic(n.id, f"unknown activation '{a.get('act')}'"))
        if a.get("act") == LEAKY and not (0.0 < a.get("alpha", 0.0) < 1.0):
            out.append(Diagnostic(n.id, f"leaky alpha must be in (0,1), got {a.get('alpha')}"))
    elif n.kind == UPSAMPLE:
        if int(a.get("factor", 0)) < 2:
            out.append(Diagnostic(n.id, f"upsample factor must be an integer >= 2, got {a.get('factor')}"))
    elif n.kind == MAXPOOL:
        if a.get("kernel", 0) < 1 or a.get("stride", 0) < 1:
            out.append(Diagnostic(n.id, "maxpool kernel and stride must be >= 1"))
    elif n.kind == YOLO_HEAD:
        if not a.get("anchor_indices"):
            out.append(Diagnostic(n.id, "yolo head needs at least one anchor index"))
        if a.get("num_classes", 0) < 1:
            out.append(Diagnostic(n.id, "yolo head needs num_classes >= 1"))
    elif n.kind == SCALE:
        if a.get("factor") is None and "factor" in a:
            pass  # per-channel factors live in the weight store
    if n.kind in (ADD, CONCAT) and len(n.inputs) < 2:
        out.append(Diagnostic(n.id, f"{n.kind} needs at least two inputs"))
    return out


def _check_shape_invariants(graph: Graph, shapes: dict[str, TensorShape]) -> list[Diagnostic]:
    out = []
    for n in graph.nodes:
        if n.kind == YOLO_HEAD:
            c = shapes[n.inputs[0]].c
            want = len(n.attrs["anchor_indices"]) * (5 + n.attrs["num_classes"])
            if c != want:
                out.append(Diagnostic(
                    n.id, f"head input has {c} channels, expected {want} "
                          f"({len(n.attrs['anchor_indices'])} anchors x (5+{n.attrs['num_classes']}))"))
    return out


def _expected_weight_lens(node: LayerNode, in_c: int) -> dict[str, int]:
    a = node.attrs
    if node.kind == CONV:
        lens = {"kernel": a["out_ch"] * in_c * a["kernel"] * a["kernel"]}
        if a["has_bias"]:
            lens["bias"] = a["out_ch"]
        return lens
    if node.kind == BATCHNORM:
        return {r: in_c for r in WEIGHT_ROLES[BATCHNORM]}
    if node.kind == SCALE and node.attrs.get("factor") is None:
        return {"scale_factors": in_c}
    return {}


def _check_weights(graph: Graph, shapes: dict[str, TensorShape]) -> list[Diagnostic]:
    out = []
    for n in graph.nodes:
        in_c = shapes[n.inputs[0]].c if n.inputs else 0
        for role, want in _expected_weight_lens(n, in_c).items():
            arr = graph.weights.get((n.id, role))
            if arr is None:
                out.append(Diagnostic(n.id, f"missing weights for role '{role}'"))
            elif arr.size != want:
                out.append(Diagnostic(n.id, f"role '{role}' has {arr.size} values, expected {want}"))
        if n.kind == BATCHNORM:
            var = graph.weights.get((n.id, "bn_var"))
            if var is not None and np.any(var < 0):
                out.append(Diagnostic(n.id, "bn_var has negative entries"))
    return out


# --------------------------------------------------------------------------
# container serialization
# --------------------------------------------------------------------------

def _node_to_json(n: LayerNode) -> dict:
    return {"id": n.id, "kind": n.kind, "inputs": n.inputs, "output": n.output,
            "attrs": n.attrs, "precision_class": n.precision_class}


def _node_from_json(d: dict) -> LayerNode:
    return LayerNode(id=d["id"], kind=d["kind"], inputs=list(d["inputs"]),
                     output=d["output"], attrs=dict(d["attrs"]),
                     precision_class=d.get("precision_class", QUANTIZABLE))


def graph_manifest(graph: Graph, tool_meta: dict | None = None) -> dict:
    weights_index = []
    for n in graph.nodes:
        for role in WEIGHT_ROLES.get(n.kind, ()):
            if (n.id, role) in graph.weights:
                weights_index.append({"layer": n.id, "role": role,
                                      "len": int(graph.weights[(n.id, role)].size)})
    manifest = {
        "input": {"id": graph.input_id, "shape": list(graph.input_shape)},
        "metadata": {
            "class_names": graph.metadata.class_names,
            "anchors": [list(a) for a in graph.metadata.anchors],
            "extra": graph.metadata.extra,
        },
        "nodes": [_node_to_json(n) for n in graph.nodes],
        "qparams": None if graph.qparams is None else {
            t: {"lo": q.lo, "hi": q.hi, "scale": q.scale, "zero_point": q.zero_point}
            for t, q in graph.qparams.items()
        },
        "weights": weights_index,
        "tool": tool_meta or {},
    }
    return manifest


def save_container(graph: Graph, path, tool_meta: dict | None = None) -> None:
    diags = validate(graph)
    if diags:
        raise GraphError("refusing to save invalid graph: " + "; ".join(map(str, diags)))
    manifest = graph_manifest(graph, tool_meta)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FORMAT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in manifest["weights"]:
            arr = graph.weights[(entry["layer"], entry["role"])]
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_container(path) -> Graph:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise TruncatedFile(f"{path}: only {len(data)} bytes")
    if data[:4] != FORMAT_MAGIC:
        raise BadMagic(f"{path}: magic {data[:4]!r}, expected {FORMAT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: format version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + mlen:
        raise TruncatedFile(f"{path}: manifest declares {mlen} bytes, file holds {len(data) - 16}")
    manifest = json.loads(data[16:16 + mlen].decode("utf-8"))

    blob = data[16 + mlen:]
    want_floats = sum(e["len"] for e in manifest["weights"])
    if len(blob) != want_floats * 4:
        raise ManifestWeightMismatch(
            f"{path}: manifest declares {want_floats} floats, blob holds {len(blob) // 4}")
    weights: dict[tuple[str, str], np.ndarray] = {}
    offset = 0
    for e in manifest["weights"]:
        n = e["len"]
        weights[(e["layer"], e["role"])] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=offset).astype(np.float32)
        offset += n * 4

    meta = manifest["metadata"]
    qp = manifest.get("qparams")
    return Graph(
        nodes=[_node_from_json(d) for d in manifest["nodes"]],
        input_id=manifest["input"]["id"],
        input_shape=TensorShape(*manifest["input"]["shape"]),
        weights=weights,
        metadata=GraphMetadata(
            class_names=list(meta["class_names"]),
            anchors=[tuple(a) for a in meta["anchors"]],
            extra=dict(meta.get("extra", {})),
        ),
        qparams=None if qp is None else {
            t: QuantParams(lo=d["lo"], hi=d["hi"], scale=d["scale"], zero_point=d["zero_point"])
            for t, d in qp.items()
        },
    )

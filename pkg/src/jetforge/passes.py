"""Graph rewrite passes: conv+batchnorm folding (with native activation
inlining), leaky-ReLU decomposition into natively quantizable layers,
scale-into-conv folding, leaky->ReLU swapping, and precision planning.

All passes are pure: they copy the graph, never mutate the input, and leave
non-matching patterns untouched. Applying any pass twice equals applying it
once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import frontend
from .graph import (ACTIVATION, ADD, BATCHNORM, CONV, LEAKY, LINEAR, PLUGIN_ONLY,
                    RELU, SCALE, Graph, LayerNode, activation_node)

F32 = "f32"
F16 = "f16"
I8 = "i8"

LEAKY_AS_PLUGIN = "leaky_as_plugin"
LEAKY_NATIVE = "leaky_native"


class PassError(Exception):
    pass


class AlphaOutOfRange(PassError):
    pass


@dataclass
class PassReport:
    name: str
    nodes_before: int
    nodes_after: int
    removed: list[str] = field(default_factory=list)
    created: list[str] = field(default_factory=list)
    mac_delta: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _total_macs(graph: Graph) -> int:
    return frontend.model_stats(graph).total_macs


def _rewire(nodes: list[LayerNode], old_tensor: str, new_tensor: str) -> None:
    for n in nodes:
        n.inputs = [new_tensor if t == old_tensor else t for t in n.inputs]


def _consumer_count(nodes: list[LayerNode], tensor: str) -> int:
    return sum(t == tensor for n in nodes for t in n.inputs)


def fuse_conv_bn(graph: Graph) -> tuple[Graph, PassReport]:
    """Fold batchnorm into the preceding convolution and inline native
    activations (relu/linear) that directly follow a conv.

    kernel' = kernel * gamma / sqrt(var + eps) per output channel,
    bias'   = (bias - mean) * gamma / sqrt(var + eps) + beta.

    Leaky activations are left standing: they model plugin layers, which
    do not fuse. Only sole-consumer patterns are touched.
    """
    out = graph.copy()
    report = PassReport("fuse-conv-bn", nodes_before=len(graph.nodes), nodes_after=0)
    macs_before = _total_macs(graph)

    # conv + batchnorm
    changed = True
    while changed:
        changed = False
        producers = {n.output: n for n in out.nodes}
        for bn in list(out.nodes):
            if bn.kind != BATCHNORM:
                continue
            conv = producers.get(bn.inputs[0])
            if conv is None or conv.kind != CONV or conv.attrs.get("act", LINEAR) != LINEAR:
                continue
            if _consumer_count(out.nodes, conv.output) != 1:
                continue
            gamma = out.weights[(bn.id, "bn_gamma")].astype(np.float64)
            beta = out.weights[(bn.id, "bn_beta")].astype(np.float64)
            mean = out.weights[(bn.id, "bn_mean")].astype(np.float64)
            var = out.weights[(bn.id, "bn_var")].astype(np.float64)
            inv = gamma / np.sqrt(var + bn.attrs["eps"])

            kernel = out.weights[(conv.id, "kernel")].astype(np.float64)
            oc = conv.attrs["out_ch"]
            kernel = (kernel.reshape(oc, -1) * inv[:, None]).reshape(-1)
            bias = out.weights.get((conv.id, "bias"))
            bias = bias.astype(np.float64) if bias is not None else np.zeros(oc)
            bias = (bias - mean) * inv + beta

            out.weights[(conv.id, "kernel")] = kernel.astype(np.float32)
            out.weights[(conv.id, "bias")] = bias.astype(np.float32)
            conv.attrs["has_bias"] = True
            for role in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
                out.weights.pop((bn.id, role), None)
            out.nodes.remove(bn)
            _rewire(out.nodes, bn.output, conv.output)
            report.removed.append(bn.id)
            changed = True
            break

    # conv + native activation
    changed = True
    while changed:
        changed = False
        producers = {n.output: n for n in out.nodes}
        for act in list(out.nodes):
            if act.kind != ACTIVATION or act.attrs["act"] not in (RELU, LINEAR):
                continue
            conv = producers.get(act.inputs[0])
            if conv is None or conv.kind != CONV or conv.attrs.get("act", LINEAR) != LINEAR:
                continue
            if _consumer_count(out.nodes, conv.output) != 1:
                continue
            conv.attrs["act"] = act.attrs["act"]
            out.nodes.remove(act)
            _rewire(out.nodes, act.output, conv.output)
            report.removed.append(act.id)
            changed = True
            break

    report.nodes_after = len(out.nodes)
    report.mac_delta = _total_macs(out) - macs_before
    return out, report


def decompose_leaky(graph: Graph) -> tuple[Graph, PassReport]:
    """Replace every leaky activation with natively quantizable layers:

        s = alpha * x;  y = s + ((1 - alpha) / alpha) * relu(s)

    The first scale is the conv's sole consumer afterwards (both branches
    read the scale's output), which is what lets fold_scale_into_conv absorb
    it, mirroring a fused engine's treatment of the leading scale.
    """
    out = graph.copy()
    report = PassReport("decompose-leaky", nodes_before=len(graph.nodes), nodes_after=0)
    macs_before = _total_macs(graph)

    new_nodes: list[LayerNode] = []
    for node in out.nodes:
        if node.kind != ACTIVATION or node.attrs["act"] != LEAKY:
            new_nodes.append(node)
            continue
        alpha = node.attrs["alpha"]
        if not 0.0 < alpha < 1.0:
            raise AlphaOutOfRange(f"{node.id}: alpha {alpha} not in (0,1)")
        s_id, r_id, e_id = f"{node.id}_s", f"{node.id}_r", f"{node.id}_e"
        scale1 = LayerNode(s_id, SCALE, [node.inputs[0]], s_id, {"factor": alpha})
        relu = activation_node(r_id, [s_id], r_id, RELU)
        scale2 = LayerNode(e_id, SCALE, [r_id], e_id, {"factor": (1.0 - alpha) / alpha})
        add = LayerNode(f"{node.id}_y", ADD, [s_id, e_id], node.output)
        new_nodes.extend([scale1, relu, scale2, add])
        report.removed.append(node.id)
        report.created.extend([scale1.id, relu.id, scale2.id, add.id])

    out.nodes = new_nodes
    report.nodes_after = len(out.nodes)
    report.mac_delta = _total_macs(out) - macs_before
    return out, report


def fold_scale_into_conv(graph: Graph) -> tuple[Graph, PassReport]:
    """Multiply a scale layer into the preceding convolution's kernel and
    bias when the scale is that conv's only consumer and the conv has no
    inline activation (scaling does not commute with one in general)."""
    out = graph.copy()
    report = PassReport("fold-scale", nodes_before=len(graph.nodes), nodes_after=0)
    macs_before = _total_macs(graph)

    changed = True
    while changed:
        changed = False
        producers = {n.output: n for n in out.nodes}
        for scale in list(out.nodes):
            if scale.kind != SCALE:
                continue
            conv = producers.get(scale.inputs[0])
            if conv is None or conv.kind != CONV or conv.attrs.get("act", LINEAR) != LINEAR:
                continue
            if _consumer_count(out.nodes, conv.output) != 1:
                continue
            oc = conv.attrs["out_ch"]
            factor = scale.attrs.get("factor")
            if factor is not None:
                per_ch = np.full(oc, factor, dtype=np.float64)
            else:
                per_ch = out.weights[(scale.id, "scale_factors")].astype(np.float64)
            kernel = out.weights[(conv.id, "kernel")].astype(np.float64)
            kernel = (kernel.reshape(oc, -1) * per_ch[:, None]).reshape(-1)
            out.weights[(conv.id, "kernel")] = kernel.astype(np.float32)
            if conv.attrs["has_bias"]:
                bias = out.weights[(conv.id, "bias")].astype(np.float64)
                out.weights[(conv.id, "bias")] = (bias * per_ch).astype(np.float32)
            out.weights.pop((scale.id, "scale_factors"), None)
            out.nodes.remove(scale)
            _rewire(out.nodes, scale.output, conv.output)
            report.removed.append(scale.id)
            changed = True
            break

    report.nodes_after = len(out.nodes)
    report.mac_delta = _total_macs(out) - macs_before
    return out, report


def replace_leaky_with_relu(graph: Graph) -> tuple[Graph, PassReport]:
    """Swap every leaky activation for a plain ReLU. The weights are NOT
    equivalent under this rewrite; the report carries a warning that the
    network requires retraining before its outputs mean anything."""
    out = graph.copy()
    report = PassReport("relu-swap", nodes_before=len(graph.nodes), nodes_after=len(graph.nodes))
    swapped = 0
    for node in out.nodes:
        if node.kind == ACTIVATION and node.attrs["act"] == LEAKY:
            node.attrs = {"act": RELU}
            swapped += 1
        elif node.kind == CONV and node.attrs.get("act") == LEAKY:
            node.attrs["act"] = RELU
            node.attrs.pop("alpha", None)
            swapped += 1
    if swapped:
        report.warnings.append(
            f"replaced {swapped} leaky activations with ReLU: existing weights are NOT "
            "valid for this structure without retraining; expect degraded accuracy until "
            "the model is retrained")
    return out, report


PASSES = {
    "fuse-conv-bn": fuse_conv_bn,
    "decompose-leaky": decompose_leaky,
    "fold-scale": fold_scale_into_conv,
    "relu-swap": replace_leaky_with_relu,
}


def apply_passes(graph: Graph, names: list[str]) -> tuple[Graph, list[PassReport]]:
    reports = []
    for name in names:
        if name not in PASSES:
            raise PassError(f"unknown pass '{name}' (have: {', '.join(sorted(PASSES))})")
        graph, report = PASSES[name](graph)
        reports.append(report)
    return graph, reports


# --------------------------------------------------------------------------
# precision planning
# --------------------------------------------------------------------------

@dataclass
class PrecisionPlan:
    mode: str
    plugin_policy: str
    node_precision: dict[str, str]
    conversions: list[tuple[str, str, str]]  # (tensor id, from, to)

    @property
    def conversion_count(self) -> int:
        return len(self.conversions)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "plugin_policy": self.plugin_policy,
                "node_precision": self.node_precision,
                "conversions": [list(c) for c in self.conversions]}


def _is_pinned(node: LayerNode, plugin_policy: str) -> bool:
    if node.precision_class == PLUGIN_ONLY:
        return True
    if plugin_policy == LEAKY_AS_PLUGIN:
        if node.kind == ACTIVATION and node.attrs["act"] == LEAKY:
            return True
    return False


def plan_precision(graph: Graph, mode: str, plugin_policy: str = LEAKY_NATIVE) -> PrecisionPlan:
    """Assign per-node precision and enumerate conversion points.

    Plugin-pinned nodes run in f32 regardless of mode. A conversion point is
    a tensor that must be rematerialized at a different precision: one per
    unique (tensor, target precision) pair over internal edges, so a tensor
    feeding several same-precision consumers converts once.
    """
    if mode not in (I8, F16):
        raise PassError(f"plan mode must be i8 or f16, got '{mode}'")
    if plugin_policy not in (LEAKY_AS_PLUGIN, LEAKY_NATIVE):
        raise PassError(f"unknown plugin policy '{plugin_policy}'")

    precision = {n.id: (F32 if _is_pinned(n, plugin_policy) else mode) for n in graph.nodes}
    producers = {n.output: n for n in graph.nodes}

    seen: set[tuple[str, str]] = set()
    conversions: list[tuple[str, str, str]] = []
    for node in graph.nodes:
        for t in node.inputs:
            producer = producers.get(t)
            if producer is None:
                continue  # graph input: feeding it is preprocessing, not a conversion
            src, dst = precision[producer.id], precision[node.id]
            if src != dst and (t, dst) not in seen:
                seen.add((t, dst))
                conversions.append((t, src, dst))
    return PrecisionPlan(mode=mode, plugin_policy=plugin_policy,
                         node_precision=precision, conversions=conversions)

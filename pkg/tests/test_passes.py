import numpy as np
import pytest

from jetforge import executor, fixtures, frontend, passes
from jetforge import graph as g


def random_conv_bn_net(rng, n_layers=None, channels=3, size=12):
    """Random conv(+bn)(+act) chain with occasional shortcut, plus weights."""
    n_layers = n_layers or int(rng.integers(3, 11))
    body = []
    same_shape_run = 0
    for _ in range(n_layers):
        bn = bool(rng.integers(2))
        act = rng.choice(["leaky", "relu", "linear"])
        stride = 1
        lines = ["[convolutional]"]
        if bn:
            lines.append("batch_normalize=1")
        lines += [f"filters={channels}", "size=3", f"stride={stride}", "pad=1",
                  f"activation={act}"]
        body.append("\n".join(lines))
        same_shape_run += 1
        if same_shape_run >= 2 and rng.random() < 0.3:
            body.append("[shortcut]\nfrom=-2")
    cfg = f"[net]\nwidth={size * 32}\nheight={size * 32}\nchannels={channels}\n" \
          + "\n\n".join(body) + "\n"
    gr = frontend.parse_cfg(cfg)
    gr = frontend.load_weights(fixtures.random_weights(gr, seed=int(rng.integers(1 << 30))), gr)
    # randomize bn stats away from identity; gains stay <= ~1 so values hold
    # the O(1) regime the fusion tolerances are stated for
    for node in gr.nodes:
        if node.kind == g.BATCHNORM:
            c = gr.weights[(node.id, "bn_gamma")].size
            gr.weights[(node.id, "bn_gamma")] = rng.uniform(0.5, 1.1, c).astype(np.float32)
            gr.weights[(node.id, "bn_beta")] = rng.uniform(-0.3, 0.3, c).astype(np.float32)
            gr.weights[(node.id, "bn_mean")] = rng.uniform(-0.3, 0.3, c).astype(np.float32)
            gr.weights[(node.id, "bn_var")] = rng.uniform(0.8, 2.0, c).astype(np.float32)
    return gr


def outputs_close(g1, g2, x, rtol=1e-4, atol=1e-6):
    """Head outputs of both graphs match; rewrites may rename terminal
    tensors, so outputs pair up positionally."""
    t1 = executor.execute(g1, x)
    t2 = executor.execute(g2, x)
    outs1, outs2 = g1.output_tensors(), g2.output_tensors()
    assert len(outs1) == len(outs2)
    for ta, tb in zip(outs1, outs2):
        np.testing.assert_allclose(t1.as_f32(ta), t2.as_f32(tb),
                                   rtol=rtol, atol=atol, err_msg=f"{ta} vs {tb}")


def test_fuse_identity_bn_keeps_kernel(rng):
    cfg = ("[net]\nwidth=32\nheight=32\nchannels=2\n"
           "[convolutional]\nbatch_normalize=1\nfilters=3\nsize=3\nstride=1\npad=1\n"
           "activation=leaky\n")
    gr = frontend.parse_cfg(cfg)
    gr = frontend.load_weights(fixtures.random_weights(gr, seed=5), gr)
    eps = gr.node_by_id("bn0").attrs["eps"]
    gr.weights[("bn0", "bn_var")] = np.full(3, 1.0 - eps, dtype=np.float32)
    kernel_before = gr.weights[("conv0", "kernel")].copy()
    fused, report = passes.fuse_conv_bn(gr)
    assert report.removed == ["bn0"]
    np.testing.assert_array_almost_equal_nulp(
        fused.weights[("conv0", "kernel")], kernel_before, nulp=1)
    assert np.allclose(fused.weights[("conv0", "bias")], 0.0)


def test_fuse_random_net_equivalence(rng):
    for _ in range(5):
        gr = random_conv_bn_net(rng, size=2)
        fused, _ = passes.fuse_conv_bn(gr)
        x = rng.normal(0, 0.5, size=tuple(gr.input_shape)).astype(np.float32)
        outputs_close(gr, fused, x, rtol=1e-5, atol=1e-6)


def test_fuse_yolov3_removes_72_bns(yolov3_weighted):
    fused, report = passes.fuse_conv_bn(yolov3_weighted)
    assert report.nodes_before - report.nodes_after == 72
    assert len(report.removed) == 72
    assert all(rid.startswith("bn") for rid in report.removed)
    assert report.mac_delta == 0
    assert g.validate(fused) == []


def test_decompose_scalar_semantics():
    # the emitted subgraph evaluated in float64: s = a*x; y = s + ((1-a)/a)*relu(s)
    act = g.activation_node("L", ["input"], "L", g.LEAKY, 0.1)
    gr = g.Graph(nodes=[act], input_shape=g.TensorShape(1, 1, 32, 32))
    rewritten, report = passes.decompose_leaky(gr)
    assert report.created == ["L_s", "L_r", "L_e", "L_y"]
    s_factor = rewritten.node_by_id("L_s").attrs["factor"]
    e_factor = rewritten.node_by_id("L_e").attrs["factor"]
    for x in (-2.0, 1.0, 0.0, 37.5):
        s = s_factor * x
        y = s + e_factor * max(s, 0.0)
        want = x if x >= 0 else 0.1 * x
        assert abs(y - want) < 1e-7
    assert abs(s_factor * -2.0 - (-0.2)) < 1e-12


def test_decompose_yolov3_counts(yolov3_weighted):
    rewritten, report = passes.decompose_leaky(yolov3_weighted)
    assert len(report.created) == 72 * 4 == 288
    assert len(report.removed) == 72
    assert report.nodes_after - report.nodes_before == 72 * 3
    assert g.validate(rewritten) == []


def test_decompose_alpha_out_of_range():
    act = g.activation_node("L", ["input"], "L", g.LEAKY, 0.1)
    act.attrs["alpha"] = 0.0
    gr = g.Graph(nodes=[act], input_shape=g.TensorShape(1, 1, 32, 32))
    with pytest.raises(passes.AlphaOutOfRange):
        passes.decompose_leaky(gr)


def test_fold_scale_arithmetic():
    conv = g.conv_node("c", ["input"], "c", out_ch=1, kernel=1, stride=1, pad=0,
                       has_bias=True)
    scale = g.LayerNode("s", g.SCALE, ["c"], "s", {"factor": 0.1})
    gr = g.Graph(nodes=[conv, scale], input_shape=g.TensorShape(1, 2, 32, 32))
    gr.weights[("c", "kernel")] = np.array([2.0, -4.0], dtype=np.float32)
    gr.weights[("c", "bias")] = np.array([1.0], dtype=np.float32)
    folded, report = passes.fold_scale_into_conv(gr)
    assert report.removed == ["s"]
    np.testing.assert_allclose(folded.weights[("c", "kernel")], [0.2, -0.4], atol=1e-9)
    np.testing.assert_allclose(folded.weights[("c", "bias")], [0.1], atol=1e-9)

    # scalar 1.0 leaves the kernel unchanged
    gr.weights[("c", "kernel")] = np.array([2.0, -4.0], dtype=np.float32)
    scale.attrs["factor"] = 1.0
    folded, _ = passes.fold_scale_into_conv(gr)
    np.testing.assert_array_equal(folded.weights[("c", "kernel")], [2.0, -4.0])


def test_fold_after_decompose_yolov3(yolov3_weighted):
    fused, _ = passes.fuse_conv_bn(yolov3_weighted)
    decomposed, _ = passes.decompose_leaky(fused)
    folded, report = passes.fold_scale_into_conv(decomposed)
    assert len(report.removed) == 72  # exactly the alpha scales fold
    # each former leaky node is now exactly three nodes: relu, scale, add
    assert len(folded.nodes) == len(fused.nodes) + 2 * 72
    for former in (n.id for n in yolov3_weighted.nodes
                   if n.kind == g.ACTIVATION and n.attrs["act"] == g.LEAKY):
        survivors = [n.id for n in folded.nodes if n.id.startswith(former + "_")]
        assert sorted(survivors) == sorted([f"{former}_r", f"{former}_e", f"{former}_y"])


def test_plan_precision_counts(yolov3_graph):
    plan = passes.plan_precision(yolov3_graph, passes.I8, passes.LEAKY_AS_PLUGIN)
    assert plan.conversion_count == 144

    plan_f16 = passes.plan_precision(yolov3_graph, passes.F16, passes.LEAKY_AS_PLUGIN)
    assert plan_f16.conversion_count == 144


def test_plan_precision_native_decomposed(yolov3_weighted):
    rewritten, _ = passes.decompose_leaky(yolov3_weighted)
    plan = passes.plan_precision(rewritten, passes.I8, passes.LEAKY_NATIVE)
    assert plan.conversion_count == 0


def test_plan_single_conv_no_conversions():
    conv = g.conv_node("c", ["input"], "c", out_ch=1, kernel=1, stride=1, pad=0,
                       has_bias=True)
    gr = g.Graph(nodes=[conv], input_shape=g.TensorShape(1, 1, 32, 32))
    plan = passes.plan_precision(gr, passes.F16)
    assert plan.conversion_count == 0


def test_plan_chain_conversions_two_per_interior_plugin():
    """On chains, conversions = 2 x interior plugin count (plugins apart)."""
    rng = np.random.default_rng(9)
    for _ in range(10):
        n = int(rng.integers(4, 10))
        plugin_at = sorted(rng.choice(np.arange(1, n - 1), size=rng.integers(1, 3),
                                      replace=False))
        # keep plugins non-adjacent so each has quantizable neighbors both sides
        plugin_at = [p for i, p in enumerate(plugin_at) if i == 0 or p - plugin_at[i - 1] > 1]
        nodes = []
        prev = "input"
        for i in range(n):
            node = g.activation_node(f"n{i}", [prev], f"n{i}", g.RELU)
            if i in plugin_at:
                node.precision_class = g.PLUGIN_ONLY
            nodes.append(node)
            prev = f"n{i}"
        gr = g.Graph(nodes=nodes, input_shape=g.TensorShape(1, 1, 32, 32))
        plan = passes.plan_precision(gr, passes.I8)
        assert plan.conversion_count == 2 * len(plugin_at)


def test_plan_shared_tensor_converts_once():
    """A pinned node's output feeding two quantized consumers converts once."""
    pinned = g.activation_node("p", ["input"], "p", g.LEAKY, 0.1)
    c1 = g.activation_node("c1", ["p"], "c1", g.RELU)
    c2 = g.activation_node("c2", ["p"], "c2", g.RELU)
    gr = g.Graph(nodes=[pinned, c1, c2], input_shape=g.TensorShape(1, 1, 32, 32))
    plan = passes.plan_precision(gr, passes.I8, passes.LEAKY_AS_PLUGIN)
    assert plan.conversion_count == 1  # p's output once; p has no producer edge


def test_relu_swap(yolov3_weighted, rng):
    swapped, report = passes.replace_leaky_with_relu(yolov3_weighted)
    relus = [n for n in swapped.nodes
             if n.kind == g.ACTIVATION and n.attrs["act"] == g.RELU]
    assert len(relus) == 72
    assert report.warnings and "retraining" in report.warnings[0]

    # no leaky -> unchanged, no warning
    again, report2 = passes.replace_leaky_with_relu(swapped)
    assert not report2.warnings

    # sanity negative-test: outputs differ on negative inputs
    act = g.activation_node("L", ["input"], "L", g.LEAKY, 0.1)
    gr = g.Graph(nodes=[act], input_shape=g.TensorShape(1, 1, 32, 32))
    swapped_tiny, _ = passes.replace_leaky_with_relu(gr)
    x = np.full((1, 1, 32, 32), -1.0, dtype=np.float32)
    a = executor.execute(gr, x).as_f32("L")
    b = executor.execute(swapped_tiny, x).as_f32("L")
    assert not np.allclose(a, b)


def test_pass_idempotence(rng):
    gr = random_conv_bn_net(rng, size=1)
    for name in ("fuse-conv-bn", "decompose-leaky", "fold-scale", "relu-swap"):
        once, _ = passes.PASSES[name](gr)
        twice, report = passes.PASSES[name](once)
        assert len(twice.nodes) == len(once.nodes), name
        assert not report.removed and not report.created, name
        x = rng.normal(0, 0.3, size=tuple(gr.input_shape)).astype(np.float32)
        outputs_close(once, twice, x, rtol=0, atol=0)


def test_pass_composition_preserves_semantics(rng):
    for _ in range(5):
        gr = random_conv_bn_net(rng, size=2)
        rewritten, _ = passes.apply_passes(
            gr, ["fuse-conv-bn", "decompose-leaky", "fold-scale"])
        for _ in range(3):
            x = rng.normal(0, 0.5, size=tuple(gr.input_shape)).astype(np.float32)
            outputs_close(gr, rewritten, x)


def test_pass_report_accounting(yolov3_weighted):
    for name in ("fuse-conv-bn", "decompose-leaky", "fold-scale"):
        graph, report = passes.PASSES[name](yolov3_weighted)
        assert report.nodes_after == len(graph.nodes)
        assert (report.nodes_after
                == report.nodes_before - len(report.removed) + len(report.created))


def test_fuse_never_increases_nodes(rng):
    for _ in range(5):
        gr = random_conv_bn_net(rng, size=1)
        fused, _ = passes.fuse_conv_bn(gr)
        assert len(fused.nodes) <= len(gr.nodes)
        folded, _ = passes.fold_scale_into_conv(fused)
        assert len(folded.nodes) <= len(fused.nodes)


def test_relu_variant_fuses_fully(yolov3_weighted):
    swapped, _ = passes.replace_leaky_with_relu(yolov3_weighted)
    fused, _ = passes.fuse_conv_bn(swapped)
    # conv+bn+relu blocks collapse into single conv nodes
    assert len(fused.nodes) == 105
    kinds = {n.kind for n in fused.nodes}
    assert g.ACTIVATION not in kinds and g.BATCHNORM not in kinds

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetforge import fixtures, frontend
from jetforge import graph as g

TINY_CFG = """
[net]
width=64
height=32
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=2
pad=1
activation=leaky

[convolutional]
filters=2
size=1
stride=1
activation=linear
"""


def test_net_section_sets_input_shape():
    gr = frontend.parse_cfg("[net]\nwidth=608\nheight=352\nchannels=3\n"
                            "[convolutional]\nfilters=1\nsize=1\nstride=1\nactivation=linear\n")
    assert gr.input_shape == g.TensorShape(1, 3, 352, 608)


def test_yolov3_has_72_leaky_activations(yolov3_graph):
    leaky = [n for n in yolov3_graph.nodes
             if n.kind == g.ACTIVATION and n.attrs["act"] == g.LEAKY]
    assert len(leaky) == 72
    stats = frontend.model_stats(yolov3_graph)
    assert stats.activation_counts["leaky"] == 72


def test_bundled_cfgs_match_generators_and_validate():
    assert fixtures.bundled_cfg("yolov3_608x352.cfg").strip() == fixtures.yolov3_cfg().strip()
    assert fixtures.bundled_cfg("tiny_detector.cfg").strip() == fixtures.tiny_cfg().strip()
    for name in ("yolov3_608x352.cfg", "tiny_detector.cfg"):
        parsed = frontend.parse_cfg(fixtures.bundled_cfg(name))
        assert g.validate(parsed) == [], name


def test_yolov3_structure_counts(yolov3_graph):
    counts = {}
    for n in yolov3_graph.nodes:
        counts[n.kind] = counts.get(n.kind, 0) + 1
    assert counts[g.CONV] == 75
    assert counts[g.BATCHNORM] == 72
    assert counts[g.ADD] == 23
    assert counts[g.CONCAT] == 2
    assert counts[g.UPSAMPLE] == 2
    assert counts[g.YOLO_HEAD] == 3
    assert g.validate(yolov3_graph) == []


def test_shortcut_relative_indexing():
    # 12 sections; the [shortcut] sits at darknet layer index 10 with from=-3,
    # so it must add the outputs of layers 9 and 7
    convs = "\n".join(
        f"[convolutional]\nfilters=4\nsize=3\nstride=1\npad=1\nactivation=leaky\n"
        for _ in range(10))
    cfg = f"[net]\nwidth=32\nheight=32\nchannels=3\n{convs}\n[shortcut]\nfrom=-3\n"
    gr = frontend.parse_cfg(cfg)
    add = [n for n in gr.nodes if n.kind == g.ADD][0]
    assert add.inputs == ["act9", "act7"]


def test_route_single_rewires_and_multi_concats():
    cfg = """
[net]
width=32
height=32
channels=3

[convolutional]
filters=4
size=3
stride=1
pad=1
activation=leaky

[convolutional]
filters=6
size=3
stride=1
pad=1
activation=leaky

[route]
layers=-2

[convolutional]
filters=2
size=1
stride=1
activation=linear

[route]
layers=-1,1
"""
    gr = frontend.parse_cfg(cfg)
    concat = [n for n in gr.nodes if n.kind == g.CONCAT][0]
    # route -1 is conv3's output, route 1 is darknet layer 1 (act1)
    assert concat.inputs == ["conv3", "act1"]
    conv3 = gr.node_by_id("conv3")
    assert conv3.inputs == ["act0"]  # single-layer route re-wired to layer 0


def test_parse_errors():
    with pytest.raises(frontend.CfgSyntaxError):
        frontend.parse_cfg("[net]\nwidth=32\nwidth=64\nheight=32\n")  # duplicate key
    with pytest.raises(frontend.UnknownSection):
        frontend.parse_cfg("[net]\nwidth=32\nheight=32\n[definitely_not_a_layer]\nx=1\n")
    with pytest.raises(frontend.BadReference):
        frontend.parse_cfg("[net]\nwidth=32\nheight=32\n[convolutional]\nfilters=1\n"
                           "size=1\nstride=1\nactivation=linear\n[route]\nlayers=-5\n")
    with pytest.raises(frontend.UnsupportedOption):
        frontend.parse_cfg("[net]\nwidth=32\nheight=32\n[convolutional]\nfilters=1\n"
                           "size=1\nstride=1\nactivation=mish\n")


def test_unknown_keys_warn_not_fail():
    with pytest.warns(UserWarning):
        gr = frontend.parse_cfg("[net]\nwidth=32\nheight=32\nwormhole=9\n"
                                "[convolutional]\nfilters=1\nsize=1\nstride=1\nactivation=linear\n")
    assert gr.input_shape.w == 32


def test_training_keys_ignored_silently():
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        frontend.parse_cfg("[net]\nwidth=32\nheight=32\nlearning_rate=0.004\nburn_in=1000\n"
                           "[convolutional]\nfilters=1\nsize=1\nstride=1\nactivation=linear\n")


def _header(major=0, minor=2, revision=0, seen=0):
    return struct.pack("<iii", major, minor, revision) + struct.pack("<q", seen)


def test_load_weights_exact_layout():
    # conv(bn), out=2, in=1, k=1: beta[2] gamma[2] mean[2] var[2] kernel[2]
    cfg = ("[net]\nwidth=32\nheight=32\nchannels=1\n"
           "[convolutional]\nbatch_normalize=1\nfilters=2\nsize=1\nstride=1\nactivation=leaky\n")
    gr = frontend.parse_cfg(cfg)
    payload = np.arange(10, dtype="<f4")
    data = _header() + payload.tobytes()
    loaded = frontend.load_weights(data, gr)
    assert np.array_equal(loaded.weights[("bn0", "bn_beta")][:], [0.0, 1.0])
    assert np.array_equal(loaded.weights[("bn0", "bn_gamma")][:], [2.0, 3.0])
    assert np.array_equal(loaded.weights[("bn0", "bn_mean")][:], [4.0, 5.0])
    assert np.array_equal(loaded.weights[("bn0", "bn_var")][:], [6.0, 7.0])
    assert np.array_equal(loaded.weights[("conv0", "kernel")][:], [8.0, 9.0])


def test_load_weights_truncated_and_trailing():
    cfg = ("[net]\nwidth=32\nheight=32\nchannels=1\n"
           "[convolutional]\nbatch_normalize=1\nfilters=2\nsize=1\nstride=1\nactivation=leaky\n")
    gr = frontend.parse_cfg(cfg)
    payload = np.arange(10, dtype="<f4").tobytes()
    with pytest.raises(frontend.Truncated):
        frontend.load_weights(_header() + payload[:-4], gr)
    with pytest.raises(frontend.TrailingBytes):
        frontend.load_weights(_header() + payload + b"\x00\x00\x00\x00", gr)
    with pytest.raises(frontend.HeaderInvalid):
        frontend.load_weights(struct.pack("<iii", -1, 0, 0) + b"\x00" * 8 + payload, gr)


def test_weights_header_seen_width():
    header, offset = frontend.parse_weights_header(
        struct.pack("<iii", 0, 1, 0) + struct.pack("<i", 7) + b"junk")
    assert header.seen == 7 and offset == 16
    header, offset = frontend.parse_weights_header(
        struct.pack("<iii", 0, 2, 0) + struct.pack("<q", 9) + b"junk")
    assert header.seen == 9 and offset == 20


def test_weights_roundtrip_through_container(tmp_path, tiny_detector):
    path = tmp_path / "tiny.uir"
    g.save_container(tiny_detector, path)
    loaded = g.load_container(path)
    for key, arr in tiny_detector.weights.items():
        assert np.array_equal(loaded.weights[key], arr), key


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.sampled_from([1, 3]),
                          st.booleans()), min_size=1, max_size=4),
       st.randoms(use_true_random=False))
def test_load_weights_consumes_exactly(layer_specs, rnd):
    """Random tiny cfgs with matching synthetic weights load cleanly; any
    byte added or removed is rejected."""
    body = []
    for filters, size, bn in layer_specs:
        lines = ["[convolutional]"]
        if bn:
            lines.append("batch_normalize=1")
        lines += [f"filters={filters}", f"size={size}", "stride=1", "pad=1",
                  "activation=leaky"]
        body.append("\n".join(lines))
    cfg = "[net]\nwidth=32\nheight=32\nchannels=2\n" + "\n\n".join(body) + "\n"
    gr = frontend.parse_cfg(cfg)
    data = fixtures.random_weights(gr, seed=rnd.randrange(1000))
    loaded = frontend.load_weights(data, gr)
    assert g.validate(loaded) == []
    with pytest.raises(frontend.Truncated):
        frontend.load_weights(data[:-4], gr)
    with pytest.raises((frontend.TrailingBytes, frontend.Truncated)):
        frontend.load_weights(data + b"\x00\x00\x00\x00", gr)


def test_model_stats_macs_and_params():
    cfg = ("[net]\nwidth=32\nheight=32\nchannels=2\n"
           "[convolutional]\nfilters=4\nsize=1\nstride=1\nactivation=leaky\n")
    gr = frontend.parse_cfg(cfg)
    # 1x1 conv, 2 -> 4 channels on 32x32: out_h * out_w * out_ch * in_ch * k * k
    stats = frontend.model_stats(gr)
    assert stats.per_layer_macs["conv0"] == 32 * 32 * 4 * 2
    assert stats.activation_counts == {"leaky": 1}

    cfg_bn = ("[net]\nwidth=32\nheight=32\nchannels=1\n"
              "[convolutional]\nbatch_normalize=1\nfilters=2\nsize=1\nstride=1\nactivation=leaky\n")
    stats_bn = frontend.model_stats(frontend.parse_cfg(cfg_bn))
    assert stats_bn.parameter_count == 2 + 8  # kernel 2*1*1*1, bn 4*2


def test_model_stats_conv_example_8x8():
    conv = g.conv_node("c", ["input"], "c", out_ch=4, kernel=1, stride=1, pad=0,
                       has_bias=False)
    gr = g.Graph(nodes=[conv], input_shape=g.TensorShape(1, 2, 8, 8))
    stats = frontend.model_stats(gr)
    assert stats.per_layer_macs["c"] == 512
    assert stats.total_macs == 512

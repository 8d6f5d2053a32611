import numpy as np
import pytest

from graphutil import act, const, conv_attrs, conv_relu_softmax, make_graph
from tinydeploy.graph import (
    DType,
    GraphIR,
    OpKind,
    OpNode,
    ShapeError,
    TensorKind,
    TensorSpec,
    conv_output_hw,
    infer_shapes,
    same_padding_amounts,
    topological_order,
    validate,
)


def test_minimal_graph_validates():
    g = conv_relu_softmax()
    assert validate(g).ok


def test_dangling_input_reported():
    nodes = [OpNode("relu", OpKind.RELU, {}, ["t9"], ["out"])]
    tensors = [act("t9", (1, 4)), act("out", (1, 4))]
    g = GraphIR("bad", nodes, {t.id: t for t in tensors}, [], ["out"])
    report = validate(g)
    assert not report.ok
    assert any("dangling input t9" in v for v in report.violations)


def test_multiple_producers_reported():
    nodes = [
        OpNode("a", OpKind.RELU, {}, ["in"], ["t1"]),
        OpNode("b", OpKind.RELU, {}, ["in"], ["t1"]),
    ]
    tensors = [
        TensorSpec("in", (1, 4), DType.FLOAT32, TensorKind.INPUT),
        act("t1", (1, 4)),
    ]
    g = GraphIR("bad", nodes, {t.id: t for t in tensors}, ["in"], ["t1"])
    report = validate(g)
    assert any("multiple producers t1" in v for v in report.violations)


def test_int8_without_quant_reported():
    t = TensorSpec("q", (1, 4), DType.INT8, TensorKind.ACTIVATION, quant=None)
    g = GraphIR("bad", [], {"q": t}, [], [])
    assert any("Int8 without quantization" in v for v in validate(g).violations)


def test_constant_data_length_checked():
    w = TensorSpec("w", (2, 3), DType.FLOAT32, TensorKind.WEIGHT,
                   data=np.zeros((2, 3), dtype=np.float32))
    w.shape = (2, 4)  # corrupt after construction
    g = GraphIR("bad", [], {"w": w}, [], [])
    assert any("shape implies" in v for v in validate(g).violations)


def test_conv_output_shape_valid_padding():
    # floor((64-3)/1)+1 = 62
    assert conv_output_hw((64, 64), (3, 3), (1, 1), "VALID") == (62, 62)
    rng = np.random.default_rng(0)
    nodes = [OpNode("conv", OpKind.CONV2D, conv_attrs(), ["in", "w"], ["out"])]
    tensors = [
        TensorSpec("in", (1, 64, 64, 3), DType.FLOAT32, TensorKind.INPUT),
        const("w", rng.normal(size=(8, 3, 3, 3))),
        act("out"),
    ]
    g = make_graph("c", nodes, tensors, ["in"], ["out"])
    assert g.tensors["out"].shape == (1, 62, 62, 8)


def test_conv_1x1_identity_spatial():
    rng = np.random.default_rng(0)
    nodes = [OpNode("conv", OpKind.CONV2D, conv_attrs(kernel=1), ["in", "w"], ["out"])]
    tensors = [
        TensorSpec("in", (1, 10, 10, 4), DType.FLOAT32, TensorKind.INPUT),
        const("w", rng.normal(size=(4, 1, 1, 4))),
        act("out"),
    ]
    g = make_graph("c", nodes, tensors, ["in"], ["out"])
    assert g.tensors["out"].shape == (1, 10, 10, 4)


def test_same_padding_shape_and_split():
    assert conv_output_hw((32, 32), (3, 3), (2, 2), "SAME") == (16, 16)
    # floor-left / ceil-right
    assert same_padding_amounts(5, 3, 2) == (1, 1)
    assert same_padding_amounts(4, 3, 2) == (0, 1)


def test_add_shape_mismatch_names_node():
    nodes = [OpNode("add1", OpKind.ADD, {}, ["a", "b"], ["out"])]
    tensors = [
        TensorSpec("a", (1, 8, 8, 16), DType.FLOAT32, TensorKind.INPUT),
        TensorSpec("b", (1, 8, 8, 32), DType.FLOAT32, TensorKind.INPUT),
        act("out"),
    ]
    g = GraphIR("bad", nodes, {t.id: t for t in tensors}, ["a", "b"], ["out"])
    with pytest.raises(ShapeError, match="add1"):
        infer_shapes(g)


def test_infer_shapes_idempotent():
    g = conv_relu_softmax()
    g1, order1 = infer_shapes(g)
    g2, order2 = infer_shapes(g1)
    assert order1 == order2
    assert all(g1.tensors[t].shape == g2.tensors[t].shape for t in g1.tensors)


def test_topological_order_respects_producers():
    g = conv_relu_softmax()
    order = topological_order(g)
    assert sorted(order) == sorted(n.id for n in g.nodes)
    producers = g.producer_map()
    pos = {nid: i for i, nid in enumerate(order)}
    for node in g.nodes:
        for tid in node.inputs:
            if tid in producers:
                assert pos[producers[tid].id] < pos[node.id]


def test_cycle_detected():
    nodes = [
        OpNode("a", OpKind.RELU, {}, ["t2"], ["t1"]),
        OpNode("b", OpKind.RELU, {}, ["t1"], ["t2"]),
    ]
    tensors = [act("t1", (1, 4)), act("t2", (1, 4))]
    g = GraphIR("cyc", nodes, {t.id: t for t in tensors}, [], ["t1"])
    assert any("cycle" in v for v in validate(g).violations)


def test_concat_shape_sum_along_axis():
    nodes = [OpNode("cat", OpKind.CONCAT, {"axis": 3}, ["a", "b"], ["out"])]
    tensors = [
        TensorSpec("a", (1, 4, 4, 3), DType.FLOAT32, TensorKind.INPUT),
        TensorSpec("b", (1, 4, 4, 5), DType.FLOAT32, TensorKind.INPUT),
        act("out"),
    ]
    g = make_graph("cat", nodes, tensors, ["a", "b"], ["out"])
    assert g.tensors["out"].shape == (1, 4, 4, 8)


def test_bad_attrs_reported():
    nodes = [OpNode("conv", OpKind.CONV2D,
                    {"kernel_h": 0, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                     "padding": "WEIRD"},
                    ["in", "w"], ["out"])]
    tensors = [
        TensorSpec("in", (1, 8, 8, 3), DType.FLOAT32, TensorKind.INPUT),
        const("w", np.zeros((4, 3, 3, 3))),
        act("out"),
    ]
    g = GraphIR("bad", nodes, {t.id: t for t in tensors}, ["in"], ["out"])
    report = validate(g)
    assert any("kernel_h" in v for v in report.violations)
    assert any("padding" in v for v in report.violations)

import numpy as np
import pytest

from stprune import autodiff as ad
from stprune import graph as gr
from stprune import models
from stprune.arch import ArchSpec, full_arch, LayerMask, StructMask

MLP_TEXT = """stpgraph v1
input 4
node 0 input
node 1 linear inputs=0 in=4 out=6 bias=1 stage=0 block=0
node 2 relu inputs=1
node 3 linear inputs=2 in=6 out=3 bias=1
node 4 output inputs=3
"""

CHAIN_TEXT = """stpgraph v1
input 2 4 4
node 0 input
node 1 conv2d inputs=0 in=2 out=4 kernel=3 pad=1 bias=0 stage=0 block=0
node 2 conv2d inputs=1 in=4 out=4 kernel=3 pad=1 bias=0 stage=0 block=1
node 3 conv2d inputs=2 in=4 out=4 kernel=3 pad=1 bias=0 stage=0 block=2
node 4 output inputs=3
"""

RESIDUAL_TEXT = """stpgraph v1
input 2 4 4
node 0 input
node 1 conv2d inputs=0 in=2 out=4 kernel=3 pad=1 bias=0 stage=0 block=0
node 2 conv2d inputs=0 in=2 out=4 kernel=1 bias=0 stage=0 block=0
node 3 add inputs=1,2
node 4 output inputs=3
"""

CONCAT_TEXT = """stpgraph v1
input 2 4 4
node 0 input
node 1 conv2d inputs=0 in=2 out=3 kernel=1 bias=0 stage=0 block=0
node 2 conv2d inputs=0 in=2 out=5 kernel=1 bias=0 stage=1 block=0
node 3 concat inputs=1,2
node 4 output inputs=3
"""


def test_mlp_text_parses_to_five_nodes_two_prunable():
    g = gr.build_graph(MLP_TEXT)
    assert len(g.nodes) == 5
    assert sum(1 for n in g.nodes if n.prunable) == 2


def test_undefined_input_is_an_error():
    bad = MLP_TEXT.replace("inputs=2", "inputs=9")
    with pytest.raises(gr.GraphError):
        gr.build_graph(bad)


def test_duplicate_id_is_an_error():
    bad = MLP_TEXT.replace("node 3 linear", "node 1 linear")
    with pytest.raises(gr.GraphError):
        gr.build_graph(bad)


def test_parse_error_names_the_line():
    bad = MLP_TEXT.replace("node 2 relu inputs=1", "node 2 warble inputs=1")
    with pytest.raises(gr.ParseError, match="line"):
        gr.build_graph(bad)


def test_resnet50_prunable_layer_census():
    g = gr.build_graph(models.resnet50_cifar_spec())
    convs = [n for n in g.nodes if n.kind == "conv2d"]
    linears = [n for n in g.nodes if n.kind == "linear"]
    assert len(convs) == 53
    assert len(linears) == 1
    assert sum(1 for n in g.nodes if n.prunable) == 54
    assert g.stage_sizes() == (3, 4, 6, 3)


def test_render_round_trip():
    g = gr.build_graph(models.toycnn_spec())
    again = gr.build_graph(gr.render_model_spec(g))
    assert [(n.kind, n.inputs, n.stage, n.block) for n in g.nodes] == \
           [(n.kind, n.inputs, n.stage, n.block) for n in again.nodes]


def test_dependency_groups_residual_merges():
    g = gr.build_graph(RESIDUAL_TEXT)
    groups = gr.extract_dependency_groups(g)
    merged = [grp for grp in groups if len(grp.members) == 2]
    assert len(merged) == 1
    assert set(merged[0].members) == {1, 2}


def test_dependency_groups_chain_is_singletons():
    g = gr.build_graph(CHAIN_TEXT)
    groups = gr.extract_dependency_groups(g)
    assert sorted(tuple(grp.members) for grp in groups) == [(1,), (2,), (3,)]


def test_dependency_groups_concat_stays_separate():
    g = gr.build_graph(CONCAT_TEXT)
    groups = gr.extract_dependency_groups(g)
    assert sorted(tuple(grp.members) for grp in groups) == [(1,), (2,)]


def test_add_channel_mismatch_rejected():
    bad = RESIDUAL_TEXT.replace("in=2 out=4 kernel=1", "in=2 out=3 kernel=1")
    with pytest.raises(gr.GraphError):
        gr.build_graph(bad)


def _forward(graph, params, x, mask=None):
    out, _ = gr.interpret(graph, ad.Tensor(x), mask=mask, params=params)
    return out.values


def test_all_ones_mask_is_identity():
    g = gr.build_graph(models.tinytoy_spec())
    rng = np.random.default_rng(0)
    params = gr.init_params(g, rng)
    x = rng.standard_normal((2, 1, 8, 8))
    plain = _forward(g, params, x)
    masked = _forward(g, params, x, mask=StructMask({
        nid: LayerMask(True, None) for nid in g.staged_ids()}))
    assert np.abs(plain - masked).max() == 0.0


def test_half_width_mask_matches_hand_sliced_layer():
    g = gr.build_graph(MLP_TEXT)
    rng = np.random.default_rng(1)
    params = gr.init_params(g, rng)
    x = rng.standard_normal((3, 4))
    mask = StructMask({1: LayerMask(True, 3)})  # first half of the 6 hidden units
    masked = _forward(g, params, x, mask=mask)

    w1, b1 = params["1.w"][:3], params["1.b"][:3]
    w2, b2 = params["3.w"][:, :3], params["3.b"]
    h = np.maximum(x @ w1.T + b1, 0.0)
    by_hand = h @ w2.T + b2
    assert np.abs(masked - by_hand).max() <= 1e-6


def test_skipped_residual_block_equals_shortcut():
    g = gr.build_graph(RESIDUAL_TEXT)
    rng = np.random.default_rng(2)
    params = gr.init_params(g, rng)
    x = rng.standard_normal((2, 2, 4, 4))
    mask = StructMask({1: LayerMask(False, None), 2: LayerMask(True, None)})
    skipped = _forward(g, params, x, mask=mask)
    shortcut_only, _ = gr.interpret(
        gr.build_graph("""stpgraph v1
input 2 4 4
node 0 input
node 1 conv2d inputs=0 in=2 out=4 kernel=1 bias=0 stage=0 block=0
node 2 output inputs=1
"""), ad.Tensor(x), params={"1.w": params["2.w"]})
    assert np.abs(skipped - shortcut_only.values).max() == 0.0


def test_cost_linear_hand_count():
    g = gr.build_graph("""stpgraph v1
input 4
node 0 input
node 1 linear inputs=0 in=4 out=3 bias=1 stage=0 block=0
node 2 output inputs=1
""")
    rep = gr.estimate_cost(g, (2, 4))
    assert rep.params == 15
    assert rep.flops == 54


def test_cost_conv_hand_count():
    g = gr.build_graph("""stpgraph v1
input 2 8 8
node 0 input
node 1 conv2d inputs=0 in=2 out=4 kernel=3 pad=1 bias=0 stage=0 block=0
node 2 output inputs=1
""")
    rep = gr.estimate_cost(g)
    assert rep.params == 72
    assert rep.flops == 9216


def test_cost_empty_graph_is_zero():
    g = gr.build_graph("""stpgraph v1
input 3 8 8
node 0 input
node 1 output inputs=0
""")
    rep = gr.estimate_cost(g)
    assert rep.flops == 0 and rep.params == 0


def test_cost_monotone_in_mask():
    g = gr.build_graph(models.tinytoy_spec())
    full = gr.estimate_cost(g)
    a = ArchSpec((1, 1), (0.5, 0.5))
    from stprune.arch import arch_to_mask
    sub = gr.estimate_cost(g, mask=arch_to_mask(a, g))
    assert 0 < sub.flops < full.flops
    assert 0 < sub.params < full.params


def test_cost_uses_shape_proxies_not_dense_tensors():
    side = 2 ** 24
    g = gr.build_graph(f"""stpgraph v1
input 3 {side} {side}
node 0 input
node 1 conv2d inputs=0 in=3 out=8 kernel=3 pad=1 bias=0 stage=0 block=0
node 2 output inputs=1
""")
    rep = gr.estimate_cost(g)
    # The exact count exceeds float64's exact-integer range; only integer
    # shape arithmetic keeps every digit (and no dense tensor this size
    # could be allocated).
    assert rep.flops == 2 * side * side * 8 * 3 * 9
    assert rep.flops > 2**53


def test_full_arch_ratio_is_one():
    g = gr.build_graph(models.toycnn_spec())
    assert gr.flops_ratio(g, full_arch(g)) == 1.0
    assert gr.params_ratio(g, full_arch(g)) == 1.0


APPENDIX_ROWS = [
    ("((2, 3, 5, 2), (0.3, 0.3, 0.3, 0.7))", 0.1488, 0.2228),
    ("((1, 3, 6, 2), (0.3, 0.3, 0.3, 0.7))", 0.1469, 0.2236),
    ("((1, 2, 5, 2), (0.5, 0.3, 0.3, 0.7))", 0.1522, 0.2233),
    ("((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))", 0.1489, 0.2194),
    ("((2, 2, 6, 2), (0.3, 0.3, 0.3, 0.7))", 0.1523, 0.2293),
]


@pytest.mark.parametrize("text,fr,pr", APPENDIX_ROWS)
def test_reference_architecture_cost_ratios(text, fr, pr):
    g = gr.build_graph(models.resnet50_cifar_spec())
    arch = ArchSpec.from_text(text)
    assert gr.flops_ratio(g, arch) == pytest.approx(fr, abs=0.015)
    assert gr.params_ratio(g, arch) == pytest.approx(pr, abs=0.015)

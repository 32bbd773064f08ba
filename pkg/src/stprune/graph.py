"""Computation-graph IR: parsing, validation, dependency groups, masked
interpretation and shape-only cost estimation.

Graphs are immutable after build. Parameters live outside the graph in a
plain dict (see init_params) so the same graph can serve many runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

SPEC_HEADER = "stpgraph v1"

KINDS = {
    "input", "output", "linear", "conv2d", "add", "concat",
    "relu", "sigmoid", "flatten", "global_pool", "pool2d",
}
PRUNABLE_KINDS = {"linear", "conv2d"}
# channel-preserving ops that transmit dependency coupling
PASS_THROUGH = {"relu", "sigmoid", "flatten", "global_pool", "pool2d"}


class GraphError(Exception):
    pass


class ParseError(GraphError):
    pass


class ShapeError(GraphError):
    pass


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    stage: int | None = None   # None: not subject to depth/width masking
    block: int | None = None

    @property
    def prunable(self):
        return self.kind in PRUNABLE_KINDS

    @property
    def out_channels(self):
        return self.attrs["out"]


@dataclass(frozen=True)
class CompGraph:
    nodes: tuple
    input_shape: tuple
    # stages[s] is an ordered list of blocks; each block an ordered list of
    # prunable node ids that are skipped or retained together
    stages: tuple

    def node(self, nid):
        return self._by_id[nid]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    @property
    def num_stages(self):
        return len(self.stages)

    def stage_sizes(self):
        return tuple(len(blocks) for blocks in self.stages)

    def prunable_ids(self):
        return [n.id for n in self.nodes if n.prunable]

    def staged_ids(self):
        return [nid for blocks in self.stages for block in blocks for nid in block]

    def stage_of(self, nid):
        return self.node(nid).stage


@dataclass(frozen=True)
class DependencyGroup:
    members: frozenset
    reason: int | None   # integration node forcing the coupling, if any


@dataclass
class CostReport:
    flops: int
    params: int
    per_node: dict
    shapes: dict | None = None   # node id -> output shape proxy (not serialized)

    def to_json(self):
        return json.dumps({
            "flops": self.flops,
            "params": self.params,
            "per_node": {str(k): list(v) for k, v in sorted(self.per_node.items())},
        }, indent=2)


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------

_INT_ATTRS = {"in", "out", "kernel", "stride", "pad", "bias", "stage", "block"}

_KIND_REQUIRED = {
    "conv2d": ("in", "out", "kernel"),
    "linear": ("in", "out"),
    "pool2d": ("kernel", "stride"),
}

_KIND_DEFAULTS = {
    "conv2d": {"stride": 1, "pad": 0, "bias": 1},
    "linear": {"bias": 1},
    "pool2d": {"pad": 0},
}


def parse_model_spec(text: str) -> CompGraph:
    """Parse the line-oriented stpgraph v1 model description."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != SPEC_HEADER:
        raise ParseError(f"line 1: expected header '{SPEC_HEADER}'")
    input_shape = None
    raw_nodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "input":
            try:
                input_shape = tuple(int(v) for v in fields[1:])
            except ValueError:
                raise ParseError(f"line {lineno}: bad input shape")
            if not input_shape:
                raise ParseError(f"line {lineno}: empty input shape")
            continue
        if fields[0] != "node":
            raise ParseError(f"line {lineno}: expected 'node' or 'input'")
        if len(fields) < 3:
            raise ParseError(f"line {lineno}: node needs an id and a kind")
        try:
            nid = int(fields[1])
        except ValueError:
            raise ParseError(f"line {lineno}: bad node id {fields[1]!r}")
        kind = fields[2]
        if kind not in KINDS:
            raise ParseError(f"line {lineno}: unknown kind {kind!r}")
        inputs = ()
        attrs = {}
        for tok in fields[3:]:
            if "=" not in tok:
                raise ParseError(f"line {lineno}: expected key=value, got {tok!r}")
            key, val = tok.split("=", 1)
            if key == "inputs":
                try:
                    inputs = tuple(int(v) for v in val.split(",") if v)
                except ValueError:
                    raise ParseError(f"line {lineno}: bad inputs {val!r}")
            elif key in _INT_ATTRS:
                try:
                    attrs[key] = int(val)
                except ValueError:
                    raise ParseError(f"line {lineno}: bad value for {key}: {val!r}")
            else:
                raise ParseError(f"line {lineno}: unknown attribute {key!r}")
        raw_nodes.append((lineno, nid, kind, inputs, attrs))
    if input_shape is None:
        raise ParseError("missing 'input' shape line")

    nodes = []
    for lineno, nid, kind, inputs, attrs in raw_nodes:
        merged = dict(_KIND_DEFAULTS.get(kind, {}))
        stage = attrs.pop("stage", None)
        block = attrs.pop("block", None)
        merged.update(attrs)
        for req in _KIND_REQUIRED.get(kind, ()):
            if req not in merged:
                raise ParseError(f"line {lineno}: node {nid} missing {req}=")
        if stage is not None and kind not in PRUNABLE_KINDS:
            raise ParseError(f"line {lineno}: node {nid} of kind {kind} cannot be staged")
        if stage is not None and block is None:
            block = 0
        nodes.append(GraphNode(nid, kind, inputs, merged, stage, block))
    return build_graph_from_nodes(nodes, input_shape)


def build_graph(model_spec: str) -> CompGraph:
    """Build a validated CompGraph from textual model description."""
    return parse_model_spec(model_spec)


def build_graph_from_nodes(nodes, input_shape) -> CompGraph:
    seen = set()
    for n in nodes:
        if n.id in seen:
            raise GraphError(f"node {n.id}: duplicate id")
        for d in n.attrs.values():
            if d < 0:
                raise GraphError(f"node {n.id}: negative attribute")
        for key in ("in", "out", "kernel"):
            if key in n.attrs and n.attrs[key] <= 0:
                raise GraphError(f"node {n.id}: attribute {key} must be positive")
        for src in n.inputs:
            if src not in seen:
                raise GraphError(
                    f"node {n.id}: edge to undefined or later node {src}")
        if n.kind == "input" and n.inputs:
            raise GraphError(f"node {n.id}: input node takes no inputs")
        if n.kind != "input" and not n.inputs:
            raise GraphError(f"node {n.id}: missing inputs")
        seen.add(n.id)
    if not any(n.kind == "input" for n in nodes):
        raise GraphError("graph has no input node")
    if sum(1 for n in nodes if n.kind == "output") != 1:
        raise GraphError("graph must have exactly one output node")

    # assemble stage structure from per-node annotations
    staged = {}
    for n in nodes:
        if n.stage is not None:
            staged.setdefault(n.stage, {}).setdefault(n.block, []).append(n.id)
    stages = []
    if staged:
        idxs = sorted(staged)
        if idxs != list(range(len(idxs))):
            raise GraphError(f"stage indices must be contiguous from 0, got {idxs}")
        for s in idxs:
            blocks = staged[s]
            bidxs = sorted(blocks)
            if bidxs != list(range(len(bidxs))):
                raise GraphError(
                    f"stage {s}: block indices must be contiguous from 0, got {bidxs}")
            stages.append(tuple(tuple(sorted(blocks[b])) for b in bidxs))
    graph = CompGraph(tuple(nodes), tuple(input_shape), tuple(stages))
    # dependency extraction doubles as structural validation
    extract_dependency_groups(graph)
    return graph


def render_model_spec(graph: CompGraph) -> str:
    """Serialize a graph back to stpgraph v1 text."""
    lines = [SPEC_HEADER, "input " + " ".join(str(d) for d in graph.input_shape)]
    for n in graph.nodes:
        parts = [f"node {n.id} {n.kind}"]
        if n.inputs:
            parts.append("inputs=" + ",".join(str(i) for i in n.inputs))
        for k in ("in", "out", "kernel", "stride", "pad", "bias"):
            if k in n.attrs:
                parts.append(f"{k}={n.attrs[k]}")
        if n.stage is not None:
            parts.append(f"stage={n.stage}")
            parts.append(f"block={n.block}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dependency groups
# ---------------------------------------------------------------------------

def extract_dependency_groups(graph: CompGraph):
    """Partition prunable layers into groups whose output channels must be
    pruned identically. Layers whose outputs meet at an add node along
    channel-preserving paths share a group; concat keeps producers separate."""
    parent = {nid: nid for nid in graph.prunable_ids()}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    # sources[nid]: list of prunable layer ids (or "input") whose output
    # channels the node's channels directly are
    sources = {}
    reasons = {}
    for n in graph.nodes:
        if n.kind == "input":
            sources[n.id] = ["input"]
        elif n.prunable:
            sources[n.id] = [n.id]
        elif n.kind in PASS_THROUGH:
            sources[n.id] = sources[n.inputs[0]]
        elif n.kind == "add":
            merged = []
            chans = set()
            for src in n.inputs:
                for s in sources[src]:
                    merged.append(s)
                    if s != "input":
                        chans.add(graph.node(s).out_channels)
            if len(chans) > 1:
                raise GraphError(
                    f"node {n.id}: add operands have mismatched channel counts {sorted(chans)}")
            prunables = [s for s in merged if s != "input"]
            for other in prunables[1:]:
                union(prunables[0], other)
            if len(prunables) > 1:
                reasons[find(prunables[0])] = n.id
            sources[n.id] = merged
        elif n.kind == "concat":
            # producers keep independent groups; consumers slice per producer
            sources[n.id] = ["concat"]
        elif n.kind == "output":
            sources[n.id] = sources[n.inputs[0]]
        else:
            raise GraphError(f"node {n.id}: unhandled kind {n.kind}")

    groups = {}
    for nid in graph.prunable_ids():
        groups.setdefault(find(nid), set()).add(nid)
    out = []
    for root, members in sorted(groups.items()):
        stages = {graph.node(m).stage for m in members}
        if len(stages) > 1:
            raise GraphError(
                f"dependency group {sorted(members)} spans stages {stages}")
        out.append(DependencyGroup(frozenset(members), reasons.get(root)))
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(graph: CompGraph):
    shapes = {}
    for n in graph.nodes:
        if n.kind == "conv2d":
            k = n.attrs["kernel"]
            shapes[f"{n.id}.w"] = (n.attrs["out"], n.attrs["in"], k, k)
            if n.attrs.get("bias"):
                shapes[f"{n.id}.b"] = (n.attrs["out"],)
        elif n.kind == "linear":
            shapes[f"{n.id}.w"] = (n.attrs["out"], n.attrs["in"])
            if n.attrs.get("bias"):
                shapes[f"{n.id}.b"] = (n.attrs["out"],)
    return shapes


def init_params(graph: CompGraph, rng) -> dict:
    """He-style init for conv/linear weights, zeros for biases.

    Without normalization layers residual adds compound variance, so staged
    layers are damped by 1/sqrt(total block count) to keep logits near
    unit scale at init."""
    blocks = sum(graph.stage_sizes())
    damp = 1.0 / np.sqrt(max(1, blocks))
    params = {}
    for name, shape in param_shapes(graph).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            nid = int(name.split(".")[0])
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if graph.node(nid).stage is not None:
                std *= damp
            params[name] = rng.normal(0.0, std, size=shape)
    return params


# ---------------------------------------------------------------------------
# interpretation
# ---------------------------------------------------------------------------

def _mask_rows(w: ad.Tensor, kept: int, tape):
    m = np.zeros((w.shape[0],) + (1,) * (len(w.shape) - 1))
    m[:kept] = 1.0
    out = ad.Tensor(w.values * m, w.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            w.accumulate(out.grad * m)
        tape.record(bwd)
    return out


def interpret(graph: CompGraph, x: ad.Tensor, mask=None, record=False,
              params=None, param_tensors=None, tape=None):
    """Execute the graph on x with masked channels and skipped layers.

    Either `params` (name -> ndarray) or `param_tensors` (name -> Tensor,
    reused so gradients accumulate across calls on a shared tape) must be
    given when the graph has parametric nodes. Passing an explicit tape
    records onto it; otherwise record=True creates a fresh one.

    Returns (output Tensor, tape or None).
    """
    if tape is None and record:
        tape = ad.Tape()
    if param_tensors is None:
        param_tensors = {}
        if params is not None:
            for name, v in params.items():
                param_tensors[name] = ad.Tensor(v, requires_grad=tape is not None)
    values = {}

    def masked_state(nid):
        if mask is None:
            return True, None
        return mask.state(nid)

    for n in graph.nodes:
        ins = [values[i] for i in n.inputs]
        if n.kind == "input":
            values[n.id] = x
            continue
        if n.kind == "output":
            if ins[0] is None:
                raise ShapeError(f"node {n.id}: output has no surviving input")
            values[n.id] = ins[0]
            continue
        if n.kind == "add":
            alive = [v for v in ins if v is not None]
            if not alive:
                values[n.id] = None
                continue
            acc = alive[0]
            for v in alive[1:]:
                if v.shape != acc.shape:
                    raise ShapeError(f"node {n.id}: add operand shapes differ "
                                     f"{acc.shape} vs {v.shape}")
                acc = ad.add(acc, v, tape)
            values[n.id] = acc
            continue
        if n.kind == "concat":
            if any(v is None for v in ins):
                raise ShapeError(f"node {n.id}: concat input was skipped")
            values[n.id] = ad.concat(ins, tape)
            continue
        v = ins[0]
        if v is None:
            values[n.id] = None
            continue
        if n.kind in ("conv2d", "linear"):
            keep, kept = masked_state(n.id)
            if not keep:
                values[n.id] = None
                continue
            w = param_tensors.get(f"{n.id}.w")
            b = param_tensors.get(f"{n.id}.b")
            if w is None:
                raise GraphError(f"node {n.id}: missing parameters")
            if kept is not None and kept < n.out_channels:
                w = _mask_rows(w, kept, tape)
                if b is not None:
                    b = _mask_rows(b, kept, tape)
            try:
                if n.kind == "conv2d":
                    values[n.id] = ad.conv2d(
                        v, w, b, n.attrs["stride"], n.attrs["pad"], tape)
                else:
                    values[n.id] = ad.linear(v, w, b, tape)
            except ValueError as e:
                raise ShapeError(f"node {n.id}: {e}")
        elif n.kind == "relu":
            values[n.id] = ad.relu(v, tape)
        elif n.kind == "sigmoid":
            values[n.id] = ad.sigmoid(v, tape)
        elif n.kind == "flatten":
            values[n.id] = ad.flatten(v, tape)
        elif n.kind == "global_pool":
            values[n.id] = ad.global_pool(v, tape)
        elif n.kind == "pool2d":
            values[n.id] = ad.avgpool2d(
                v, n.attrs["kernel"], n.attrs["stride"], n.attrs["pad"], tape)
        else:
            raise GraphError(f"node {n.id}: unhandled kind {n.kind}")

    out_id = next(n.id for n in graph.nodes if n.kind == "output")
    return values[out_id], tape


# ---------------------------------------------------------------------------
# cost estimation with shape proxies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeProxy:
    shape: tuple   # (C,), (B, C), (C, H, W) or (B, C, H, W); no values


def _conv_out(h, k, stride, pad):
    o = (h + 2 * pad - k) // stride + 1
    if o < 1:
        raise ShapeError(f"spatial dim collapsed: {h} with kernel {k}")
    return o


def estimate_cost(graph: CompGraph, input_shape=None, mask=None,
                  count_elementwise=False) -> CostReport:
    """Propagate shape proxies and count FLOPs (2 per MAC) and parameters.

    With a mask, channel dims carry kept counts and parameters are counted
    on kept channels only. All arithmetic is on Python ints; no dense work.
    """
    if input_shape is None:
        input_shape = graph.input_shape
    shapes = {}
    per_node = {}

    def nelem(shape):
        p = 1
        for d in shape:
            p *= d
        return p

    def split_spatial(nid, shape):
        # -> (batch, C, H, W)
        if len(shape) == 4:
            return shape
        if len(shape) == 3:
            return (1,) + tuple(shape)
        raise ShapeError(f"node {nid}: expected a spatial shape, got {shape}")

    for n in graph.nodes:
        ins = [shapes[i] for i in n.inputs]
        flops = 0
        params = 0
        if n.kind == "input":
            shapes[n.id] = tuple(input_shape)
        elif n.kind == "output":
            if ins[0] is None:
                raise ShapeError(f"node {n.id}: output has no surviving input")
            shapes[n.id] = ins[0]
        elif n.kind == "add":
            alive = [s for s in ins if s is not None]
            if not alive:
                shapes[n.id] = None
            else:
                for s in alive[1:]:
                    if s != alive[0]:
                        raise ShapeError(
                            f"node {n.id}: add shapes differ {alive[0]} vs {s}")
                shapes[n.id] = alive[0]
                if count_elementwise:
                    flops = (len(alive) - 1) * nelem(alive[0])
        elif n.kind == "concat":
            if any(s is None for s in ins):
                raise ShapeError(f"node {n.id}: concat input was skipped")
            base = ins[0]
            c = sum(s[-3] if len(s) >= 3 else s[-1] for s in ins)
            if len(base) >= 3:
                shapes[n.id] = base[:-3] + (c,) + base[-2:]
            else:
                shapes[n.id] = base[:-1] + (c,)
        elif ins[0] is None:
            shapes[n.id] = None
        elif n.kind == "conv2d":
            keep, kept = (True, None) if mask is None else mask.state(n.id)
            if not keep:
                shapes[n.id] = None
            else:
                b, c, h, w = split_spatial(n.id, ins[0])
                if c > n.attrs["in"]:
                    raise ShapeError(
                        f"node {n.id}: expected <= {n.attrs['in']} input channels, got {c}")
                k, st, pad = n.attrs["kernel"], n.attrs["stride"], n.attrs["pad"]
                ho, wo = _conv_out(h, k, st, pad), _conv_out(w, k, st, pad)
                out = n.out_channels if kept is None else kept
                flops = 2 * b * ho * wo * out * c * k * k
                params = out * c * k * k
                if n.attrs.get("bias"):
                    flops += b * ho * wo * out
                    params += out
                shapes[n.id] = ((b,) if len(ins[0]) == 4 else ()) + (out, ho, wo)
        elif n.kind == "linear":
            keep, kept = (True, None) if mask is None else mask.state(n.id)
            if not keep:
                shapes[n.id] = None
            else:
                s = ins[0]
                if len(s) == 1:
                    b, c = 1, s[0]
                elif len(s) == 2:
                    b, c = s
                else:
                    raise ShapeError(f"node {n.id}: linear input must be rank <= 2, got {s}")
                if c > n.attrs["in"]:
                    raise ShapeError(
                        f"node {n.id}: expected <= {n.attrs['in']} input features, got {c}")
                out = n.out_channels if kept is None else kept
                flops = 2 * b * out * c
                params = out * c
                if n.attrs.get("bias"):
                    flops += b * out
                    params += out
                shapes[n.id] = s[:-1] + (out,)
        elif n.kind in ("relu", "sigmoid"):
            shapes[n.id] = ins[0]
            if count_elementwise:
                flops = nelem(ins[0])
        elif n.kind == "flatten":
            s = ins[0]
            if len(s) >= 2:
                shapes[n.id] = (s[0], nelem(s[1:]))
            else:
                shapes[n.id] = s
        elif n.kind == "global_pool":
            b, c, h, w = split_spatial(n.id, ins[0])
            shapes[n.id] = ((b, c) if len(ins[0]) == 4 else (c,))
            if count_elementwise:
                flops = b * c * h * w
        elif n.kind == "pool2d":
            b, c, h, w = split_spatial(n.id, ins[0])
            k, st, pad = n.attrs["kernel"], n.attrs["stride"], n.attrs["pad"]
            ho, wo = _conv_out(h, k, st, pad), _conv_out(w, k, st, pad)
            shapes[n.id] = ((b,) if len(ins[0]) == 4 else ()) + (c, ho, wo)
            if count_elementwise:
                flops = b * c * ho * wo * k * k
        else:
            raise GraphError(f"node {n.id}: unhandled kind {n.kind}")
        if shapes[n.id] is not None or flops or params:
            per_node[n.id] = (flops, params)

    return CostReport(
        flops=sum(f for f, _ in per_node.values()),
        params=sum(p for _, p in per_node.values()),
        per_node=per_node,
        shapes=shapes,
    )


def flops_ratio(graph: CompGraph, arch, input_shape=None) -> float:
    """FLOPs of the arch-masked graph over the unmasked graph."""
    from .arch import arch_to_mask
    mask = arch_to_mask(arch, graph)
    full = estimate_cost(graph, input_shape)
    sub = estimate_cost(graph, input_shape, mask=mask)
    return sub.flops / full.flops


def params_ratio(graph: CompGraph, arch, input_shape=None) -> float:
    from .arch import arch_to_mask
    mask = arch_to_mask(arch, graph)
    full = estimate_cost(graph, input_shape)
    sub = estimate_cost(graph, input_shape, mask=mask)
    return sub.params / full.params

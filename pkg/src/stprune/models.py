"""Bundled model descriptions in stpgraph v1 text.

Residual networks without normalization layers: plain conv/linear, relu,
adds. Every stage's first block carries a projection shortcut so channel
dependency groups never cross stage boundaries.
"""
from __future__ import annotations

import os

from .graph import SPEC_HEADER


class _Builder:
    def __init__(self, input_shape):
        self.lines = [SPEC_HEADER, "input " + " ".join(str(d) for d in input_shape)]
        self.next_id = 0

    def node(self, kind, inputs=(), stage=None, block=None, **attrs):
        nid = self.next_id
        self.next_id += 1
        parts = [f"node {nid} {kind}"]
        if inputs:
            parts.append("inputs=" + ",".join(str(i) for i in inputs))
        for k, v in attrs.items():
            parts.append(f"{k}={v}")
        if stage is not None:
            parts.append(f"stage={stage}")
            parts.append(f"block={block if block is not None else 0}")
        self.lines.append(" ".join(parts))
        return nid

    def text(self):
        return "\n".join(self.lines) + "\n"


def resnet50_cifar_spec(num_classes=100):
    """Bottleneck ResNet-50 (stages of 3, 4, 6, 3 blocks) on 32x32 input.
    The three convs of a block plus the stage projection share the stage's
    width; the stride sits in the middle conv."""
    b = _Builder((3, 32, 32))
    x = b.node("input")
    x = b.node("conv2d", (x,), **{"in": 3, "out": 64, "kernel": 7,
                                  "stride": 2, "pad": 3, "bias": 0})
    x = b.node("relu", (x,))
    x = b.node("pool2d", (x,), kernel=3, stride=2, pad=1)
    stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
    prev = 64
    for s, (planes, blocks, stride) in enumerate(stages):
        out = planes * 4
        for blk in range(blocks):
            st = stride if blk == 0 else 1
            if blk == 0:
                shortcut = b.node("conv2d", (x,), stage=s, block=0,
                                  **{"in": prev, "out": out, "kernel": 1,
                                     "stride": st, "bias": 0})
            else:
                shortcut = x
            y = b.node("conv2d", (x,), stage=s, block=blk,
                       **{"in": prev if blk == 0 else out, "out": planes,
                          "kernel": 1, "bias": 0})
            y = b.node("relu", (y,))
            y = b.node("conv2d", (y,), stage=s, block=blk,
                       **{"in": planes, "out": planes, "kernel": 3,
                          "stride": st, "pad": 1, "bias": 0})
            y = b.node("relu", (y,))
            y = b.node("conv2d", (y,), stage=s, block=blk,
                       **{"in": planes, "out": out, "kernel": 1, "bias": 0})
            x = b.node("add", (y, shortcut))
            x = b.node("relu", (x,))
        prev = out
    x = b.node("global_pool", (x,))
    x = b.node("linear", (x,), **{"in": prev, "out": num_classes, "bias": 1})
    b.node("output", (x,))
    return b.text()


def _residual_cnn_spec(input_shape, stem_out, stages, num_classes):
    """Basic residual CNN: per block one 3x3 conv plus a projection shortcut
    in each stage's first block."""
    b = _Builder(input_shape)
    x = b.node("input")
    x = b.node("conv2d", (x,), **{"in": input_shape[0], "out": stem_out,
                                  "kernel": 3, "pad": 1, "bias": 0})
    x = b.node("relu", (x,))
    prev = stem_out
    for s, (ch, blocks, stride) in enumerate(stages):
        for blk in range(blocks):
            st = stride if blk == 0 else 1
            cin = prev if blk == 0 else ch
            if blk == 0:
                shortcut = b.node("conv2d", (x,), stage=s, block=0,
                                  **{"in": cin, "out": ch, "kernel": 1,
                                     "stride": st, "bias": 0})
            else:
                shortcut = x
            y = b.node("conv2d", (x,), stage=s, block=blk,
                       **{"in": cin, "out": ch, "kernel": 3, "stride": st,
                          "pad": 1, "bias": 0})
            y = b.node("relu", (y,))
            x = b.node("add", (y, shortcut))
        prev = ch
    x = b.node("relu", (x,))
    x = b.node("global_pool", (x,))
    x = b.node("linear", (x,), **{"in": prev, "out": num_classes, "bias": 1})
    b.node("output", (x,))
    return b.text()


def toycnn_spec(num_classes=10):
    """Three-stage residual CNN on 1x8x8 input, desk-scale training target."""
    return _residual_cnn_spec((1, 8, 8), 8,
                              [(8, 2, 1), (16, 2, 2), (32, 2, 2)], num_classes)


def _basic_block_cnn_spec(input_shape, stem_out, stages, num_classes):
    """Residual CNN with two-conv basic blocks. Only the block-internal
    (mid) channels carry a stage/block tag and are prunable; the stage
    output channels and projection shortcuts stay at full width, so no
    parallel path competes with a pruned layer."""
    b = _Builder(input_shape)
    x = b.node("input")
    x = b.node("conv2d", (x,), **{"in": input_shape[0], "out": stem_out,
                                  "kernel": 3, "pad": 1, "bias": 0})
    x = b.node("relu", (x,))
    prev = stem_out
    for s, (ch, blocks, stride) in enumerate(stages):
        for blk in range(blocks):
            st = stride if blk == 0 else 1
            cin = prev if blk == 0 else ch
            if blk == 0 and (st != 1 or cin != ch):
                shortcut = b.node("conv2d", (x,),
                                  **{"in": cin, "out": ch, "kernel": 1,
                                     "stride": st, "bias": 0})
            else:
                shortcut = x
            y = b.node("conv2d", (x,), stage=s, block=blk,
                       **{"in": cin, "out": ch, "kernel": 3, "stride": st,
                          "pad": 1, "bias": 0})
            y = b.node("relu", (y,))
            y = b.node("conv2d", (y,),
                       **{"in": ch, "out": ch, "kernel": 3, "pad": 1,
                          "bias": 0})
            x = b.node("add", (y, shortcut))
            x = b.node("relu", (x,))
        prev = ch
    x = b.node("global_pool", (x,))
    x = b.node("linear", (x,), **{"in": prev, "out": num_classes, "bias": 1})
    b.node("output", (x,))
    return b.text()


def toycnn_basic_spec(num_classes=10):
    """Three-stage basic-block CNN on 1x8x8 input; width pruning acts on
    the block-internal channels only."""
    return _basic_block_cnn_spec((1, 8, 8), 8,
                                 [(8, 3, 1), (16, 3, 2), (32, 3, 2)],
                                 num_classes)


def tinytoy_spec(num_classes=4):
    """Two-stage residual CNN small enough to brute-force its arch space."""
    return _residual_cnn_spec((1, 8, 8), 8,
                              [(8, 2, 1), (16, 2, 2)], num_classes)


def mlp_spec(in_dim=16, hidden=32, num_classes=10):
    """Two-stage MLP: each hidden linear layer is its own one-block stage."""
    b = _Builder((in_dim,))
    x = b.node("input")
    x = b.node("linear", (x,), stage=0, block=0,
               **{"in": in_dim, "out": hidden, "bias": 1})
    x = b.node("relu", (x,))
    x = b.node("linear", (x,), stage=1, block=0,
               **{"in": hidden, "out": hidden, "bias": 1})
    x = b.node("relu", (x,))
    x = b.node("linear", (x,), **{"in": hidden, "out": num_classes, "bias": 1})
    b.node("output", (x,))
    return b.text()


BUNDLED = {
    "resnet50-cifar": resnet50_cifar_spec,
    "toycnn": toycnn_spec,
    "toycnn-basic": toycnn_basic_spec,
    "tinytoy": tinytoy_spec,
    "mlp": mlp_spec,
}


def get_model_spec(name_or_path: str) -> str:
    """Resolve a bundled model name or read a spec file from disk."""
    if name_or_path in BUNDLED:
        return BUNDLED[name_or_path]()
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return fh.read()
    raise FileNotFoundError(
        f"unknown model {name_or_path!r}; bundled models: {sorted(BUNDLED)}")

"""Depth x width architecture space: encoding, masks, FLOPs-aware sampling
and mutating expansion toward larger subnets."""
from __future__ import annotations

import ast
from dataclasses import dataclass

from . import graph as gr

DEFAULT_WIDTH_GRID = (0.3, 0.5, 0.7, 0.9, 1.0)
DEFAULT_BAND = 0.03
SAMPLE_ATTEMPT_CAP = 100_000


class ArchError(Exception):
    pass


class FeasibilityError(ArchError):
    pass


@dataclass(frozen=True)
class WidthGrid:
    ratios: tuple = DEFAULT_WIDTH_GRID

    def __post_init__(self):
        r = self.ratios
        if not r or any(b <= a for a, b in zip(r, r[1:])):
            raise ArchError("width grid must be strictly increasing")
        if r[0] <= 0 or r[-1] != 1.0:
            raise ArchError("width grid must lie in (0, 1] and end at 1.0")

    def at_least(self, w):
        """Grid values >= w (inclusive of w itself if on the grid)."""
        return tuple(v for v in self.ratios if v >= w - 1e-12)


@dataclass(frozen=True)
class ArchSpec:
    """Per-stage retained block counts and width ratios, the nested-tuple
    encoding used in logs and pool checkpoints."""

    depths: tuple
    widths: tuple

    def __post_init__(self):
        if len(self.depths) != len(self.widths):
            raise ArchError("depths and widths must have equal length")
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(float(w) for w in self.widths))

    def to_text(self):
        d = ", ".join(str(v) for v in self.depths)
        w = ", ".join(repr(v) for v in self.widths)
        if len(self.depths) == 1:
            return f"(({d},), ({w},))"
        return f"(({d}), ({w}))"

    @classmethod
    def from_text(cls, text):
        try:
            val = ast.literal_eval(text.strip())
            depths, widths = val
            return cls(tuple(depths), tuple(widths))
        except (ValueError, SyntaxError, TypeError) as e:
            raise ArchError(f"malformed architecture text {text!r}: {e}")

    def validate(self, graph: gr.CompGraph, grid: WidthGrid | None = None):
        sizes = graph.stage_sizes()
        if len(self.depths) != len(sizes):
            raise ArchError(
                f"arch has {len(self.depths)} stages, graph has {len(sizes)}")
        for s, (d, nb) in enumerate(zip(self.depths, sizes)):
            if not 1 <= d <= nb:
                raise ArchError(f"stage {s}: depth {d} outside [1, {nb}]")
        for s, w in enumerate(self.widths):
            if not 0 < w <= 1:
                raise ArchError(f"stage {s}: width {w} outside (0, 1]")
            if grid is not None and all(abs(w - v) > 1e-12 for v in grid.ratios):
                raise ArchError(f"stage {s}: width {w} not on the grid")


def full_arch(graph: gr.CompGraph) -> ArchSpec:
    sizes = graph.stage_sizes()
    return ArchSpec(sizes, (1.0,) * len(sizes))


def round_channels(width: float, channels: int) -> int:
    """Round half up, floored at one surviving channel."""
    if width >= 1.0:
        return channels
    return max(1, int(width * channels + 0.5))


@dataclass(frozen=True)
class LayerMask:
    keep: bool
    channels: int  # kept output channels; full count when the ratio is 1


@dataclass(frozen=True)
class StructMask:
    """Per prunable layer keep flag and kept-channel count. Layers absent
    from the map (pinned layers outside any stage) are fully kept."""

    layers: dict

    def state(self, nid):
        lm = self.layers.get(nid)
        if lm is None:
            return True, None
        if not lm.keep:
            return False, 0
        return True, lm.channels

    def contains(self, other: "StructMask") -> bool:
        if self.layers.keys() != other.layers.keys():
            return False
        for nid, lm in other.layers.items():
            big = self.layers[nid]
            if lm.keep and (not big.keep or big.channels < lm.channels):
                return False
        return True

    def __eq__(self, other):
        return isinstance(other, StructMask) and self.layers == other.layers

    def __hash__(self):
        return hash(tuple(sorted(self.layers.items())))


def arch_to_mask(arch: ArchSpec, graph: gr.CompGraph) -> StructMask:
    """Realize an ArchSpec as a structured mask: the earliest depth[s] blocks
    of each stage survive, kept layers retain a prefix of output channels."""
    arch.validate(graph)
    layers = {}
    for s, blocks in enumerate(graph.stages):
        d = arch.depths[s]
        w = arch.widths[s]
        for bidx, block in enumerate(blocks):
            keep = bidx < d
            for nid in block:
                c = graph.node(nid).out_channels
                layers[nid] = LayerMask(keep, round_channels(w, c) if keep else 0)
    return StructMask(layers)


def contains(big: ArchSpec, small: ArchSpec, graph: gr.CompGraph) -> bool:
    """True iff big's mask keeps a superset of small's layers and channels."""
    return arch_to_mask(big, graph).contains(arch_to_mask(small, graph))


def sample_arch(graph: gr.CompGraph, target_ratio: float, band: float = DEFAULT_BAND,
                rng=None, grid: WidthGrid | None = None, input_shape=None,
                attempt_cap: int = SAMPLE_ATTEMPT_CAP) -> ArchSpec:
    """Rejection-sample an architecture whose FLOPs ratio lies in
    [r(1-band), r(1+band)]."""
    if not 0 < target_ratio <= 1:
        raise ArchError("target ratio must lie in (0, 1]")
    if band <= 0:
        raise ArchError("band must be positive")
    grid = grid or WidthGrid()
    sizes = graph.stage_sizes()
    lo, hi = target_ratio * (1 - band), target_ratio * (1 + band)
    nearest = None
    for _ in range(attempt_cap):
        depths = tuple(int(rng.integers(1, nb + 1)) for nb in sizes)
        widths = tuple(float(grid.ratios[rng.integers(len(grid.ratios))])
                       for _ in sizes)
        arch = ArchSpec(depths, widths)
        r = gr.flops_ratio(graph, arch, input_shape)
        if lo <= r <= hi:
            return arch
        if nearest is None or abs(r - target_ratio) < abs(nearest - target_ratio):
            nearest = r
    raise FeasibilityError(
        f"no architecture with FLOPs ratio in [{lo:.4f}, {hi:.4f}] after "
        f"{attempt_cap} draws; nearest achieved ratio {nearest:.4f}")


def mutate_expand(arch: ArchSpec, graph: gr.CompGraph, rng,
                  grid: WidthGrid | None = None) -> ArchSpec:
    """Per stage, draw a width uniformly from grid values >= the current one
    and a depth uniformly from [current, stage size]. The result always
    contains the input architecture."""
    grid = grid or WidthGrid()
    arch.validate(graph)
    sizes = graph.stage_sizes()
    depths = tuple(int(rng.integers(d, nb + 1))
                   for d, nb in zip(arch.depths, sizes))
    widths = []
    for w in arch.widths:
        choices = grid.at_least(w)
        widths.append(float(choices[rng.integers(len(choices))]))
    return ArchSpec(depths, tuple(widths))


def enumerate_archs(graph: gr.CompGraph, grid: WidthGrid | None = None):
    """All architectures of the (small) space, in lexicographic order."""
    grid = grid or WidthGrid()
    sizes = graph.stage_sizes()

    def rec(s):
        if s == len(sizes):
            yield ((), ())
            return
        for depths, widths in rec(s + 1):
            for d in range(1, sizes[s] + 1):
                for w in grid.ratios:
                    yield ((d,) + depths, (w,) + widths)

    return [ArchSpec(d, w) for d, w in rec(0)]

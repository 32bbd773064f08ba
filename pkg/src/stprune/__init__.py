"""Structured pruning laboratory: graph IR, autodiff, pool-guided training."""

from .arch import ArchSpec, StructMask, WidthGrid, arch_to_mask, sample_arch, mutate_expand
from .graph import CompGraph, CostReport, build_graph, estimate_cost, interpret
from .pool import Pool, init_pool
from .trainer import TrainConfig, run_stp, run_suppressed_baseline, run_standard

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "StructMask", "WidthGrid", "arch_to_mask", "sample_arch",
    "mutate_expand", "CompGraph", "CostReport", "build_graph", "estimate_cost",
    "interpret", "Pool", "init_pool", "TrainConfig", "run_stp",
    "run_suppressed_baseline", "run_standard", "__version__",
]

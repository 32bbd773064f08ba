"""Verification oracles and metrics: magnitude profiles of kept vs dropped
parameters, pool clustering distance, and the closed-form single-layer
distillation gradient with its Taylor-order check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as gr
from .arch import ArchSpec, StructMask
from .pool import Pool
from .trainer import dropped_selectors


@dataclass
class LayerMagnitudes:
    layer: int
    stage: int | None
    chosen_mean: float
    unchosen_mean: float
    baseline_mean: float
    chosen_count: int
    unchosen_count: int


def magnitude_profile(graph: gr.CompGraph, params: dict, mask: StructMask,
                      baseline_params: dict):
    """Per prunable layer: mean |w| over chosen, unchosen, and the whole
    layer of a matched baseline run. Chosen/unchosen partition the weights."""
    dropped = dropped_selectors(graph, mask)
    rows = []
    for n in graph.nodes:
        if n.kind not in ("conv2d", "linear"):
            continue
        name = f"{n.id}.w"
        w = np.abs(params[name])
        if baseline_params[name].shape != w.shape:
            raise ValueError(f"baseline shape mismatch for layer {n.id}")
        sel = dropped[name]
        chosen = w[~sel]
        unchosen = w[sel]
        rows.append(LayerMagnitudes(
            layer=n.id,
            stage=n.stage,
            chosen_mean=float(chosen.mean()) if chosen.size else 0.0,
            unchosen_mean=float(unchosen.mean()) if unchosen.size else 0.0,
            baseline_mean=float(np.abs(baseline_params[name]).mean()),
            chosen_count=int(chosen.size),
            unchosen_count=int(unchosen.size),
        ))
    return rows


def magnitude_profile_csv(rows):
    lines = ["layer,stage,chosen_mean,unchosen_mean,baseline_mean"]
    for r in rows:
        stage = "" if r.stage is None else str(r.stage)
        lines.append(f"{r.layer},{stage},{r.chosen_mean!r},"
                     f"{r.unchosen_mean!r},{r.baseline_mean!r}")
    return "\n".join(lines) + "\n"


def arch_vector(arch: ArchSpec, graph: gr.CompGraph) -> np.ndarray:
    """Fixed-length proxy vector: per-stage depth fractions then widths."""
    arch.validate(graph)
    sizes = graph.stage_sizes()
    depth_frac = [d / nb for d, nb in zip(arch.depths, sizes)]
    return np.asarray(depth_frac + list(arch.widths), dtype=np.float64)


def pool_sse(pool: Pool, graph: gr.CompGraph) -> float:
    """Mean squared distance of entry vectors to their centroid."""
    vecs = np.stack([arch_vector(e.arch, graph) for e in pool.entries])
    center = vecs.mean(axis=0)
    return float(((vecs - center) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# single-layer distillation toy: loss, closed-form gradient, Taylor gap
# ---------------------------------------------------------------------------

@dataclass
class ToyModel:
    theta_s: np.ndarray
    theta_d: np.ndarray
    x_s: np.ndarray
    x_d: np.ndarray

    def __post_init__(self):
        self.theta_s = np.asarray(self.theta_s, dtype=np.float64)
        self.theta_d = np.asarray(self.theta_d, dtype=np.float64)
        self.x_s = np.asarray(self.x_s, dtype=np.float64)
        self.x_d = np.asarray(self.x_d, dtype=np.float64)
        if self.theta_s.shape != self.x_s.shape or self.theta_d.shape != self.x_d.shape:
            raise ValueError("kept/dropped parameter and input lengths disagree")
        if not all(np.isfinite(v).all() for v in
                   (self.theta_s, self.theta_d, self.x_s, self.x_d)):
            raise ValueError("toy model entries must be finite")


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def toy_kd_loss(m: ToyModel) -> float:
    """Squared gap between the full-network and kept-only sigmoids; the full
    term acts as a constant teacher."""
    a = float(m.theta_s @ m.x_s)
    b = float(m.theta_d @ m.x_d)
    return float((_sig(a + b) - _sig(a)) ** 2)


def toy_kd_grad(m: ToyModel) -> np.ndarray:
    """Closed-form d loss / d theta_s with the teacher term held constant."""
    a = float(m.theta_s @ m.x_s)
    b = float(m.theta_d @ m.x_d)
    s = _sig(a)
    return -2.0 * (_sig(a + b) - s) * s * (1.0 - s) * m.x_s


def toy_kd_grad_fd(m: ToyModel, h=1e-5) -> np.ndarray:
    """Central finite differences of toy_kd_loss, teacher held constant."""
    a = float(m.theta_s @ m.x_s)
    b = float(m.theta_d @ m.x_d)
    teacher = _sig(a + b)
    g = np.zeros_like(m.theta_s)
    for i in range(len(m.theta_s)):
        tp = m.theta_s.copy(); tp[i] += h
        tm = m.theta_s.copy(); tm[i] -= h
        lp = (teacher - _sig(float(tp @ m.x_s))) ** 2
        lm = (teacher - _sig(float(tm @ m.x_s))) ** 2
        g[i] = (lp - lm) / (2 * h)
    return g


def taylor_gap(m: ToyModel) -> float:
    """Absolute remainder of the first-order expansion of the sigmoid gap
    around the kept-only pre-activation."""
    a = float(m.theta_s @ m.x_s)
    b = float(m.theta_d @ m.x_d)
    s = _sig(a)
    return float(abs((_sig(a + b) - s) - s * (1.0 - s) * b))


def halve_dropped(m: ToyModel) -> ToyModel:
    return ToyModel(m.theta_s, m.theta_d / 2.0, m.x_s, m.x_d)

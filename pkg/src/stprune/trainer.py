"""Training loops: the pool-guided self-distillation pruner, the L2
suppressed-sparsification baseline, plain training, and compact-network
extraction. All runs are pure functions of their config."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import graph as gr
from . import models
from .arch import (ArchSpec, StructMask, WidthGrid, arch_to_mask, full_arch,
                   mutate_expand)
from .data import Dataset, gen_gaussian_clusters, iter_batches, load_csv
from .pool import Pool, init_pool, sample_from_pool, shrink, update_score


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    model: str = "toycnn"
    T_total: int = 2000
    k: int = 100
    T_shr: int = 1500
    N_p: int = 16
    alpha: float = 0.3
    beta1: float = 1.0
    beta2: float = 1.0
    target_ratio: float = 0.15
    band: float = 0.03
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    n_support: int = 1
    batch_size: int = 16
    num_classes: int = 10
    dataset: str = "gaussian"   # "gaussian" or a CSV path prefix
    data_n: int = 2000
    data_spread: float = 1.0
    width_grid: str = "0.3,0.5,0.7,0.9,1.0"
    penalty_lambda: float = 0.01
    literal_ema: int = 0
    fixed_arch: str = ""        # baselines: nested-tuple text, sampled if empty

    def __post_init__(self):
        if self.T_shr > self.T_total:
            raise ConfigError("T_shr must be <= T_total")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta coefficients must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_support < 1:
            raise ConfigError("n_support must be >= 1")
        if self.N_p < 1:
            raise ConfigError("N_p must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.target_ratio <= 1:
            raise ConfigError("target_ratio must lie in (0, 1]")
        if self.band <= 0:
            raise ConfigError("band must be positive")

    def grid(self):
        return WidthGrid(tuple(float(v) for v in self.width_grid.split(",")))

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        typed = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            typed[f.name] = _coerce(v, f.default)
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cls(**typed)

    @classmethod
    def from_file(cls, path, overrides=None):
        d = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                d[key] = val
        d.update(overrides or {})
        return cls.from_dict(d)

    def to_text(self):
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _coerce(v, default):
    if isinstance(default, bool):
        return bool(int(v))
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return str(v)


@dataclass
class RunResult:
    config: TrainConfig
    graph: gr.CompGraph
    params: dict
    final_arch: ArchSpec | None
    pruned_graph: gr.CompGraph | None
    pruned_params: dict | None
    log: list
    pool: Pool | None
    pool_history: list = field(default_factory=list)
    init_params: dict | None = None


# ---------------------------------------------------------------------------
# setup helpers
# ---------------------------------------------------------------------------

def _streams(seed):
    """Independent deterministic streams so pool-side draws never perturb
    data order or parameter init across run variants."""
    ss = np.random.SeedSequence(seed)
    init_s, data_s, pool_s, eval_s = ss.spawn(4)
    return (np.random.default_rng(init_s), np.random.default_rng(data_s),
            np.random.default_rng(pool_s), np.random.default_rng(eval_s))


def build_model(cfg: TrainConfig) -> gr.CompGraph:
    if cfg.model in models.BUNDLED:
        text = models.BUNDLED[cfg.model](num_classes=cfg.num_classes)
    else:
        text = models.get_model_spec(cfg.model)
    return gr.build_graph(text)


def load_dataset(cfg: TrainConfig, graph: gr.CompGraph):
    if cfg.dataset == "gaussian":
        return gen_gaussian_clusters(cfg.num_classes, cfg.data_n,
                                     graph.input_shape, cfg.data_spread,
                                     seed=cfg.seed + 7919)
    train = load_csv(cfg.dataset + ".train.csv", graph.input_shape, cfg.num_classes)
    test = load_csv(cfg.dataset + ".test.csv", graph.input_shape, cfg.num_classes)
    return train, test


class _BatchSource:
    """Seed-deterministic endless batch stream over epochs."""

    def __init__(self, dataset: Dataset, batch_size, rng):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self._iter = iter(())

    def next(self):
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = iter_batches(self.dataset, self.batch_size, self.rng)
            return next(self._iter)


def evaluate(graph, params, dataset, mask=None, batch=256):
    correct = 0
    for start in range(0, len(dataset), batch):
        x = ad.Tensor(dataset.features[start:start + batch])
        out, _ = gr.interpret(graph, x, mask=mask, params=params)
        pred = out.values.argmax(axis=1)
        correct += int((pred == dataset.labels[start:start + batch]).sum())
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# the pruning training loop
# ---------------------------------------------------------------------------

def train_step(graph, params, opt, pool, batch, cfg, pool_rng, t, grid):
    """One iteration: main cross-entropy, target-subnet and mutated-subnet
    distillation, a single combined backward, one optimizer step, and the
    scheduled pool refinement."""
    xb, yb = batch
    tape = ad.Tape()
    ptens = {name: ad.Tensor(v, requires_grad=True) for name, v in params.items()}
    x = ad.Tensor(xb)

    z_main, _ = gr.interpret(graph, x, params=None, param_tensors=ptens, tape=tape)
    l_ce = ad.cross_entropy(z_main, yb, tape)
    teacher = z_main.detach()

    idx, target = sample_from_pool(pool, pool_rng)
    z_tar, _ = gr.interpret(graph, x, mask=arch_to_mask(target, graph),
                            param_tensors=ptens, tape=tape)
    l_sts = ad.normalized_kl(teacher, z_tar, tape)
    update_score(pool, idx, float(l_sts.values))

    l_sme = None
    for _ in range(cfg.n_support):
        support = mutate_expand(target, graph, pool_rng, grid)
        z_sup, _ = gr.interpret(graph, x, mask=arch_to_mask(support, graph),
                                param_tensors=ptens, tape=tape)
        term = ad.normalized_kl(teacher, z_sup, tape)
        l_sme = term if l_sme is None else ad.add(l_sme, term, tape)
    l_sme = ad.scale(l_sme, 1.0 / cfg.n_support, tape)

    total = ad.add(l_ce, ad.add(ad.scale(l_sts, cfg.beta1, tape),
                                ad.scale(l_sme, cfg.beta2, tape), tape), tape)
    if not np.isfinite(total.values):
        raise FloatingPointError(
            f"non-finite loss at step {t}: CE={float(l_ce.values)} "
            f"STS={float(l_sts.values)} SME={float(l_sme.values)}")
    tape.backward(total)
    grads = {name: (tt.grad if tt.grad is not None else np.zeros_like(tt.values))
             for name, tt in ptens.items()}
    lr = ad.cosine_lr(t, cfg.T_total, cfg.lr0)
    ad.sgd_step(params, grads, opt, lr)

    removed = []
    if t % cfg.k == 0 and t <= cfg.T_shr:
        removed = shrink(pool, pool.N_shr, pool_rng)

    return {
        "t": t, "lr": lr,
        "L_CE": float(l_ce.values), "L_STS": float(l_sts.values),
        "L_SME": float(l_sme.values), "L_total": float(total.values),
        "pool_size": len(pool), "sampled_arch": target.to_text(),
        "removed": len(removed),
    }


def run_stp(cfg: TrainConfig, pool_snapshot_hook=None) -> RunResult:
    graph = build_model(cfg)
    init_rng, data_rng, pool_rng, _ = _streams(cfg.seed)
    params = gr.init_params(graph, init_rng)
    params0 = {k: v.copy() for k, v in params.items()}
    train, _test = load_dataset(cfg, graph)
    grid = cfg.grid()
    pool = init_pool(cfg.N_p, graph, cfg.target_ratio, cfg.band, pool_rng,
                     alpha=cfg.alpha, k=cfg.k, T_shr=cfg.T_shr, grid=grid)
    pool.literal_ema = bool(cfg.literal_ema)
    opt = ad.OptimState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    batches = _BatchSource(train, cfg.batch_size, data_rng)
    log = []
    history = []
    for t in range(1, cfg.T_total + 1):
        rec = train_step(graph, params, opt, pool, batches.next(), cfg,
                         pool_rng, t, grid)
        log.append(rec)
        if t % cfg.k == 0:
            history.append((t, pool.to_json()))
            if pool_snapshot_hook is not None:
                pool_snapshot_hook(t, pool)
    assert len(pool) == 1, "pool did not converge to a single architecture"
    final = pool.entries[0].arch
    pruned_graph, pruned_params = extract_pruned(graph, params, final)
    return RunResult(cfg, graph, params, final, pruned_graph, pruned_params,
                     log, pool, history, params0)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _resolve_fixed_arch(cfg, graph, pool_rng, grid):
    from .arch import sample_arch
    if cfg.fixed_arch:
        arch = ArchSpec.from_text(cfg.fixed_arch)
        arch.validate(graph)
        return arch
    return sample_arch(graph, cfg.target_ratio, cfg.band, pool_rng, grid=grid)


def _dropped_norm(params, dropped_sel):
    total = 0.0
    for name, sel in dropped_sel.items():
        total += float((params[name][sel] ** 2).sum())
    return np.sqrt(total)


def dropped_selectors(graph: gr.CompGraph, mask: StructMask):
    """Boolean selectors marking parameters outside the mask, per array."""
    full = gr.estimate_cost(graph, mask=None)
    masked_shapes = gr.estimate_cost(graph, mask=mask).shapes
    sel = {}
    for n in graph.nodes:
        if n.kind not in ("conv2d", "linear"):
            continue
        keep, kept = mask.state(n.id)
        in_full = full.shapes[n.inputs[0]]
        in_masked = masked_shapes.get(n.inputs[0])
        cin_full = in_full[-3] if len(in_full) >= 3 else in_full[-1]
        if in_masked is None:
            cin_kept = 0
        else:
            cin_kept = in_masked[-3] if len(in_masked) >= 3 else in_masked[-1]
        out_full = n.out_channels
        out_kept = 0 if not keep else (out_full if kept is None else kept)
        wname = f"{n.id}.w"
        wshape = (out_full, cin_full) if n.kind == "linear" else None
        m = np.ones((out_full, cin_full), dtype=bool) if wshape else \
            np.ones((out_full, cin_full, n.attrs["kernel"], n.attrs["kernel"]),
                    dtype=bool)
        m[:out_kept, :cin_kept] = False
        sel[wname] = m
        bname = f"{n.id}.b"
        if n.attrs.get("bias"):
            bm = np.ones(out_full, dtype=bool)
            bm[:out_kept] = False
            sel[bname] = bm
    return sel


def run_suppressed_baseline(cfg: TrainConfig) -> RunResult:
    """Plain training plus an L2 pull toward zero on parameters outside a
    fixed architecture's mask; pruned to that architecture at the end."""
    graph = build_model(cfg)
    init_rng, data_rng, pool_rng, _ = _streams(cfg.seed)
    params = gr.init_params(graph, init_rng)
    params0 = {k: v.copy() for k, v in params.items()}
    train, _test = load_dataset(cfg, graph)
    grid = cfg.grid()
    arch = _resolve_fixed_arch(cfg, graph, pool_rng, grid)
    mask = arch_to_mask(arch, graph)
    dropped = dropped_selectors(graph, mask)
    lam = cfg.penalty_lambda
    opt = ad.OptimState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    batches = _BatchSource(train, cfg.batch_size, data_rng)
    log = []
    for t in range(1, cfg.T_total + 1):
        xb, yb = batches.next()
        tape = ad.Tape()
        ptens = {name: ad.Tensor(v, requires_grad=True)
                 for name, v in params.items()}
        out, _ = gr.interpret(graph, ad.Tensor(xb), param_tensors=ptens, tape=tape)
        l_ce = ad.cross_entropy(out, yb, tape)
        tape.backward(l_ce)
        grads = {}
        for name, tt in ptens.items():
            g = tt.grad if tt.grad is not None else np.zeros_like(tt.values)
            sel = dropped.get(name)
            if sel is not None and lam:
                g = g + lam * params[name] * sel
            grads[name] = g
        lr = ad.cosine_lr(t, cfg.T_total, cfg.lr0)
        ad.sgd_step(params, grads, opt, lr)
        rec = {"t": t, "lr": lr, "L_CE": float(l_ce.values),
               "L_STS": 0.0, "L_SME": 0.0, "L_total": float(l_ce.values),
               "pool_size": 1, "sampled_arch": arch.to_text(), "removed": 0}
        if t % cfg.k == 0 or t == cfg.T_total:
            rec["dropped_norm"] = _dropped_norm(params, dropped)
        log.append(rec)
    pruned_graph, pruned_params = extract_pruned(graph, params, arch)
    return RunResult(cfg, graph, params, arch, pruned_graph, pruned_params,
                     log, None, [], params0)


def run_standard(cfg: TrainConfig) -> RunResult:
    """Plain cross-entropy training; the seed-matched reference run."""
    return run_suppressed_baseline(replace(cfg, penalty_lambda=0.0))


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def extract_pruned(graph: gr.CompGraph, params: dict, arch: ArchSpec):
    """Materialize the compact network: skipped blocks dropped, channel dims
    reduced, weights sliced to the kept rows and kept input columns."""
    mask = arch_to_mask(arch, graph)
    full = gr.estimate_cost(graph)
    full_shapes = full.shapes

    kept_idx = {}    # old node id -> kept output feature/channel indices
    new_nodes = []
    new_params = {}
    new_of = {}      # old node id -> new node id, or None if dropped
    next_id = [0]

    def emit(kind, inputs, attrs, stage=None, block=None):
        nid = next_id[0]
        next_id[0] += 1
        new_nodes.append(gr.GraphNode(nid, kind, tuple(inputs), dict(attrs),
                                      stage, block))
        return nid

    for n in graph.nodes:
        ins = [new_of.get(i) for i in n.inputs]
        if n.kind == "input":
            c = full_shapes[n.id][0] if len(full_shapes[n.id]) >= 3 \
                else full_shapes[n.id][-1]
            kept_idx[n.id] = np.arange(c)
            new_of[n.id] = emit("input", (), {})
        elif n.kind == "output":
            if ins[0] is None:
                raise gr.GraphError("output has no surviving input")
            new_of[n.id] = emit("output", (ins[0],), {})
        elif n.kind == "add":
            alive = [(old, new) for old, new in zip(n.inputs, ins)
                     if new is not None]
            if not alive:
                new_of[n.id] = None
                continue
            kept_idx[n.id] = kept_idx[alive[0][0]]
            if len(alive) == 1:
                new_of[n.id] = alive[0][1]
            else:
                new_of[n.id] = emit("add", [new for _, new in alive], {})
        elif n.kind == "concat":
            if any(i is None for i in ins):
                raise gr.GraphError(f"node {n.id}: concat input was dropped")
            parts = []
            off = 0
            for old in n.inputs:
                parts.append(kept_idx[old] + off)
                s = full_shapes[old]
                off += s[-3] if len(s) >= 3 else s[-1]
            kept_idx[n.id] = np.concatenate(parts)
            new_of[n.id] = emit("concat", ins, {})
        elif n.kind in ("conv2d", "linear"):
            keep, kept = mask.state(n.id)
            if ins[0] is None or not keep:
                new_of[n.id] = None
                continue
            out_kept = n.out_channels if kept is None else kept
            cols = kept_idx[n.inputs[0]]
            w = params[f"{n.id}.w"][:out_kept][:, cols]
            attrs = dict(n.attrs)
            attrs["in"] = len(cols)
            attrs["out"] = out_kept
            nid = emit(n.kind, (ins[0],), attrs, n.stage, n.block)
            new_params[f"{nid}.w"] = w.copy()
            if n.attrs.get("bias"):
                new_params[f"{nid}.b"] = params[f"{n.id}.b"][:out_kept].copy()
            kept_idx[n.id] = np.arange(out_kept)
            new_of[n.id] = nid
        elif n.kind == "flatten":
            if ins[0] is None:
                new_of[n.id] = None
                continue
            s = full_shapes[n.inputs[0]]
            if len(s) >= 3:
                hw = s[-2] * s[-1]
                kept_idx[n.id] = np.concatenate(
                    [c * hw + np.arange(hw) for c in kept_idx[n.inputs[0]]]) \
                    if len(kept_idx[n.inputs[0]]) else np.arange(0)
            else:
                kept_idx[n.id] = kept_idx[n.inputs[0]]
            new_of[n.id] = emit("flatten", (ins[0],), {})
        else:   # relu, sigmoid, global_pool, pool2d
            if ins[0] is None:
                new_of[n.id] = None
                continue
            kept_idx[n.id] = kept_idx[n.inputs[0]]
            new_of[n.id] = emit(n.kind, (ins[0],), dict(n.attrs), n.stage, n.block)

    new_graph = gr.build_graph_from_nodes(new_nodes, graph.input_shape)
    return new_graph, new_params


# ---------------------------------------------------------------------------
# weight checkpoints: raw little-endian float64 blob + JSON manifest
# ---------------------------------------------------------------------------

def save_weights(params: dict, bin_path, manifest_path):
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": "stp-weights-v1", "dtype": "<f8",
                "byte_order": "little", "total_bytes": offset,
                "entries": entries}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_weights(bin_path, manifest_path) -> dict:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "stp-weights-v1":
        raise ValueError("unrecognized weight manifest format")
    params = {}
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError("weight blob size disagrees with manifest")
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(
            e["shape"]).copy()
    return params

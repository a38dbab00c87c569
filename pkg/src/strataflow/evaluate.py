"""Distribution distances, attention diagnostics, and benchmarking."""

import time
from dataclasses import dataclass

import numpy as np

from . import data, flow, tensor
from .attention import head_gate, map_similarity
from .errors import ContractError
from .flow import SamplerConfig, tau_of_t
from .rng import named_rng
from .schedule import route
from .tensor import Tensor

N_PROJECTIONS = 128
GATE_TAU_STRIDE = 10


def _flat64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1) if x.ndim != 2 else x


def sliced_w2(a, b, n_proj: int, rng) -> float:
    """Mean 1-D 2-Wasserstein distance over random unit projections.

    Sets of unequal size are compared at the midpoint quantiles of the
    larger count; equal sizes reduce to a sorted pairing.
    """
    a, b = _flat64(a), _flat64(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"sample dims differ: {a.shape[1]} vs {b.shape[1]}")
    if n_proj < 1:
        raise ContractError(f"need at least one projection, got {n_proj}")
    dirs = rng.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if a.shape[0] != b.shape[0]:
        m = max(a.shape[0], b.shape[0])
        q = (np.arange(m) + 0.5) / m
        pa = np.quantile(pa, q, axis=0)
        pb = np.quantile(pb, q, axis=0)
    w2 = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(w2.mean())


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def median_bandwidth(x) -> float:
    """Median pairwise distance of one set; the usual RBF heuristic."""
    x = _flat64(x)
    if x.shape[0] < 2:
        raise ContractError("bandwidth heuristic needs at least two samples")
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.sqrt(np.median(_pairwise_sq(x, x)[iu])))
    return med if med > 0 else 1.0


def mmd_rbf(a, b, bandwidth: float) -> float:
    """Unbiased squared MMD with kernel exp(-|x-y|^2 / 2s^2), clamped at 0."""
    if bandwidth <= 0:
        raise ContractError(f"bandwidth must be positive, got {bandwidth}")
    a, b = _flat64(a), _flat64(b)
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ContractError("unbiased estimate needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"sample dims differ: {a.shape[1]} vs {b.shape[1]}")
    s2 = 2.0 * bandwidth * bandwidth
    kaa = np.exp(-_pairwise_sq(a, a) / s2)
    kbb = np.exp(-_pairwise_sq(b, b) / s2)
    kab = np.exp(-_pairwise_sq(a, b) / s2)
    est = ((kaa.sum() - m) / (m * (m - 1))
           + (kbb.sum() - n) / (n * (n - 1))
           - 2.0 * kab.mean())
    return float(max(est, 0.0))


@dataclass
class EvalReport:
    sliced_w2: float
    mmd_rbf: float
    per_class: dict
    n_samples: int
    num_steps: int
    guidance_scale: float
    layer_executions: int
    wall_ms_per_sample: float

    def to_text(self) -> str:
        lines = [
            f"sliced_w2 = {self.sliced_w2:.6g}",
            f"mmd_rbf = {self.mmd_rbf:.6g}",
        ]
        lines += [f"per_class[{c}] = {self.per_class[c]:.6g}"
                  for c in sorted(self.per_class)]
        lines += [
            f"n_samples = {self.n_samples}",
            f"num_steps = {self.num_steps}",
            f"guidance_scale = {self.guidance_scale:.6g}",
            f"layer_executions = {self.layer_executions}",
            f"wall_ms_per_sample = {self.wall_ms_per_sample:.6g}",
        ]
        return "\n".join(lines) + "\n"


def _distances(gen_x, gen_labels, real_x, real_labels, classes, n_proj, seed):
    w2 = sliced_w2(gen_x, real_x, n_proj, named_rng(seed, "eval.proj"))
    mmd = mmd_rbf(gen_x, real_x, median_bandwidth(real_x))
    per_class = {}
    for c in range(classes):
        ga = gen_x[gen_labels == c]
        rb = real_x[real_labels == c]
        if len(ga) and len(rb):
            per_class[c] = sliced_w2(ga, rb, n_proj, named_rng(seed, f"eval.proj.{c}"))
    return w2, mmd, per_class


def evaluate_sets(gen_x, gen_labels, real_x, real_labels, classes: int,
                  n_proj: int = N_PROJECTIONS, seed: int = 0) -> EvalReport:
    """Score one sample set against another without touching a model."""
    gen_x, real_x = _flat64(gen_x), _flat64(real_x)
    w2, mmd, per_class = _distances(gen_x, np.asarray(gen_labels),
                                    real_x, np.asarray(real_labels),
                                    classes, n_proj, seed)
    return EvalReport(w2, mmd, per_class, gen_x.shape[0], 0, 0.0, 0, 0.0)


def evaluate_model(model, spec: data.DatasetSpec, sampler: SamplerConfig,
                   n_samples: int, seed: int = 0,
                   n_proj: int = N_PROJECTIONS) -> EvalReport:
    """Sample the model and score it against the held-out eval split.

    The model operates on normalized data, so samples are mapped back to
    data units before any distance is computed.
    """
    if n_samples < 1:
        raise ContractError(f"need at least one sample, got {n_samples}")
    labels = (np.arange(n_samples) % spec.classes).astype(np.int64)
    model.reset_layer_executions()
    t0 = time.perf_counter()
    gen = flow.sample(model, labels, sampler, named_rng(seed, "eval.noise"))
    wall_ms = (time.perf_counter() - t0) * 1000.0
    execs = model.layer_executions
    gen = data.denormalize(gen, spec).reshape(n_samples, -1)
    real_x, real_labels = data.batch(spec, data.eval_indices(spec))
    real_x = real_x.reshape(real_x.shape[0], -1)
    w2, mmd, per_class = _distances(gen, labels, real_x, real_labels,
                                    spec.classes, n_proj, seed)
    return EvalReport(w2, mmd, per_class, n_samples, sampler.num_steps,
                      sampler.guidance_scale, execs, wall_ms / n_samples)


def _fmt(v: float) -> str:
    return f"{v:.8g}"


def analyze_similarity(model, schedule, sampler: SamplerConfig, n_samples: int,
                       seed: int = 0) -> str:
    """CSV of adjacent-layer attention overlap along a sampling trajectory.

    One row per (timestep, adjacent layer pair, head), aggregated over the
    batch and over query rows. Pairs outside the step's active group carry
    no value; the trailing column repeats the across-head mean of the pair.
    """
    sampler.validate()
    cfg = model.config
    labels = (np.arange(n_samples) % cfg.num_classes).astype(np.int64)
    rng = named_rng(seed, "analyze.similarity")
    x = rng.standard_normal(
        (n_samples, cfg.num_tokens, cfg.latent_dim)
    ).astype(np.float32)
    guided = sampler.guidance_scale != 1.0
    dt = 1.0 / sampler.num_steps
    rows = ["timestep,layer_pair,head,mean_S,head_mean"]
    with tensor.no_grad():
        cond = model.begin_context(labels)
        uncond = model.null_context(n_samples) if guided else None
        for i in range(sampler.num_steps):
            tau = tau_of_t(i / sampler.num_steps, schedule.total_steps)
            k = route(tau, schedule)
            v_c, maps = model.expert_forward(k, Tensor(x), tau, cond,
                                             collect_maps=True)
            v = v_c.data
            if guided:
                v_u = model.expert_forward(k, Tensor(x), tau, uncond).data
                v = v_u + sampler.guidance_scale * (v - v_u)
            layers = schedule.layer_map[k]
            sims = {}
            for j in range(len(layers) - 1):
                s = map_similarity(maps[j].data, maps[j + 1].data)
                sims[layers[j]] = s.mean(axis=(0, 2))
            for lo in range(cfg.num_layers - 1):
                pair = f"{lo}-{lo + 1}"
                if lo in sims:
                    per_head = sims[lo]
                    hm = _fmt(float(per_head.mean()))
                    rows += [f"{_fmt(tau)},{pair},{h},{_fmt(float(per_head[h]))},{hm}"
                             for h in range(cfg.num_heads)]
                else:
                    rows += [f"{_fmt(tau)},{pair},{h},,"
                             for h in range(cfg.num_heads)]
            x = x + dt * v
    return "\n".join(rows) + "\n"


def analyze_gates(model, schedule=None, stride: int = GATE_TAU_STRIDE) -> str:
    """CSV of every residual gate over a uniform tau grid.

    Slots without a gate (group-start layers, gateless builds) stay empty
    so downstream plots keep a full layer x tau grid.
    """
    schedule = schedule or model.schedule
    cfg = model.config
    taus = range(0, schedule.total_steps + 1, stride)
    params = model.named_parameters()
    by_tau = {}
    with tensor.no_grad():
        for tau in taus:
            h = model.time_embedding(float(tau))
            for i in range(cfg.num_layers):
                w = params.get(f"layers.{i}.gate")
                if w is not None:
                    by_tau[(i, tau)] = head_gate(h, w).data
    rows = ["layer,head,tau,gate"]
    for i in range(cfg.num_layers):
        for hd in range(cfg.num_heads):
            for tau in taus:
                g = by_tau.get((i, tau))
                val = "" if g is None else _fmt(float(g[hd]))
                rows.append(f"{i},{hd},{tau},{val}")
    return "\n".join(rows) + "\n"


@dataclass
class BenchReport:
    expert_ms: float
    vanilla_ms: float
    speedup: float
    expert_layer_execs: int
    vanilla_layer_execs: int
    exec_ratio: float

    def to_text(self) -> str:
        return (
            f"expert_ms_per_sample = {self.expert_ms:.6g}\n"
            f"vanilla_ms_per_sample = {self.vanilla_ms:.6g}\n"
            f"speedup = {self.speedup:.6g}\n"
            f"expert_layer_executions = {self.expert_layer_execs}\n"
            f"vanilla_layer_executions = {self.vanilla_layer_execs}\n"
            f"execution_ratio = {self.exec_ratio:.6g}\n"
        )


def bench(model_expert, model_vanilla, sampler: SamplerConfig, n: int,
          seed: int = 0) -> BenchReport:
    """Median per-sample wall clock, expert vs full-depth baseline.

    Also reports instrumented layer executions per run per guidance
    branch; their ratio equals the group count independent of timing.
    """
    ce, cv = model_expert.config, model_vanilla.config
    if (ce.num_layers, ce.model_dim, ce.num_heads, ce.num_tokens) != (
            cv.num_layers, cv.model_dim, cv.num_heads, cv.num_tokens):
        raise ContractError("benchmark models must share depth, width, heads, tokens")
    if cv.num_groups != 1:
        raise ContractError("baseline model must route every step to one group")
    if n < 1:
        raise ContractError(f"need at least one timed run, got {n}")
    branches = 2 if sampler.guidance_scale != 1.0 else 1

    def run(model, tag):
        times = []
        for r in range(n + 1):  # first run warms caches and is dropped
            rng = named_rng(seed, f"bench.{tag}.{r}")
            ids = rng.integers(model.config.num_classes, size=1).astype(np.int64)
            t0 = time.perf_counter()
            flow.sample(model, ids, sampler, rng)
            elapsed = (time.perf_counter() - t0) * 1000.0
            if r > 0:
                times.append(elapsed)
        return float(np.median(times))

    model_expert.reset_layer_executions()
    expert_ms = run(model_expert, "expert")
    e_execs = model_expert.layer_executions // ((n + 1) * branches)
    model_vanilla.reset_layer_executions()
    vanilla_ms = run(model_vanilla, "vanilla")
    v_execs = model_vanilla.layer_executions // ((n + 1) * branches)
    return BenchReport(expert_ms, vanilla_ms, vanilla_ms / expert_ms,
                       e_execs, v_execs, v_execs / e_execs)

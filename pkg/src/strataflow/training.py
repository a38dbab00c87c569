"""The optimization loop: group-first timestep sampling, condition
dropout, Adam, and run management.

Every step draws one (group, t) pair for the whole batch, so exactly one
expert group receives gradient per step and every other parameter tensor
is bitwise untouched. All per-step randomness comes from a counter-based
stream keyed by the step index, which makes the loss trajectory a pure
function of (configs, seed) and lets a resumed run reproduce the
uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, tensor, textkv
from .errors import CheckpointError, ConfigError, NumericError
from .flow import cfm_loss, make_flow_sample
from .model import ConditioningCache, Model, save_model
from .rng import indexed_rng
from .schedule import sample_train_timestep
from .tensor import Tensor


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_drop_prob: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0  # 0 means final checkpoint only

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ConfigError(
                f"cond_drop_prob must be in [0, 1], got {self.cond_drop_prob}"
            )
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("cadences must be non-negative")

    def to_text(self) -> str:
        return textkv.to_text(self)

    @staticmethod
    def from_text(text: str) -> "TrainConfig":
        return textkv.from_text(TrainConfig, text)


class Adam:
    """Adam with per-parameter step counts.

    A group's parameters only see gradients on the steps its group is
    drawn, so bias correction tracks each tensor's own update count;
    moments are allocated on first use.
    """

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.lr = cfg.lr
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.eps = cfg.adam_eps
        self.state: dict = {}

    def apply(self, grads: dict) -> None:
        """Update exactly the parameters named in grads, then clear grads."""
        for name, g in grads.items():
            p = self.params[name]
            if name not in self.state:
                self.state[name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            st = self.state[name]
            st[2] += 1
            st[0] = self.beta1 * st[0] + (1.0 - self.beta1) * g
            st[1] = self.beta2 * st[1] + (1.0 - self.beta2) * g * g
            mhat = st[0] / (1.0 - self.beta1 ** st[2])
            vhat = st[1] / (1.0 - self.beta2 ** st[2])
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.zero_grad()


def save_optimizer(opt: Adam, step: int, path) -> None:
    arrays = {"step": np.asarray(step, dtype=np.int64)}
    for name, (m, v, t) in opt.state.items():
        arrays[f"m:{name}"] = m
        arrays[f"v:{name}"] = v
        arrays[f"t:{name}"] = np.asarray(t, dtype=np.int64)
    np.savez(path, **arrays)


def load_optimizer(opt: Adam, path) -> int:
    """Restore moments into opt; returns the stored step count."""
    with np.load(path) as z:
        names = {k[2:] for k in z.files if k.startswith("m:")}
        stray = names - set(opt.params)
        if stray:
            raise CheckpointError(f"{path}: optimizer state for unknown parameters: {sorted(stray)}")
        for name in names:
            opt.state[name] = [z[f"m:{name}"].copy(), z[f"v:{name}"].copy(),
                               int(z[f"t:{name}"])]
        return int(z["step"])


def apply_condition_dropout(labels: np.ndarray, prob: float, null_id: int, rng):
    """Per-sample label replacement by the null condition id."""
    drop = rng.random(labels.shape[0]) < prob
    return np.where(drop, null_id, labels)


def _grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def train_step(model: Model, opt: Adam, x1: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, rng, ctx_bank: ConditioningCache | None = None,
               step: int = -1) -> dict:
    """One optimization step on one expert group.

    x1 is a clean data batch (already normalized). When ctx_bank holds
    context states for all ids (couple variant: the pathway is frozen, so
    they are computed once per run), the step gathers rows instead of
    rerunning the context forward.
    """
    k, t = sample_train_timestep(model.schedule, rng)
    tau = (1.0 - t) * model.schedule.total_steps
    ids = apply_condition_dropout(labels, cfg.cond_drop_prob,
                                  model.config.num_classes, rng)
    fs = make_flow_sample(x1, t, rng)

    with tensor.new_tape():
        if ctx_bank is not None:
            cache = ConditioningCache(
                ids=ids, states=[Tensor(s.data[ids]) for s in ctx_bank.states]
            )
        else:
            cache = model.begin_context(ids)
        v = model.expert_forward(k, Tensor(fs.x_t), tau, cache)
        loss = cfm_loss(v, fs.target)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(
                f"non-finite loss at step {step}: group={k}, tau={tau:.3f}, "
                f"grad_norm=not computed"
            )
        tensor.backward(loss)

    grads = {name: p.grad for name, p in model.trainable_parameters().items()
             if p.grad is not None}
    norm = _grad_norm(grads)
    if not np.isfinite(norm):
        raise NumericError(
            f"non-finite gradient at step {step}: group={k}, tau={tau:.3f}, "
            f"loss={loss_val:.6f}, grad_norm={norm}"
        )
    if norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    opt.apply(grads)
    for p in model.trainable_parameters().values():
        p.zero_grad()
    return {"loss": loss_val, "group": k, "grad_norm": norm, "tau": tau}


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    manifest: Path
    steps: int
    final_loss: float


def manifest_text(model_cfg, train_cfg: TrainConfig, spec: data.DatasetSpec,
                  schedule) -> str:
    """All configs and the schedule, flattened into one canonical dump."""
    parts = []
    for tag, text in (("model", model_cfg.to_text()), ("train", train_cfg.to_text()),
                      ("data", spec.to_text()), ("schedule", schedule.to_text())):
        parts.extend(f"{tag}.{line}" for line in text.strip().splitlines())
    return "\n".join(parts) + "\n"


def _eval_loss(model: Model, spec: data.DatasetSpec, cfg: TrainConfig,
               step: int, ctx_bank) -> float:
    """Validation flow-matching loss on a held-out batch, off the tape."""
    rng = indexed_rng(cfg.seed, "train.eval", step)
    pool = data.eval_indices(spec)
    idx = pool.start + rng.integers(len(pool), size=min(cfg.batch_size, len(pool)))
    x1, labels = data.batch(spec, idx)
    x1 = data.normalize(x1, spec)
    k, t = sample_train_timestep(model.schedule, rng)
    tau = (1.0 - t) * model.schedule.total_steps
    fs = make_flow_sample(x1, t, rng)
    with tensor.no_grad():
        if ctx_bank is not None:
            cache = ConditioningCache(
                ids=labels, states=[Tensor(s.data[labels]) for s in ctx_bank.states]
            )
        else:
            cache = model.begin_context(labels)
        v = model.expert_forward(k, Tensor(fs.x_t), tau, cache)
        return cfm_loss(v, fs.target).item()


def train(model: Model, spec: data.DatasetSpec, cfg: TrainConfig, out_dir,
          resume_from=None) -> TrainResult:
    """Run the full loop, writing metrics, manifest, and checkpoints.

    To resume, load the checkpoint into the model first and pass its path
    here; the matching optimizer sidecar is picked up and the remaining
    steps replay the exact stream the uninterrupted run would have used.
    """
    cfg.validate()
    if (model.config.num_classes != spec.classes
            or model.config.num_tokens != spec.num_tokens
            or model.config.latent_dim != spec.latent_dim):
        raise ConfigError(
            f"model expects {model.config.num_classes} classes over "
            f"{model.config.num_tokens}x{model.config.latent_dim} tokens, but "
            f"dataset {spec.mode}/{spec.family} provides {spec.classes} classes "
            f"over {spec.num_tokens}x{spec.latent_dim}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    opt = Adam(model.trainable_parameters(), cfg)
    start_step = 0
    if resume_from is not None:
        sidecar = Path(resume_from).with_suffix(".opt.npz")
        if not sidecar.exists():
            raise CheckpointError(f"missing optimizer sidecar {sidecar}")
        start_step = load_optimizer(opt, sidecar)

    ctx_bank = None
    if model.config.variant == "couple":
        # frozen pathway: one forward over every id (classes + null) serves
        # the whole run
        with tensor.no_grad():
            ctx_bank = model.begin_context(
                np.arange(model.config.num_classes + 1, dtype=np.int64)
            )

    manifest = out / "manifest.txt"
    manifest.write_text(manifest_text(model.config, cfg, spec, model.schedule))
    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    fresh = start_step == 0
    mfile = open(metrics_path, "w" if fresh else "a", newline="")
    efile = open(eval_path, "w" if fresh else "a", newline="")
    try:
        mcsv = csv.writer(mfile)
        ecsv = csv.writer(efile)
        if fresh:
            mcsv.writerow(["step", "loss", "group", "grad_norm", "wall_ms"])
            ecsv.writerow(["step", "val_loss"])
        last_loss = float("nan")
        for step in range(start_step, cfg.steps):
            rng = indexed_rng(cfg.seed, "train.step", step)
            idx = rng.integers(spec.n_train, size=cfg.batch_size)
            x1, labels = data.batch(spec, idx)
            x1 = data.normalize(x1, spec)
            t0 = time.perf_counter()
            m = train_step(model, opt, x1, labels, cfg, rng, ctx_bank, step)
            wall = (time.perf_counter() - t0) * 1e3
            mcsv.writerow([step, f"{m['loss']:.6f}", m["group"],
                           f"{m['grad_norm']:.6f}", f"{wall:.3f}"])
            last_loss = m["loss"]
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                ecsv.writerow([step, f"{_eval_loss(model, spec, cfg, step, ctx_bank):.6f}"])
                mfile.flush()
                efile.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                ck = out / f"step{step + 1:06d}.ckpt"
                save_model(model, ck)
                save_optimizer(opt, step + 1, ck.with_suffix(".opt.npz"))
    finally:
        mfile.close()
        efile.close()

    final = out / "final.ckpt"
    save_model(model, final)
    save_optimizer(opt, cfg.steps, final.with_suffix(".opt.npz"))
    return TrainResult(checkpoint=final, metrics=metrics_path, manifest=manifest,
                       steps=cfg.steps, final_loss=last_loss)

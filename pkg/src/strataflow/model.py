"""The expert-grouped conditional velocity model.

Layers are partitioned into consecutive groups; each group is a
self-contained expert that maps a corrupted latent and a timestep to a
velocity estimate for its own slice of the trajectory. A frozen or
partially shared context pathway turns a class id into per-layer
conditioning states that the generative layers consume via
cross-attention.

Two weight-sharing variants exist. "couple" freezes the whole context
pathway and initializes every generative layer from its context twin, so
the trainable surface starts at the pretrained point. "blend" keeps one
feed-forward block per depth, shared between the two pathways, and
trains everything.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import tensor, textkv
from .attention import head_gate, multihead_attention, rope_tables_1d, rope_tables_2d
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .rng import named_rng
from .schedule import TimestepSchedule, build_schedule
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LTTE"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_layers: int = 8
    num_groups: int = 4
    model_dim: int = 128
    num_heads: int = 4
    grid_rows: int = 8
    grid_cols: int = 8
    latent_dim: int = 1
    num_classes: int = 8
    context_tokens: int = 4
    total_steps: int = 1000
    overlap: int = 100
    ffn_mult: int = 4
    rope_base: float = 10000.0
    variant: str = "couple"
    use_residual_attention: bool = True

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def validate(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model dim {self.model_dim} not divisible by {self.num_heads} heads"
            )
        if self.head_dim % 4 != 0:
            raise ConfigError(
                f"head dim {self.head_dim} must be divisible by 4 for axial rotation"
            )
        if self.variant not in ("couple", "blend"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("num_layers", "num_groups", "grid_rows", "grid_cols",
                     "latent_dim", "num_classes", "context_tokens", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_layers % self.num_groups != 0:
            raise ConfigError(
                f"group count {self.num_groups} does not divide {self.num_layers} layers"
            )

    def to_text(self) -> str:
        return textkv.to_text(self)

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        return textkv.from_text(ModelConfig, text)


@dataclass
class ConditioningCache:
    """Per-layer context states, computed once per batch of ids.

    states[l] is the hidden state entering context layer l, which is what
    generative layer l cross-attends to; states[0] is the raw embedding.
    """

    ids: np.ndarray
    states: list

    @property
    def batch_size(self) -> int:
        return int(self.ids.shape[0])


def timestep_features(tau: float, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of the discrete timestep, shape [dim]."""
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(tensor.default_dtype())


class Model:
    """Bundles parameters, the schedule, and the forward passes.

    Parameters live in a flat name -> Tensor dict (the unit of
    checkpointing and optimization); per-layer namespace views over the
    same tensors keep the forward code readable.
    """

    def __init__(self, config: ModelConfig, params: dict, schedule: TimestepSchedule):
        self.config = config
        self.schedule = schedule
        self._p = params
        d = config.model_dim
        self._rope_img = rope_tables_2d(config.grid_rows, config.grid_cols,
                                        config.head_dim, config.rope_base)
        self._rope_ctx = rope_tables_1d(config.context_tokens, config.head_dim,
                                        config.rope_base)

        def view(prefix, names):
            return SimpleNamespace(**{n.replace(".", "_"): params[prefix + n] for n in names})

        ctx_names = ["norm1", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                     "norm2", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"]
        self._ctx_layers = [view(f"context.layers.{i}.", ctx_names)
                            for i in range(config.num_layers)]
        gen_names = ["norm1", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                     "cross.wq", "cross.wk", "cross.wv", "norm2"]
        self._gen_layers = []
        for i in range(config.num_layers):
            lyr = view(f"layers.{i}.", gen_names)
            ffn_prefix = (f"context.layers.{i}." if config.variant == "blend"
                          else f"layers.{i}.")
            for n in ("w1", "b1", "w2", "b2"):
                setattr(lyr, f"ffn_{n}", params[ffn_prefix + f"ffn.{n}"])
            lyr.gate = params.get(f"layers.{i}.gate")
            self._gen_layers.append(lyr)
        self._groups = [view(f"groups.{k}.", ["in.w", "in.b", "norm", "out.w", "out.b"])
                        for k in range(config.num_groups)]
        self._exec = 0
        self._exec_lock = threading.Lock()

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> dict:
        return dict(self._p)

    def trainable_parameters(self) -> dict:
        return {n: t for n, t in self._p.items() if t.requires_grad}

    def parameter_count(self) -> int:
        return sum(t.size for t in self._p.values())

    # -- execution accounting ----------------------------------------------

    @property
    def layer_executions(self) -> int:
        return self._exec

    def reset_layer_executions(self) -> None:
        with self._exec_lock:
            self._exec = 0

    # -- forward passes -----------------------------------------------------

    def time_embedding(self, tau: float) -> Tensor:
        """Timestep vector h consumed by group entries and residual gates."""
        if not 0.0 <= tau <= self.schedule.total_steps:
            raise ContractError(f"tau {tau} outside [0, {self.schedule.total_steps}]")
        d = self.config.model_dim
        h = Tensor(timestep_features(tau, d, self.config.rope_base)[None, :])
        h = tensor.linear(h, self._p["time.w1"], self._p["time.b1"])
        h = tensor.linear(tensor.gelu(h), self._p["time.w2"], self._p["time.b2"])
        return tensor.reshape(h, (d,))

    def begin_context(self, cond_ids) -> ConditioningCache:
        """Run the context pathway once and cache every layer's input state.

        ids index the class embedding; the row after the last class is the
        learned null condition used for classifier-free training.
        """
        ids = np.asarray(cond_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError(f"condition ids must be 1-d, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() > self.config.num_classes):
            raise ContractError(
                f"condition id out of range 0..{self.config.num_classes}"
            )
        x = tensor.embed_rows(self._p["context.embed"], ids)
        states = []
        for lyr in self._ctx_layers:
            states.append(x)
            xn = tensor.rms_norm(x, lyr.norm1)
            out, _ = multihead_attention(
                xn @ lyr.attn_wq, xn @ lyr.attn_wk, xn @ lyr.attn_wv,
                self.config.num_heads,
                q_tables=self._rope_ctx, k_tables=self._rope_ctx,
            )
            x = x + out @ lyr.attn_wo
            xn2 = tensor.rms_norm(x, lyr.norm2)
            x = x + tensor.linear(
                tensor.gelu(tensor.linear(xn2, lyr.ffn_w1, lyr.ffn_b1)),
                lyr.ffn_w2, lyr.ffn_b2,
            )
        return ConditioningCache(ids=ids, states=states)

    def null_context(self, batch_size: int) -> ConditioningCache:
        return self.begin_context(
            np.full(batch_size, self.config.num_classes, dtype=np.int64)
        )

    def _gen_layer(self, lyr, x, h, ctx_state, prev_map):
        xn = tensor.rms_norm(x, lyr.norm1)
        gate = None
        if lyr.gate is not None and prev_map is not None:
            gate = head_gate(h, lyr.gate)
        self_out, amap = multihead_attention(
            xn @ lyr.attn_wq, xn @ lyr.attn_wk, xn @ lyr.attn_wv,
            self.config.num_heads,
            q_tables=self._rope_img, k_tables=self._rope_img,
            prev_map=prev_map if gate is not None else None, gate=gate,
        )
        cross_out, _ = multihead_attention(
            xn @ lyr.cross_wq, ctx_state @ lyr.cross_wk, ctx_state @ lyr.cross_wv,
            self.config.num_heads, k_tables=self._rope_ctx,
        )
        x = x + (self_out + cross_out) @ lyr.attn_wo
        xn2 = tensor.rms_norm(x, lyr.norm2)
        x = x + tensor.linear(
            tensor.gelu(tensor.linear(xn2, lyr.ffn_w1, lyr.ffn_b1)),
            lyr.ffn_w2, lyr.ffn_b2,
        )
        return x, amap

    def expert_forward(self, group: int, x: Tensor, tau: float,
                       cache: ConditioningCache, collect_maps: bool = False):
        """Velocity estimate from one expert group only.

        x is [B, tokens, channels]; the attention map of each layer is
        handed to the next layer in the group as the residual carrier and
        never crosses a group boundary. Each call adds the group's layer
        count to the execution counter, once per batch.
        """
        if not 0 <= group < self.config.num_groups:
            raise ContractError(f"group {group} out of range")
        expect = (cache.batch_size, self.config.num_tokens, self.config.latent_dim)
        if x.shape != expect:
            raise ShapeError(f"expert input shape {x.shape}, expected {expect}")
        h = self.time_embedding(tau)
        g = self._groups[group]
        z = tensor.linear(x, g.in_w, g.in_b) + h
        prev = None
        maps = []
        for li in self.schedule.layer_map[group]:
            z, amap = self._gen_layer(self._gen_layers[li], z, h,
                                      cache.states[li], prev)
            prev = amap
            if collect_maps:
                maps.append(amap)
        v = tensor.linear(tensor.rms_norm(z, g.norm), g.out_w, g.out_b)
        with self._exec_lock:
            self._exec += len(self.schedule.layer_map[group])
        return (v, maps) if collect_maps else v


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Construct and initialize a model; same seed, same parameters."""
    config.validate()
    schedule = build_schedule(config.num_layers, config.num_groups,
                              config.total_steps, config.overlap)
    d, dff, h = config.model_dim, config.ffn_mult * config.model_dim, config.num_heads
    dt = tensor.default_dtype()
    p: dict[str, Tensor] = {}

    def normal(name, shape, std=0.02):
        p[name] = tensor.parameter(
            tensor.trunc_normal(named_rng(seed, "init." + name), shape, std).data
        )

    def zeros(name, shape):
        p[name] = tensor.parameter(np.zeros(shape, dtype=dt))

    def ones(name, shape):
        p[name] = tensor.parameter(np.ones(shape, dtype=dt))

    normal("context.embed", (config.num_classes + 1, config.context_tokens, d))
    for i in range(config.num_layers):
        pre = f"context.layers.{i}."
        ones(pre + "norm1", (d,))
        for nm in ("wq", "wk", "wv", "wo"):
            normal(pre + "attn." + nm, (d, d))
        ones(pre + "norm2", (d,))
        normal(pre + "ffn.w1", (d, dff))
        zeros(pre + "ffn.b1", (dff,))
        normal(pre + "ffn.w2", (dff, d))
        zeros(pre + "ffn.b2", (d,))

    normal("time.w1", (d, d))
    zeros("time.b1", (d,))
    normal("time.w2", (d, d))
    zeros("time.b2", (d,))

    group_size = config.num_layers // config.num_groups
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        twin = f"context.layers.{i}."
        if config.variant == "couple":
            # start the trainable pathway at the frozen twin's weights
            for nm in ("norm1", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "norm2"):
                p[pre + nm] = tensor.parameter(p[twin + nm].data.copy())
            for src, dst in (("attn.wq", "cross.wq"), ("attn.wk", "cross.wk"),
                             ("attn.wv", "cross.wv")):
                p[pre + dst] = tensor.parameter(p[twin + src].data.copy())
            for nm in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"):
                p[pre + nm] = tensor.parameter(p[twin + nm].data.copy())
        else:
            ones(pre + "norm1", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                normal(pre + "attn." + nm, (d, d))
            for nm in ("wq", "wk", "wv"):
                normal(pre + "cross." + nm, (d, d))
            ones(pre + "norm2", (d,))
            # feed-forward weights stay under the context names, shared
        if config.use_residual_attention and i % group_size != 0:
            zeros(pre + "gate", (d, h))

    for k in range(config.num_groups):
        pre = f"groups.{k}."
        normal(pre + "in.w", (config.latent_dim, d))
        zeros(pre + "in.b", (d,))
        ones(pre + "norm", (d,))
        normal(pre + "out.w", (d, config.latent_dim))
        zeros(pre + "out.b", (config.latent_dim,))

    if config.variant == "couple":
        for name, t in p.items():
            if name.startswith("context."):
                t.requires_grad = False

    return Model(config, p, schedule)


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_model(model: Model, path) -> None:
    """Write config and all parameters in the fixed binary layout.

    Parameters are stored sorted by name as little-endian float32, so a
    rebuild from the same seed serializes to identical bytes.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg = model.config.to_text().encode()
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    names = sorted(model._p)
    chunks.append(struct.pack("<I", len(names)))
    for nm in names:
        t = model._p[nm]
        nb = nm.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint, verifying the full parameter set."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig.from_text(r.take(r.unpack("<I")).decode())
    model = build_model(cfg, seed=0)
    seen = set()
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode()
        ndim = r.unpack("<B")
        shape = tuple(
            struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        ) if ndim else ()
        if name not in model._p:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        t = model._p[name]
        if shape != t.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {shape}, expected {t.shape}"
            )
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        t.data = arr.astype(tensor.default_dtype())
        seen.add(name)
    if r.off != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter table")
    missing = sorted(set(model._p) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {', '.join(missing)}")
    return model

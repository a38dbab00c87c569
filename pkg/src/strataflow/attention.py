"""Multi-head attention with timestep-gated residual map reuse.

Each layer's attention produces a per-head softmax map A. Within an
expert group, layer l+1 can add a gated copy of layer l's map to its own
before mixing values: mix = A(l+1) + g ⊙ A(l), with g = tanh(h W) a
per-head scalar in (-1, 1) computed from the timestep embedding. The map
handed to the next layer is always the un-augmented A, so the carried
signal never compounds.

Image tokens use axial rotary embeddings (half the feature pairs rotate
with the row index, half with the column index); context tokens use the
ordinary one-dimensional form. Cross-attention rotates only the keys.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def rope_tables_1d(n: int, head_dim: int, base: float = 10000.0):
    """Rotation tables (cos, sin), each [n, head_dim/2], float64.

    Feature pair j rotates by pos * base^(-2j/head_dim), the usual
    geometric frequency ladder.
    """
    if head_dim % 2 != 0:
        raise ConfigError(f"rotary head dim must be even, got {head_dim}")
    pairs = head_dim // 2
    inv_freq = base ** (-2.0 * np.arange(pairs) / head_dim)
    angles = np.arange(n)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_tables_2d(rows: int, cols: int, head_dim: int, base: float = 10000.0):
    """Axial rotation tables for a row-major token grid.

    The first head_dim/4 feature pairs rotate with the row coordinate and
    the rest with the column coordinate, each axis using the frequency
    ladder of a head of half the width. Token i sits at (i // cols,
    i % cols).
    """
    if head_dim % 4 != 0:
        raise ConfigError(f"axial rotary needs head dim divisible by 4, got {head_dim}")
    pairs = head_dim // 4
    inv_freq = base ** (-2.0 * np.arange(pairs) / (head_dim // 2))
    r = np.repeat(np.arange(rows), cols)
    c = np.tile(np.arange(cols), rows)
    ang_r = r[:, None] * inv_freq[None, :]
    ang_c = c[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang_r), np.cos(ang_c)], axis=1)
    sin = np.concatenate([np.sin(ang_r), np.sin(ang_c)], axis=1)
    return cos, sin


def head_gate(h_t: Tensor, w_gate: Tensor) -> Tensor:
    """Per-head residual gate tanh(h W) in (-1, 1), shape [heads]."""
    z = tensor.matmul(tensor.reshape(h_t, (1, h_t.size)), w_gate)
    return tensor.reshape(tensor.tanh(z), (w_gate.shape[1],))


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[B, N, d] -> [B, H, N, d/H]."""
    b, n, d = x.shape
    if d % num_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {num_heads} heads")
    return tensor.transpose(tensor.reshape(x, (b, n, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, N, d/H] -> [B, N, d]."""
    b, h, n, dh = x.shape
    return tensor.reshape(tensor.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                        q_tables=None, k_tables=None,
                        prev_map: Tensor | None = None,
                        gate: Tensor | None = None):
    """Scaled dot-product attention over pre-projected q, k, v.

    q is [B, N, d], k and v are [B, M, d]. Rotary tables, when given, are
    (cos, sin) pairs applied after the head split. Returns the merged
    output [B, N, d] and the un-augmented softmax map [B, H, N, M]; when
    prev_map and gate are supplied the value mixing uses map + g ⊙
    prev_map instead of the map alone.
    """
    if (prev_map is None) != (gate is None):
        raise ShapeError("prev_map and gate must be passed together")
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    if q_tables is not None:
        qh = tensor.apply_rotary(qh, *q_tables)
    if k_tables is not None:
        kh = tensor.apply_rotary(kh, *k_tables)
    scores = tensor.scale(
        tensor.matmul(qh, tensor.transpose(kh, (0, 1, 3, 2))),
        1.0 / math.sqrt(qh.shape[-1]),
    )
    attn = tensor.row_softmax(scores)
    mix = attn if prev_map is None else tensor.add(attn, tensor.scale_heads(prev_map, gate))
    return merge_heads(tensor.matmul(mix, vh)), attn


def map_similarity(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise overlap of two attention maps: 1 - total variation.

    Inputs are normalized maps of identical shape [..., N, M]; the result
    drops the last axis. 1 means identical rows, 0 disjoint support.
    """
    if p.shape != q.shape:
        raise ShapeError(f"map_similarity: shapes {p.shape} and {q.shape} differ")
    return 1.0 - 0.5 * np.abs(p - q).sum(axis=-1)

"""Shared temporal kernels for both model branches.

Inputs are (S, T, D): S parallel trajectories (grid cells or graph nodes),
each an independent length-T sequence of D-dim features. Three pieces:

* local_masked_attention -- multi-head attention where step t sees only
  steps {t-w, ..., t} of its own trajectory (window shortens near t=0);
* selective_scan -- the gated diagonal state-space recurrence
  h_t = decay * gate(z_t) * h_{t-1} + W_in z_t, read out by W_out;
* channel_fusion -- residual LayerNorm merge of the local and global paths,
  U = LN(z + W_f [local; global]).

All three are pure functions of (input, params) built from tensor-core
primitives, so they are differentiable end-to-end and causal by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DivergentStateError, ShapeMismatchError
from .tensor import Tensor

STATE_GUARD = 1e12


@dataclass
class AttentionParams:
    w_query: Tensor  # (D, D)
    w_key: Tensor
    w_value: Tensor
    heads: int
    window: int

    def __post_init__(self):
        d = self.w_query.shape[0]
        if d % self.heads != 0:
            raise ShapeMismatchError(f"attention: D={d} not divisible by heads={self.heads}")
        if self.window < 0:
            raise ShapeMismatchError(f"attention: window {self.window} < 0")


@dataclass
class ScanParams:
    decay_log: Tensor  # (D,), per-channel log decay spectrum
    step_scale: Tensor  # (1,), learnable time-step scalar
    w_gate: Tensor  # (D, D)
    w_input: Tensor
    w_output: Tensor


@dataclass
class FusionGateParams:
    w_fuse: Tensor  # (2D, D)
    ln_gamma: Tensor  # (D,)
    ln_beta: Tensor  # (D,)


def window_mask(t_len: int, window: int) -> np.ndarray:
    """Boolean (T, T) mask: position (t, s) is True iff max(0, t-w) <= s <= t."""
    base = np.ones((t_len, t_len), dtype=bool)
    return np.tril(base) & np.triu(base, -window)


def local_masked_attention(seq: Tensor, p: AttentionParams, return_weights: bool = False):
    """Windowed causal multi-head attention over each trajectory independently.

    seq: (S, T, D) -> (S, T, D). Per-head scores are scaled by 1/sqrt(d) and
    normalized over the visible window only; heads are concatenated back to D.
    """
    s_dim, t_len, d = seq.shape
    if p.w_query.shape != (d, d):
        raise ShapeMismatchError(f"attention: projections are {p.w_query.shape}, input D={d}")
    heads = p.heads
    hd = d // heads

    flat = T.reshape(seq, (s_dim * t_len, d))

    def split_heads(proj):  # (S*T, D) -> (S, heads, T, hd)
        return T.transpose(T.reshape(proj, (s_dim, t_len, heads, hd)), (0, 2, 1, 3))

    q = split_heads(T.matmul(flat, p.w_query))
    k = split_heads(T.matmul(flat, p.w_key))
    v = split_heads(T.matmul(flat, p.w_value))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    mask = np.broadcast_to(window_mask(t_len, p.window), (s_dim, heads, t_len, t_len))
    alpha = T.softmax_rows(scores, mask=mask)  # (S, heads, T, T)

    ctx = T.matmul(alpha, v)  # (S, heads, T, hd)
    out = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (s_dim, t_len, d))
    if return_weights:
        return out, alpha
    return out


def selective_scan(seq: Tensor, p: ScanParams) -> Tensor:
    """Gated diagonal state-space recurrence, left to right per trajectory.

    seq: (S, T, D) -> (S, T, D). The transition is
    a_t = exp(step_scale * decay_log) * sigmoid(z_t W_gate), applied
    elementwise; h_0 = 0. Raises DivergentStateError if any |h_t| passes the
    finite guard (signals divergent parameters).
    """
    s_dim, t_len, d = seq.shape
    if p.decay_log.shape != (d,):
        raise ShapeMismatchError(f"scan: decay_log shape {p.decay_log.shape}, input D={d}")

    decay = T.exp(T.mul(p.step_scale, p.decay_log))  # (D,)
    flat = T.reshape(seq, (s_dim * t_len, d))
    gates = T.reshape(T.sigmoid(T.matmul(flat, p.w_gate)), (s_dim, t_len, d))
    drive = T.reshape(T.matmul(flat, p.w_input), (s_dim, t_len, d))

    retain = T.mul(gates, decay)  # (S, T, D), elementwise transition per channel
    h = T.zeros((s_dim, d))
    states = []
    for t in range(t_len):
        h = T.add(T.mul(T.select(retain, 1, t), h), T.select(drive, 1, t))
        if np.abs(h.data).max() > STATE_GUARD:
            raise DivergentStateError(f"scan: |state| exceeded {STATE_GUARD:g} at step {t}")
        states.append(h)
    stacked = T.stack(states, axis=1)  # (S, T, D)
    return T.reshape(T.matmul(T.reshape(stacked, (s_dim * t_len, d)), p.w_output), (s_dim, t_len, d))


def channel_fusion(z: Tensor, local_out: Tensor, global_out: Tensor, p: FusionGateParams) -> Tensor:
    """Residual merge U = LayerNorm(z + [local; global] W_f), per (s, t) vector."""
    if not (z.shape == local_out.shape == global_out.shape):
        raise ShapeMismatchError(
            f"channel_fusion: shapes differ: {z.shape}, {local_out.shape}, {global_out.shape}"
        )
    s_dim, t_len, d = z.shape
    cat = T.reshape(T.concat_last_axis(local_out, global_out), (s_dim * t_len, 2 * d))
    proj = T.reshape(T.matmul(cat, p.w_fuse), (s_dim, t_len, d))
    return T.layernorm(T.add(z, proj), p.ln_gamma, p.ln_beta)

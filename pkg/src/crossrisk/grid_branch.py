"""Grid branch: embedding, per-step 3x3 spatial convolution, temporal kernels.

Input is a (T, M, F_geo) grid-feature sequence with M = W*H cells. The chain:
per-cell two-layer 1x1 embedding -> per-step 3x3 conv on the (D, W, H) layout
-> trajectories (M, T, D) -> windowed attention + selective scan ->
channel fusion -> last step, reshaped back to (D, W, H).

The core runs on a whole stack of samples at once (a batch is just more
trajectories; the temporal kernels never mix them); the public per-sample
functions wrap the batched core with B=1. Cells flatten row-major:
cell m = x*H + y for grid position (x, y).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeMismatchError
from .kernels import (
    AttentionParams,
    FusionGateParams,
    ScanParams,
    channel_fusion,
    local_masked_attention,
    selective_scan,
)
from .tensor import Tensor


@dataclass
class EmbedParams:
    """Two-layer 1x1 projection along the feature axis: linear-ReLU-linear."""

    w1: Tensor  # (F, D_mid)
    b1: Tensor  # (D_mid,)
    w2: Tensor  # (D_mid, D)
    b2: Tensor  # (D,)


@dataclass
class Switches:
    """Run-time ablation toggles; structure-preserving bypasses, shapes unchanged."""

    disable_grid: bool = False  # replace the grid-branch core by its embedded last step
    disable_graph: bool = False  # same for the graph branch
    disable_scan: bool = False  # zero the global (scan) path inside the fusion gate
    disable_attention: bool = False  # zero the local (attention) path

    @classmethod
    def from_tokens(cls, tokens) -> "Switches":
        mapping = {"stg": "disable_grid", "sts": "disable_graph", "stm": "disable_scan", "lma": "disable_attention"}
        sw = cls()
        for tok in tokens or []:
            if tok not in mapping:
                raise ValueError(f"unknown ablation switch {tok!r}; expected one of {sorted(mapping)}")
            setattr(sw, mapping[tok], True)
        return sw

    def tokens(self) -> list:
        names = [("stg", self.disable_grid), ("sts", self.disable_graph), ("stm", self.disable_scan), ("lma", self.disable_attention)]
        return [tok for tok, on in names if on]


@dataclass
class GridBranchParams:
    embed: EmbedParams
    conv_kernel: Tensor  # (D, D, 3, 3)
    conv_bias: Tensor  # (D,)
    attn: AttentionParams
    scan: ScanParams
    fuse: FusionGateParams


def embed_flat(x: Tensor, p: EmbedParams):
    """Feature MLP applied to the last axis; positions/steps stay independent."""
    f = x.shape[-1]
    if p.w1.shape[0] != f:
        raise ShapeMismatchError(f"embed: input feature width {f} != projection {p.w1.shape}")
    lead = x.shape[:-1]
    count = 1
    for extent in lead:
        count *= extent
    flat = T.reshape(x, (count, f))
    hidden = T.relu(T.add(T.matmul(flat, p.w1), p.b1))
    out = T.add(T.matmul(hidden, p.w2), p.b2)
    return T.reshape(out, (*lead, out.shape[-1]))


def embed_sequence(x: Tensor, p: EmbedParams) -> Tensor:
    """Per-position feature MLP on a (T, S, F) sequence; no mixing across T or S."""
    return embed_flat(x, p)


def _fused_sequence(z: Tensor, attn, scan, fuse, switches: Switches) -> Tensor:
    """attention + scan over trajectories, merged by the fusion gate."""
    local_out = T.zeros(z.shape) if switches.disable_attention else local_masked_attention(z, attn)
    global_out = T.zeros(z.shape) if switches.disable_scan else selective_scan(z, scan)
    return channel_fusion(z, local_out, global_out, fuse)


def grid_branch_sequence_batched(x: Tensor, w: int, h: int, p: GridBranchParams, switches: Switches | None = None) -> Tensor:
    """Fused per-step representations for a sample stack: (B,T,M,F) -> (B,M,T,D)."""
    switches = switches or Switches()
    b_dim, t_len, m, _ = x.shape
    if m != w * h:
        raise ShapeMismatchError(f"grid branch: M={m} but grid is {w}x{h}")
    emb = embed_flat(x, p.embed)  # (B, T, M, D)
    d = emb.shape[-1]
    grids = T.reshape(T.transpose(emb, (0, 1, 3, 2)), (b_dim * t_len, d, w, h))
    conv = T.conv2d_3x3(grids, p.conv_kernel, p.conv_bias)  # one node for all images
    z = T.reshape(
        T.transpose(T.reshape(conv, (b_dim, t_len, d, m)), (0, 3, 1, 2)),
        (b_dim * m, t_len, d),
    )
    fused = _fused_sequence(z, p.attn, p.scan, p.fuse, switches)  # (B*M, T, D)
    return T.reshape(fused, (b_dim, m, t_len, d))


def grid_branch_sequence(x: Tensor, w: int, h: int, p: GridBranchParams, switches: Switches | None = None) -> Tensor:
    """Full per-step sequence of fused representations, shape (M, T, D)."""
    t_len, m, f = x.shape
    out = grid_branch_sequence_batched(T.reshape(x, (1, t_len, m, f)), w, h, p, switches)
    return T.reshape(out, out.shape[1:])


def grid_branch_forward_batched(x: Tensor, w: int, h: int, p: GridBranchParams, switches: Switches | None = None) -> Tensor:
    """Last-step branch output per sample: (B,T,M,F) -> (B,D,W,H)."""
    seq = grid_branch_sequence_batched(x, w, h, p, switches)  # (B, M, T, D)
    b_dim, m, t_len, d = seq.shape
    last = T.select(seq, 2, t_len - 1)  # (B, M, D)
    return T.reshape(T.transpose(last, (0, 2, 1)), (b_dim, d, w, h))


def grid_branch_forward(x: Tensor, w: int, h: int, p: GridBranchParams, switches: Switches | None = None) -> Tensor:
    """Last-step branch output as a (D, W, H) feature map."""
    t_len, m, f = x.shape
    out = grid_branch_forward_batched(T.reshape(x, (1, t_len, m, f)), w, h, p, switches)
    return T.reshape(out, out.shape[1:])


def embedded_last_step_grid_batched(x: Tensor, w: int, h: int, p: EmbedParams) -> Tensor:
    """Ablation bypass: embedded final-step features on the grid, per sample."""
    emb = embed_flat(x, p)  # (B, T, M, D)
    b_dim, t_len, m, d = emb.shape
    last = T.select(emb, 1, t_len - 1)  # (B, M, D)
    return T.reshape(T.transpose(last, (0, 2, 1)), (b_dim, d, w, h))


def embedded_last_step_grid(x: Tensor, w: int, h: int, p: EmbedParams) -> Tensor:
    """Ablation bypass: embedded features of the final step on the grid layout."""
    t_len, m, f = x.shape
    out = embedded_last_step_grid_batched(T.reshape(x, (1, t_len, m, f)), w, h, p)
    return T.reshape(out, out.shape[1:])

"""Graph branch: multi-support graph convolution over nodes, temporal kernels,
and projection back onto the grid.

Input is a (T, N, F_sem) node-feature sequence. The chain: per-node embedding
-> node-centric (N, T, D) -> L stacked graph-conv layers over the four
supports (the adaptive one recomputed from the current embedding factors each
forward, so gradients reach them) -> windowed attention + selective scan ->
channel fusion -> last step -> grid projection M @ U_T -> (D, W, H).

As in the grid branch, the core is batched over sample stacks; graph
aggregation applies each support to all (sample, step) slices in one product.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeMismatchError
from .grid_branch import EmbedParams, Switches, _fused_sequence, embed_flat, embed_sequence
from .kernels import AttentionParams, FusionGateParams, ScanParams
from .supports import GridNodeMap, SupportSet
from .tensor import Tensor


@dataclass
class GraphBranchParams:
    embed: EmbedParams
    conv_weights: list  # layers x 4 weight Tensors (D_l, D_l+1)
    attn: AttentionParams
    scan: ScanParams
    fuse: FusionGateParams

    @property
    def layers(self) -> int:
        return len(self.conv_weights)


def graph_conv_layer(s: Tensor, supports: list, weights: list) -> Tensor:
    """One aggregation layer: relu(sum_j A_j S_t W_j), time axis untouched.

    s: (N, T, D_l) or batched (N, B, T, D_l); supports: 4 (N, N) matrices;
    weights: 4 (D_l, D_next). Aggregation treats every trailing slice
    independently, so batch and time ride along in the flattened columns.
    """
    if len(supports) != len(weights):
        raise ShapeMismatchError(f"graph_conv_layer: {len(supports)} supports but {len(weights)} weights")
    n = s.shape[0]
    mid = s.shape[1:-1]
    d = s.shape[-1]
    d_next = weights[0].shape[1]
    cols = 1
    for extent in mid:
        cols *= extent
    flat_nodes = T.reshape(s, (n, cols * d))  # columns are (.., t, feature) slots
    acc = None
    for a_j, w_j in zip(supports, weights):
        if a_j.shape != (n, n):
            raise ShapeMismatchError(f"graph_conv_layer: support shape {a_j.shape} != ({n}, {n})")
        mixed = T.matmul(a_j, flat_nodes)  # per-slice node aggregation, all at once
        term = T.matmul(T.reshape(mixed, (n * cols, d)), w_j)
        acc = term if acc is None else T.add(acc, term)
    return T.relu(T.reshape(acc, (n, *mid, d_next)))


def graph_branch_sequence_batched(
    x: Tensor,
    supports: SupportSet,
    p: GraphBranchParams,
    switches: Switches | None = None,
    e1: Tensor | None = None,
    e2: Tensor | None = None,
) -> Tensor:
    """Fused node trajectories for a sample stack: (B,T,N,F) -> (B,N,T,D)."""
    switches = switches or Switches()
    b_dim, t_len, n, _ = x.shape
    emb = embed_flat(x, p.embed)  # (B, T, N, D)
    d = emb.shape[-1]
    s = T.transpose(emb, (2, 0, 1, 3))  # (N, B, T, D) node-major for aggregation
    if p.layers:
        stack = supports.stack(e1, e2)
        for weights in p.conv_weights:
            s = graph_conv_layer(s, stack, weights)
    z = T.reshape(T.transpose(s, (1, 0, 2, 3)), (b_dim * n, t_len, d))
    fused = _fused_sequence(z, p.attn, p.scan, p.fuse, switches)
    return T.reshape(fused, (b_dim, n, t_len, d))


def graph_branch_sequence(
    x: Tensor,
    supports: SupportSet,
    p: GraphBranchParams,
    switches: Switches | None = None,
    e1: Tensor | None = None,
    e2: Tensor | None = None,
) -> Tensor:
    """Fused node-trajectory sequence, shape (N, T, D)."""
    t_len, n, f = x.shape
    out = graph_branch_sequence_batched(T.reshape(x, (1, t_len, n, f)), supports, p, switches, e1, e2)
    return T.reshape(out, out.shape[1:])


def project_to_grid_batched(node_features: Tensor, grid_map: GridNodeMap, w: int, h: int) -> Tensor:
    """Aggregate (B, N, D) node features into (B, D, W, H) maps via the mean map."""
    if grid_map.matrix.shape[0] != w * h:
        raise ShapeMismatchError(f"project_to_grid: map has {grid_map.matrix.shape[0]} rows, grid is {w}x{h}")
    b_dim, n, d = node_features.shape
    stacked = T.reshape(T.transpose(node_features, (1, 0, 2)), (n, b_dim * d))
    cells = T.matmul(grid_map.matrix, stacked)  # (W*H, B*D)
    return T.reshape(T.transpose(T.reshape(cells, (w * h, b_dim, d)), (1, 2, 0)), (b_dim, d, w, h))


def project_to_grid(node_features: Tensor, grid_map: GridNodeMap, w: int, h: int) -> Tensor:
    """Aggregate (N, D) node features into a (D, W, H) map via the mean map."""
    n, d = node_features.shape
    out = project_to_grid_batched(T.reshape(node_features, (1, n, d)), grid_map, w, h)
    return T.reshape(out, out.shape[1:])


def graph_branch_forward_batched(
    x: Tensor,
    supports: SupportSet,
    grid_map: GridNodeMap,
    w: int,
    h: int,
    p: GraphBranchParams,
    switches: Switches | None = None,
    e1: Tensor | None = None,
    e2: Tensor | None = None,
) -> Tensor:
    """Last-step branch output per sample: (B,T,N,F) -> (B,D,W,H)."""
    seq = graph_branch_sequence_batched(x, supports, p, switches, e1, e2)  # (B, N, T, D)
    last = T.select(seq, 2, seq.shape[2] - 1)  # (B, N, D)
    return project_to_grid_batched(last, grid_map, w, h)


def graph_branch_forward(
    x: Tensor,
    supports: SupportSet,
    grid_map: GridNodeMap,
    w: int,
    h: int,
    p: GraphBranchParams,
    switches: Switches | None = None,
    e1: Tensor | None = None,
    e2: Tensor | None = None,
) -> Tensor:
    """Last-step branch output projected to the grid, shape (D, W, H)."""
    t_len, n, f = x.shape
    out = graph_branch_forward_batched(T.reshape(x, (1, t_len, n, f)), supports, grid_map, w, h, p, switches, e1, e2)
    return T.reshape(out, out.shape[1:])


def embedded_last_step_projected_batched(x: Tensor, grid_map: GridNodeMap, w: int, h: int, p: EmbedParams) -> Tensor:
    """Ablation bypass: embedded last-step node features, grid-projected, per sample."""
    emb = embed_flat(x, p)  # (B, T, N, D)
    last = T.select(emb, 1, emb.shape[1] - 1)  # (B, N, D)
    return project_to_grid_batched(last, grid_map, w, h)


def embedded_last_step_projected(x: Tensor, grid_map: GridNodeMap, w: int, h: int, p: EmbedParams) -> Tensor:
    """Ablation bypass: embedded last-step node features, grid-projected."""
    t_len, n, f = x.shape
    out = embedded_last_step_projected_batched(T.reshape(x, (1, t_len, n, f)), grid_map, w, h, p)
    return T.reshape(out, out.shape[1:])

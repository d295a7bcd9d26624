"""Full model: shared parameters, per-city forward, gated fusion, output head.

One parameter set is shared by every city; each city additionally owns the
embedding factors of its adaptive support (cities differ in node count, so
those cannot be shared). ``model_forward`` runs the two branches per city,
merges them with a convex per-channel sigmoid gate, and maps the fused
features to a single-channel risk map through a two-layer 1x1 head.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .graph_branch import (
    GraphBranchParams,
    embedded_last_step_projected_batched,
    graph_branch_forward_batched,
)
from .grid_branch import (
    EmbedParams,
    GridBranchParams,
    Switches,
    embedded_last_step_grid_batched,
    grid_branch_forward_batched,
)
from .kernels import AttentionParams, FusionGateParams, ScanParams
from .stt1 import read_json, read_stt1, write_json, write_stt1
from .supports import GridNodeMap, SupportSet
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Shared hyperparameters (dimension defaults sized for desk scale)."""

    f_geo: int = 6
    f_sem: int = 4
    d: int = 8  # embedding width; also the hidden width of embeddings and head
    heads: int = 2
    window: int = 3
    layers: int = 2  # stacked graph-conv layers
    rank: int = 8  # adaptive-support factor rank cap

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class CityInputs:
    """One city's slice of a forward batch."""

    name: str
    x_geo: Tensor  # (T, W*H, F_geo)
    x_sem: Tensor  # (T, N, F_sem)
    supports: SupportSet
    grid_map: GridNodeMap
    w: int
    h: int
    mask: np.ndarray  # (W, H) bool; invalid cells are zeroed in the output


@dataclass
class RiskMap:
    """Predicted risk intensity field for one city at the next step."""

    values: Tensor  # (W, H); masked-out cells carry value 0
    mask: np.ndarray  # (W, H) bool
    city: str


class ModelParams:
    """Every learnable tensor, addressable by dotted path name.

    The registry is the single source of truth; the typed parameter views
    (GridBranchParams etc.) are cheap structures over the same tensors,
    rebuilt on access so optimizer updates are always visible.
    """

    def __init__(self, config: ModelConfig, tensors: dict, city_nodes: dict):
        self.config = config
        self.tensors = dict(tensors)
        self.city_nodes = dict(city_nodes)  # city -> node count (for checkpoints)

    def registry(self) -> dict:
        return dict(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def update(self, new_values: dict) -> None:
        for name, tensor in new_values.items():
            if name not in self.tensors:
                raise ConfigError(f"unknown parameter {name!r}")
            if tensor.shape != self.tensors[name].shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: shape {tensor.shape} != {self.tensors[name].shape}"
                )
            self.tensors[name] = tensor

    # -- typed views ---------------------------------------------------------

    def _embed(self, prefix: str) -> EmbedParams:
        t = self.tensors
        return EmbedParams(t[f"{prefix}.w1"], t[f"{prefix}.b1"], t[f"{prefix}.w2"], t[f"{prefix}.b2"])

    def _attn(self, prefix: str) -> AttentionParams:
        t = self.tensors
        return AttentionParams(
            t[f"{prefix}.w_query"], t[f"{prefix}.w_key"], t[f"{prefix}.w_value"],
            heads=self.config.heads, window=self.config.window,
        )

    def _scan(self, prefix: str) -> ScanParams:
        t = self.tensors
        return ScanParams(
            t[f"{prefix}.decay_log"], t[f"{prefix}.step_scale"],
            t[f"{prefix}.w_gate"], t[f"{prefix}.w_input"], t[f"{prefix}.w_output"],
        )

    def _fuse(self, prefix: str) -> FusionGateParams:
        t = self.tensors
        return FusionGateParams(t[f"{prefix}.w_fuse"], t[f"{prefix}.gamma"], t[f"{prefix}.beta"])

    def grid_branch(self) -> GridBranchParams:
        return GridBranchParams(
            embed=self._embed("grid.embed"),
            conv_kernel=self.tensors["grid.conv.kernel"],
            conv_bias=self.tensors["grid.conv.bias"],
            attn=self._attn("grid.attn"),
            scan=self._scan("grid.scan"),
            fuse=self._fuse("grid.fuse"),
        )

    def graph_branch(self) -> GraphBranchParams:
        weights = [
            [self.tensors[f"graph.conv.{layer}.{j}"] for j in range(4)]
            for layer in range(self.config.layers)
        ]
        return GraphBranchParams(
            embed=self._embed("graph.embed"),
            conv_weights=weights,
            attn=self._attn("graph.attn"),
            scan=self._scan("graph.scan"),
            fuse=self._fuse("graph.fuse"),
        )

    def adaptive_factors(self, city: str):
        return self.tensors[f"adaptive.{city}.e1"], self.tensors[f"adaptive.{city}.e2"]


def init_model_params(config: ModelConfig, city_supports: dict, seed: int = 0) -> ModelParams:
    """Seeded initialization; adaptive factors start from each city's SVD seed.

    ``city_supports`` maps city name -> SupportSet (its factors provide both
    node counts and initial values).
    """
    rng = np.random.default_rng(seed)
    d = config.d

    def dense(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    t = {}

    def add_embed(prefix, f_in):
        t[f"{prefix}.w1"] = dense(f_in, (f_in, d))
        t[f"{prefix}.b1"] = Tensor(np.zeros(d))
        t[f"{prefix}.w2"] = dense(d, (d, d))
        t[f"{prefix}.b2"] = Tensor(np.zeros(d))

    def add_attn(prefix):
        for name in ("w_query", "w_key", "w_value"):
            t[f"{prefix}.{name}"] = dense(d, (d, d))

    def add_scan(prefix):
        t[f"{prefix}.decay_log"] = Tensor(rng.uniform(-1.0, -0.05, size=d))  # decaying memory at init
        t[f"{prefix}.step_scale"] = Tensor([1.0])
        for name in ("w_gate", "w_input", "w_output"):
            t[f"{prefix}.{name}"] = dense(d, (d, d))

    def add_fuse(prefix):
        t[f"{prefix}.w_fuse"] = dense(2 * d, (2 * d, d))
        t[f"{prefix}.gamma"] = Tensor(np.ones(d))
        t[f"{prefix}.beta"] = Tensor(np.zeros(d))

    add_embed("grid.embed", config.f_geo)
    t["grid.conv.kernel"] = dense(d * 9, (d, d, 3, 3))
    t["grid.conv.bias"] = Tensor(np.zeros(d))
    add_attn("grid.attn")
    add_scan("grid.scan")
    add_fuse("grid.fuse")

    add_embed("graph.embed", config.f_sem)
    for layer in range(config.layers):
        for j in range(4):
            t[f"graph.conv.{layer}.{j}"] = dense(4 * d, (d, d))
    add_attn("graph.attn")
    add_scan("graph.scan")
    add_fuse("graph.fuse")

    t["gate.logits"] = Tensor(np.zeros(d))
    t["head.w1"] = dense(d, (d, d))
    t["head.b1"] = Tensor(np.zeros(d))
    t["head.w2"] = dense(d, (d, 1))
    t["head.b2"] = Tensor(np.zeros(1))

    city_nodes = {}
    for city in sorted(city_supports):
        s = city_supports[city]
        t[f"adaptive.{city}.e1"] = s.adaptive_e1
        t[f"adaptive.{city}.e2"] = s.adaptive_e2
        city_nodes[city] = s.n

    return ModelParams(config, t, city_nodes)


def gated_fusion(y_grid: Tensor, y_graph: Tensor, gate_logits: Tensor) -> Tensor:
    """Convex per-channel merge: sigmoid(gate) * grid + (1 - sigmoid(gate)) * graph.

    Inputs are (D, W, H) maps or (B, D, W, H) stacks of them.
    """
    if y_grid.shape != y_graph.shape:
        raise ShapeMismatchError(f"gated_fusion: shapes {y_grid.shape} and {y_graph.shape} differ")
    d = y_grid.shape[-3]
    if gate_logits.shape != (d,):
        raise ShapeMismatchError(f"gated_fusion: gate shape {gate_logits.shape} != ({d},)")
    g = T.reshape(T.sigmoid(gate_logits), (d, 1, 1))
    complement = T.add(T.scale(g, -1.0), T.ones((d, 1, 1)))
    return T.add(T.mul(g, y_grid), T.mul(complement, y_graph))


def output_head(y: Tensor, params: ModelParams) -> Tensor:
    """Per-cell channel MLP D -> D -> 1; no spatial mixing.

    (D, W, H) -> (W, H), or batched (B, D, W, H) -> (B, W, H).
    """
    batched = len(y.shape) == 4
    d, w, h = y.shape[-3:]
    lead = y.shape[0] if batched else 1
    cells = T.reshape(T.transpose(y, (0, 2, 3, 1) if batched else (1, 2, 0)), (lead * w * h, d))
    hidden = T.relu(T.add(T.matmul(cells, params["head.w1"]), params["head.b1"]))
    out = T.add(T.matmul(hidden, params["head.w2"]), params["head.b2"])  # (lead*W*H, 1)
    return T.reshape(out, (lead, w, h) if batched else (w, h))


def forward_city_values(city, x_geo: Tensor, x_sem: Tensor, params: ModelParams, switches: Switches) -> Tensor:
    """Risk values for one city over a sample stack: inputs (B,T,*,F), output
    (B, W, H) with invalid cells zeroed."""
    grid_p = params.grid_branch()
    graph_p = params.graph_branch()
    if switches.disable_grid:
        y_grid = embedded_last_step_grid_batched(x_geo, city.w, city.h, grid_p.embed)
    else:
        y_grid = grid_branch_forward_batched(x_geo, city.w, city.h, grid_p, switches)
    e1, e2 = (None, None)
    if city.supports.adaptive_fixed is None:
        e1, e2 = params.adaptive_factors(city.name)
    if switches.disable_graph:
        y_graph = embedded_last_step_projected_batched(x_sem, city.grid_map, city.w, city.h, graph_p.embed)
    else:
        y_graph = graph_branch_forward_batched(
            x_sem, city.supports, city.grid_map, city.w, city.h, graph_p, switches, e1, e2
        )
    fused = gated_fusion(y_grid, y_graph, params["gate.logits"])
    values = output_head(fused, params)  # (B, W, H)
    return T.mul(values, Tensor(city.mask.astype(np.float64)))


def model_forward(batch: list, params: ModelParams, switches: Switches | None = None) -> list:
    """One RiskMap per city; cities never exchange information.

    ``switches`` substitutes structure-preserving bypasses for the ablations:
    a disabled branch core is replaced by its embedded last step, a disabled
    temporal path is zeroed inside the fusion gate.
    """
    switches = switches or Switches()
    out = []
    for city in batch:
        t_geo, m, f_geo = city.x_geo.shape
        if m != city.w * city.h:
            raise ShapeMismatchError(
                f"model_forward[{city.name}]: x_geo has {m} cells, grid is {city.w}x{city.h}"
            )
        if city.x_sem.shape[0] != t_geo:
            raise ShapeMismatchError(
                f"model_forward[{city.name}]: x_geo T={t_geo} but x_sem T={city.x_sem.shape[0]}"
            )
        x_geo = T.reshape(city.x_geo, (1, t_geo, m, f_geo))
        x_sem = T.reshape(city.x_sem, (1, *city.x_sem.shape))
        values = forward_city_values(city, x_geo, x_sem, params, switches)
        out.append(RiskMap(values=T.reshape(values, (city.w, city.h)), mask=city.mask, city=city.name))
    return out


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Directory of STT1 tensors named by registry path, plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, tensor in params.tensors.items():
        write_stt1(path / f"{name}.stt1", tensor)
        shapes[name] = list(tensor.shape)
    manifest = {
        "format": "crossrisk-checkpoint-v1",
        "config": params.config.to_dict(),
        "city_nodes": params.city_nodes,
        "shapes": shapes,
    }
    manifest.update(extra or {})
    write_json(path / "manifest.json", manifest)


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    config = ModelConfig.from_dict(manifest["config"])
    tensors = {}
    for name, shape in manifest["shapes"].items():
        arr = read_stt1(path / f"{name}.stt1")
        if list(arr.shape) != list(shape):
            raise ConfigError(f"checkpoint {name}: shape {arr.shape} != manifest {shape}")
        tensors[name] = Tensor(arr)
    return ModelParams(config, tensors, manifest["city_nodes"])

"""Masked loss, Adam, the training loop, evaluation and the robustness sweep.

The loss is mean squared error over valid cells only, averaged over cities
with equal weight, so masked-out cells contribute nothing to the loss or any
gradient. Training evaluates validation loss each epoch, snapshots the best
state, and stops after ``patience`` consecutive epochs without improvement.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, EmptyMaskError, MissingGradError
from .grid_branch import Switches
from .metrics import (
    MetricReport,
    high_frequency_filter,
    mean_average_precision,
    recall_at_hotspots,
    rmse,
)
from .model import (
    CityInputs,
    ModelConfig,
    ModelParams,
    forward_city_values,
    init_model_params,
    model_forward,
    save_checkpoint,
)
from .synth import WINDOW_IN, WINDOW_OUT, align_relative_time, build_windows, inject_noise
from .tensor import Tape, Tensor, backward

THREADS_ENV = "CROSSRISK_THREADS"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    switches: Switches = dc_field(default_factory=Switches)
    noise_level: float = 0.0  # train-time input noise; 0 leaves inputs untouched

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience {self.patience} < 1")
        if self.lr <= 0:
            raise ConfigError(f"lr {self.lr} <= 0")


@dataclass
class JointData:
    """Aligned multi-city datasets plus the shared sliding-window index."""

    datasets: list
    samples: "SampleSet"
    t_in: int
    t_out: int


def build_joint_data(datasets, t_in: int = WINDOW_IN, t_out: int = WINDOW_OUT) -> JointData:
    """Align cities onto the Monday-based axis, truncate to a common span,
    and cut one shared window index."""
    aligned = align_relative_time(list(datasets))
    t_common = min(ds.t_total for ds in aligned)
    clipped = []
    for ds in aligned:
        if ds.t_total != t_common:
            ds = replace(ds, x_geo=ds.x_geo[:t_common], x_sem=ds.x_sem[:t_common], targets=ds.targets[:t_common])
        clipped.append(ds)
    samples = build_windows(clipped[0], t_in, t_out)
    return JointData(datasets=clipped, samples=samples, t_in=t_in, t_out=t_out)


def city_inputs_at(ds, i: int, t_in: int, noise_level: float = 0.0, noise_seed: int = 0) -> CityInputs:
    """Assemble one city's forward inputs for sample ``i`` (inputs only get
    noise; targets stay clean)."""
    x_geo = ds.x_geo[i : i + t_in]
    x_sem = ds.x_sem[i : i + t_in]
    if noise_level > 0:
        x_geo = inject_noise(x_geo, noise_level, seed=noise_seed * 1_000_003 + 2 * i)
        x_sem = inject_noise(x_sem, noise_level, seed=noise_seed * 1_000_003 + 2 * i + 1)
    return CityInputs(
        name=ds.name,
        x_geo=Tensor(x_geo),
        x_sem=Tensor(x_sem),
        supports=ds.supports,
        grid_map=ds.grid_map,
        w=ds.w,
        h=ds.h,
        mask=ds.mask,
    )


def masked_loss(preds: list, truths: list) -> Tensor:
    """Mean squared error over valid cells, cities weighted equally."""
    if len(preds) != len(truths):
        raise ConfigError(f"masked_loss: {len(preds)} predictions vs {len(truths)} truths")
    total = None
    for pred, truth in zip(preds, truths):
        maskf = pred.mask.astype(np.float64)
        n_valid = int(maskf.sum())
        if n_valid == 0:
            raise EmptyMaskError(f"masked_loss[{pred.city}]: no valid cells")
        truth_t = truth if isinstance(truth, Tensor) else Tensor(truth)
        if truth_t.shape != pred.values.shape:
            raise ConfigError(
                f"masked_loss[{pred.city}]: truth shape {truth_t.shape} != prediction {pred.values.shape}"
            )
        diff = T.add(pred.values, T.scale(truth_t, -1.0))
        sq = T.mul(T.mul(diff, diff), Tensor(maskf))
        city_loss = T.scale(T.tsum(sq), 1.0 / n_valid)
        total = city_loss if total is None else T.add(total, city_loss)
    return T.scale(total, 1.0 / len(preds))


@dataclass
class AdamState:
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    step: int = 0


def optimizer_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam update over every registered parameter."""
    missing = [name for name in params.tensors if name not in grads]
    if missing:
        raise MissingGradError(f"optimizer_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    b1, b2 = cfg.betas
    state.step += 1
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    updates = {}
    for name, tensor in params.tensors.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g**2 if v is None else b2 * v + (1 - b2) * g**2
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updates[name] = Tensor(tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
    params.update(updates)
    return state


def _stacked_windows(ds, indices, t_in: int, noise_level: float = 0.0, noise_seed: int = 0):
    """(B, T, S, F) input stacks for one city, with per-sample input noise."""
    xg = np.stack([ds.x_geo[int(i) : int(i) + t_in] for i in indices])
    xs = np.stack([ds.x_sem[int(i) : int(i) + t_in] for i in indices])
    if noise_level > 0:
        for row, i in enumerate(indices):
            xg[row] = inject_noise(xg[row], noise_level, seed=noise_seed * 1_000_003 + 2 * int(i))
            xs[row] = inject_noise(xs[row], noise_level, seed=noise_seed * 1_000_003 + 2 * int(i) + 1)
    return Tensor(xg), Tensor(xs)


def _stacked_forward(params: ModelParams, joint: JointData, indices, switches: Switches, noise_level=0.0, noise_seed=0) -> list:
    """Per-city (B, W, H) prediction stacks for the given sample indices."""
    out = []
    for ds in joint.datasets:
        x_geo, x_sem = _stacked_windows(ds, indices, joint.t_in, noise_level, noise_seed)
        out.append(forward_city_values(ds, x_geo, x_sem, params, switches))
    return out


def _batch_loss(params: ModelParams, joint: JointData, indices, switches: Switches, noise_level=0.0, noise_seed=0) -> Tensor:
    """Masked MSE over a sample batch: equals the mean of per-sample losses."""
    values = _stacked_forward(params, joint, indices, switches, noise_level, noise_seed)
    total = None
    for ds, pred in zip(joint.datasets, values):
        targets = np.stack([ds.targets[joint.samples.target_index(int(i))] for i in indices])
        maskf = ds.mask.astype(np.float64)
        n_valid = int(maskf.sum())
        if n_valid == 0:
            raise EmptyMaskError(f"_batch_loss[{ds.name}]: no valid cells")
        diff = T.add(pred, T.scale(Tensor(targets), -1.0))
        sq = T.mul(T.mul(diff, diff), Tensor(maskf))
        city_loss = T.scale(T.tsum(sq), 1.0 / (n_valid * len(indices)))
        total = city_loss if total is None else T.add(total, city_loss)
    return T.scale(total, 1.0 / len(joint.datasets))


def collect_gradients(params: ModelParams, tape: Tape, loss: Tensor) -> dict:
    """Backward pass mapped onto parameter names; off-tape parameters get zeros
    (their gradient is exactly zero, e.g. a branch bypassed by a switch)."""
    grad_map = backward(tape, loss)
    out = {}
    for name, tensor in params.tensors.items():
        g = grad_map.get(tensor.tid)
        out[name] = g if g is not None else T.zeros(tensor.shape)
    return out


def split_loss(params: ModelParams, joint: JointData, split: str, switches: Switches, batch_size: int = 64) -> float:
    """Forward-only masked loss over a whole split."""
    idx = joint.samples.indices(split)
    total = 0.0
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        total += _batch_loss(params, joint, chunk, switches).item() * len(chunk)
    return total / len(idx)


@dataclass
class TrainResult:
    params: ModelParams
    history: list  # dicts: epoch, train_loss, val_loss
    best_epoch: int
    stopped_epoch: int
    checkpoint_path: str | None


def train(
    joint: JointData,
    cfg: TrainConfig,
    model_config: ModelConfig | None = None,
    params: ModelParams | None = None,
    out_dir=None,
    val_fn=None,
) -> TrainResult:
    """Minibatch Adam with best-on-validation checkpointing and early stopping.

    ``val_fn(params, epoch) -> float`` replaces the real validation pass when
    given (used to exercise the stopping rule in isolation).
    """
    if len(joint.samples.train_idx) == 0 or len(joint.samples.val_idx) == 0:
        raise ConfigError("train: empty train or validation split")
    if params is None:
        model_config = model_config or ModelConfig(
            f_geo=joint.datasets[0].x_geo.shape[2], f_sem=joint.datasets[0].x_sem.shape[2]
        )
        supports = {ds.name: ds.supports for ds in joint.datasets}
        params = init_model_params(model_config, supports, seed=cfg.seed)

    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_val = np.inf
    best_epoch = 0
    best_tensors = dict(params.tensors)
    since_improve = 0
    ckpt_path = None
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(joint.samples.train_idx)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            with Tape() as tape:
                loss = _batch_loss(params, joint, chunk, cfg.switches, cfg.noise_level, noise_seed=cfg.seed + epoch)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise DivergenceError(f"train: non-finite loss at epoch {epoch}")
            grads = collect_gradients(params, tape, loss)
            state = optimizer_step(params, grads, state, cfg)
            epoch_loss += loss_val * len(chunk)
        train_loss = epoch_loss / len(joint.samples.train_idx)

        if val_fn is not None:
            val_loss = float(val_fn(params, epoch))
        else:
            val_loss = split_loss(params, joint, "val", cfg.switches)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_tensors = dict(params.tensors)
            since_improve = 0
            if out_dir is not None:
                ckpt_path = out_dir / "checkpoint"
                save_checkpoint(
                    ModelParams(params.config, best_tensors, params.city_nodes),
                    ckpt_path,
                    extra={"seed": cfg.seed, "switches": cfg.switches.tokens(), "epoch": epoch},
                )
        else:
            since_improve += 1
            if since_improve >= cfg.patience:
                break

    best = ModelParams(params.config, best_tensors, params.city_nodes)
    if out_dir is not None:
        write_history_csv(history, out_dir / "history.csv")
    return TrainResult(
        params=best,
        history=history,
        best_epoch=best_epoch,
        stopped_epoch=history[-1]["epoch"],
        checkpoint_path=str(ckpt_path) if ckpt_path else None,
    )


def write_history_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        writer.writeheader()
        for row in history:
            writer.writerow({"epoch": row["epoch"], "train_loss": repr(row["train_loss"]), "val_loss": repr(row["val_loss"])})


# -- evaluation ---------------------------------------------------------------


def evaluate(
    params: ModelParams,
    joint: JointData,
    split: str = "test",
    period: str = "all-day",
    noise_level: float = 0.0,
    noise_seed: int = 0,
    switches: Switches | None = None,
) -> MetricReport:
    """Metrics on one split; noise (if any) perturbs inputs only."""
    switches = switches or Switches()
    if period == "high-freq":
        indices = high_frequency_filter(joint.datasets, joint.samples)
    elif period == "all-day":
        indices = joint.samples.indices(split)
    else:
        raise ConfigError(f"unknown period {period!r}; expected 'all-day' or 'high-freq'")
    if len(indices) == 0:
        raise ConfigError(f"evaluate: no steps selected (split={split!r}, period={period!r})")
    preds = {ds.name: [] for ds in joint.datasets}
    chunk_size = 256
    for start in range(0, len(indices), chunk_size):
        chunk = indices[start : start + chunk_size]
        for ds, values in zip(joint.datasets, _stacked_forward(params, joint, chunk, switches, noise_level, noise_seed)):
            preds[ds.name].append(values.data)
    per_city = {}
    for ds in joint.datasets:
        p = np.concatenate(preds[ds.name])
        t = np.stack([ds.targets[joint.samples.target_index(int(i))] for i in indices])
        per_city[ds.name] = {
            "rmse": rmse(p, t, ds.mask),
            "recall_pct": recall_at_hotspots(p, t, ds.mask),
            "map": mean_average_precision(p, t, ds.mask),
        }
    return MetricReport(period=period, noise_level=noise_level, per_city=per_city, steps=len(indices))


def robustness_sweep(
    params: ModelParams,
    joint: JointData,
    levels=(0.0, 0.1, 0.2, 0.3, 0.5),
    seed: int = 0,
    period: str = "all-day",
    switches: Switches | None = None,
) -> list:
    """Evaluate at each input-noise level (targets stay clean), in order.

    Level 0 reproduces the clean evaluation bit-identically. Levels are
    independent, so they may run on a small thread pool capped by the
    CROSSRISK_THREADS environment variable (default 1).
    """
    levels = [float(x) for x in levels]
    if any(x < 0 for x in levels):
        raise ConfigError(f"robustness_sweep: negative level in {levels}")
    workers = max(1, int(os.environ.get(THREADS_ENV, "1")))

    def run(level):
        return evaluate(params, joint, period=period, noise_level=level, noise_seed=seed, switches=switches)

    if workers == 1 or len(levels) == 1:
        return [run(level) for level in levels]
    with ThreadPoolExecutor(max_workers=min(workers, len(levels))) as pool:
        return list(pool.map(run, levels))


# -- timing (for the trade-off score inputs) ----------------------------------


def _median_seconds(fn, repeats: int = 20, warmups: int = 3) -> float:
    for _ in range(warmups):
        fn()
    spans = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        spans.append(time.perf_counter() - start)
    return float(np.median(spans))


def measure_timings(params: ModelParams, joint: JointData, cfg: TrainConfig | None = None) -> tuple:
    """(t_forward, t_batch) in seconds: single-sample forward, and one
    training batch (forward + backward + optimizer step)."""
    cfg = cfg or TrainConfig()
    i = int(joint.samples.train_idx[0])
    batch_idx = joint.samples.train_idx[: cfg.batch_size]

    def fwd():
        batch = [city_inputs_at(ds, i, joint.t_in) for ds in joint.datasets]
        model_forward(batch, params, cfg.switches)

    def step():
        probe = ModelParams(params.config, dict(params.tensors), params.city_nodes)
        with Tape() as tape:
            loss = _batch_loss(probe, joint, batch_idx, cfg.switches)
        grads = collect_gradients(probe, tape, loss)
        optimizer_step(probe, grads, AdamState(), cfg)

    return _median_seconds(fwd), _median_seconds(step)

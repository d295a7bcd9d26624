"""Synthetic multi-city accident data with the four field pathologies.

Event counts are Poisson draws from a separable intensity field
lambda(cell, hour) = sum-of-gaussian-hotspots(cell) * weekly_cycle(hour) *
base_rate, which yields spatially clustered, temporally sparse, weekly-cyclic
and (by Poisson sampling) noisy targets. Grid features carry lagged risk,
hour-of-week encodings and synthetic weather; node features are the same
signals aggregated at each node's cell. Supports: a k-nearest planar-ish
road graph, a risk co-occurrence correlation matrix, and a random functional
similarity matrix (omitted for profiles without one, mirroring a city with
no such modality).

Everything is driven by explicit seeds; identical seeds give bit-identical
datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientLengthError, SpanTooShortError
from .stt1 import read_json, read_stt1, write_json, write_stt1
from .supports import GridNodeMap, SupportSet, build_grid_node_map, make_support_set
from .tensor import Tensor

HOURS_PER_WEEK = 168
WINDOW_IN = 12
WINDOW_OUT = 1
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

GEO_FEATURES = ["risk_lag1", "risk_lag168", "sin_how", "cos_how", "temperature", "precipitation"]
SEM_FEATURES = ["node_risk_lag1", "node_risk_lag168", "sin_how", "cos_how"]


@dataclass
class GeneratorProfile:
    """Knobs for one synthetic city."""

    hotspots: int = 3
    hotspot_sigma: float = 1.0  # spatial spread of each hotspot, in cells
    peak_intensity: float = 22.0  # rate at a hotspot center at an average hour
    intensity_floor: float = 0.05  # bump values below floor*max are zeroed (true sparsity)
    base_rate: float = 1.0  # global multiplier on the intensity field
    flat_cycle: bool = False  # disable the weekly rhythm (diagnostics)
    weekend_factor: float = 0.55  # weekend intensity relative to weekdays
    valid_fraction: float = 1.0  # share of grid cells marked valid
    origin_weekday: int = 0  # weekday of hour index 0 (0 = Monday)
    has_poi: bool = True  # whether the functional-similarity modality exists
    road_neighbors: int = 3  # k for the road graph
    rank: int | None = None  # adaptive factor rank (default min(8, N))

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorProfile":
        return cls(**d)


@dataclass
class CityDataset:
    """One city's aligned sequences, supports and mapping."""

    name: str
    w: int
    h: int
    n: int
    x_geo: np.ndarray  # (T, W*H, F_geo)
    x_sem: np.ndarray  # (T, N, F_sem)
    targets: np.ndarray  # (T, W, H), nonnegative counts; invalid cells are 0
    mask: np.ndarray  # (W, H) bool
    supports: SupportSet
    grid_map: GridNodeMap
    t0: int  # hours between Monday 00:00 and index 0
    seed: int
    profile: GeneratorProfile

    @property
    def t_total(self) -> int:
        return self.targets.shape[0]

    def hour_of_week(self, t) -> np.ndarray:
        return (np.asarray(t) + self.t0) % HOURS_PER_WEEK


@dataclass
class SampleSet:
    """Sliding windows over one city, split chronologically 70/10/20."""

    t_in: int
    t_out: int
    n_samples: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def target_index(self, i: int) -> int:
        return i + self.t_in

    def indices(self, split: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]


def weekly_cycle(profile: GeneratorProfile) -> np.ndarray:
    """Hour-of-week intensity profile, normalized to mean 1.

    Weekdays get two commute peaks (around 08:00-09:00 and 16:00-18:00, the
    evening one stronger); weekends get a flatter midday hump.
    """
    if profile.flat_cycle:
        return np.ones(HOURS_PER_WEEK)
    cyc = np.zeros(HOURS_PER_WEEK)
    hours = np.arange(24)
    weekday = (
        0.10
        + 0.85 * np.exp(-0.5 * ((hours - 8.5) / 1.3) ** 2)
        + 1.00 * np.exp(-0.5 * ((hours - 17.0) / 1.6) ** 2)
    )
    weekend = profile.weekend_factor * (0.12 + 0.55 * np.exp(-0.5 * ((hours - 13.0) / 4.0) ** 2))
    for day in range(7):
        cyc[day * 24 : (day + 1) * 24] = weekday if day < 5 else weekend
    return cyc / cyc.mean()


def hotspot_field(rng: np.random.Generator, w: int, h: int, profile: GeneratorProfile) -> np.ndarray:
    """Sum of gaussian bumps over the grid, scaled so the max hits peak_intensity."""
    xs, ys = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    bump = np.zeros((w, h))
    for _ in range(profile.hotspots):
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, h - 1)
        amp = rng.uniform(0.55, 1.0)
        bump += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * profile.hotspot_sigma**2))
    if bump.max() > 0:
        bump *= profile.peak_intensity / bump.max()
        bump[bump < profile.intensity_floor * profile.peak_intensity] = 0.0
    return bump


def make_validity_mask(w: int, h: int, valid_fraction: float, seed: int) -> np.ndarray:
    """Deterministic subset of cells marked valid; count = round(fraction * W * H)."""
    if not (0 < valid_fraction <= 1):
        raise ConfigError(f"valid_fraction {valid_fraction} outside (0, 1]")
    n_valid = int(round(valid_fraction * w * h))
    order = np.random.default_rng(seed).permutation(w * h)
    mask = np.zeros(w * h, dtype=bool)
    mask[order[:n_valid]] = True
    return mask.reshape(w, h)


def _weather(rng: np.random.Generator, t_total: int, t0: int):
    hours = np.arange(t_total) + t0
    drift = np.cumsum(rng.normal(scale=0.03, size=t_total))
    drift -= drift.mean()
    temp = np.sin(2 * np.pi * (hours % 24) / 24) + 0.4 * drift
    wet = np.empty(t_total)
    level = 0.0
    shocks = rng.normal(size=t_total)
    for t in range(t_total):
        level = 0.9 * level + shocks[t]
        wet[t] = level
    precip = np.maximum(wet - 1.2, 0.0)
    return temp, precip


def generate_city(seed: int, w: int, h: int, n: int, weeks: int, profile: GeneratorProfile | None = None, name: str = "city") -> CityDataset:
    """Deterministically build one synthetic city.

    An extra leading week is simulated so lag-168 features are real history;
    the exposed series covers weeks*168 hours starting at the profile's
    origin weekday.
    """
    if w < 1 or h < 1 or n < 1 or weeks < 1:
        raise ConfigError(f"generate_city: degenerate dims w={w} h={h} n={n} weeks={weeks}")
    profile = profile or GeneratorProfile()
    rng = np.random.default_rng(seed)

    mask = make_validity_mask(w, h, profile.valid_fraction, seed=seed + 1)
    bump = hotspot_field(rng, w, h, profile) * mask  # invalid cells carry zero intensity
    cycle = weekly_cycle(profile)

    t0 = int(profile.origin_weekday) % 7 * 24
    t_total = weeks * HOURS_PER_WEEK
    lead = HOURS_PER_WEEK  # hidden history for lag features
    hw_full = (np.arange(-lead, t_total) + t0) % HOURS_PER_WEEK
    lam = profile.base_rate * bump[None, :, :] * cycle[hw_full][:, None, None]
    counts_full = rng.poisson(lam).astype(np.float64)  # (lead + T, W, H)
    targets = counts_full[lead:]

    temp, precip = _weather(rng, t_total, t0)
    hw = hw_full[lead:]
    sin_how = np.sin(2 * np.pi * hw / HOURS_PER_WEEK)
    cos_how = np.cos(2 * np.pi * hw / HOURS_PER_WEEK)

    flat_full = counts_full.reshape(lead + t_total, w * h)
    lag1 = np.log1p(flat_full[lead - 1 : lead - 1 + t_total])
    lag168 = np.log1p(flat_full[: t_total])
    x_geo = np.stack(
        [
            lag1,
            lag168,
            np.repeat(sin_how[:, None], w * h, axis=1),
            np.repeat(cos_how[:, None], w * h, axis=1),
            np.repeat(temp[:, None], w * h, axis=1),
            np.repeat(precip[:, None], w * h, axis=1),
        ],
        axis=2,
    )

    # nodes concentrate where intensity lives; several nodes may share a cell
    valid_cells = np.flatnonzero(mask.reshape(-1))
    weights = bump.reshape(-1)[valid_cells] + 0.1
    cells = rng.choice(valid_cells, size=n, p=weights / weights.sum())
    grid_map = build_grid_node_map(cells, w, h, n)

    node_series_full = flat_full[:, cells]  # (lead + T, N)
    x_sem = np.stack(
        [
            np.log1p(node_series_full[lead - 1 : lead - 1 + t_total]),
            np.log1p(node_series_full[:t_total]),
            np.repeat(sin_how[:, None], n, axis=1),
            np.repeat(cos_how[:, None], n, axis=1),
        ],
        axis=2,
    )

    supports = _build_supports(rng, cells, w, h, n, node_series_full[lead:], profile)

    return CityDataset(
        name=name, w=w, h=h, n=n,
        x_geo=x_geo, x_sem=x_sem, targets=targets, mask=mask,
        supports=supports, grid_map=grid_map,
        t0=t0, seed=seed, profile=profile,
    )


def _build_supports(rng, cells, w, h, n, node_series, profile) -> SupportSet:
    # road: symmetric k-nearest graph on jittered node positions
    pos = np.stack([cells // h, cells % h], axis=1) + rng.uniform(-0.3, 0.3, size=(n, 2))
    road = np.zeros((n, n))
    if n > 1:
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        k = min(profile.road_neighbors, n - 1)
        for i in range(n):
            for j in np.argsort(d2[i])[:k]:
                road[i, j] = road[j, i] = 1.0

    # risk: historical co-occurrence correlation, clipped to nonnegative
    risk = np.zeros((n, n))
    if n > 1:
        centered = node_series - node_series.mean(axis=0)
        std = centered.std(axis=0)
        denom = np.outer(std, std)
        cov = centered.T @ centered / len(node_series)
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
        risk = np.clip((corr + corr.T) / 2, 0.0, None)
        np.fill_diagonal(risk, 0.0)

    poi = None
    if profile.has_poi:
        feats = rng.random((n, 5))
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        poi_m = (feats / norms) @ (feats / norms).T
        poi = Tensor(np.clip((poi_m + poi_m.T) / 2, 0.0, None))

    return make_support_set(Tensor(road), Tensor(risk), poi, rank=profile.rank)


def align_relative_time(datasets: list) -> list:
    """Re-index every dataset so hour 0 is a Monday 00:00; drops the leading
    partial week. Afterwards index k mod 168 names the same weekday/hour in
    every city."""
    out = []
    for ds in datasets:
        drop = (HOURS_PER_WEEK - ds.t0) % HOURS_PER_WEEK
        if ds.t_total - drop < HOURS_PER_WEEK:
            raise SpanTooShortError(
                f"{ds.name}: {ds.t_total} hours leave less than one week after dropping {drop}"
            )
        if drop == 0:
            out.append(ds)
            continue
        out.append(
            replace(
                ds,
                x_geo=ds.x_geo[drop:],
                x_sem=ds.x_sem[drop:],
                targets=ds.targets[drop:],
                t0=0,
            )
        )
    return out


def build_windows(ds: CityDataset, t_in: int = WINDOW_IN, t_out: int = WINDOW_OUT) -> SampleSet:
    """Stride-1 sliding windows; chronological 70/10/20 split (train earliest)."""
    total = ds.t_total
    if total < t_in + t_out:
        raise InsufficientLengthError(f"{ds.name}: {total} steps < window {t_in}+{t_out}")
    n_samples = total - t_in - t_out + 1
    n_train = int(SPLIT_FRACTIONS[0] * n_samples)
    n_val = int(SPLIT_FRACTIONS[1] * n_samples)
    idx = np.arange(n_samples)
    return SampleSet(
        t_in=t_in,
        t_out=t_out,
        n_samples=n_samples,
        train_idx=idx[:n_train],
        val_idx=idx[n_train : n_train + n_val],
        test_idx=idx[n_train + n_val :],
    )


def inject_noise(x, level: float, seed: int):
    """Additive i.i.d. gaussian noise with standard deviation ``level``.

    Level 0 returns the input bit-identically. Accepts Tensor or ndarray and
    returns the same kind.
    """
    if level < 0:
        raise ConfigError(f"noise level {level} < 0")
    if level == 0:
        return x
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    noisy = arr + np.random.default_rng(seed).normal(scale=level, size=arr.shape)
    return Tensor(noisy) if isinstance(x, Tensor) else noisy


# -- persistence --------------------------------------------------------------


def save_dataset(ds: CityDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_stt1(path / "x_geo.stt1", ds.x_geo)
    write_stt1(path / "x_sem.stt1", ds.x_sem)
    write_stt1(path / "targets.stt1", ds.targets)
    write_stt1(path / "mask.stt1", ds.mask.astype(np.float64))
    write_stt1(path / "map.stt1", ds.grid_map.matrix)
    sup = ds.supports
    write_stt1(path / "road.stt1", sup.road)
    write_stt1(path / "risk.stt1", sup.risk)
    write_stt1(path / "poi.stt1", sup.poi)
    write_stt1(path / "adaptive_e1.stt1", sup.adaptive_e1)
    write_stt1(path / "adaptive_e2.stt1", sup.adaptive_e2)
    write_json(
        path / "manifest.json",
        {
            "format": "crossrisk-dataset-v1",
            "name": ds.name,
            "w": ds.w,
            "h": ds.h,
            "n": ds.n,
            "t0": ds.t0,
            "seed": ds.seed,
            "profile": ds.profile.to_dict(),
            "support_kinds": ["road", "risk", "poi", "adaptive"],
            "rank": sup.rank,
            "assignments": ds.grid_map.assignments,
            "geo_features": GEO_FEATURES,
            "sem_features": SEM_FEATURES,
        },
    )


def load_dataset(path) -> CityDataset:
    path = Path(path)
    man = read_json(path / "manifest.json")
    road = Tensor(read_stt1(path / "road.stt1"))
    risk = Tensor(read_stt1(path / "risk.stt1"))
    poi = Tensor(read_stt1(path / "poi.stt1"))
    supports = SupportSet(
        road=road,
        risk=risk,
        poi=poi,
        adaptive_e1=Tensor(read_stt1(path / "adaptive_e1.stt1")),
        adaptive_e2=Tensor(read_stt1(path / "adaptive_e2.stt1")),
    )
    grid_map = build_grid_node_map(man["assignments"], man["w"], man["h"], man["n"])
    return CityDataset(
        name=man["name"],
        w=man["w"],
        h=man["h"],
        n=man["n"],
        x_geo=read_stt1(path / "x_geo.stt1"),
        x_sem=read_stt1(path / "x_sem.stt1"),
        targets=read_stt1(path / "targets.stt1"),
        mask=read_stt1(path / "mask.stt1").astype(bool),
        supports=supports,
        grid_map=grid_map,
        t0=man["t0"],
        seed=man["seed"],
        profile=GeneratorProfile.from_dict(man["profile"]),
    )

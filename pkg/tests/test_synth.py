"""Synthetic data engine: generation laws, alignment, windows, noise, masks."""

import numpy as np
import pytest

from crossrisk.errors import ConfigError, InsufficientLengthError, SpanTooShortError
from crossrisk.synth import (
    HOURS_PER_WEEK,
    CityDataset,
    GeneratorProfile,
    align_relative_time,
    build_windows,
    generate_city,
    inject_noise,
    load_dataset,
    make_validity_mask,
    save_dataset,
    weekly_cycle,
)
from crossrisk.tensor import Tensor


def test_generate_zero_base_rate():
    ds = generate_city(seed=0, w=4, h=4, n=5, weeks=1, profile=GeneratorProfile(base_rate=0.0))
    assert np.array_equal(ds.targets, np.zeros_like(ds.targets))
    assert ds.mask.all()


def test_generate_single_hotspot_center_beats_corners():
    profile = GeneratorProfile(hotspots=1, flat_cycle=True, hotspot_sigma=1.0, peak_intensity=8.0)
    ds = generate_city(seed=1, w=7, h=7, n=4, weeks=4, profile=profile)
    means = ds.targets.mean(axis=0)
    center = np.unravel_index(np.argmax(means), means.shape)
    for corner in [(0, 0), (0, 6), (6, 0), (6, 6)]:
        if corner != center:
            assert means[center] > means[corner]


def test_generate_determinism_bit_identical():
    a = generate_city(seed=7, w=5, h=4, n=6, weeks=1)
    b = generate_city(seed=7, w=5, h=4, n=6, weeks=1)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.x_geo, b.x_geo)
    assert np.array_equal(a.x_sem, b.x_sem)
    assert np.array_equal(a.supports.road.data, b.supports.road.data)
    assert np.array_equal(a.supports.risk.data, b.supports.risk.data)
    assert a.grid_map.assignments == b.grid_map.assignments


def test_generate_degenerate_dims():
    with pytest.raises(ConfigError):
        generate_city(seed=0, w=0, h=4, n=2, weeks=1)
    with pytest.raises(ConfigError):
        generate_city(seed=0, w=4, h=4, n=2, weeks=0)


def test_generate_supports_are_valid():
    ds = generate_city(seed=2, w=6, h=6, n=8, weeks=1)
    for mat in (ds.supports.road.data, ds.supports.risk.data, ds.supports.poi.data):
        assert np.allclose(mat, mat.T)
        assert mat.min() >= 0
    assert len(ds.supports.stack()) == 4


def test_lag_features_match_history():
    ds = generate_city(seed=3, w=4, h=4, n=3, weeks=2)
    flat = ds.targets.reshape(ds.t_total, -1)
    # lag-1 feature at step t equals log1p(target at t-1)
    assert np.allclose(ds.x_geo[1:, :, 0], np.log1p(flat[:-1]), atol=1e-12)
    # lag-168 feature at step t equals log1p(target at t-168)
    assert np.allclose(ds.x_geo[HOURS_PER_WEEK:, :, 1], np.log1p(flat[:-HOURS_PER_WEEK]), atol=1e-12)


def test_weekly_cycle_two_peaks_in_top_quartile():
    cyc = weekly_cycle(GeneratorProfile())
    order = np.argsort(-cyc)
    top = set(order[:42].tolist())
    assert any(day * 24 + 8 in top or day * 24 + 9 in top for day in range(5))
    assert any(day * 24 + 17 in top for day in range(5))


def test_weekly_autocorrelation_lag168_exceeds_lag100():
    ds = generate_city(seed=4, w=8, h=8, n=6, weeks=6)
    series = ds.targets.sum(axis=(1, 2))
    series = series - series.mean()

    def autocorr(lag):
        return float(np.dot(series[:-lag], series[lag:]) / np.dot(series, series))

    assert autocorr(HOURS_PER_WEEK) > autocorr(100)


def test_default_profile_sparsity():
    # default profile at the default city geometry (20x20, 243 valid cells)
    profile = GeneratorProfile(valid_fraction=243 / 400)
    ds = generate_city(seed=5, w=20, h=20, n=20, weeks=4, profile=profile)
    frac_zero = float((ds.targets == 0).mean())
    assert frac_zero >= 0.80


def test_align_noop_for_monday_origin():
    ds = generate_city(seed=6, w=4, h=4, n=3, weeks=2)
    assert ds.t0 == 0
    out = align_relative_time([ds])[0]
    assert out is ds


def test_align_drops_to_first_monday():
    # Wednesday origin: first Monday is 5 days in, so 120 hours are dropped
    ds = generate_city(seed=7, w=4, h=4, n=3, weeks=3, profile=GeneratorProfile(origin_weekday=2))
    assert ds.t0 == 48
    out = align_relative_time([ds])[0]
    assert out.t0 == 0
    assert out.t_total == ds.t_total - 120
    assert np.array_equal(out.targets, ds.targets[120:])


def test_align_calendar_consistency_across_cities():
    a = generate_city(seed=8, w=4, h=4, n=3, weeks=3, profile=GeneratorProfile(origin_weekday=2))
    b = generate_city(seed=9, w=4, h=4, n=3, weeks=3, profile=GeneratorProfile(origin_weekday=4))
    out_a, out_b = align_relative_time([a, b])
    # hour-of-week of index k now agrees between both cities
    ks = np.arange(min(out_a.t_total, out_b.t_total))
    assert np.array_equal(out_a.hour_of_week(ks), out_b.hour_of_week(ks))
    assert out_a.hour_of_week(0) == 0  # Monday 00:00


def test_align_span_too_short():
    ds = generate_city(seed=10, w=4, h=4, n=3, weeks=1, profile=GeneratorProfile(origin_weekday=2))
    with pytest.raises(SpanTooShortError):
        align_relative_time([ds])


def _tiny_ds(t_total):
    ds = generate_city(seed=11, w=2, h=2, n=2, weeks=1)
    return CityDataset(
        name=ds.name, w=ds.w, h=ds.h, n=ds.n,
        x_geo=ds.x_geo[:t_total], x_sem=ds.x_sem[:t_total], targets=ds.targets[:t_total],
        mask=ds.mask, supports=ds.supports, grid_map=ds.grid_map,
        t0=ds.t0, seed=ds.seed, profile=ds.profile,
    )


def test_windows_counts_and_split():
    s = build_windows(_tiny_ds(13))
    assert s.n_samples == 1
    s = build_windows(_tiny_ds(22))
    assert s.n_samples == 10
    assert len(s.train_idx) == 7 and len(s.val_idx) == 1 and len(s.test_idx) == 2
    assert s.train_idx.max() < s.val_idx.min() < s.test_idx.min()


def test_windows_target_index():
    s = build_windows(_tiny_ds(30))
    for i in range(s.n_samples):
        assert s.target_index(i) == i + 12


def test_windows_insufficient_length():
    with pytest.raises(InsufficientLengthError):
        build_windows(_tiny_ds(12))


def test_inject_noise_identity_at_zero():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert inject_noise(x, 0.0, seed=0) is x
    arr = np.arange(6.0)
    assert inject_noise(arr, 0.0, seed=0) is arr


def test_inject_noise_variance_and_determinism():
    base = np.zeros(100_000)
    noisy = inject_noise(base, 0.3, seed=1)
    var = float(noisy.var())
    assert abs(var - 0.09) / 0.09 < 0.05
    again = inject_noise(base, 0.3, seed=1)
    assert np.array_equal(noisy, again)
    with pytest.raises(ConfigError):
        inject_noise(base, -0.1, seed=1)


def test_validity_mask_counts():
    assert make_validity_mask(4, 4, 1.0, seed=0).sum() == 16
    assert make_validity_mask(20, 20, 243 / 400, seed=0).sum() == 243
    assert make_validity_mask(20, 20, 197 / 400, seed=0).sum() == 197


def test_masked_cells_have_zero_targets():
    profile = GeneratorProfile(valid_fraction=0.5, peak_intensity=30.0, hotspot_sigma=3.0)
    ds = generate_city(seed=12, w=6, h=6, n=4, weeks=1, profile=profile)
    assert np.all(ds.targets[:, ~ds.mask] == 0.0)
    assert ds.mask.sum() == 18


def test_dataset_round_trip(tmp_path):
    ds = generate_city(seed=13, w=4, h=3, n=5, weeks=1, name="roundtrip")
    save_dataset(ds, tmp_path / "c")
    back = load_dataset(tmp_path / "c")
    assert back.name == "roundtrip"
    assert np.array_equal(back.targets, ds.targets)
    assert np.array_equal(back.x_geo, ds.x_geo)
    assert np.array_equal(back.mask, ds.mask)
    assert np.array_equal(back.supports.road.data, ds.supports.road.data)
    assert np.array_equal(back.supports.adaptive_e1.data, ds.supports.adaptive_e1.data)
    assert back.grid_map.assignments == ds.grid_map.assignments
    assert back.t0 == ds.t0


def test_save_is_byte_deterministic(tmp_path):
    for run in ("a", "b"):
        save_dataset(generate_city(seed=14, w=3, h=3, n=4, weeks=1), tmp_path / run)
    for name in ("x_geo", "x_sem", "targets", "mask", "road", "risk", "poi", "map"):
        fa = (tmp_path / "a" / f"{name}.stt1").read_bytes()
        fb = (tmp_path / "b" / f"{name}.stt1").read_bytes()
        assert fa == fb, name

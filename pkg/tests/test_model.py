"""Fusion head and full model: gating, output head, city isolation, checkpoints."""

import numpy as np
import pytest

from conftest import max_rel_err

from crossrisk import tensor as T
from crossrisk.errors import ShapeMismatchError
from crossrisk.grid_branch import Switches
from crossrisk.model import (
    CityInputs,
    ModelConfig,
    RiskMap,
    gated_fusion,
    init_model_params,
    load_checkpoint,
    model_forward,
    output_head,
    save_checkpoint,
)
from crossrisk.supports import block_diagonal, block_grid_node_map, build_grid_node_map, make_support_set
from crossrisk.tensor import Tape, Tensor, backward


def toy_supports(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n))
    road = (a + a.T) / 2
    np.fill_diagonal(road, 0)
    b = rng.random((n, n))
    risk = (b + b.T) / 2
    np.fill_diagonal(risk, 0)
    return make_support_set(Tensor(road), Tensor(risk), None, rank=2)


def toy_city(name, w, h, n, t_len, cfg, seed, partial_mask=False):
    rng = np.random.default_rng(seed)
    mask = np.ones((w, h), dtype=bool)
    if partial_mask:
        mask[0, 0] = False
    return CityInputs(
        name=name,
        x_geo=Tensor(rng.normal(size=(t_len, w * h, cfg.f_geo))),
        x_sem=Tensor(rng.normal(size=(t_len, n, cfg.f_sem))),
        supports=toy_supports(n, seed + 1),
        grid_map=build_grid_node_map(rng.integers(0, w * h, size=n), w, h, n),
        w=w,
        h=h,
        mask=mask,
    )


def toy_model(cities, cfg=None, seed=0):
    cfg = cfg or ModelConfig(d=4, heads=2, window=2, layers=2, rank=2)
    return init_model_params(cfg, {c.name: c.supports for c in cities}, seed=seed), cfg


def test_gated_fusion_zero_logits_is_mean():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 2, 2)))
    b = Tensor(rng.normal(size=(3, 2, 2)))
    out = gated_fusion(a, b, Tensor(np.zeros(3))).data
    assert np.allclose(out, (a.data + b.data) / 2, rtol=0, atol=1e-15)


def test_gated_fusion_saturated_gate_returns_first():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 2, 2)))
    b = Tensor(rng.normal(size=(3, 2, 2)))
    out = gated_fusion(a, b, Tensor(np.full(3, 40.0))).data
    assert np.allclose(out, a.data, rtol=0, atol=1e-12)


def test_gated_fusion_elementwise_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 2, 4))
    logits = rng.normal(size=3)
    got = gated_fusion(Tensor(a), Tensor(b), Tensor(logits)).data
    g = 1 / (1 + np.exp(-logits))
    want = g[:, None, None] * a + (1 - g[:, None, None]) * b
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_gated_fusion_convexity_many_draws():
    rng = np.random.default_rng(3)
    for trial in range(300):
        d = int(rng.integers(1, 5))
        a = rng.normal(size=(d, 2, 3))
        b = rng.normal(size=(d, 2, 3))
        logits = rng.normal(size=d) * 3
        out = gated_fusion(Tensor(a), Tensor(b), Tensor(logits)).data
        lo = np.minimum(a, b) - 1e-12
        hi = np.maximum(a, b) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)


def test_output_head_zero_params_zero_map():
    cities = [toy_city("a", 2, 2, 3, 3, ModelConfig(d=4), seed=4)]
    params, cfg = toy_model(cities)
    params.update({
        "head.w1": T.zeros((4, 4)), "head.b1": T.zeros(4),
        "head.w2": T.zeros((4, 1)), "head.b2": T.zeros(1),
    })
    out = output_head(Tensor(np.random.default_rng(5).normal(size=(4, 2, 2))), params)
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_output_head_locality():
    cities = [toy_city("a", 2, 2, 3, 3, ModelConfig(d=4), seed=6)]
    params, _ = toy_model(cities)
    rng = np.random.default_rng(7)
    y = rng.normal(size=(4, 3, 3))
    y2 = y.copy()
    y2[:, 1, 2] += 1.0
    a = output_head(Tensor(y), params).data
    b = output_head(Tensor(y2), params).data
    diff = np.abs(a - b) > 0
    assert diff[1, 2]
    assert diff.sum() == 1


def test_output_head_per_cell_mlp_oracle():
    cities = [toy_city("a", 2, 2, 3, 3, ModelConfig(d=4), seed=8)]
    params, _ = toy_model(cities)
    rng = np.random.default_rng(9)
    y = rng.normal(size=(4, 2, 3))
    got = output_head(Tensor(y), params).data
    for i in range(2):
        for j in range(3):
            hidden = np.maximum(y[:, i, j] @ params["head.w1"].data + params["head.b1"].data, 0.0)
            want = hidden @ params["head.w2"].data + params["head.b2"].data
            assert abs(got[i, j] - want[0]) < 1e-12


def test_model_forward_shapes_and_determinism():
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 4, cfg, seed=10), toy_city("b", 1, 3, 4, 4, cfg, seed=11)]
    params, _ = toy_model(cities, cfg)
    out1 = model_forward(cities, params)
    out2 = model_forward(cities, params)
    assert [r.city for r in out1] == ["a", "b"]
    assert out1[0].values.shape == (2, 2) and out1[1].values.shape == (1, 3)
    for r1, r2 in zip(out1, out2):
        assert np.array_equal(r1.values.data, r2.values.data)  # bit-identical


def test_model_forward_masked_cells_are_zero():
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 4, cfg, seed=12, partial_mask=True)]
    params, _ = toy_model(cities, cfg)
    out = model_forward(cities, params)[0]
    assert out.values.data[0, 0] == 0.0


def test_model_forward_switches_change_output():
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 4, cfg, seed=13)]
    params, _ = toy_model(cities, cfg)
    base = model_forward(cities, params)[0].values.data
    for tokens in (["stg"], ["sts"], ["stm"], ["lma"]):
        out = model_forward(cities, params, Switches.from_tokens(tokens))[0].values.data
        assert not np.array_equal(out, base), tokens
        assert out.shape == base.shape


def test_city_isolation_multi_vs_single():
    cfg = ModelConfig(d=4, heads=2, window=2, layers=2, rank=2)
    cities = [toy_city("a", 2, 2, 3, 3, cfg, seed=14), toy_city("b", 1, 3, 4, 3, cfg, seed=15)]
    params, _ = toy_model(cities, cfg)
    multi = model_forward(cities, params)
    for city in cities:
        single = model_forward([city], params)[0]
        joint = next(r for r in multi if r.city == city.name)
        assert np.max(np.abs(single.values.data - joint.values.data)) <= 1e-12


def test_block_diagonal_composition_equals_per_city_graph_outputs():
    # run the graph branch on block-composed supports/maps and compare rows
    from crossrisk.graph_branch import graph_branch_sequence
    from crossrisk import tensor as TT

    cfg = ModelConfig(d=4, heads=2, window=2, layers=2, rank=2)
    cities = [toy_city("a", 2, 2, 3, 3, cfg, seed=16), toy_city("b", 1, 3, 4, 3, cfg, seed=17)]
    params, _ = toy_model(cities, cfg)
    gp = params.graph_branch()

    composed_supports = block_diagonal([c.supports for c in cities])
    x_cat = Tensor(np.concatenate([c.x_sem.data for c in cities], axis=1))
    seq = graph_branch_sequence(x_cat, composed_supports, gp).data

    offset = 0
    for c in cities:
        e1, e2 = params.adaptive_factors(c.name)
        single = graph_branch_sequence(c.x_sem, c.supports, gp, None, e1, e2).data
        n = c.x_sem.shape[1]
        assert np.max(np.abs(seq[offset : offset + n] - single)) <= 1e-12
        offset += n


def test_end_to_end_gradient_check_two_city_toy():
    # finite differences vs. tape on a small random subset of parameters
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 3, cfg, seed=18), toy_city("b", 1, 3, 4, 3, cfg, seed=19)]
    params, _ = toy_model(cities, cfg)
    truths = [Tensor(np.random.default_rng(20 + i).normal(size=(c.w, c.h))) for i, c in enumerate(cities)]

    def loss_fn():
        preds = model_forward(cities, params)
        total = None
        for pred, truth in zip(preds, truths):
            diff = T.add(pred.values, T.scale(truth, -1.0))
            term = T.tsum(T.mul(diff, diff))
            total = term if total is None else T.add(total, term)
        return total

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)

    rng = np.random.default_rng(21)
    names = list(params.tensors)
    picked = rng.choice(len(names), size=6, replace=False)
    step = 1e-5
    for idx in picked:
        name = names[idx]
        tensor = params[name]
        g_tape = grads[tensor.tid].data if tensor.tid in grads else np.zeros(tensor.shape)
        flat_idx = int(rng.integers(tensor.size))
        for sign, store in ((+1, "plus"), (-1, "minus")):
            arr = tensor.data.copy()
            arr.reshape(-1)[flat_idx] += sign * step
            params.update({name: Tensor(arr)})
            val = loss_fn().item()
            if store == "plus":
                f_plus = val
            else:
                f_minus = val
            arr2 = arr.copy()
            arr2.reshape(-1)[flat_idx] -= sign * step
            params.update({name: Tensor(arr2)})
        fd = (f_plus - f_minus) / (2 * step)
        err = max_rel_err(g_tape.reshape(-1)[flat_idx], fd, floor=1e-6)
        assert err < 1e-3, f"{name}[{flat_idx}]: tape {g_tape.reshape(-1)[flat_idx]:.6g} fd {fd:.6g}"


def test_batched_forward_equals_per_sample_forwards():
    # the training path stacks samples; it must agree with model_forward bit-for-bit
    from crossrisk.model import forward_city_values

    cfg = ModelConfig(d=4, heads=2, window=2, layers=2, rank=2)
    params, _ = toy_model([toy_city("a", 2, 3, 4, 4, cfg, seed=40, partial_mask=True)], cfg)
    rng = np.random.default_rng(41)
    city = toy_city("a", 2, 3, 4, 4, cfg, seed=40, partial_mask=True)
    b = 5
    xg = rng.normal(size=(b, 4, 6, cfg.f_geo))
    xs = rng.normal(size=(b, 4, 4, cfg.f_sem))
    stacked = forward_city_values(city, Tensor(xg), Tensor(xs), params, Switches()).data
    for k in range(b):
        single = CityInputs(
            name="a", x_geo=Tensor(xg[k]), x_sem=Tensor(xs[k]),
            supports=city.supports, grid_map=city.grid_map, w=2, h=3, mask=city.mask,
        )
        want = model_forward([single], params)[0].values.data
        assert np.array_equal(stacked[k], want)


def test_batched_loss_equals_mean_of_sample_losses():
    from crossrisk.synth import GeneratorProfile, generate_city
    from crossrisk.training import _batch_loss, build_joint_data, city_inputs_at, masked_loss

    ds = generate_city(seed=42, w=3, h=3, n=4, weeks=1, profile=GeneratorProfile(valid_fraction=0.8))
    joint = build_joint_data([ds])
    params, _ = toy_model(
        [CityInputs("x", Tensor(np.zeros((2, 9, 6))), Tensor(np.zeros((2, 4, 4))), ds.supports, ds.grid_map, 3, 3, ds.mask)],
        ModelConfig(f_geo=6, f_sem=4, d=4, heads=2, window=2, layers=1, rank=2),
    )
    params.city_nodes = {ds.name: ds.n}
    params.tensors[f"adaptive.{ds.name}.e1"] = params.tensors.pop("adaptive.x.e1")
    params.tensors[f"adaptive.{ds.name}.e2"] = params.tensors.pop("adaptive.x.e2")
    idx = joint.samples.train_idx[:4]
    batched = _batch_loss(params, joint, idx, Switches()).item()
    singles = []
    for i in idx:
        preds = model_forward([city_inputs_at(ds, int(i), joint.t_in)], params)
        truth = Tensor(ds.targets[joint.samples.target_index(int(i))])
        singles.append(masked_loss(preds, [truth]).item())
    assert abs(batched - np.mean(singles)) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 3, cfg, seed=22)]
    params, _ = toy_model(cities, cfg)
    save_checkpoint(params, tmp_path / "ckpt", extra={"seed": 7, "switches": []})
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.config.to_dict() == cfg.to_dict()
    for name, tensor in params.tensors.items():
        assert np.array_equal(loaded[name].data, tensor.data), name
    out_a = model_forward(cities, params)[0].values.data
    out_b = model_forward(cities, loaded)[0].values.data
    assert np.array_equal(out_a, out_b)


def test_model_forward_dimension_error():
    cfg = ModelConfig(d=4, heads=2, window=2, layers=1, rank=2)
    cities = [toy_city("a", 2, 2, 3, 4, cfg, seed=23)]
    params, _ = toy_model(cities, cfg)
    bad = CityInputs(
        name="a",
        x_geo=cities[0].x_geo,
        x_sem=cities[0].x_sem,
        supports=cities[0].supports,
        grid_map=cities[0].grid_map,
        w=3,  # wrong: x_geo carries 4 cells
        h=2,
        mask=np.ones((3, 2), dtype=bool),
    )
    with pytest.raises(ShapeMismatchError, match="a"):
        model_forward([bad], params)

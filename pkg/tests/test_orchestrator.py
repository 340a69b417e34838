import math

import numpy as np
import pytest
from scipy import stats

from qvrp.env import CYCLIC, Instance, feasibility_mask, reset
from qvrp.instances import AICHI_EIGHT, InstanceSpec, sample_instance
from qvrp.orchestrator import (DEFAULT_SHIFTS, BoxGroup, BoxWorld, Demand, StagnationError, SubsetSearchConfig,
                               SyntheticSpec, aggregate, draw_node_subset, execution_loop, expand_boxes,
                               fallback_subset, generate_synthetic_instance, groups_from_json,
                               groups_to_json, in_shift, restrict, select_best_subset, shift_departure,
                               simulate_full_scale)

from test_policy import small_policy
import torch


def line_instance(n=6, trucks=2, capacity=10.0, horizon=1e6, cyclic=None, direct=None):
    coords = np.column_stack([np.linspace(0, 1, n), np.zeros(n)])
    tm = np.abs(coords[:, None, 0] - coords[None, :, 0]) * 3600 + 60
    np.fill_diagonal(tm, 0)
    return Instance(coords, tm, [capacity] * trucks, horizon, cyclic or {}, direct or {})


def test_single_tuple_fills_subset():
    rng = np.random.default_rng(0)
    assert sorted(draw_node_subset([(4, 1, 7)], 3, 10, rng)) == [1, 4, 7]


def test_subset_padding_and_size():
    rng = np.random.default_rng(1)
    for _ in range(200):
        keys = [(0, 1), (2, 3, 4), (1, 5)]
        out = draw_node_subset(keys, 7, 12, rng)
        assert len(out) == 7 == len(set(out))
        assert {0, 1, 2, 3, 4, 5} <= set(out)


def test_overshooting_tuple_is_skipped():
    rng = np.random.default_rng(2)
    for _ in range(100):
        out = draw_node_subset([(0, 1), (2, 3, 4), (5, 6)], 4, 8, rng)
        # the rank-three tuple fits only when drawn first
        assert len(out) == 4
        if set(out) >= {2, 3, 4}:
            assert out[:3] == [2, 3, 4]


def test_subset_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        draw_node_subset([(0, 1)], 5, 4, rng)
    with pytest.raises(ValueError):
        draw_node_subset([], 2, 4, rng)


def test_first_tuple_frequencies_are_uniform():
    rng = np.random.default_rng(4)
    keys = [(0, 1), (2, 3, 4), (5, 6), (7, 8, 9)]
    first = {k[0]: 0 for k in keys}
    n = 4000
    for _ in range(n):
        first[draw_node_subset(keys, 5, 10, rng)[0]] += 1
    chi2 = stats.chisquare(list(first.values()))
    assert chi2.pvalue > 0.01


def test_restrict_maps_and_clips():
    full = line_instance(cyclic={(1, 3, 5): 4.0, (0, 2): 1.0}, direct={(3, 1): 9.0, (2, 4): 2.0})
    d = Demand.of(full)
    sub = restrict(full, d, [3, 1, 5], 3.0, 2)
    assert sub.instance.cyclic == {(1, 0, 2): 3.0}
    assert sub.instance.direct == {(0, 1): 3.0}
    assert np.array_equal(sub.instance.time_matrix, full.time_matrix[np.ix_([3, 1, 5], [3, 1, 5])])
    assert sub.instance.homes == [0, 0]


def test_clipping_never_changes_masks():
    rng = np.random.default_rng(5)
    spec = InstanceSpec(n_nodes=8, n_trucks=2, n_demands=10, rank3_fraction=0.5, cyclic_fraction=0.5,
                        max_volume=9.0)
    for _ in range(20):
        full = sample_instance(spec, rng)
        d = Demand.of(full)
        nodes = list(rng.permutation(8)[:5])
        a = restrict(full, d, nodes, None, 2)
        b = restrict(full, d, nodes, 1.5, 2)
        assert set(a.instance.cyclic) == set(b.instance.cyclic)
        assert set(a.instance.direct) == set(b.instance.direct)
        sa, sb = reset(a.instance), reset(b.instance)
        for m in range(2):
            assert np.array_equal(feasibility_mask(sa, m), feasibility_mask(sb, m))


def test_single_candidate_is_returned():
    full = line_instance(direct={(1, 2): 1.0})
    cfg = SubsetSearchConfig(n_prime=3, k_node_draws=1, k_subset_attempts=2)
    choice = select_best_subset(cfg, full, Demand.of(full), small_policy(0), np.random.default_rng(0),
                                torch.Generator().manual_seed(0))
    assert len(choice.candidates) == 1 and choice.nodes == choice.candidates[0][0]


def test_selection_prefers_subset_with_demand_and_matches_logged_means():
    full = line_instance(n=8, direct={(1, 2): 3.0, (5, 6): 0.5})
    cfg = SubsetSearchConfig(n_prime=2, k_node_draws=12, k_subset_attempts=3)
    choice = select_best_subset(cfg, full, Demand.of(full), small_policy(1), np.random.default_rng(2),
                                torch.Generator().manual_seed(0))
    means = [float(np.mean(v)) for _, v in choice.candidates]
    assert {tuple(sorted(n)) for n, _ in choice.candidates} >= {(1, 2), (5, 6)}
    assert choice.mean_fulfilled == max(means)
    assert choice.nodes == choice.candidates[means.index(max(means))][0]
    assert sorted(choice.nodes) == [1, 2]


def test_fallback_uses_largest_tuple_and_neighbours():
    full = line_instance(n=8, direct={(1, 2): 3.0, (5, 6, 7): 4.0})
    nodes = fallback_subset(full, Demand.of(full), 4)
    assert nodes[:3] == [5, 6, 7] and nodes[3] == 4


def test_demand_within_one_subset_needs_one_iteration():
    full = line_instance(n=4, trucks=1, cyclic={(1, 2): 1.0}, direct={(3, 1): 2.0})
    res = execution_loop(full, small_policy(2), SubsetSearchConfig(n_prime=4, trucks_per_team=1), seed=0)
    assert len(res.iterations) == 1
    assert res.fulfilled == pytest.approx(3.0)
    assert res.iterations[0].remaining == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_loop_decreases_demand_and_accounts_for_everything(seed):
    rng = np.random.default_rng(seed)
    spec = InstanceSpec(n_nodes=8, n_trucks=2, n_demands=12, rank3_fraction=0.5, cyclic_fraction=0.5,
                        horizon_s=20000)
    full = sample_instance(spec, rng)
    cfg = SubsetSearchConfig(n_prime=4, k_node_draws=2, k_subset_attempts=2, k_execution_trials=2,
                             clip=3.0, max_iterations=200)
    res = execution_loop(full, small_policy(seed), cfg, seed=seed)
    remaining = [res.initial_total] + [it.remaining for it in res.iterations]
    assert all(b <= a + 1e-9 for a, b in zip(remaining, remaining[1:]))
    assert remaining[-1] == pytest.approx(0.0, abs=1e-6)
    assert res.fulfilled == pytest.approx(full.total_demand(), rel=1e-9)
    assert res.trucks_used == 2 * len(res.iterations)


def test_unreachable_demand_raises_stagnation():
    full = line_instance(n=4, horizon=30.0, direct={(1, 2): 1.0})
    with pytest.raises(StagnationError):
        execution_loop(full, small_policy(3), SubsetSearchConfig(n_prime=3, trucks_per_team=1))


def test_iteration_cap_raises_stagnation():
    full = line_instance(n=4, capacity=1.0, horizon=2000.0, direct={(1, 2): 10.0})
    with pytest.raises(StagnationError):
        execution_loop(full, small_policy(3), SubsetSearchConfig(n_prime=3, trucks_per_team=1, max_iterations=2))


def test_box_loop_recount_and_full_fulfillment():
    inst, groups = generate_synthetic_instance(SyntheticSpec(n_nodes=8, n_groups=12, total_boxes=60))
    cfg = SubsetSearchConfig(n_prime=4, k_node_draws=2, k_subset_attempts=2, k_execution_trials=2)
    res = execution_loop(inst, small_policy(4), cfg, seed=1, groups=groups)
    rep = simulate_full_scale(res.routes, groups, inst.time_matrix, inst.capacities[0], plans=res.plans)
    assert rep.fulfillment_fraction == pytest.approx(1.0)
    assert recount(rep) == pytest.approx(rep.fulfilled_volume)
    assert_shifts(rep, inst.time_matrix, None)


def recount(report) -> float:
    """Volume of boxes whose drop sequence equals their full requirement."""
    drops = {}
    for e in report.events:
        if e["kind"] == "drop":
            drops.setdefault(e["box"], []).append(e["node"])
    return sum(b.volume for b in report.boxes if tuple(drops.get(b.id, ())) == b.stops)


def assert_shifts(report, tm, names):
    index = {name: i for i, name in enumerate(names)} if names else None
    for tl in report.timelines:
        stops = tl["stops"]
        for a, b in zip(stops, stops[1:]):
            i = index[a["node"]] if index else a["node"]
            j = index[b["node"]] if index else b["node"]
            t0 = a["departure_time_s"]
            if tm[i, j] > 0:
                assert in_shift(t0, t0 + tm[i, j])


def test_empty_routes_fulfil_nothing():
    groups = [BoxGroup((1, 2), 3, 0.5)]
    rep = simulate_full_scale([], groups, line_instance().time_matrix, 10.0)
    assert rep.fulfillment_fraction == 0.0 and rep.timelines == [] and rep.listing() == []
    rep = simulate_full_scale([[[]]], groups, line_instance().time_matrix, 10.0)
    assert rep.fulfilled_volume == 0.0


def test_one_box_full_cycle():
    groups = [BoxGroup((1, 2), 1, 0.5)]
    tm = line_instance().time_matrix
    rep = simulate_full_scale([[[0, 1, 2, 1]]], groups, tm, 10.0)
    assert rep.fulfillment_fraction == 1.0
    assert recount(rep) == 0.5
    assert [e["kind"] for e in rep.events] == ["pickup", "drop", "pickup", "drop"]
    assert_shifts(rep, tm, None)


def test_capacity_and_lenient_pickup():
    groups = [BoxGroup((1, 3), 4, 1.0, cyclic=False), BoxGroup((1, 2), 1, 3.0, cyclic=False)]
    tm = line_instance().time_matrix
    rep = simulate_full_scale([[[0, 1, 3]]], groups, tm, 2.5)
    # the 3.0 box never fits, only boxes heading further along the route board
    assert rep.fulfilled_volume == 2.0
    assert recount(rep) == 2.0


def test_random_routes_recount_and_shift_windows():
    rng = np.random.default_rng(6)
    inst, groups = generate_synthetic_instance(SyntheticSpec(n_nodes=8, n_groups=20, total_boxes=200, seed=3))
    teams = [[list(rng.integers(0, 8, size=int(rng.integers(2, 9)))) for _ in range(2)] for _ in range(15)]
    rep = simulate_full_scale(teams, groups, inst.time_matrix, 5.0, names=inst.names)
    assert 0.0 < rep.fulfillment_fraction < 1.0
    assert recount(rep) == pytest.approx(rep.fulfilled_volume)
    assert_shifts(rep, inst.time_matrix, inst.names)
    assert all(r["departure_node"] in AICHI_EIGHT for r in rep.listing())
    # off-board, on-board and delivered volume always add up
    world = BoxWorld(groups, inst.time_matrix, 5.0)
    for team in teams:
        world.run_team(team)
        on = sum(b.volume for b in world.boxes if b.truck is not None)
        assert on == 0.0
        assert world.demand().total() + world.done_volume == pytest.approx(world.total)


def test_shift_departure_rules():
    assert shift_departure(0.0, 3600.0) == 0.0
    assert shift_departure(28000.0, 3600.0) == 57600.0
    assert shift_departure(86000.0, 3600.0) == 86400.0
    with pytest.raises(ValueError):
        shift_departure(0.0, 9 * 3600.0)
    assert in_shift(57600.0, 61200.0) and not in_shift(27000.0, 30000.0)
    assert DEFAULT_SHIFTS == ((0, 28800), (57600, 86400))


def test_generator_echoes_settings():
    inst, groups = generate_synthetic_instance(SyntheticSpec(n_nodes=8, n_groups=5, total_boxes=50))
    assert len({g.requirement for g in groups}) == 5
    assert sum(g.count for g in groups) == 50
    assert inst.names == AICHI_EIGHT
    assert all(len(g.requirement) in (2, 3) and len(set(g.requirement)) == len(g.requirement) for g in groups)


def test_aggregation_matches_box_sum():
    inst, groups = generate_synthetic_instance(SyntheticSpec(n_nodes=10, n_groups=30, total_boxes=300, seed=4))
    brute = {}
    for b in expand_boxes(groups):
        key = (b.location,) + b.stops[:-1]
        brute[key] = brute.get(key, 0.0) + b.volume
    assert set(brute) == set(inst.cyclic)
    assert all(math.isclose(brute[k], inst.cyclic[k], rel_tol=1e-12) for k in brute)
    world = BoxWorld(groups, inst.time_matrix, 10.0)
    assert world.demand().cyclic == pytest.approx(aggregate(groups))


def test_default_generator_size():
    inst, groups = generate_synthetic_instance(SyntheticSpec())
    assert inst.n == 21 and len(groups) == 107 and sum(g.count for g in groups) == 1000
    assert inst.names[0] == "LOCATION 01"
    assert groups_from_json(groups_to_json(groups)) == groups


def test_invalid_inputs():
    with pytest.raises(ValueError):
        BoxGroup((1, 2), 0, 1.0)
    with pytest.raises(ValueError):
        SubsetSearchConfig(n_prime=0)
    with pytest.raises(ValueError):
        SubsetSearchConfig(clip=0.0)
    with pytest.raises(ValueError):
        BoxWorld([BoxGroup((1, 9), 1, 1.0)], np.zeros((3, 3)), 1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(n_groups=10, total_boxes=5)

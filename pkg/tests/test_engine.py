import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from beeslab.drivers import make_driver_bundle
from beeslab.engine import (
    Configuration, KilledSide, ProcessKind, SimParams, advance_interval, apply_k, apply_l,
    bridge_crossing_probability, compare_left_of, first_hit_zero, mirror_trajectory,
    rank_sort, read_trajectory_csv, simulate, write_trajectory_csv,
)
from oracles import bridge_hit_mc, k_by_lists, l_by_lists, left_of_by_thresholds, reference_simulate

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
configs = st.lists(finite, min_size=1, max_size=6)


def conf_pair(draw_size=st.integers(1, 5)):
    return draw_size.flatmap(lambda n: st.tuples(
        st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n)))


# ---- configurations and ranking ----

@pytest.mark.parametrize("raw,expected", [
    ((3, 1, 2), (1, 2, 3)), ((0, 0), (0, 0)), ((-1.5, -1.5, 2), (-1.5, -1.5, 2)),
])
def test_rank_sort_examples(raw, expected):
    assert tuple(rank_sort(raw)) == expected


@pytest.mark.parametrize("bad", [[1.0, float("nan")], [float("inf")], []])
def test_rank_sort_rejects(bad):
    with pytest.raises(ValueError):
        rank_sort(bad)


def test_configuration_requires_sorted():
    with pytest.raises(ValueError):
        Configuration([2.0, 1.0])
    c = Configuration([1.0, 2.0])
    with pytest.raises(ValueError):
        c.positions[0] = 5.0


@given(configs)
def test_rank_sort_is_sorted_permutation(v):
    out = rank_sort(v).positions
    assert np.all(np.diff(out) >= 0)
    assert sorted(v) == list(out)


# ---- order predicate ----

def test_compare_examples():
    assert compare_left_of((1, 2), (1, 3))
    assert not compare_left_of((0, 5), (1, 2))
    assert not compare_left_of((1, 2), (0, 5))
    assert compare_left_of((0,), (0, 0))


@given(configs, configs)
def test_compare_matches_threshold_oracle(a, b):
    assert compare_left_of(a, b) == left_of_by_thresholds(a, b)


@given(conf_pair())
def test_compare_equal_size_is_componentwise(ab):
    a, b = ab
    assert compare_left_of(a, b) == bool(np.all(np.sort(a) <= np.sort(b)))


@given(configs)
def test_compare_reflexive(a):
    assert compare_left_of(a, a)


@given(st.integers(1, 5).flatmap(lambda n: st.lists(st.lists(finite, min_size=n, max_size=n),
                                                    min_size=3, max_size=3)))
def test_compare_transitive(abc):
    a, b, c = abc
    if compare_left_of(a, b) and compare_left_of(b, c):
        assert compare_left_of(a, c)


# ---- selection operators ----

@pytest.mark.parametrize("v,i,expected", [
    ((1, 2, 3), 1, (1, 2, 3)), ((1, 2, 3), 2, (2, 2, 3)), ((-2, 0, 7), 3, (0, 7, 7)),
])
def test_apply_l_examples(v, i, expected):
    assert tuple(apply_l(v, i)) == expected


@pytest.mark.parametrize("v,i,expected", [
    ((-3, 0, 2), 2, (0, 0, 2)), ((-1, 0, 5), 2, (-1, 0, 0)), ((-2, 1, 2), 1, (-2, 1, 2)),
])
def test_apply_k_examples(v, i, expected):
    assert tuple(apply_k(v, i)) == expected


def test_unsorted_input_rejected():
    with pytest.raises(ValueError):
        apply_l((2, 1), 1)


def test_rank_out_of_range():
    with pytest.raises(ValueError):
        apply_l((1, 2), 3)
    with pytest.raises(ValueError):
        apply_k((1, 2), 0)


@given(configs, st.data())
def test_operators_match_list_oracle(v, data):
    v = sorted(v)
    i = data.draw(st.integers(1, len(v)))
    assert list(apply_l(v, i)) == l_by_lists(v, i)
    assert list(apply_k(v, i)) == k_by_lists(v, i)


@given(configs)
def test_l_at_rank_one_is_identity(v):
    v = sorted(v)
    assert list(apply_l(v, 1)) == v


@given(configs, st.data())
def test_k_left_of_l(v, data):
    v = sorted(v)
    i = data.draw(st.integers(1, len(v)))
    assert compare_left_of(apply_k(v, i), apply_l(v, i))


@given(conf_pair(), st.data())
def test_l_is_monotone(ab, data):
    a, b = ab
    lo, hi = np.minimum(np.sort(a), np.sort(b)), np.maximum(np.sort(a), np.sort(b))
    i = data.draw(st.integers(1, len(a)))
    assert compare_left_of(apply_l(lo, i), apply_l(hi, i))


@given(configs, st.data())
def test_multiset_changes_by_one_kill_one_copy(v, data):
    v = sorted(v)
    i = data.draw(st.integers(1, len(v)))
    for out in (apply_l(v, i), apply_k(v, i)):
        removed = list(v) + [v[i - 1]]
        for x in out:
            removed.remove(x)
        assert len(removed) == 1


# ---- interval advance ----

def test_advance_examples():
    c = rank_sort([0.0, 1.0, 2.0])
    assert advance_interval(c, 0.0, 3.0, [1, 2, 3]) == c
    assert list(advance_interval(c, 2.0, 1.0, [0, 0, 0])) == [2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        advance_interval(c, -1.0, 0.0, [0, 0, 0])
    with pytest.raises(ValueError):
        advance_interval(c, 1.0, 0.0, [0, 0])


def test_advance_variance(rng):
    g = rng.standard_normal(100_000)
    d = np.array([advance_interval([0.0], 1.0, 0.0, [x])[0] for x in g[:20000]])
    se = d.var(ddof=1) * math.sqrt(2 / (d.size - 1))
    assert abs(d.var(ddof=1) - 1.0) < 3 * se


# ---- simulation ----

@pytest.mark.parametrize("kind", ["nbbm", "bees"])
def test_simulate_matches_reference_loop(kind):
    n, mu, horizon, dsub = 4, 0.3, 3.0, 0.1
    init = [-1.0, 0.0, 0.5, 2.0]
    tr = simulate(kind, SimParams(n, mu, horizon, dsub, 3), init, make_driver_bundle(3, n))
    gt, rows, events, final = reference_simulate(kind, n, mu, horizon, dsub, init,
                                                 make_driver_bundle(3, n))
    assert np.allclose(tr.grid_times, gt, rtol=0, atol=1e-12)
    assert np.allclose(tr.grid_positions, rows, atol=1e-9)
    assert tr.n_events == len(events)
    assert np.array_equal(tr.event_index, [e[1] for e in events])
    assert np.allclose(tr.event_post, np.array([e[3] for e in events]), atol=1e-9)
    assert np.allclose(tr.final.positions, final, atol=1e-9)


def test_every_sample_sorted_and_events_consistent():
    tr = simulate("bees", SimParams(6, -0.2, 10.0, 0.05, 1), np.linspace(-1, 1, 6))
    assert np.all(np.diff(tr.grid_positions, axis=1) >= 0)
    assert np.all(np.diff(tr.event_times) > 0)
    for ev in tr.events:
        assert ev.post_config == apply_k(ev.pre_config, ev.branch_index)
        left = abs(ev.pre_config[0]) >= abs(ev.pre_config[-1])
        assert ev.killed_side == (KilledSide.LARGEST_MAGNITUDE_LEFT if left
                                  else KilledSide.LARGEST_MAGNITUDE_RIGHT)
    nb = simulate("nbbm", SimParams(6, 0.0, 5.0, 0.05, 2), np.zeros(6))
    for ev in nb.events:
        assert ev.post_config == apply_l(ev.pre_config, ev.branch_index)
        assert ev.killed_side == KilledSide.LEFTMOST


def test_grid_times_are_multiples_of_substep():
    tr = simulate("nbbm", SimParams(3, 0.0, 2.0, 0.1, 0), np.zeros(3))
    assert np.allclose(tr.grid_times, np.arange(21) * 0.1)


def test_same_seed_bit_identical():
    p = SimParams(5, 0.1, 5.0, 0.01, 42)
    a = simulate("bees", p, np.zeros(5))
    b = simulate("bees", p, np.zeros(5))
    assert np.array_equal(a.grid_positions, b.grid_positions)
    assert np.array_equal(a.event_times, b.event_times)
    assert np.array_equal(a.event_post, b.event_post)


def test_single_bee_is_drifted_brownian_motion():
    # with N=1 every branching is the identity
    tr = simulate("bees", SimParams(1, 0.7, 50.0, 0.5, 8), [0.0])
    assert np.array_equal(tr.event_pre, tr.event_post)


def test_drift_only_path_with_zero_gaussians():
    class Zero:
        n_particles = 1

        def __init__(self):
            self.d = make_driver_bundle(0, 1)

        def next_gap(self):
            return self.d.next_gap()

        def next_index(self):
            return 1

        def gaussians(self, k):
            return np.zeros((k, 1))
    tr = simulate("bees", SimParams(1, 0.7, 10.0, 0.1, 0), [0.0], Zero())
    assert np.allclose(tr.leftmost, 0.7 * tr.sample_times, atol=1e-12)


def test_event_count_mean_is_n_times_horizon():
    counts = np.array([simulate("nbbm", SimParams(5, 0.0, 10.0, 100.0, s), np.zeros(5),
                                record_events=False, record_grid=False).n_events
                       for s in range(10_000)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - 50.0) < 3 * se


def test_event_count_is_poisson_chi_square():
    counts = np.array([simulate("nbbm", SimParams(2, 0.0, 2.0, 100.0, s), np.zeros(2),
                                record_events=False, record_grid=False).n_events
                       for s in range(4000)])
    lam = 4.0
    edges = np.arange(0, 10)
    obs = np.array([np.sum(counts == k) for k in edges[:-1]] + [np.sum(counts >= 9)])
    pmf = stats.poisson.pmf(edges[:-1], lam)
    exp = np.append(pmf, 1 - pmf.sum()) * counts.size
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_size_mismatch_rejected():
    with pytest.raises(ValueError):
        simulate("nbbm", SimParams(3, 0.0, 1.0), [0.0, 1.0])
    with pytest.raises(ValueError):
        simulate("nbbm", SimParams(3, 0.0, 1.0), [0.0, 1.0, 2.0], make_driver_bundle(0, 4))


@pytest.mark.parametrize("kind", ["nbbm", "bees"])
def test_mirror_symmetry_with_mirrored_bundle(kind):
    n, mu = 5, 0.4
    init = np.array([-1.0, -0.2, 0.3, 0.9, 2.0])
    a = simulate(kind, SimParams(n, mu, 5.0, 0.1, 6), init, make_driver_bundle(6, n))
    b = simulate(kind, SimParams(n, -mu, 5.0, 0.1, 6), -init[::-1],
                 make_driver_bundle(6, n, mirror=True))
    m = mirror_trajectory(a)
    if kind == "bees":
        # killing the largest magnitude commutes with x -> -x (ties aside)
        assert np.allclose(m.grid_positions, b.grid_positions, atol=1e-12)
        assert np.array_equal(m.event_index, b.event_index)
        assert np.array_equal(m.event_killed, b.event_killed)
    else:
        # the mirrored N-BBM kills its rightmost: a different process, same clock
        assert np.array_equal(m.event_times, b.event_times)


def test_translation_equivariance_nbbm():
    n = 5
    a = simulate("nbbm", SimParams(n, 0.0, 5.0, 0.1, 2), np.zeros(n))
    b = simulate("nbbm", SimParams(n, 0.5, 5.0, 0.1, 2), np.zeros(n))
    assert np.allclose(b.grid_positions - 0.5 * b.grid_times[:, None], a.grid_positions, atol=1e-9)


# ---- hitting ----

@pytest.mark.parametrize("x,y,dt,expected", [
    (1, -1, 1, 1.0), (1, 1, 1, math.exp(-2)), (0.5, 2, 0.25, math.exp(-8)), (0.0, 3, 1, 1.0),
])
def test_bridge_probability_examples(x, y, dt, expected):
    assert bridge_crossing_probability(x, y, dt) == pytest.approx(expected, rel=1e-12)


def test_bridge_probability_rejects_dt():
    with pytest.raises(ValueError):
        bridge_crossing_probability(1, 1, 0)


def test_bridge_probability_against_monte_carlo():
    rng = np.random.default_rng(2)
    # fine-grid bridges miss some crossings, so the oracle is biased low by O(sqrt(dt/steps))
    p_mc = bridge_hit_mc(1.0, 1.0, 1.0, 10_000, 1000, rng)
    p = bridge_crossing_probability(1.0, 1.0, 1.0)
    se = math.sqrt(p * (1 - p) / 10_000)
    assert abs(p_mc - p) < 3 * se + 0.01
    p_mc2 = bridge_hit_mc(0.5, 2.0, 0.25, 10_000, 1000, rng)
    assert abs(p_mc2 - math.exp(-8)) < 3 * math.sqrt(math.exp(-8) / 10_000) + 1e-3


def test_first_hit_examples():
    tr = simulate("nbbm", SimParams(3, 0.0, 1.0, 0.1, 0), np.zeros(3))
    assert first_hit_zero(tr) == 0.0
    # deterministic crossing between samples at t=1 and t=2
    from beeslab.engine import Trajectory
    p = SimParams(1, -1.0, 2.0, 1.0, 0)
    tr = Trajectory(ProcessKind.BEES, p, rank_sort([1.5]), rank_sort([-0.5]), 2.0,
                    np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int8),
                    np.empty((0, 1)), np.empty((0, 1)), np.array([0.0, 1.0, 2.0]),
                    np.array([[1.5], [0.5], [-0.5]]))
    hit = first_hit_zero(tr, rng=np.random.default_rng(0))
    assert hit is not None and 1.0 < hit <= 2.0


def test_first_hit_reflection_principle():
    t, reps = 1.0, 10_000
    hits = 0
    for s in range(reps):
        tr = simulate("bees", SimParams(1, 0.0, t, 0.25, s), [1.0])
        h = first_hit_zero(tr, rng=s)
        hits += h is not None
    p = 2 * stats.norm.cdf(-1 / math.sqrt(t))
    se = math.sqrt(p * (1 - p) / reps)
    assert abs(hits / reps - p) < 3 * se


# ---- csv ----

def test_csv_round_trip(tmp_path):
    tr = simulate("bees", SimParams(3, 0.2, 1.0, 0.25, 4), [0.0, 0.1, -0.3])
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, path)
    head = path.read_text().splitlines()[0]
    assert head == "time,event_kind,i,pos_1,pos_2,pos_3"
    recs = read_trajectory_csv(path)
    branches = [r for r in recs if r[1] == "branch"]
    samples = [r for r in recs if r[1] == "sample"]
    assert len(branches) == tr.n_events and len(samples) == tr.grid_times.size
    assert np.array_equal(np.array([r[3] for r in samples]), tr.grid_positions)
    assert np.array_equal(np.array([r[3] for r in branches]), tr.event_post)
    times = [r[0] for r in recs]
    assert times == sorted(times)

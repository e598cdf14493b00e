import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from beeslab.brw_bounds import (
    BRWKind, CumulantSpec, PopulationExplosion, bbm_cumulant, bbm_generation, hat_delta_cumulant,
    kappa_bbm, kappa_hat_delta, one_branch_generation, paired_lower_nbbm, paired_upper_nbbm, simulate_nbrw_lower, simulate_nbrw_upper,
    solve_theta_star, speed_second_order, theta_star_residual, write_speed_sweep,
)
from beeslab.engine import SimParams, simulate
from beeslab.statistics import estimate_velocity, velocity_formula


def test_kappa_bbm_values():
    assert kappa_bbm(math.sqrt(2)) == pytest.approx(2.0)
    assert kappa_bbm(1e-9) == pytest.approx(1.0)
    assert bbm_cumulant().d1(math.sqrt(2)) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        kappa_bbm(0.0)


def test_kappa_hat_values():
    assert kappa_hat_delta(1e-12, 1.0) == pytest.approx(math.log(2 - math.exp(-1)), abs=1e-12)
    assert kappa_hat_delta(1.0, 1e-12) == pytest.approx(0.0, abs=1e-11)
    # theta^2 delta / 2 = 0.001 and log(2 - e^-delta) = delta - delta^2 + ...
    assert kappa_hat_delta(math.sqrt(2), 1e-3) == pytest.approx(0.001999, abs=1e-6)
    with pytest.raises(ValueError):
        kappa_hat_delta(1.0, 0.0)


def test_theta_star_values_and_residuals():
    assert solve_theta_star(bbm_cumulant()) == pytest.approx(math.sqrt(2), rel=1e-12)
    closed = math.sqrt(2 * math.log(2 - math.exp(-1)))
    cum = hat_delta_cumulant(1.0)
    th = solve_theta_star(cum)
    assert th == pytest.approx(closed, rel=1e-12)
    assert th == pytest.approx(0.98990, abs=1e-4)
    for sp in (bbm_cumulant(), cum):
        assert abs(theta_star_residual(sp, solve_theta_star(sp))) < 1e-10


def test_theta_star_no_root():
    cum = CumulantSpec(lambda t: 1.0 + t, lambda t: 1.0, lambda t: 0.0)
    with pytest.raises(ValueError):
        solve_theta_star(cum)


@given(st.floats(1e-3, 5.0))
def test_theta_star_closed_form_for_hat_cumulant(delta):
    th = solve_theta_star(hat_delta_cumulant(delta))
    closed = math.sqrt(2 * math.log1p(-math.expm1(-delta)) / delta)
    assert th == pytest.approx(closed, rel=1e-11)


@pytest.mark.parametrize("n", [2, 10, 100, 10**4, 10**8])
def test_bbm_speed_matches_velocity_formula(n):
    assert speed_second_order(bbm_cumulant(), n) == pytest.approx(velocity_formula(n), abs=1e-12)


def test_hat_speed_at_unit_delta():
    th = math.sqrt(2 * math.log(2 - math.exp(-1)))
    corr = math.pi ** 2 * th / (2 * math.log(100) ** 2)
    v = speed_second_order(hat_delta_cumulant(1.0), 100)
    assert v == pytest.approx(th - corr, abs=1e-12)
    assert corr == pytest.approx(0.23034, abs=2e-4)
    assert v == pytest.approx(0.75956, abs=2e-4)


def test_hat_speed_increases_to_formula_as_delta_shrinks():
    vals = [speed_second_order(hat_delta_cumulant(d), 100) for d in (1, 0.1, 0.01, 0.001)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert abs(vals[-1] - velocity_formula(100)) < 1e-3


def test_numerical_derivatives_close_to_analytic():
    num = CumulantSpec(kappa_bbm)
    assert num.d1(1.3) == pytest.approx(1.3, rel=1e-8)
    assert num.d2(1.3) == pytest.approx(1.0, rel=1e-6)
    assert speed_second_order(num, 100) == pytest.approx(velocity_formula(100), abs=1e-7)
    assert num.is_convex()


def test_bad_speed_inputs():
    with pytest.raises(ValueError):
        speed_second_order(bbm_cumulant(), 1)
    with pytest.raises(ValueError):
        CumulantSpec(kappa_bbm, domain=(1.0, 0.5))


# ---- simulations ----

class _NoEvents:
    """Generator stub: no branching before time 1, zero displacement."""

    def exponential(self, scale, size):
        return np.full(size, 10.0)

    def standard_normal(self, size):
        return np.zeros(size)


def test_zero_noise_zero_branching_is_constant():
    init = np.array([-1.0, 0.0, 2.0])
    tr = simulate_nbrw_upper(3, 0.0, 5, _NoEvents(), initial=init)
    assert np.array_equal(tr.final, init)
    assert np.all(tr.leftmost == -1.0) and np.all(tr.rightmost == 2.0)


def test_yule_mean_offspring_is_e():
    rng = np.random.default_rng(0)
    _, anc = bbm_generation(rng, np.zeros(10_000), 1.0)
    counts = np.bincount(anc, minlength=10_000)
    se = counts.std(ddof=1) / 100
    assert abs(counts.mean() - math.e) < 3 * se


def test_one_branch_mean_offspring():
    rng = np.random.default_rng(1)
    _, anc = one_branch_generation(rng, np.zeros(10_000), 1.0)
    counts = np.bincount(anc, minlength=10_000)
    se = counts.std(ddof=1) / 100
    assert abs(counts.mean() - (2 - math.exp(-1))) < 3 * se
    _, anc = one_branch_generation(rng, np.zeros(10_000), 1e-6)
    assert anc.size <= 10_002


def test_bbm_generation_displacement_variance():
    rng = np.random.default_rng(3)
    pos, anc = bbm_generation(rng, np.zeros(5000), 1.0, mu=0.5)
    # every offspring is at its ancestor plus a Brownian value at time 1
    se = pos.var(ddof=1) * math.sqrt(2 / (pos.size - 1))
    assert abs(pos.mean() - 0.5) < 4 * math.sqrt(pos.var() / 5000 * 3)
    assert abs(pos.var(ddof=1) - 1.0) < 4 * se * 2


def test_population_cap():
    rng = np.random.default_rng(0)
    with pytest.raises(PopulationExplosion):
        bbm_generation(rng, np.zeros(10), 5.0, cap=20)


def test_lower_keeps_half_population():
    tr = simulate_nbrw_lower(9, 0.5, 0.0, 20, seed=1)
    assert tr.final.size == 4 and tr.params.kind is BRWKind.LOWER
    assert tr.times[-1] == pytest.approx(10.0)
    up = simulate_nbrw_upper(9, 0.0, 5, seed=1)
    assert up.final.size == 9 and np.all(np.diff(up.final) >= 0)


def test_paired_runs_order_speeds():
    up_ok = lo_ok = 0
    pairs = 20
    for s in range(pairs):
        up = paired_upper_nbbm(20, 0.0, 150, seed=s)
        lo = paired_lower_nbbm(20, 0.5, 0.0, 300, seed=s)
        assert up.violations == [] and lo.violations == []
        up_ok += estimate_velocity(up.bound).v_hat >= estimate_velocity(up.nbbm).v_hat
        lo_ok += estimate_velocity(lo.bound).v_hat <= estimate_velocity(lo.nbbm).v_hat
    assert up_ok >= 0.95 * pairs and lo_ok >= 0.95 * pairs


@settings(max_examples=20)
@given(st.integers(1, 8), st.integers(0, 2**32), st.floats(-1, 1))
def test_paired_upper_never_violates(n, seed, mu):
    run = paired_upper_nbbm(n, mu, 4, seed=seed)
    assert run.violations == []
    assert np.all(run.nbbm.rightmost <= run.bound.rightmost)


@settings(max_examples=20)
@given(st.integers(2, 8), st.floats(0.05, 2.0), st.integers(0, 2**32), st.floats(-1, 1))
def test_paired_lower_never_violates(n, delta, seed, mu):
    run = paired_lower_nbbm(n, delta, mu, 4, seed=seed)
    assert run.violations == []
    assert run.bound.final.size == n // 2


def test_paired_nbbm_marginals_match_engine():
    reps = 600
    a = [paired_upper_nbbm(3, 0.0, 2, seed=s).nbbm.final[0] for s in range(reps)]
    b = [paired_lower_nbbm(3, 1.0, 0.0, 2, seed=s).nbbm.final[0] for s in range(reps)]
    c = [simulate("nbbm", SimParams(3, 0.0, 2.0, 1.0, s), np.zeros(3),
                  record_events=False).final[0] for s in range(reps)]
    assert stats.ks_2samp(a, c).pvalue > 0.01
    assert stats.ks_2samp(b, c).pvalue > 0.01


def test_paired_bound_marginals_match_standalone():
    reps = 600
    a = [paired_upper_nbbm(3, 0.0, 2, seed=s).bound.final[0] for s in range(reps)]
    b = [simulate_nbrw_upper(3, 0.0, 2, seed=s).final[0] for s in range(reps)]
    assert stats.ks_2samp(a, b).pvalue > 0.01
    a = [paired_lower_nbbm(4, 1.0, 0.0, 2, seed=s).bound.final[0] for s in range(reps)]
    b = [simulate_nbrw_lower(4, 1.0, 0.0, 2, seed=s).final[0] for s in range(reps)]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_speed_sweep_csv(tmp_path):
    p = tmp_path / "s.csv"
    write_speed_sweep([("upper", 10, None, 1.1, 0.01, 0.09)], p)
    lines = p.read_text().splitlines()
    assert lines[0] == "kind,N,delta,speed_hat,stderr,speed_formula"
    assert lines[1].startswith("upper,10,,1.1")

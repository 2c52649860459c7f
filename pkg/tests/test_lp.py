import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehnode.env import NodeConfig, simulate
from ehnode.harvest import synth_generate
from ehnode.lp import (EPS_B, LpInfeasible, build_lp, optimal_schedule, solve_lp,
                       write_schedule_csv)
from ehnode.metrics import rms_edist_day

from oracles import constant_harvest_oracle, lp_grid_search

CFG = NodeConfig()


def test_single_hour_spends_the_whole_harvest():
    s = optimal_schedule([5.0], CFG, 24.0)
    assert s.duties.tolist() == pytest.approx([1.0], abs=1e-7)
    assert s.objective == pytest.approx(1.0, abs=1e-6)


def test_constant_harvest_day_matches_oracle():
    bound, best, best_d = constant_harvest_oracle(2.5, 5.0, 24, 24.0, 40.0)
    assert (bound, best, best_d) == (12.0, pytest.approx(12.0), pytest.approx(0.5))
    s = optimal_schedule(np.full(24, 2.5), CFG, 24.0)
    assert s.objective == pytest.approx(12.0, abs=1e-6)
    # the variation-minimising stage picks the flat schedule
    assert np.max(np.abs(s.duties - 0.5)) <= 1e-6


def test_zero_harvest_forces_minimum_duty():
    s = optimal_schedule(np.zeros(24), CFG, 24.0)
    assert np.all(np.abs(s.duties - CFG.duty_min) <= 1e-7)
    assert s.objective == pytest.approx(24 * CFG.duty_min, abs=1e-6)


def test_infeasible_when_minimum_duty_cannot_be_paid():
    cfg = NodeConfig(duty_min=0.2)
    with pytest.raises(LpInfeasible):
        optimal_schedule(np.zeros(24), cfg, 24.0)


def test_bad_inputs():
    with pytest.raises(ValueError):
        build_lp([], CFG, 24.0)
    with pytest.raises(ValueError):
        build_lp([1.0], CFG, 24.0, objective="other")


@pytest.mark.parametrize("smooth", [False, True])
def test_year_replay_reproduces_lp_trajectory(smooth):
    tr = synth_generate(365, seed=2011)
    s = optimal_schedule(tr.hourly_wh, CFG, 24.0, smooth=smooth)
    sim = simulate(CFG, tr.hourly_wh, s.duties, 24.0)
    assert not sim["failure"].any()
    assert np.max(np.abs(sim["buffer"] - s.lp_buffer)) <= 1e-4
    assert sim["buffer"][-1] >= 24.0 - 1e-6
    assert np.all(s.lp_buffer >= EPS_B - 1e-9) and np.all(s.lp_buffer <= 40.0 + 1e-9)


def test_unsmoothed_replay_is_tight():
    tr = synth_generate(30, seed=4)
    s = optimal_schedule(tr.hourly_wh, CFG, 24.0, smooth=False)
    sim = simulate(CFG, tr.hourly_wh, s.duties, 24.0)
    assert np.max(np.abs(sim["buffer"] - s.lp_buffer)) <= 1e-6


def test_smoothing_keeps_the_optimum():
    tr = synth_generate(7, seed=1)
    raw = optimal_schedule(tr.hourly_wh, CFG, 24.0, smooth=False)
    smooth = optimal_schedule(tr.hourly_wh, CFG, 24.0)
    assert smooth.objective == pytest.approx(raw.objective, rel=1e-8)
    assert np.sum(np.abs(np.diff(smooth.duties))) <= np.sum(np.abs(np.diff(raw.duties))) + 1e-7


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0, 2.5, 5.0]), min_size=2, max_size=5),
       st.sampled_from([1.0, 4.0, 10.0]))
def test_lp_beats_every_grid_schedule(harvest, b_start):
    levels = (0.0, 0.25, 0.5, 0.75, 1.0)
    best, _ = lp_grid_search(harvest, 5.0, b_start, 40.0, levels)
    s = optimal_schedule(harvest, CFG, b_start)
    assert s.objective >= best - 1e-6
    sim = simulate(CFG, harvest, s.duties, b_start)
    assert not sim["failure"].any()


def test_lp_matches_grid_optimum_on_a_grid_friendly_instance():
    harvest = [5.0, 0.0, 2.5]
    best, _ = lp_grid_search(harvest, 5.0, 10.0, 40.0, np.linspace(0, 1, 21))
    assert optimal_schedule(harvest, CFG, 10.0).objective == pytest.approx(best, abs=1e-5)


def test_horizon_one_is_greedy():
    # T=1 with terminal = start: spend exactly this hour's harvest
    for eh in (0.0, 1.0, 3.0, 5.0):
        s = optimal_schedule([eh], CFG, 24.0)
        assert s.duties[0] == pytest.approx(min(eh / 5.0, 1.0), abs=1e-7)


def test_permuting_future_harvest_changes_the_schedule():
    tr = synth_generate(3, seed=8).hourly_wh
    base = optimal_schedule(tr, CFG, 6.0, smooth=False)
    perm = tr.copy()
    perm[24:] = perm[24:][::-1]
    moved = optimal_schedule(perm, CFG, 6.0, smooth=False)
    assert not np.allclose(base.duties, moved.duties, atol=1e-6)


def test_neutrality_objective_tracks_the_target():
    tr = synth_generate(60, seed=2011)
    cfg = NodeConfig(duty_min=0.2)
    s = optimal_schedule(tr.hourly_wh, cfg, 24.0, objective="neutrality", b0=24.0)
    sim = simulate(cfg, tr.hourly_wh, s.duties, 24.0)
    assert not sim["failure"].any()
    assert np.max(np.abs(sim["buffer"] - s.lp_buffer)) <= 1e-6
    assert rms_edist_day(sim["buffer"], 24.0, 40.0) <= rms_edist_day(
        simulate(cfg, tr.hourly_wh, np.full(len(tr), 0.25), 24.0)["buffer"], 24.0, 40.0)


def test_schedule_csv(tmp_path):
    s = optimal_schedule(np.full(24, 2.5), CFG, 24.0)
    write_schedule_csv(s, tmp_path / "s.csv")
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows[0] == ["hour", "duty", "buffer"] and len(rows) == 25
    assert np.allclose([float(r[1]) for r in rows[1:]], s.duties, rtol=0, atol=0)


def test_solve_lp_accepts_prebuilt_problem():
    lp = build_lp(np.full(24, 2.5), CFG, 24.0, smooth=False)
    assert solve_lp(lp).objective == pytest.approx(12.0, abs=1e-6)

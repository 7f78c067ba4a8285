import itertools
import math

import numpy as np
import pytest

from elasticlm.errors import ContractError
from elasticlm.scheduler import (ElasticScheduler, LatencyProfile, LevelProfile, StaticScheduler,
                                 calibrate, decide, max_queue, sweep)

CONSTRAINTS = (250.0, 375.0, 500.0)


def _random_profiles(n=100, seed=0):
    rng = np.random.default_rng(seed)
    levels = [50, 40, 30, 20, 15, 10, 5]
    for _ in range(n):
        k = int(rng.integers(1, len(levels) + 1))
        chosen = sorted(rng.choice(levels, size=k, replace=False), reverse=True)
        t_p = np.sort(rng.uniform(1.0, 300.0, size=k))[::-1]
        # Proxies are not forced to be monotone: maximality must hold regardless.
        proxy = np.round(rng.uniform(0, 1, size=k), 2)
        yield LatencyProfile.from_table(dict(zip(chosen, t_p)), dict(zip(chosen, proxy)))


def test_max_queue_examples():
    assert max_queue(100, 500) == 4
    assert max_queue(100, 100) == 0
    assert max_queue(100, 50) == -1
    with pytest.raises(ContractError):
        max_queue(0, 100)


def test_decide_picks_best_feasible():
    profile = LatencyProfile.from_table({50: 100.0, 20: 60.0, 5: 30.0}, {50: 0.9, 20: 0.8, 5: 0.7})
    d = decide(3, 250, profile)
    assert d.level == 20 and d.feasible and d.estimated_ms == 240.0
    assert decide(0, 10_000, profile).level == 50
    d = decide(10_000, 250, profile)
    assert d.level == 5 and not d.feasible


def test_decide_tie_goes_to_larger_level():
    profile = LatencyProfile.from_table({50: 10.0, 20: 5.0}, {50: 0.5, 20: 0.5})
    assert decide(0, 100, profile).level == 50


def test_exhaustive_decision_properties():
    for profile in _random_profiles():
        for T in CONSTRAINTS:
            prev_tp = math.inf
            for g in range(201):
                d = decide(g, T, profile)
                fits = [e for e in profile.entries if (g + 1) * e.t_p_ms <= T]
                chosen = profile[d.level]
                if d.feasible:
                    assert (g + 1) * chosen.t_p_ms <= T
                    assert all(e.proxy <= chosen.proxy for e in fits)
                else:
                    assert not fits
                    assert chosen.t_p_ms == min(e.t_p_ms for e in profile.entries)
                assert d.feasible == bool(fits)
                assert chosen.t_p_ms <= prev_tp
                prev_tp = chosen.t_p_ms


def test_decide_depends_only_on_inputs():
    profile = next(_random_profiles(1, seed=3))
    first = [decide(g, 375, profile) for g in range(50)]
    assert first == [decide(g, 375, profile) for g in range(50)]


def test_static_scheduler_pins_level():
    profile = LatencyProfile.from_table({50: 40.0, 5: 7.0})
    s = StaticScheduler(profile, 50, 250)
    assert {s.decide(g).level for g in range(30)} == {50}
    assert not s.decide(10).feasible
    with pytest.raises(KeyError):
        StaticScheduler(profile, 30, 250)


def test_min_dwell_holds_feasible_level():
    profile = LatencyProfile.from_table({50: 40.0, 20: 20.0, 5: 7.0}, {50: 0.9, 20: 0.8, 5: 0.6})
    s = ElasticScheduler(profile, 250, min_dwell=2)
    assert s.decide(10).level == 20
    # level 50 becomes best at g=0 but the dwell keeps 20 for two more decisions
    assert [s.decide(0).level for _ in range(3)] == [20, 20, 50]
    assert ElasticScheduler(profile, 250).decide(0).level == 50


def test_sweep_shape():
    profile = LatencyProfile.from_table({50: 40.0, 5: 7.0})
    table = sweep(profile, CONSTRAINTS, 20)
    assert set(table) == set(CONSTRAINTS) and all(len(v) == 21 for v in table.values())


def test_profile_validation_and_roundtrip(tmp_path):
    with pytest.raises(ContractError):
        LevelProfile(50, 0.0, 0.9)
    with pytest.raises(ContractError):
        LatencyProfile(())
    profile = LatencyProfile.from_table({50: 40.125, 2.5: 7.0}, {50: 0.9, 2.5: 0.1})
    profile.save(tmp_path / "p.csv")
    back = LatencyProfile.load(tmp_path / "p.csv")
    assert back.entries == profile.entries
    assert back.levels == [50, 2.5]


def test_calibrate_orders_levels(tiny_model):
    profile = calibrate(tiny_model, trials=5, input_length=24, batch=8, proxies={50: 0.9})
    assert profile.t_p(5) < profile.t_p(50)
    assert profile.proxy(50) == 0.9 and math.isnan(profile.proxy(5))
    assert all(e.trials == 5 for e in profile.entries)


def test_calibrate_repeatable(tiny_model):
    a = calibrate(tiny_model, trials=7, input_length=24, batch=8)
    b = calibrate(tiny_model, trials=7, input_length=24, batch=8)
    for lv in (50, 5):
        assert abs(a.t_p(lv) - b.t_p(lv)) <= 0.2 * max(a.t_p(lv), b.t_p(lv))


def test_calibrate_rejects_few_trials(tiny_model):
    with pytest.raises(ContractError):
        calibrate(tiny_model, trials=0)
    with pytest.raises(ContractError):
        calibrate(tiny_model, trials=4)


def test_calibrate_rejects_coarse_timer(tiny_model):
    # A timer that never advances makes every run look instantaneous.
    with pytest.raises(ContractError, match="resolution"):
        calibrate(tiny_model, trials=5, timer=lambda: 0.0)


def test_calibrate_flags_violations(tiny_model):
    # Fake timer: every call returns a fixed cadence so all levels time the same.
    clock = itertools.count(0.0, 0.5)
    profile = calibrate(tiny_model, trials=5, timer=lambda: next(clock))
    assert profile.violations

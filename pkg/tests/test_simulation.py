import json
import math

import numpy as np
import pytest

from triangulate.errors import ProbabilityOutOfRange
from triangulate.simulation import (
    MAX_CLIPPED_FRACTION,
    POA_PRESETS,
    PRESETS,
    SCENARIOS,
    ScenarioSpec,
    get_preset,
    preset_audit,
    run_monte_carlo,
    run_poa_study,
    simulate_cohort,
)


def test_pure_bernoulli_treatment_rate():
    spec = ScenarioSpec(n=5000, x_0=0.5, beta=0.0, y1_0=0.2, y0_0=0.2)
    x = simulate_cohort(spec, seed=3).cohort.x
    assert abs(x.mean() - 0.5) < 3 * math.sqrt(0.25 / 5000)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_instrument_constant_within_clusters(seed):
    c = simulate_cohort(get_preset("S1"), seed).cohort
    per_cluster = [set(c.z[c.cluster_id == g]) for g in np.unique(c.cluster_id)]
    assert all(len(s) == 1 for s in per_cluster)
    assert len(per_cluster) == 50
    zbar = np.mean([next(iter(s)) for s in per_cluster])
    assert abs(zbar - 0.5) < 3 * math.sqrt(0.25 / 50)


def test_simulation_is_deterministic_and_run_dependent():
    spec = get_preset("S5")
    a = simulate_cohort(spec, 11, run=4)
    b = simulate_cohort(spec, 11, run=4)
    c = simulate_cohort(spec, 11, run=5)
    assert a.cohort.y1.tobytes() == b.cohort.y1.tobytes()
    assert a.u.tobytes() == b.u.tobytes()
    assert a.cohort.y1.tobytes() != c.cohort.y1.tobytes()


def test_null_companion_shares_streams():
    # with beta=0 only the outcome probabilities move; every other variable is identical
    spec = get_preset("S2")
    from dataclasses import replace

    a = simulate_cohort(spec, 5).cohort
    b = simulate_cohort(replace(spec, beta=0.0), 5).cohort
    assert a.x.tobytes() == b.x.tobytes()
    assert a.y0.tobytes() == b.y0.tobytes()
    assert np.all(b.y1 <= a.y1 + (a.x == 0))


def test_hidden_confounder_not_in_cohort():
    sim = simulate_cohort(get_preset("S8"), 0)
    assert sim.u.shape == (5000,)
    assert sim.cohort.w0.shape == (5000, 1) and sim.cohort.w1.shape == (5000, 1)


def test_out_of_range_probabilities_abort():
    with pytest.raises(ProbabilityOutOfRange):
        simulate_cohort(ScenarioSpec(n=1000, x_0=0.9, x_u=0.5, y0_0=0.1, y1_0=0.1), 0)


def test_cluster_divisibility():
    with pytest.raises(ValueError):
        ScenarioSpec(n=1001, n_clusters=50)


def test_continuous_outcomes_are_real_valued():
    c = simulate_cohort(get_preset("POA_basic_continuous"), 0).cohort
    assert c.outcome_kind == "continuous"
    assert len(np.unique(c.y1)) > 100


def test_preset_violation_pattern():
    for name in SCENARIOS:
        s = get_preset(name)
        i = int(name[1])
        assert (s.x_u != 0 and s.y1_u != 0 and s.y0_u != 0) == (i >= 5), name
        assert (s.x_y0 != 0) == (i in (2, 4, 6, 8)), name
        assert (s.y1_z != 0) == (i in (3, 4, 7, 8)), name
        assert s.x_y0z == 0
    for name in POA_PRESETS:
        assert get_preset(name).x_y0z != 0


def test_poa_adverse_changes():
    base, ac1, ac2, ac3 = (get_preset(p) for p in ("POA_basic", "POA_AC1", "POA_AC2", "POA_AC3"))
    assert ac1.y1_u > base.y1_u
    assert ac2.y1_z > base.y1_z
    assert ac3.x_y0z < base.x_y0z
    assert get_preset("POA_AC3_continuous").x_y0z < get_preset("POA_basic_continuous").x_y0z


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_preset_audit(preset):
    audit = preset_audit(preset, seed=0, runs=3)
    assert audit["clipped"] < MAX_CLIPPED_FRACTION
    if get_preset(preset).outcome_kind == "binary":
        assert 0.02 <= audit["y0_rate"] <= 0.30
        assert 0.02 <= audit["y1_rate"] <= 0.30
    if preset == "S1":
        assert audit["first_stage_f"] > 30


def test_unknown_preset():
    with pytest.raises(ValueError):
        get_preset("S9")


# -- Monte Carlo summary ----------------------------------------------------


@pytest.fixture(scope="module")
def small_run():
    return run_monte_carlo("S1", n_sim=20, seed=7)


def test_summary_fields(small_run):
    for m in ("CaT", "IV_TSLS", "DiD"):
        p = small_run[m]
        assert p.n_ok + p.n_failed == 20
        assert 0 <= p.coverage <= 100 and 0 <= p.t1e <= 100
        assert p.mse >= p.bias**2 - 1e-15
        assert p.mcse_bias == pytest.approx(p.empirical_sd / math.sqrt(p.n_ok))


def test_summary_reproducible(small_run, tmp_path):
    again = run_monte_carlo("S1", n_sim=20, seed=7)
    assert again.estimates.tobytes() == small_run.estimates.tobytes()
    small_run.write_summary_csv(tmp_path / "a.csv")
    again.write_summary_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_thread_count_does_not_change_results(small_run):
    par = run_monte_carlo("S1", n_sim=20, seed=7, threads=2)
    assert par.estimates.tobytes() == small_run.estimates.tobytes()


def test_serializers(small_run, tmp_path):
    small_run.write_mcse_csv(tmp_path / "m.csv")
    small_run.write_estimates_long(tmp_path / "e.csv")
    small_run.write_json(tmp_path / "s.json")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "scenario,method,run,estimate"
    assert len(lines) == 1 + 3 * 20
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head == "scenario,metric,CaT,IV_TSLS,DiD"
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["methods"]["CaT"]["n_ok"] == 20


def test_poa_study_adds_poa_iv():
    res = run_poa_study("POA_basic", n_sim=3, seed=1, methods=("CaT",))
    assert res.methods == ("POA_IV", "CaT")


def test_with_z_variants():
    res = run_monte_carlo("S3", n_sim=2, seed=1, with_z_variants=True)
    assert res.methods == ("CaT", "IV_TSLS", "DiD", "CaT_with_Z", "DiD_with_Z")


def test_s1_sd_and_model_se_agree():
    res = run_monte_carlo("S1", n_sim=150, seed=3)
    for m in ("CaT", "IV_TSLS", "DiD"):
        p = res[m]
        assert abs(p.mean_se / p.empirical_sd - 1) < 0.15, m

import math

import numpy as np
import pytest

from app.models.lab_models import DisorderSpec
from app.services.bounds import (
    bottleneck_ratio,
    pipeline_summary,
    restricted_norm,
    restricted_quadratic_form,
    sphere_distance,
    sphere_energy_gap,
    subset_size,
    theorem_pipeline,
)
from app.services.disorder import sample_coupling
from app.services.gapped import enumerate_local_maxima
from app.services.model import SpinConfiguration
from app.utils.errors import ConfigError, GateViolationError
from tests import oracle


def test_radius_conventions():
    assert subset_size(0.25, 10) == 2
    assert sphere_distance(0.25, 10) == 3
    assert sphere_distance(0.25, 12) == 3
    assert subset_size(0.3, 10) == 3


def test_exact_restricted_norm_matches_oracle(coupling10):
    report = restricted_norm(coupling10, 0.3, mode="exact")
    assert report.norm == pytest.approx(oracle.naive_restricted_norm(coupling10.entries, 3), rel=1e-10)
    assert 1 <= len(report.subset) <= 3
    assert report.evaluations == 10 + 45 + 120


def test_restricted_norm_single_site(coupling10):
    report = restricted_norm(coupling10, 0.15, mode="exact")
    assert report.norm == pytest.approx(float(np.max(np.abs(np.diagonal(coupling10.entries)))))
    assert len(report.subset) == 1


@pytest.mark.parametrize("seed", range(5))
def test_heuristic_restricted_norm_is_close_to_exact(make_coupling, seed):
    A = make_coupling(12, seed=40 + seed)
    exact = restricted_norm(A, 0.25, mode="exact")
    heuristic = restricted_norm(A, 0.25, mode="heuristic", budget=20_000, seed=seed)
    assert heuristic.norm <= exact.norm + 1e-12
    assert heuristic.norm >= 0.98 * exact.norm


def test_restricted_norm_report_scaling(coupling10):
    report = restricted_norm(coupling10, 0.2, mode="exact", constant=6.0)
    assert report.scale == pytest.approx(math.sqrt(0.2 * math.log(5.0) * 10))
    assert report.bound_rhs == pytest.approx(6.0 * report.scale)
    assert report.fitted_constant == pytest.approx(math.sqrt(10) * report.norm / report.scale)
    assert report.to_record().scaled_norm == pytest.approx(report.scaled_norm)


def test_restricted_norm_rejects_bad_arguments(coupling10):
    with pytest.raises(ConfigError):
        restricted_norm(coupling10, 0.5)
    with pytest.raises(ConfigError):
        restricted_norm(coupling10, 0.05)
    with pytest.raises(ConfigError):
        restricted_norm(coupling10, 0.3, mode="greedy")


def test_restricted_norm_subset_budget(monkeypatch, coupling10):
    monkeypatch.setenv("SKLAB_SUBSET_BUDGET", "100")
    with pytest.raises(GateViolationError):
        restricted_norm(coupling10, 0.3, mode="exact")


def test_quadratic_form_is_bounded_by_restricted_norm(coupling10):
    exact = restricted_quadratic_form(coupling10, 0.3, mode="exact")
    heuristic = restricted_quadratic_form(coupling10, 0.3, mode="heuristic", seed=2)
    norm = restricted_norm(coupling10, 0.3, mode="exact").norm
    assert heuristic.value <= exact.value + 1e-12
    assert exact.value <= 3 * norm + 1e-12
    assert exact.value >= float(np.max(np.abs(np.diagonal(coupling10.entries)))) - 1e-12
    x = np.zeros(10)
    x[exact.support] = exact.signs
    assert abs(float(x @ coupling10.entries @ x)) == pytest.approx(exact.value)
    assert np.sum(np.abs(x)) <= 3


def test_sphere_gap_matches_brute_force(coupling10, deepest10):
    report = sphere_energy_gap(coupling10, deepest10, 0.2, gamma=0.3)
    drops = oracle.naive_sphere_drops(coupling10.entries, deepest10.to_index(), 2)
    assert report.distance == 2
    assert report.visited == len(drops) == 45
    assert report.min_drop == pytest.approx(min(drops), abs=1e-10)
    assert report.min_drop == pytest.approx(report.first_order - report.second_order, abs=1e-12)
    assert report.identity_residual <= 1e-9
    assert report.min_drop > 0
    assert report.lemma_rhs == pytest.approx(0.2 * 0.3 * 10 / 2)


def test_sphere_gap_first_order_floor(coupling10, deepest10):
    report = sphere_energy_gap(coupling10, deepest10, 0.2, gamma=0.3)
    assert report.first_order_floor == 2 * 0.3 * max(2 - report.below_count, 0)
    assert report.field_norm_bound == pytest.approx(3 * math.sqrt(10))


def test_sampled_sphere_gap_finds_the_exhaustive_minimum(coupling10, deepest10):
    exhaustive = sphere_energy_gap(coupling10, deepest10, 0.2, gamma=0.3)
    sampled = sphere_energy_gap(coupling10, deepest10, 0.2, gamma=0.3, mode="sampled", m=5_000, seed=3)
    assert sampled.visited == 5_000
    assert sampled.min_drop == pytest.approx(exhaustive.min_drop, abs=1e-10)


def test_sphere_gap_rejects_mismatched_reference(coupling10):
    with pytest.raises(ConfigError):
        sphere_energy_gap(coupling10, SpinConfiguration.all_up(9), 0.2, gamma=0.3)
    with pytest.raises(ConfigError):
        sphere_energy_gap(coupling10, SpinConfiguration.all_up(10), 0.2, gamma=0.3, mode="sampled", m=0)


def test_bottleneck_at_infinite_temperature_counts_the_sphere(make_coupling):
    A = make_coupling(12, seed=9)
    report = bottleneck_ratio(A, SpinConfiguration.all_up(12), 0.0, 0.25)
    assert report.radius == 3
    assert report.log_ratio == pytest.approx(math.log(220.0), abs=1e-10)
    assert report.ball_mass == pytest.approx((1 + 12 + 66 + 220) / 4096.0)


def test_bottleneck_ball_mass_is_at_most_half(coupling10, deepest10):
    for beta in (0.5, 2.0, 8.0):
        report = bottleneck_ratio(coupling10, deepest10, beta, 0.25)
        assert report.ball_mass <= 0.5 + 1e-12


def test_bottleneck_log_ratio_is_convex_with_bounded_slope(coupling10, deepest10):
    values = {beta: bottleneck_ratio(coupling10, deepest10, beta, 0.2) for beta in (1.0, 2.0, 20.0, 21.0)}
    top = values[1.0].max_sphere_energy - values[1.0].reference_energy
    early = values[2.0].log_ratio - values[1.0].log_ratio
    late = values[21.0].log_ratio - values[20.0].log_ratio
    assert early <= late + 1e-9
    assert late <= top + 1e-9
    for beta, report in values.items():
        assert report.log_ratio >= beta * top - 1e-9


def test_sampled_bottleneck_is_close_to_exact(make_coupling):
    A = make_coupling(12, seed=9)
    reference = SpinConfiguration.from_index(0xA5C, 12)
    exact = bottleneck_ratio(A, reference, 1.0, 0.25)
    sampled = bottleneck_ratio(A, reference, 1.0, 0.25, mode="sampled", m=20_000, seed=1)
    assert sampled.log_ratio == pytest.approx(exact.log_ratio, abs=0.05)
    assert sampled.ball_mass == pytest.approx(exact.ball_mass, rel=0.05)
    assert sampled.log_ratio_stderr < 0.05


def test_bottleneck_log_bound():
    report = bottleneck_ratio(np.zeros((4, 4)), SpinConfiguration.all_up(4), 2.0, 0.25, gamma=0.5)
    assert report.log_bound == pytest.approx(4 * math.log(2.0) - 2.0 * 0.25 * 0.5 * 4 / 2)


def test_pipeline_reports_every_step(coupling10, deepest10):
    result = theorem_pipeline(coupling10, beta=2.0, gamma=0.3, delta=0.3, rho=0.2, reference=deepest10)
    record = result.record
    names = [step.name for step in record.steps]
    assert names == [
        "operator_norm", "restricted_norm", "gapped_state", "beta_positive", "sphere_energy_gap",
        "bottleneck_ratio", "ball_mass", "conductance", "cheeger",
    ]
    assert record.reference_hex == deepest10.to_hex()
    assert record.cheeger_consistent
    assert record.t_rel >= math.exp(record.log_lower_bound) * (1 - 1e-9)
    assert not record.certified or record.hypotheses_met
    text = result.summary()
    assert text == pipeline_summary(record)
    assert f"verdict: {record.verdict}" in text
    assert deepest10.to_hex() in text


def test_pipeline_at_zero_beta_misses_hypotheses(coupling8):
    record = theorem_pipeline(coupling8, beta=0.0, gamma=0.3, delta=0.3, rho=0.25, budget=5_000).record
    assert not record.hypotheses_met
    assert not record.certified
    assert record.verdict == "hypotheses unmet"


def test_pipeline_needs_the_restricted_norm_hypothesis(coupling10, deepest10):
    record = theorem_pipeline(
        coupling10, beta=2.0, gamma=0.3, delta=0.3, rho=0.2, reference=deepest10, norm_constant=1e-6,
    ).record
    step = next(step for step in record.steps if step.name == "restricted_norm")
    assert not step.passed
    assert not record.hypotheses_met
    assert not record.certified
    assert record.verdict == "hypotheses unmet"


def test_pipeline_gate(monkeypatch, make_coupling):
    monkeypatch.setenv("SKLAB_TRANSITION_MAX_N", "8")
    with pytest.raises(GateViolationError):
        theorem_pipeline(make_coupling(9), beta=1.0, gamma=0.3, delta=0.3, rho=0.2)


def test_bottleneck_slope_approaches_the_sphere_energy_gap(make_coupling):
    hits = 0
    for seed in range(5):
        A = make_coupling(12, seed=60 + seed)
        reference = enumerate_local_maxima(A).deepest()
        low, high = bottleneck_ratio(A, reference, 4.0, 0.25), bottleneck_ratio(A, reference, 6.0, 0.25)
        gap = high.max_sphere_energy - high.reference_energy
        slope = (high.log_ratio - low.log_ratio) / 2.0
        assert gap < 0
        assert slope <= gap + 1e-9
        if abs(slope - gap) <= 0.05 * abs(gap):
            hits += 1
    assert hits >= 4


@pytest.mark.slow
def test_restricted_norm_constant_at_scale():
    A = sample_coupling(DisorderSpec(n=600, master_seed=17))
    constants = []
    for rho in (0.05, 0.1, 0.2):
        report = restricted_norm(A, rho, mode="heuristic", budget=20_000, seed=0)
        assert len(report.subset) <= subset_size(rho, 600)
        assert report.fitted_constant <= 6.0
        constants.append(report.fitted_constant)
    assert max(constants) / min(constants) <= 1.25

import math

import numpy as np
import pytest

from app.services.disorder import SymmetricCoupling
from app.services.model import (
    EnergyState,
    SpinConfiguration,
    apply_flip,
    energy,
    energy_table,
    flip_delta,
    free_energy_pair,
    gibbs_measure,
    hamming_distances,
    local_fields,
    log_partition,
)
from app.utils.errors import ConfigError, DimensionMismatchError, GateViolationError
from tests import oracle


def test_two_site_hand_example():
    a = 0.7
    A = SymmetricCoupling.from_array([[0.0, a], [a, 0.0]])
    sigma = SpinConfiguration.from_spins([1, -1])
    assert energy(A, sigma) == pytest.approx(-a)
    assert np.allclose(local_fields(A, sigma), [-a, a])
    assert np.allclose(sigma.spins() * local_fields(A, sigma), [-a, -a])


def test_configuration_encodings():
    sigma = SpinConfiguration.from_spins([1, -1, 1, 1, -1, -1, -1, -1, 1])
    assert sigma.to_index() == 0b100001101
    assert SpinConfiguration.from_hex(sigma.to_hex(), 9) == sigma
    assert SpinConfiguration.from_index(sigma.to_index(), 9) == sigma
    assert sigma.negated().negated() == sigma
    assert sigma.hamming(sigma.negated()) == 9
    assert sigma.flipped(3).hamming(sigma) == 1


def test_configuration_rejects_bad_input():
    with pytest.raises(ConfigError):
        SpinConfiguration.from_spins([1, 0, -1])
    with pytest.raises(ConfigError):
        SpinConfiguration.from_hex("ff", 4)
    with pytest.raises(DimensionMismatchError):
        SpinConfiguration.all_up(3).hamming(SpinConfiguration.all_up(4))


def test_energy_matches_naive_loop(make_coupling, rng):
    for trial in range(200):
        n = int(rng.integers(2, 12))
        A = make_coupling(n, seed=trial)
        sigma = SpinConfiguration.random(n, rng)
        spins = list(sigma.spins())
        assert energy(A, sigma) == pytest.approx(oracle.naive_energy(A.entries, spins), abs=1e-10)
        assert np.allclose(local_fields(A, sigma), oracle.naive_local_fields(A.entries, spins), atol=1e-10)


def test_energy_is_even_and_vanishes_for_zero_coupling(coupling8, rng):
    sigma = SpinConfiguration.random(8, rng)
    assert energy(coupling8, sigma) == pytest.approx(energy(coupling8, sigma.negated()), abs=1e-12)
    assert energy(np.zeros((8, 8)), sigma) == 0.0


def test_energy_rejects_wrong_length(coupling8):
    with pytest.raises(DimensionMismatchError):
        energy(coupling8, SpinConfiguration.all_up(7))


def test_flip_identity_on_every_site(coupling10, rng):
    sigma = SpinConfiguration.random(10, rng)
    state = EnergyState(coupling10, sigma)
    for i in range(10):
        expected = energy(coupling10, sigma.flipped(i)) - energy(coupling10, sigma)
        assert flip_delta(state, i) == pytest.approx(expected, abs=1e-9)


def test_fields_are_the_gradient_of_the_quadratic_extension(coupling10, rng):
    arr = coupling10.entries
    h = 1e-4
    for _ in range(20):
        sigma = SpinConfiguration.random(10, rng)
        x = sigma.spins().astype(np.float64)
        gradient = local_fields(coupling10, sigma) + np.diagonal(arr) * x
        for i in range(10):
            e = np.zeros(10)
            e[i] = h
            up, down = x + e, x - e
            fd = (0.5 * up @ arr @ up - 0.5 * down @ arr @ down) / (2 * h)
            assert abs(fd - gradient[i]) <= 1e-6


def test_quadratic_taylor_identity_for_arbitrary_pairs(make_coupling, rng):
    for trial in range(50):
        n = int(rng.integers(2, 16))
        A = make_coupling(n, seed=200 + trial)
        star, sigma = SpinConfiguration.random(n, rng), SpinConfiguration.random(n, rng)
        s_star = star.spins().astype(np.float64)
        d = s_star - sigma.spins().astype(np.float64)
        rhs = float((A.entries @ s_star) @ d - 0.5 * d @ A.entries @ d)
        assert energy(A, star) - energy(A, sigma) == pytest.approx(rhs, abs=1e-9)


def test_incremental_flips_stay_in_sync(coupling10, rng):
    state = EnergyState(coupling10, SpinConfiguration.random(10, rng))
    for i in rng.integers(0, 10, size=500):
        before = state.energy
        delta = flip_delta(state, int(i))
        apply_flip(state, int(i))
        assert state.energy == pytest.approx(before + delta, abs=1e-9)
    fresh = EnergyState(coupling10, state.config)
    assert state.energy == pytest.approx(fresh.energy, abs=1e-9)
    assert np.allclose(state.local_fields, fresh.local_fields, atol=1e-9)


def test_flip_rejects_bad_site(coupling8):
    state = EnergyState(coupling8, SpinConfiguration.all_up(8))
    with pytest.raises(IndexError):
        flip_delta(state, 8)


def test_energy_table_matches_oracle(coupling8):
    assert np.allclose(energy_table(coupling8), oracle.naive_energies(coupling8.entries), atol=1e-9)


def test_gibbs_measure_is_normalized(coupling8):
    pi = gibbs_measure(coupling8, 1.5)
    assert pi.sum() == pytest.approx(1.0, abs=1e-12)
    table = oracle.naive_energies(coupling8.entries)
    weights = np.exp(1.5 * table)
    assert np.allclose(pi, weights / weights.sum(), atol=1e-12)


@pytest.mark.parametrize("beta", [0.0, 0.4, 2.0, 40.0])
def test_log_partition_matches_enumeration(coupling10, beta):
    table = oracle.naive_energies(coupling10.entries)
    peak = beta * table.max()
    expected = peak + math.log(np.exp(beta * table - peak).sum())
    assert log_partition(coupling10, beta) == pytest.approx(expected, rel=1e-12, abs=1e-10)


def test_log_partition_is_independent_of_workers(make_coupling, monkeypatch):
    monkeypatch.setattr("app.services.model.PARTITION_BLOCK_BITS", 4)
    A = make_coupling(11)
    assert log_partition(A, 0.8, n_jobs=1) == log_partition(A, 0.8, n_jobs=3)


def test_log_partition_beta_zero_is_counting(coupling8):
    assert log_partition(coupling8, 0.0) == 8 * math.log(2.0)


def test_log_partition_gate(monkeypatch, make_coupling):
    monkeypatch.setenv("SKLAB_ENUMERATION_MAX_N", "6")
    with pytest.raises(GateViolationError):
        log_partition(make_coupling(7), 1.0)


def test_log_partition_rejects_negative_beta(coupling8):
    with pytest.raises(ConfigError):
        log_partition(coupling8, -1.0)


def test_free_energy_pair_annealed_value(coupling8):
    quenched, annealed = free_energy_pair(coupling8, 0.5)
    assert annealed == pytest.approx(math.log(2.0) + 0.125)
    assert quenched == pytest.approx(log_partition(coupling8, 0.5) / 8)


def test_hamming_distances(rng):
    center = SpinConfiguration.random(9, rng)
    distances = hamming_distances(center)
    for state in rng.integers(0, 1 << 9, size=50):
        assert distances[state] == center.hamming(SpinConfiguration.from_index(int(state), 9))


@pytest.mark.slow
def test_free_energy_high_and_low_temperature(make_coupling):
    high, low = [], []
    for instance in range(10):
        A = make_coupling(20, seed=2024, instance=instance)
        quenched, annealed = free_energy_pair(A, 0.3)
        high.append(quenched - annealed)
        quenched, annealed = free_energy_pair(A, 4.0)
        low.append(quenched - annealed)
    assert abs(np.mean(high)) <= 0.02
    assert np.mean(low) <= -0.1

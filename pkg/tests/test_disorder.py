import math

import numpy as np
import pytest

from app.models.lab_models import DisorderLaw, DisorderSpec
from app.services.disorder import (
    HEADER,
    SymmetricCoupling,
    load_matrix,
    operator_norm,
    sample_coupling,
    sample_disorder,
    save_matrix,
    symmetrize,
)
from app.utils.errors import ConfigError, DimensionMismatchError, MatrixFormatError


def test_sample_is_reproducible_per_seed_and_instance():
    spec = DisorderSpec(n=6, master_seed=3, instance_index=2)
    first = sample_disorder(spec)
    second = sample_disorder(spec)
    assert np.array_equal(first.entries, second.entries)
    other = sample_disorder(DisorderSpec(n=6, master_seed=3, instance_index=3))
    assert not np.array_equal(first.entries, other.entries)


def test_rademacher_entries_are_signs():
    G = sample_disorder(DisorderSpec(law=DisorderLaw.RADEMACHER, n=20, master_seed=1))
    assert set(np.unique(G.entries)) <= {-1.0, 1.0}


def test_custom_law_draws_from_table():
    table = [(-math.sqrt(2.0), 0.25), (0.0, 0.5), (math.sqrt(2.0), 0.25)]
    G = sample_disorder(DisorderSpec(law=DisorderLaw.CUSTOM, n=12, custom_table=table))
    assert set(np.round(np.unique(G.entries), 12)) <= {round(-math.sqrt(2.0), 12), 0.0, round(math.sqrt(2.0), 12)}


def test_custom_law_needs_unit_variance():
    with pytest.raises(ValueError):
        DisorderSpec(law=DisorderLaw.CUSTOM, n=4, custom_table=[(-2.0, 0.5), (2.0, 0.5)])


def test_custom_table_rejected_for_other_laws():
    with pytest.raises(ValueError):
        DisorderSpec(law=DisorderLaw.GAUSSIAN, n=4, custom_table=[(-1.0, 0.5), (1.0, 0.5)])


def test_moments_of_builtin_laws():
    gaussian = DisorderSpec(n=3).moments()
    assert gaussian["variance"] == 1.0 and gaussian["fourth"] == 3.0
    assert gaussian["third_abs"] == pytest.approx(1.5957691216057308)
    assert DisorderSpec(law=DisorderLaw.RADEMACHER, n=3).moments()["fourth"] == 1.0


def test_sample_rejects_single_site():
    with pytest.raises(ConfigError):
        sample_disorder(DisorderSpec(n=1))


def test_symmetrize_scales_by_sqrt_n():
    G = sample_disorder(DisorderSpec(n=9, master_seed=5))
    A = symmetrize(G)
    assert np.array_equal(A.entries, A.entries.T)
    assert np.allclose(A.entries, (G.entries + G.entries.T) / 3.0)


def test_symmetric_coupling_rejects_asymmetric_input():
    with pytest.raises(ConfigError):
        SymmetricCoupling.from_array([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(DimensionMismatchError):
        SymmetricCoupling.from_array([[0.0, 1.0, 2.0]])


def test_operator_norm_matches_eigh(make_coupling):
    A = make_coupling(40)
    expected = float(np.max(np.abs(np.linalg.eigvalsh(A.entries))))
    assert operator_norm(A, rel_tol=1e-10) == pytest.approx(expected, rel=1e-6)


def test_operator_norm_of_rank_one_is_exact():
    u = np.ones(5) / math.sqrt(5.0)
    A = 2.5 * np.outer(u, u)
    assert operator_norm(A) == pytest.approx(2.5, rel=1e-10)


def test_operator_norm_sees_negative_top_eigenvalue():
    A = np.diag([-3.0, 1.0, 0.5])
    assert operator_norm(A) == pytest.approx(3.0, rel=1e-6)


def test_gaussian_entries_have_unit_moments():
    G = sample_disorder(DisorderSpec(n=1000, master_seed=11))
    count = G.entries.size
    assert abs(float(G.entries.mean())) <= 5 / math.sqrt(count)
    assert abs(float(G.entries.var()) - 1.0) <= 5 * math.sqrt(2.0 / count)


@pytest.mark.parametrize(
    "matrix, expected",
    [(np.eye(6), 1.0), (np.zeros((4, 4)), 0.0), (np.array([[0.0, 1.0], [1.0, 0.0]]), 1.0)],
)
def test_operator_norm_hand_cases(matrix, expected):
    assert operator_norm(matrix) == pytest.approx(expected, abs=1e-12)


def test_operator_norm_rejects_bad_tolerance():
    with pytest.raises(ConfigError):
        operator_norm(np.eye(3), rel_tol=0.5)


def test_matrix_file_roundtrip_is_bit_exact(tmp_path):
    G = sample_disorder(DisorderSpec(n=7, master_seed=11, instance_index=4))
    path = save_matrix(G, tmp_path / "g.skg")
    assert path.stat().st_size == HEADER.size + 8 * 49 + 8
    loaded = load_matrix(path, expected_n=7)
    assert loaded.entries.tobytes() == G.entries.tobytes()
    assert loaded.spec == G.spec


def test_load_detects_corruption(tmp_path):
    G = sample_disorder(DisorderSpec(n=5))
    path = save_matrix(G, tmp_path / "g.skg")
    data = bytearray(path.read_bytes())
    data[HEADER.size + 3] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(MatrixFormatError, match="checksum"):
        load_matrix(path)


def test_load_detects_truncation_and_magic(tmp_path):
    G = sample_disorder(DisorderSpec(n=5))
    path = save_matrix(G, tmp_path / "g.skg")
    data = path.read_bytes()
    (tmp_path / "short.skg").write_bytes(data[:-9])
    with pytest.raises(MatrixFormatError):
        load_matrix(tmp_path / "short.skg")
    (tmp_path / "magic.skg").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(MatrixFormatError, match="magic"):
        load_matrix(tmp_path / "magic.skg")


def test_load_checks_expected_size(tmp_path):
    path = save_matrix(sample_disorder(DisorderSpec(n=5)), tmp_path / "g.skg")
    with pytest.raises(DimensionMismatchError):
        load_matrix(path, expected_n=6)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_gaussian_norm_hypothesis_at_scale(seed):
    A = sample_coupling(DisorderSpec(law=DisorderLaw.GAUSSIAN, n=1000, master_seed=seed))
    norm = operator_norm(A)
    assert 2.70 <= norm <= 2.95


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_rademacher_norm_hypothesis_at_scale(seed):
    A = sample_coupling(DisorderSpec(law=DisorderLaw.RADEMACHER, n=1000, master_seed=seed))
    assert operator_norm(A) <= 3.0

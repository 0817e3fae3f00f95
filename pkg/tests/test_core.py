import warnings

import numpy as np
import pytest

from strainsolve.core import (
    CapacityError,
    DimensionError,
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    Reconstruction,
    StrainMatrix,
    bi_independence_margin,
    enumerate_block_candidates,
    forward,
    is_bi_independent,
    objective_phi,
    sign_vectors,
    worker_count,
)


def test_dims_derived_quantities():
    dims = ProblemDims(4, 3, 3)
    assert dims.q == 8
    assert dims.block == 2
    assert dims.block_slice(1) == slice(2, 4)
    assert dims.with_n(2) == ProblemDims(4, 2, 3)


@pytest.mark.parametrize("args", [(0, 1, 2), (1, 0, 2), (1, 1, 1), (1.5, 1, 2)])
def test_dims_rejects_invalid(args):
    with pytest.raises(DimensionError):
        ProblemDims(*args)


def test_strain_matrix_validation():
    dims = ProblemDims(2, 2, 3)
    StrainMatrix(dims, np.array([[1, 0], [0, 0], [0, 1], [0, 0]]))
    with pytest.raises(ValueError, match="more than one class"):
        StrainMatrix(dims, np.array([[1, 0], [1, 0], [0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        StrainMatrix(dims, np.full((4, 2), 0.5))
    with pytest.raises(DimensionError):
        StrainMatrix(dims, np.zeros((3, 2)))


def test_strain_matrix_is_immutable():
    M = StrainMatrix.from_array([[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        M.entries[0, 0] = 0.0


def test_augmented_adds_reference_rows():
    M = StrainMatrix.from_array(np.array([[1, 0], [0, 0], [0, 0], [0, 1]]), p=3)
    A = M.augmented()
    assert A.shape == (6, 2)
    np.testing.assert_array_equal(A.reshape(2, 3, 2).sum(axis=1), np.ones((2, 2)))
    # site 0: strain 1 is class 1, strain 2 is reference
    np.testing.assert_array_equal(A[:3], [[0, 1], [1, 0], [0, 0]])


def test_frequency_vector_normalizes_and_checks_order():
    w = FrequencyVector([2.0, 1.0, 1.0])
    np.testing.assert_allclose(w.values, [0.5, 0.25, 0.25])
    with pytest.raises(ValueError, match="non-increasing"):
        FrequencyVector([0.2, 0.8])
    with pytest.raises(ValueError):
        FrequencyVector([0.5, -0.1])
    np.testing.assert_allclose(FrequencyVector.sorted_from([0.2, 0.8]).values, [0.8, 0.2])


def test_measurement_out_of_range_is_flagged():
    with pytest.warns(UserWarning):
        d = Measurement.from_array([0.2, 1.3], n=1)
    assert d.out_of_range
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not Measurement.from_array([0.2, 0.3], n=1).out_of_range


def test_measurement_rejects_wrong_length():
    with pytest.raises(DimensionError):
        Measurement(ProblemDims(3, 2, 2), np.zeros(4))
    with pytest.raises(DimensionError):
        Measurement.from_array(np.zeros(5), n=1, p=3)


def test_noise_model():
    nz = NoiseModel.uniform(0.1, 3)
    np.testing.assert_allclose(nz.precision, [100.0] * 3)
    with pytest.raises(ValueError):
        NoiseModel(np.array([0.1, 0.0]))


def test_forward_and_objective_on_unique_example():
    M = StrainMatrix.from_array([[0, 1], [1, 0], [1, 1]])
    w = FrequencyVector([0.6, 0.4])
    np.testing.assert_allclose(forward(M, w), [0.4, 0.6, 1.0])
    d = Measurement.from_array([0.4, 0.6, 1.0], n=2)
    assert objective_phi(M, w, d, NoiseModel.uniform(1e-2, 3)) == pytest.approx(0.0, abs=1e-20)
    d2 = Measurement.from_array([0.5, 0.6, 1.0], n=2)
    assert objective_phi(M, w, d2, NoiseModel.uniform(1e-1, 3)) == pytest.approx(1.0)


def test_reconstruction_evaluate():
    M = StrainMatrix.from_array([[1], [0]])
    d = Measurement.from_array([0.9, 0.1], n=1)
    rec = Reconstruction.evaluate(M, FrequencyVector([1.0]), d, NoiseModel.uniform(0.1, 2))
    assert rec.objective == pytest.approx(2.0)
    assert not rec.certified and rec.gap is None


def test_candidate_order_is_base_p_with_strain_one_least_significant():
    c = enumerate_block_candidates(2, 3)
    assert c.shape == (9, 2, 2)
    # index 5 = 2 + 1*3: strain 1 in class 2, strain 2 in class 1
    np.testing.assert_array_equal(c[5], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(c[0], np.zeros((2, 2)))
    assert np.all(c.sum(axis=1) <= 1)


def test_candidate_limit():
    with pytest.raises(CapacityError):
        enumerate_block_candidates(21, 2)


def test_sign_vectors():
    S = sign_vectors(3)
    assert S.shape == (26, 3)
    assert len({tuple(s) for s in S}) == 26


@pytest.mark.parametrize(
    "w, expected",
    [
        ((0.6, 0.4), True),
        ((0.5, 0.5), False),
        ((0.5, 0.3, 0.2), False),  # 0.5 = 0.3 + 0.2
        ((0.52, 0.36, 0.12), True),
    ],
)
def test_bi_independence(w, expected):
    assert is_bi_independent(np.array(w)) is expected


def test_bi_independence_margin_value():
    assert bi_independence_margin(np.array([0.6, 0.4])) == pytest.approx(0.2)


def test_worker_count_respects_env(monkeypatch):
    monkeypatch.setenv("STRAINSOLVE_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("STRAINSOLVE_THREADS", "junk")
    assert worker_count() >= 1

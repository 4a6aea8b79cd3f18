import math

import numpy as np
import pytest

from fermiscope.fock import (
    CapacityError,
    DensityMatrix,
    DomainError,
    FockBasis,
    OccupationBitstring,
    StateVector,
    apply_ladder,
    expectation_chain,
    hamming_distance,
    ladder_matrix,
    max_reduced_rank,
    occupation_phase,
    partial_trace,
    quadratic_operator,
    sector_dimension,
)

from conftest import paired_state


def test_bitstring_round_trip():
    n = OccupationBitstring.from_string("1011")
    assert n.bits == 0b1101  # leftmost char is mode 0
    assert n.particle_count == 3
    assert str(n) == "1011"
    assert n.occupation(0) == 1 and n.occupation(1) == 0


def test_bitstring_rejects_bad_input():
    with pytest.raises(DomainError):
        OccupationBitstring.from_string("10x1")
    with pytest.raises(DomainError):
        OccupationBitstring(1 << 4, 4)
    with pytest.raises(DomainError):
        OccupationBitstring(-1, 4)


def test_hamming_distance():
    a = OccupationBitstring.from_string("1100")
    b = OccupationBitstring.from_string("0110")
    assert hamming_distance(a, b) == 2
    with pytest.raises(DomainError):
        hamming_distance(a, OccupationBitstring.from_string("11000"))


def test_occupation_phase_counts_between_modes():
    n = OccupationBitstring.from_string("1011")
    assert occupation_phase(0, 3, set(), n) == 1
    assert occupation_phase(0, 3, {2}, n) == 0
    assert occupation_phase(3, 0, set(), n) == 1  # symmetric in i <-> j
    with pytest.raises(DomainError):
        occupation_phase(2, 2, set(), n)


def test_basis_enumeration_and_sectors():
    full = FockBasis(2)
    assert list(full.states) == [0, 1, 2, 3]
    for k in range(5):
        assert FockBasis(4, k).dim == math.comb(4, k)
    with pytest.raises(DomainError):
        FockBasis(4, 5)
    with pytest.raises(DomainError):
        FockBasis(4, sz_twice=0)  # magnetization needs a particle sector


def test_basis_magnetization_filter():
    # modes 2*site + spin; sz counts up minus down
    assert FockBasis(4, 2, sz_twice=0).dim == 4
    assert FockBasis(4, 2, sz_twice=2).dim == 1
    assert FockBasis(4, 2, sz_twice=-2).dim == 1


def test_capacity_guard():
    with pytest.raises(CapacityError):
        FockBasis(29)


def test_ladder_signs_count_higher_occupied_modes():
    basis = FockBasis(4)
    src = basis.index_of(OccupationBitstring.from_string("0010"))
    # creating mode 1 passes the occupied mode 2: sign -1
    cdag1 = ladder_matrix(basis, 1, "create")
    dst = basis.index_of(OccupationBitstring.from_string("0110"))
    assert cdag1[dst, src] == -1.0
    # creating mode 3 passes nothing above it: sign +1
    cdag3 = ladder_matrix(basis, 3, "create")
    dst3 = basis.index_of(OccupationBitstring.from_string("0011"))
    assert cdag3[dst3, src] == 1.0
    # annihilating mode 1 out of "0110" passes occupied mode 2
    c1 = ladder_matrix(basis, 1, "annihilate")
    src2 = basis.index_of(OccupationBitstring.from_string("0110"))
    assert c1[src, src2] == -1.0


@pytest.mark.parametrize("m", [2, 3, 4, 5])
def test_canonical_anticommutators(m):
    basis = FockBasis(m)
    eye = np.eye(basis.dim)
    cs = [ladder_matrix(basis, i, "annihilate") for i in range(m)]
    ds = [ladder_matrix(basis, i, "create") for i in range(m)]
    for i in range(m):
        for j in range(m):
            acc = cs[i] @ ds[j] + ds[j] @ cs[i]
            want = eye if i == j else 0.0
            assert np.abs(acc - want).max() < 1e-12
            assert np.abs(cs[i] @ cs[j] + cs[j] @ cs[i]).max() < 1e-12


def test_apply_ladder_matches_matrix(rng):
    basis = FockBasis(4)
    amps = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    psi = StateVector(basis, amps).normalized()
    for mode in range(4):
        for kind in ("create", "annihilate"):
            got = apply_ladder(psi, mode, kind).amplitudes
            want = ladder_matrix(basis, mode, kind) @ psi.amplitudes
            assert np.abs(got - want).max() < 1e-14


def test_apply_ladder_shifts_sector():
    basis = FockBasis(4, 2)
    amps = np.zeros(basis.dim, complex)
    amps[0] = 1.0
    up = apply_ladder(StateVector(basis, amps), 3, "create")
    assert up.basis.sector == 3
    down = apply_ladder(StateVector(basis, amps), 0, "annihilate")
    assert down.basis.sector == 1


def test_ladder_matrix_requires_unfiltered_basis():
    with pytest.raises(DomainError):
        ladder_matrix(FockBasis(4, 2), 0, "create")


def test_quadratic_operator_matches_ladder_sum(rng):
    basis = FockBasis(4)
    h = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    h = 0.5 * (h + h.conj().T)
    want = np.zeros((basis.dim, basis.dim), complex)
    for i in range(4):
        for j in range(4):
            want += h[i, j] * (
                ladder_matrix(basis, i, "create")
                @ ladder_matrix(basis, j, "annihilate")
            )
    got = quadratic_operator(basis, h)
    assert np.abs(got - want).max() < 1e-13


def test_quadratic_operator_on_sector_basis(rng):
    h = rng.normal(size=(4, 4))
    h = 0.5 * (h + h.T)
    full = FockBasis(4)
    sec = FockBasis(4, 2)
    dense = quadratic_operator(full, h)
    rows = [full.index_of(int(b)) for b in sec.states]
    assert np.abs(quadratic_operator(sec, h) - dense[np.ix_(rows, rows)]).max() < 1e-13


def test_expectation_chain_orders_left_to_right():
    psi = paired_state()
    # <n_0> = 1/2 on the paired superposition
    assert expectation_chain(psi, [(0, "create"), (0, "annihilate")]) == pytest.approx(0.5)
    # <c†_0 c_2> vanishes: the move leaves the support
    assert expectation_chain(psi, [(0, "create"), (2, "annihilate")]) == pytest.approx(0.0)


def test_partial_trace_of_paired_state():
    rho = partial_trace(paired_state(), 2)
    want = np.zeros((4, 4), complex)
    want[0, 0] = 0.5  # |00>
    want[3, 3] = 0.5  # |11>
    assert np.abs(rho.elements - want).max() < 1e-14


def test_partial_trace_properties(rng):
    basis = FockBasis(6, 3)
    amps = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    psi = StateVector(basis, amps).normalized()
    rho = partial_trace(psi, 4)
    assert rho.trace == pytest.approx(1.0)
    assert rho.hermiticity_defect() < 1e-14
    assert rho.eigenvalues().min() > -1e-14


def test_sector_dimension_and_rank_bound():
    assert sector_dimension(10, 4) == math.comb(10, 4)
    assert sector_dimension(10, None) == 1 << 10
    # Schmidt bound: sum_k min(C(keep, k), C(rest, N-k))
    assert max_reduced_rank(10, 4, 6) == 16
    assert max_reduced_rank(16, 7, 6) == 64
    assert max_reduced_rank(16, 7, 8) == 186


def test_state_vector_shape_and_norm():
    basis = FockBasis(2)
    with pytest.raises(DomainError):
        StateVector(basis, np.ones(3))
    psi = StateVector(basis, np.array([3.0, 4.0, 0.0, 0.0]))
    assert psi.norm == pytest.approx(5.0)
    assert psi.normalized().norm == pytest.approx(1.0)


def test_density_matrix_shape_guard():
    with pytest.raises(DomainError):
        DensityMatrix(FockBasis(2), np.eye(3))

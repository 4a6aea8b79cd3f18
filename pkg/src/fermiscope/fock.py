"""Bitstring Fock-space engine for fermionic modes.

Basis states are occupation bitstrings stored as integers with bit ``i``
(least significant = mode 0) giving the occupation of mode ``i``.  A basis
state corresponds to the ordered product of creation operators with mode
indices *descending* from left to right,

    |n> = c†_{M-1}^{n_{M-1}} ... c†_1^{n_1} c†_0^{n_0} |0>,

so a ladder operator acting on mode ``i`` picks up the parity of all
*higher* occupied modes.  Every module builds its operators through
:func:`apply_ladder` (or the vectorized :func:`ladder_map`) so this sign
convention is globally consistent.

The spinful lattice layout is mode = 2*site + spin (spin up = 0, down = 1);
a subsystem of the first ``n`` sites is therefore the contiguous prefix of
the first ``2n`` modes, for which the fermionic partial trace of a
fixed-particle-number state equals the plain qubit partial trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

MAX_MODES = 28  # 2^28 amplitudes is already ~4 GiB; refuse beyond this


class CapacityError(Exception):
    """Requested Hilbert space exceeds the supported size."""


class DomainError(ValueError):
    """Arguments outside the operation's domain."""


def popcount(bits: int) -> int:
    return bin(bits).count("1")


@dataclass(frozen=True)
class OccupationBitstring:
    """Occupation pattern of ``mode_count`` fermionic modes.

    ``bits`` packs occupations with mode 0 at the least significant bit.
    The string form reads left to right as n_0 n_1 ... n_{M-1}.
    """

    bits: int
    mode_count: int
    particle_count: int = field(init=False)

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.mode_count:
            raise DomainError(
                f"bit pattern {self.bits:#x} does not fit in {self.mode_count} modes"
            )
        object.__setattr__(self, "particle_count", popcount(self.bits))

    @classmethod
    def from_string(cls, pattern: str) -> "OccupationBitstring":
        if set(pattern) - {"0", "1"}:
            raise DomainError(f"invalid occupation string {pattern!r}")
        bits = sum(1 << i for i, ch in enumerate(pattern) if ch == "1")
        return cls(bits, len(pattern))

    def occupation(self, mode: int) -> int:
        return (self.bits >> mode) & 1

    def __str__(self) -> str:
        return "".join(str((self.bits >> i) & 1) for i in range(self.mode_count))


def hamming_distance(m: OccupationBitstring, n: OccupationBitstring) -> int:
    """Number of modes on which the two occupation patterns differ."""
    if m.mode_count != n.mode_count:
        raise DomainError("bitstring lengths differ")
    return popcount(m.bits ^ n.bits)


def occupation_phase(i: int, j: int, excluded, n: OccupationBitstring | int) -> int:
    """Count occupied modes strictly between ``i`` and ``j``, skipping ``excluded``.

    Symmetric in i <-> j.  Feeds the fermionic reordering phases of the
    non-Gaussian matrix elements.
    """
    if i == j:
        raise DomainError("occupation phase needs two distinct modes")
    bits = n.bits if isinstance(n, OccupationBitstring) else n
    lo, hi = (i, j) if i < j else (j, i)
    total = 0
    for s in range(lo + 1, hi):
        if s not in excluded:
            total += (bits >> s) & 1
    return total


class FockBasis:
    """Ordered set of occupation bitstrings over ``mode_count`` modes.

    States are sorted ascending as unsigned integers.  ``sector`` restricts
    to a fixed particle number; ``sz`` additionally restricts to a fixed
    magnetization 2*Sz (only meaningful for the spinful mode = 2*site + spin
    layout, where it counts n_up - n_down).
    """

    def __init__(self, mode_count: int, sector: int | None = None,
                 sz_twice: int | None = None):
        if mode_count > MAX_MODES:
            raise CapacityError(
                f"{mode_count} modes exceeds the {MAX_MODES}-mode capacity guard"
            )
        if sector is not None and not 0 <= sector <= mode_count:
            raise DomainError(f"sector {sector} out of range for {mode_count} modes")
        if sz_twice is not None and sector is None:
            raise DomainError("sz filter requires a particle-number sector")
        self.mode_count = mode_count
        self.sector = sector
        self.sz_twice = sz_twice
        self.states = _enumerate_states(mode_count, sector, sz_twice)
        self._index = {int(s): k for k, s in enumerate(self.states)}

    @property
    def dim(self) -> int:
        return len(self.states)

    def index_of(self, state: OccupationBitstring | int) -> int:
        bits = state.bits if isinstance(state, OccupationBitstring) else int(state)
        return self._index[bits]

    def __contains__(self, bits: int) -> bool:
        return int(bits) in self._index

    def state(self, k: int) -> OccupationBitstring:
        return OccupationBitstring(int(self.states[k]), self.mode_count)

    def indices_of(self, bits_array: np.ndarray) -> np.ndarray:
        """Vectorized index lookup; caller guarantees membership."""
        pos = np.searchsorted(self.states, bits_array)
        return pos

    def __repr__(self) -> str:
        sec = "" if self.sector is None else f", sector={self.sector}"
        sz = "" if self.sz_twice is None else f", sz_twice={self.sz_twice}"
        return f"FockBasis(mode_count={self.mode_count}{sec}{sz}, dim={self.dim})"


def _enumerate_states(mode_count, sector, sz_twice) -> np.ndarray:
    if sector is None:
        return np.arange(1 << mode_count, dtype=np.int64)
    if sz_twice is None:
        states = [
            sum(1 << p for p in occ)
            for occ in combinations(range(mode_count), sector)
        ]
        return np.array(sorted(states), dtype=np.int64)
    # spinful layout: even bits = spin up, odd bits = spin down
    sites = mode_count // 2
    n_up = (sector + sz_twice) // 2
    n_dn = (sector - sz_twice) // 2
    if (sector + sz_twice) % 2 or not (0 <= n_up <= sites and 0 <= n_dn <= sites):
        return np.array([], dtype=np.int64)
    states = []
    for up in combinations(range(sites), n_up):
        up_bits = sum(1 << (2 * p) for p in up)
        for dn in combinations(range(sites), n_dn):
            states.append(up_bits + sum(1 << (2 * p + 1) for p in dn))
    return np.array(sorted(states), dtype=np.int64)


def enumerate_basis(mode_count: int, sector: int | None = None) -> FockBasis:
    """Build the (optionally particle-number filtered) Fock basis."""
    return FockBasis(mode_count, sector)


@dataclass
class StateVector:
    """Complex amplitudes over a Fock basis."""

    basis: FockBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (self.basis.dim,):
            raise DomainError("amplitude array does not match basis dimension")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.basis, self.amplitudes / self.norm)

    def overlap(self, other: "StateVector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass
class DensityMatrix:
    """Dense Hermitian operator on a Fock basis."""

    basis: FockBasis
    elements: np.ndarray

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.complex128)
        d = self.basis.dim
        if self.elements.shape != (d, d):
            raise DomainError("matrix shape does not match basis dimension")

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.elements))

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.elements - self.elements.conj().T).max())

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.elements)


def ladder_map(basis: FockBasis, target: FockBasis, mode: int, kind: str):
    """Vectorized action of c†_mode / c_mode from ``basis`` into ``target``.

    Returns (rows, cols, signs): for each source state ``cols[t]`` in
    ``basis``, the operator sends it to ``rows[t]`` in ``target`` with
    amplitude ``signs[t]``; states killed by the operator are omitted.
    """
    if not 0 <= mode < basis.mode_count:
        raise DomainError(f"mode {mode} out of range")
    if kind not in ("create", "annihilate"):
        raise DomainError(f"unknown ladder kind {kind!r}")
    bits = basis.states
    occ = (bits >> mode) & 1
    keep = occ == 0 if kind == "create" else occ == 1
    src = np.nonzero(keep)[0]
    old = bits[src]
    # parity of occupations at modes strictly above the acted mode
    prefix = old >> (mode + 1)
    signs = 1.0 - 2.0 * (np.bitwise_count(prefix.astype(np.uint64)) & 1).astype(float)
    new = old | (1 << mode) if kind == "create" else old & ~(1 << mode)
    rows = target.indices_of(new)
    return rows, src, signs


def apply_ladder(state: StateVector, mode: int, kind: str) -> StateVector:
    """Apply c†_mode (``create``) or c_mode (``annihilate``) to a state.

    The result lives in the particle-number sector shifted by +/-1 when the
    input basis is sector-filtered, otherwise in the same unfiltered basis.
    """
    basis = state.basis
    if basis.sector is None:
        target = basis
    else:
        shift = 1 if kind == "create" else -1
        target = FockBasis(basis.mode_count, basis.sector + shift)
    rows, cols, signs = ladder_map(basis, target, mode, kind)
    out = np.zeros(target.dim, dtype=np.complex128)
    np.add.at(out, rows, signs * state.amplitudes[cols])
    return StateVector(target, out)


def ladder_matrix(basis: FockBasis, mode: int, kind: str) -> np.ndarray:
    """Dense matrix of a single ladder operator within an unfiltered basis."""
    if basis.sector is not None:
        raise DomainError("ladder matrices need the unfiltered basis")
    rows, cols, signs = ladder_map(basis, basis, mode, kind)
    out = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    out[rows, cols] = signs
    return out


def quadratic_operator(basis: FockBasis, h: np.ndarray) -> np.ndarray:
    """Dense Fock-space matrix of  sum_ij h_ij c†_i c_j.

    Works on sector-filtered bases too (the operator conserves particle
    number term by term).
    """
    n = basis.mode_count
    h = np.asarray(h)
    if h.shape != (n, n):
        raise DomainError("single-particle matrix has wrong shape")
    dim = basis.dim
    out = np.zeros((dim, dim), dtype=np.complex128)
    bits = basis.states
    # diagonal part: h_ii n_i
    occ = ((bits[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    out[np.arange(dim), np.arange(dim)] = occ @ np.diag(h).astype(complex)
    for j in range(n):
        ann = np.nonzero((bits >> j) & 1)[0]
        if ann.size == 0:
            continue
        removed = bits[ann] & ~(1 << j)
        sign_j = 1.0 - 2.0 * (
            np.bitwise_count((bits[ann] >> (j + 1)).astype(np.uint64)) & 1
        ).astype(float)
        for i in range(n):
            if i == j or h[i, j] == 0:
                continue
            ok = ((removed >> i) & 1) == 0
            if not ok.any():
                continue
            mid = removed[ok]
            sign_i = 1.0 - 2.0 * (
                np.bitwise_count((mid >> (i + 1)).astype(np.uint64)) & 1
            ).astype(float)
            rows = basis.indices_of(mid | (1 << i))
            cols = ann[ok]
            out[rows, cols] += h[i, j] * sign_j[ok] * sign_i
    return out


def expectation_chain(state: StateVector, ops) -> complex:
    """<psi| O_1 O_2 ... O_k |psi> for a chain of (mode, kind) ladder ops.

    Ops are listed left to right as written, i.e. the last one acts first.
    """
    ket = state
    for mode, kind in reversed(ops):
        ket = apply_ladder(ket, mode, kind)
    if ket.basis is state.basis or ket.basis.sector == state.basis.sector:
        return complex(np.vdot(state.amplitudes, ket.amplitudes))
    return 0.0


def partial_trace(psi: StateVector, keep_modes: int) -> DensityMatrix:
    """Reduced density matrix on the leading ``keep_modes`` modes.

    The subsystem must be the contiguous prefix of the Jordan-Wigner
    ordering; with the descending-order state convention the environment
    operators stand to the left of the subsystem operators, so grouping by
    environment pattern needs no extra fermionic signs.
    """
    basis = psi.basis
    m = basis.mode_count
    if not 0 < keep_modes <= m:
        raise DomainError(f"cannot keep {keep_modes} of {m} modes")
    sub = FockBasis(keep_modes)
    mask = (1 << keep_modes) - 1
    a_bits = basis.states & mask
    env = basis.states >> keep_modes
    rho = np.zeros((sub.dim, sub.dim), dtype=np.complex128)
    order = np.argsort(env, kind="stable")
    env_sorted = env[order]
    cuts = np.nonzero(np.diff(env_sorted))[0] + 1
    for grp in np.split(order, cuts):
        idx = a_bits[grp]
        amps = psi.amplitudes[grp]
        rho[np.ix_(idx, idx)] += np.outer(amps, amps.conj())
    return DensityMatrix(sub, rho)


def sector_dimension(mode_count: int, sector: int | None) -> int:
    if sector is None:
        return 1 << mode_count
    return math.comb(mode_count, sector)


def max_reduced_rank(mode_count: int, particles: int, keep_modes: int) -> int:
    """Largest possible rank of the reduced state of a fixed-N pure state."""
    env = mode_count - keep_modes
    total = 0
    for na in range(max(0, particles - env), min(keep_modes, particles) + 1):
        total += min(math.comb(keep_modes, na), math.comb(env, particles - na))
    return total

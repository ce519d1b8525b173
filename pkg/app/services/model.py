"""
Energy kernel of the SK model: configurations, energies, local fields,
incremental flips, Gibbs weights and exact partition functions
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from app.config import get_settings
from app.services.disorder import SymmetricCoupling, coupling_array
from app.services.kernels import flip_inplace, fresh_energy_and_fields, gray_code_energies, gray_code_logsumexp
from app.utils.errors import ConfigError, DimensionMismatchError, require_gate

logger = logging.getLogger(__name__)

# Critical inverse temperature of the usual SK normalization. Reference only, never enforced.
BETA_CRITICAL = 1.0
# Largest Gray-code block handed to a single worker by log_partition.
PARTITION_BLOCK_BITS = 18

Coupling = Union[SymmetricCoupling, np.ndarray]


@dataclass(frozen=True)
class SpinConfiguration:
    """A point of {-1, +1}^N, bit-packed little-endian with bit 1 <=> spin +1"""
    n: int
    packed: bytes

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "SpinConfiguration":
        arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits, dtype=np.uint8)
        if arr.ndim != 1 or np.any(arr > 1):
            raise ConfigError("bits must be a flat 0/1 vector")
        return cls(n=arr.size, packed=np.packbits(arr, bitorder="little").tobytes())

    @classmethod
    def from_spins(cls, spins: Iterable[float]) -> "SpinConfiguration":
        arr = np.asarray(spins if isinstance(spins, np.ndarray) else list(spins))
        if not np.all(np.abs(arr) == 1):
            raise ConfigError("spins must be +1 or -1")
        return cls.from_bits((arr > 0).astype(np.uint8))

    @classmethod
    def from_index(cls, state: int, n: int) -> "SpinConfiguration":
        """Configuration whose bit i is bit i of the integer state"""
        return cls(n=n, packed=int(state).to_bytes((n + 7) // 8, "little"))

    @classmethod
    def from_hex(cls, text: str, n: int) -> "SpinConfiguration":
        value = int(text, 16)
        if value >> n:
            raise ConfigError(f"hex configuration {text} has bits beyond N={n}")
        return cls.from_index(value, n)

    @classmethod
    def all_up(cls, n: int) -> "SpinConfiguration":
        return cls.from_bits(np.ones(n, dtype=np.uint8))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "SpinConfiguration":
        return cls.from_bits(rng.integers(0, 2, size=n).astype(np.uint8))

    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8), count=self.n, bitorder="little")

    def spins(self) -> np.ndarray:
        """Spin values s_i = 2 * bit_i - 1 as float64"""
        return 2.0 * self.bits().astype(np.float64) - 1.0

    def to_index(self) -> int:
        return int.from_bytes(self.packed, "little")

    def to_hex(self) -> str:
        return format(self.to_index(), f"0{max(1, (self.n + 3) // 4)}x")

    def flipped(self, i: int) -> "SpinConfiguration":
        _check_site(i, self.n)
        return SpinConfiguration.from_index(self.to_index() ^ (1 << i), self.n)

    def negated(self) -> "SpinConfiguration":
        return SpinConfiguration.from_index(self.to_index() ^ ((1 << self.n) - 1), self.n)

    def hamming(self, other: "SpinConfiguration") -> int:
        if other.n != self.n:
            raise DimensionMismatchError(f"configurations of size {self.n} and {other.n}")
        return bin(self.to_index() ^ other.to_index()).count("1")


def _check_site(i: int, n: int) -> None:
    if not 0 <= i < n:
        raise IndexError(f"site {i} out of range for N={n}")


def _spins_for(arr: np.ndarray, sigma: Union[SpinConfiguration, np.ndarray]) -> np.ndarray:
    spins = sigma.spins() if isinstance(sigma, SpinConfiguration) else np.asarray(sigma, dtype=np.float64)
    if spins.shape != (arr.shape[0],):
        raise DimensionMismatchError(f"configuration of length {spins.shape[0]} for an N={arr.shape[0]} coupling")
    return spins


def energy(A: Coupling, sigma: Union[SpinConfiguration, np.ndarray]) -> float:
    """H_N(sigma) = <sigma, G sigma> / sqrt(N) = <sigma, A sigma> / 2"""
    arr = coupling_array(A)
    spins = _spins_for(arr, sigma)
    return 0.5 * float(spins @ (arr @ spins))


def local_fields(A: Coupling, sigma: Union[SpinConfiguration, np.ndarray]) -> np.ndarray:
    """Flip-difference local fields L_i = (A sigma)_i - A_ii sigma_i"""
    arr = coupling_array(A)
    spins = _spins_for(arr, sigma)
    return arr @ spins - np.diagonal(arr) * spins


class EnergyState:
    """Configuration with cached energy and local fields, updated in O(N) per flip"""

    def __init__(self, coupling: Coupling, config: SpinConfiguration):
        """
        Initialize the state from scratch

        Args:
            coupling: Symmetric coupling the state lives on
            config: Starting configuration
        """
        self.coupling = coupling
        self.A = coupling_array(coupling)
        self.spins = _spins_for(self.A, config).copy()
        self.local_fields = np.empty_like(self.spins)
        self.energy = float(fresh_energy_and_fields(self.A, self.spins, self.local_fields))

    @property
    def n(self) -> int:
        return self.spins.size

    @property
    def config(self) -> SpinConfiguration:
        return SpinConfiguration.from_spins(self.spins)

    def gap_values(self) -> np.ndarray:
        """sigma_i * L_i(sigma) for every site"""
        return self.spins * self.local_fields

    def flip_delta(self, i: int) -> float:
        _check_site(i, self.n)
        return float(-2.0 * self.spins[i] * self.local_fields[i])

    def apply_flip(self, i: int) -> "EnergyState":
        _check_site(i, self.n)
        self.energy += float(flip_inplace(self.A, self.spins, self.local_fields, i))
        return self

    def resync(self) -> "EnergyState":
        """Recompute energy and fields from the spins"""
        self.energy = float(fresh_energy_and_fields(self.A, self.spins, self.local_fields))
        return self

    def copy(self) -> "EnergyState":
        clone = EnergyState.__new__(EnergyState)
        clone.coupling = self.coupling
        clone.A = self.A
        clone.spins = self.spins.copy()
        clone.local_fields = self.local_fields.copy()
        clone.energy = self.energy
        return clone


def flip_delta(state: EnergyState, i: int) -> float:
    """Energy change H(sigma + e_i) - H(sigma) = -2 sigma_i L_i, read from the cache"""
    return state.flip_delta(i)


def apply_flip(state: EnergyState, i: int) -> EnergyState:
    """Flip site i and update spins, energy and all local fields"""
    return state.apply_flip(i)


def energy_table(A: Coupling, gate: Optional[int] = None) -> np.ndarray:
    """
    Energies of all 2^N configurations, indexed by SpinConfiguration.to_index()

    Args:
        A: Symmetric coupling
        gate: Largest admissible N (transition gate by default)

    Returns:
        np.ndarray: Energy table of length 2^N
    """
    arr = coupling_array(A)
    require_gate("energy_table", arr.shape[0], gate or get_settings().transition_max_n)
    return gray_code_energies(arr)


def gibbs_log_weights(A: Coupling, beta: float, energies: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """
    Log Gibbs probabilities over all configurations

    Returns:
        Tuple[np.ndarray, float]: (log pi indexed by state, log Z)
    """
    _check_beta(beta)
    table = energy_table(A) if energies is None else energies
    log_weights = beta * table
    log_z = float(logsumexp(log_weights))
    return log_weights - log_z, log_z


def gibbs_measure(A: Coupling, beta: float, energies: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact Gibbs probabilities indexed by state"""
    log_pi, _ = gibbs_log_weights(A, beta, energies)
    return np.exp(log_pi)


def _check_beta(beta: float) -> None:
    if not math.isfinite(beta) or beta < 0:
        raise ConfigError(f"beta must be finite and non-negative, got {beta}")


def _pairwise_logsumexp(values: List[float]) -> float:
    while len(values) > 1:
        merged = [float(np.logaddexp(values[k], values[k + 1])) for k in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            merged.append(values[-1])
        values = merged
    return values[0]


def log_partition(A: Coupling, beta: float, n_jobs: int = 1) -> float:
    """
    log Z_N(beta) by streaming log-sum-exp over a reflected Gray-code enumeration

    The 2^N positions are cut into fixed blocks of 2^PARTITION_BLOCK_BITS that
    depend only on N, so the result does not depend on n_jobs.

    Args:
        A: Symmetric coupling with N <= 25
        beta: Inverse temperature
        n_jobs: Worker threads for the blocks

    Returns:
        float: log Z_N(beta)
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    require_gate("log_partition", n, get_settings().enumeration_max_n)
    _check_beta(beta)
    if beta == 0.0:
        return n * math.log(2.0)
    total = 1 << n
    block = 1 << min(n, PARTITION_BLOCK_BITS)
    bounds = [(start, min(start + block, total)) for start in range(0, total, block)]
    parts = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(gray_code_logsumexp)(arr, float(beta), start, stop) for start, stop in bounds
    )
    return _pairwise_logsumexp([float(p) for p in parts])


def free_energy_pair(A: Coupling, beta: float) -> Tuple[float, float]:
    """
    Per-site quenched and annealed free energies of one instance

    The annealed value log 2 + beta^2 v / 2 uses v = Var(H_N(sigma)) / N = 1,
    the variance of the full IID grid with unit-variance entries.

    Returns:
        Tuple[float, float]: (log Z / N, log 2 + beta^2 / 2)
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    quenched = log_partition(arr, beta) / n
    variance_per_site = 1.0
    annealed = math.log(2.0) + 0.5 * beta * beta * variance_per_site
    return quenched, annealed


def hamming_distances(center: SpinConfiguration) -> np.ndarray:
    """Hamming distance from center to every state, indexed by state (N <= 20)"""
    require_gate("hamming_distances", center.n, get_settings().transition_max_n)
    states = np.arange(1 << center.n, dtype=np.uint32)
    return np.bitwise_count(states ^ np.uint32(center.to_index())).astype(np.int64)

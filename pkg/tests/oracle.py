"""
Brute-force reference implementations for the test suite.

Written from the model definitions only; nothing here imports app.services.
Every routine refuses sizes above its gate instead of approximating.
"""
import math
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

MAX_DENSE_STATES = 1 << 14
MAX_ENUMERATION_STATES = 1 << 20
MAX_SUBSETS = 10**7


class OracleGateError(RuntimeError):
    """A reference computation was asked for more states than it allows"""


def _gate(count: int, limit: int, what: str) -> None:
    if count > limit:
        raise OracleGateError(f"{what}: {count} exceeds oracle gate {limit}")


def spins_of(state: int, n: int) -> List[float]:
    """Bit i set <=> spin i is +1"""
    return [1.0 if (state >> i) & 1 else -1.0 for i in range(n)]


def naive_energy(A, sigma) -> float:
    """H = (1/2) sum_ij A_ij s_i s_j, straight double loop"""
    n = len(sigma)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += A[i][j] * sigma[i] * sigma[j]
    return 0.5 * total


def naive_local_fields(A, sigma) -> List[float]:
    """L_i = sum_{j != i} A_ij s_j"""
    n = len(sigma)
    fields = []
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if j != i:
                acc += A[i][j] * sigma[j]
        fields.append(acc)
    return fields


def naive_energies(A) -> np.ndarray:
    n = len(A)
    _gate(1 << n, MAX_ENUMERATION_STATES, "naive_energies")
    return np.array([naive_energy(A, spins_of(x, n)) for x in range(1 << n)])


@dataclass
class ChainAnalysis:
    """Dense heat-bath kernel with its exact spectrum"""
    P: np.ndarray
    pi: np.ndarray
    eigenvalues: np.ndarray

    @property
    def gap(self) -> float:
        return 1.0 - float(self.eigenvalues[1])


def dense_chain_analysis(A, beta: float) -> ChainAnalysis:
    """
    Dense kernel P(x, x ^ e_i) = (1/N) / (1 + exp(-beta (H(y) - H(x)))), its
    Gibbs vector from enumerated weights and the spectrum of D^1/2 P D^-1/2
    """
    n = len(A)
    size = 1 << n
    _gate(size, MAX_DENSE_STATES, "dense_chain_analysis")
    energies = naive_energies(A)
    P = np.zeros((size, size))
    for x in range(size):
        for i in range(n):
            y = x ^ (1 << i)
            P[x, y] = 1.0 / (n * (1.0 + math.exp(-beta * (energies[y] - energies[x]))))
        P[x, x] = 1.0 - P[x].sum()
    weights = np.exp(beta * (energies - energies.max()))
    pi = weights / weights.sum()
    root = np.sqrt(pi)
    S = root[:, None] * P / root[None, :]
    S = 0.5 * (S + S.T)
    eigenvalues = np.sort(np.linalg.eigvalsh(S))[::-1]
    return ChainAnalysis(P=P, pi=pi, eigenvalues=eigenvalues)


def hypercube_closed_forms(n: int) -> Dict[str, object]:
    """beta = 0 constants: gap 1/N, eigenvalues 1 - k/N with multiplicity C(N, k), sphere sizes C(N, k)"""
    _gate(n, 64, "hypercube_closed_forms")
    return {
        "gap": 1.0 / n,
        "eigenvalues": [1.0 - k / n for k in range(n + 1)],
        "multiplicities": [math.comb(n, k) for k in range(n + 1)],
        "sphere_sizes": [math.comb(n, k) for k in range(n + 1)],
    }


def naive_restricted_norm(A, k: int) -> float:
    """max over |I| <= k of the largest |eigenvalue| of A_II"""
    n = len(A)
    _gate(sum(math.comb(n, s) for s in range(1, k + 1)), MAX_SUBSETS, "naive_restricted_norm")
    arr = np.asarray(A, dtype=float)
    best = 0.0
    for mask in range(1, 1 << n):
        subset = [i for i in range(n) if (mask >> i) & 1]
        if len(subset) > k:
            continue
        values = np.linalg.eigvalsh(arr[np.ix_(subset, subset)])
        best = max(best, float(np.max(np.abs(values))))
    return best


def naive_sphere_drops(A, reference_state: int, d: int) -> List[float]:
    """H(sigma*) - H(sigma) over every sigma at Hamming distance d"""
    n = len(A)
    _gate(1 << n, MAX_ENUMERATION_STATES, "naive_sphere_drops")
    top = naive_energy(A, spins_of(reference_state, n))
    return [
        top - naive_energy(A, spins_of(x, n))
        for x in range(1 << n)
        if bin(x ^ reference_state).count("1") == d
    ]

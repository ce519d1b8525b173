"""
Bounds service: restricted operator norms, sphere energy gaps, Gibbs
bottleneck ratios and the consolidated slow-mixing pipeline
"""
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations, islice
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from app.config import get_settings
from app.models.lab_models import (
    BottleneckRecord,
    PipelineRecord,
    PipelineStep,
    QuadraticFormRecord,
    RestrictedNormRecord,
    SphereGapRecord,
)
from app.services.disorder import coupling_array, operator_norm
from app.services.gapped import search_gapped, verify_gapped
from app.services.model import Coupling, SpinConfiguration, energy, energy_table, hamming_distances, log_partition
from app.services.spectral import build_transition, cut_conductance, spectral_gap
from app.utils.errors import ConfigError, require_gate
from app.utils.seeding import STREAM_BOUNDS, make_rng

logger = logging.getLogger(__name__)

DEFAULT_NORM_CONSTANT = 6.0
DEFAULT_NORM_BUDGET = 100_000
NORM_HYPOTHESIS = 3.0
EXHAUSTIVE_MOVES = 2000
GROW_EXACT = 64
PROXY_CANDIDATES = 8
SWAP_REMOVALS = 4
BATCH = 4096


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 0.5:
        raise ConfigError(f"rho must lie in (0, 1/2), got {rho}")


def subset_size(rho: float, n: int) -> int:
    """floor(rho N), the largest admissible subset size"""
    return int(math.floor(rho * n + 1e-12))


def sphere_distance(rho: float, n: int) -> int:
    """round(rho N) with halves rounded up"""
    return int(math.floor(rho * n + 0.5))


def _batches(iterator: Iterator[Tuple[int, ...]], size: int = BATCH) -> Iterator[np.ndarray]:
    while True:
        chunk = list(islice(iterator, size))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.intp)


def _principal_norms(arr: np.ndarray, subsets: np.ndarray) -> np.ndarray:
    """Operator norms of the principal submatrices for a (B, s) batch of index sets"""
    sub = arr[subsets[:, :, None], subsets[:, None, :]]
    values = np.linalg.eigvalsh(sub)
    return np.maximum(np.abs(values[:, 0]), np.abs(values[:, -1]))


@dataclass
class RestrictedNormReport:
    n: int
    rho: float
    mode: str
    subset: List[int]
    norm: float
    constant: float
    evaluations: int

    @property
    def scale(self) -> float:
        return math.sqrt(self.rho * math.log(1.0 / self.rho) * self.n)

    @property
    def scaled_norm(self) -> float:
        return math.sqrt(self.n) * self.norm

    @property
    def bound_rhs(self) -> float:
        return self.constant * self.scale

    @property
    def fitted_constant(self) -> float:
        return self.scaled_norm / self.scale

    def to_record(self) -> RestrictedNormRecord:
        return RestrictedNormRecord(
            rho=self.rho, mode=self.mode, subset=list(self.subset), norm=self.norm,
            scaled_norm=self.scaled_norm, bound_rhs=self.bound_rhs, constant=self.constant,
            fitted_constant=self.fitted_constant, evaluations=self.evaluations,
        )


def _exact_restricted_norm(arr: np.ndarray, k: int) -> Tuple[float, List[int], int]:
    n = arr.shape[0]
    require_gate("restricted_norm[exact]", sum(math.comb(n, s) for s in range(1, k + 1)), get_settings().subset_budget)
    best, best_subset, evaluations = -1.0, [], 0
    for s in range(1, k + 1):
        for batch in _batches(combinations(range(n), s)):
            norms = _principal_norms(arr, batch)
            evaluations += len(batch)
            j = int(np.argmax(norms))
            if norms[j] > best:
                best, best_subset = float(norms[j]), [int(i) for i in batch[j]]
    return best, best_subset, evaluations


class _NormSearch:
    """Grow-and-swap local search for a large principal submatrix norm"""

    def __init__(self, arr: np.ndarray, k: int, budget: int):
        self.arr = arr
        self.n = arr.shape[0]
        self.k = k
        self.budget = budget
        self.evaluations = 0

    def _evaluate(self, subsets: np.ndarray) -> np.ndarray:
        room = self.budget - self.evaluations
        subsets = subsets[:max(room, 0)]
        self.evaluations += len(subsets)
        return _principal_norms(self.arr, subsets) if len(subsets) else np.empty(0)

    def _top_pair(self, subset: List[int]) -> Tuple[float, np.ndarray]:
        values, vectors = np.linalg.eigh(self.arr[np.ix_(subset, subset)])
        j = 0 if abs(values[0]) > abs(values[-1]) else -1
        return float(values[j]), vectors[:, j]

    def _proxy(self, subset: List[int], outside: np.ndarray) -> np.ndarray:
        """Norm of the 2 x 2 compression onto span(top eigenvector, e_j), a lower bound for adding j"""
        lam, v = self._top_pair(subset)
        c = self.arr[np.ix_(outside, subset)] @ v
        a = self.arr[outside, outside]
        return np.abs(0.5 * (lam + a)) + np.sqrt((0.5 * (lam - a)) ** 2 + c * c)

    def grow(self, subset: List[int]) -> Tuple[List[int], float]:
        norm = float(_principal_norms(self.arr, np.array([subset]))[0])
        while len(subset) < self.k and self.evaluations < self.budget:
            outside = np.setdiff1d(np.arange(self.n), subset)
            if len(outside) > GROW_EXACT:
                outside = outside[np.argsort(-self._proxy(subset, outside), kind="stable")[:PROXY_CANDIDATES]]
            candidates = np.array([subset + [int(j)] for j in outside], dtype=np.intp)
            norms = self._evaluate(candidates)
            if not len(norms):
                break
            j = int(np.argmax(norms))
            subset, norm = list(candidates[j]), float(norms[j])
        return subset, norm

    def swap(self, subset: List[int], norm: float) -> Tuple[List[int], float]:
        for _ in range(2 * self.k + 10):
            if self.evaluations >= self.budget:
                break
            outside = np.setdiff1d(np.arange(self.n), subset)
            if not len(outside):
                break
            if len(subset) * len(outside) <= EXHAUSTIVE_MOVES:
                removals, insertions = list(range(len(subset))), outside
            else:
                _, v = self._top_pair(subset)
                removals = list(np.argsort(np.abs(v), kind="stable")[:SWAP_REMOVALS])
                insertions = outside[np.argsort(-self._proxy(subset, outside), kind="stable")[:PROXY_CANDIDATES]]
            candidates = []
            for r in removals:
                kept = subset[:r] + subset[r + 1:]
                candidates.extend(kept + [int(j)] for j in insertions)
            candidates = np.array(candidates, dtype=np.intp)
            norms = self._evaluate(candidates)
            if not len(norms):
                break
            j = int(np.argmax(norms))
            if not norms[j] > norm * (1.0 + 1e-12):
                break
            subset, norm = list(candidates[j]), float(norms[j])
        return subset, norm


def _heuristic_restricted_norm(arr: np.ndarray, k: int, budget: int, seed: int, restarts: Optional[int]) -> Tuple[float, List[int], int]:
    n = arr.shape[0]
    search = _NormSearch(arr, k, budget)
    off = np.abs(arr - np.diag(np.diagonal(arr)))
    i, j = np.unravel_index(int(np.argmax(off)), off.shape)
    rng = make_rng(seed, STREAM_BOUNDS)
    best, best_subset = -1.0, []
    restart = 0
    while search.evaluations < budget and (restarts is None or restart < restarts):
        pair = [int(min(i, j)), int(max(i, j))] if restart == 0 else sorted(int(x) for x in rng.choice(n, 2, replace=False))
        subset, norm = search.grow(pair)
        subset, norm = search.swap(subset, norm)
        if norm > best:
            best, best_subset = norm, sorted(subset)
        restart += 1
    return best, best_subset, search.evaluations


def restricted_norm(
    A: Coupling,
    rho: float,
    mode: str = "heuristic",
    budget: int = DEFAULT_NORM_BUDGET,
    seed: int = 0,
    constant: float = DEFAULT_NORM_CONSTANT,
    restarts: Optional[int] = None,
) -> RestrictedNormReport:
    """
    sup over |I| <= floor(rho N) of ||A_{I x I}||_op

    Args:
        A: Symmetric coupling
        rho: Subset fraction in (0, 1/2)
        mode: "exact" (all subsets of every size 1..floor(rho N)) or "heuristic"
        budget: Submatrix norm evaluations allowed in heuristic mode
        seed: Seed of the heuristic restarts
        constant: C in the comparison value C sqrt(rho log(1/rho) N)
        restarts: Heuristic restarts (budget-limited when None)

    Returns:
        RestrictedNormReport: Best subset and its norm
    """
    _check_rho(rho)
    arr = coupling_array(A)
    n = arr.shape[0]
    k = subset_size(rho, n)
    if k < 1:
        raise ConfigError(f"floor(rho N) = 0 for rho={rho}, N={n}")
    if k == 1:
        diag = np.abs(np.diagonal(arr))
        i = int(np.argmax(diag))
        norm, subset, evaluations = float(diag[i]), [i], n
    elif mode == "exact":
        norm, subset, evaluations = _exact_restricted_norm(arr, k)
    elif mode == "heuristic":
        norm, subset, evaluations = _heuristic_restricted_norm(arr, k, budget, seed, restarts)
    else:
        raise ConfigError(f"unknown restricted_norm mode {mode!r}")
    report = RestrictedNormReport(n=n, rho=rho, mode=mode, subset=subset, norm=norm, constant=constant, evaluations=evaluations)
    logger.info(
        f"restricted_norm N={n} rho={rho} mode={mode}: |I|={len(subset)} norm={norm:.6g} "
        f"fitted C={report.fitted_constant:.4g} evaluations={evaluations}"
    )
    return report


@dataclass
class QuadraticFormReport:
    n: int
    rho: float
    mode: str
    support: List[int]
    signs: List[int]
    value: float
    evaluations: int

    def to_record(self) -> QuadraticFormRecord:
        return QuadraticFormRecord(
            rho=self.rho, mode=self.mode, support=list(self.support), signs=list(self.signs),
            value=self.value, scaled_value=math.sqrt(self.n) * self.value, evaluations=self.evaluations,
        )


def _sign_patterns(s: int) -> np.ndarray:
    """All sign vectors of length s with first entry +1"""
    codes = np.arange(1 << max(s - 1, 0), dtype=np.int64)
    signs = np.ones((codes.size, s))
    for b in range(1, s):
        signs[:, b] = np.where((codes >> (b - 1)) & 1, -1.0, 1.0)
    return signs


def _exact_quadratic_form(arr: np.ndarray, k: int) -> Tuple[float, List[int], List[int], int]:
    n = arr.shape[0]
    total = sum(math.comb(n, s) << (s - 1) for s in range(1, k + 1))
    require_gate("restricted_quadratic_form[exact]", total, get_settings().subset_budget)
    best, support, signs, evaluations = -1.0, [], [], 0
    for s in range(1, k + 1):
        patterns = _sign_patterns(s)
        for batch in _batches(combinations(range(n), s), max(1, BATCH // len(patterns))):
            sub = arr[batch[:, :, None], batch[:, None, :]]
            values = np.abs(np.einsum("ps,bst,pt->bp", patterns, sub, patterns))
            evaluations += values.size
            b, p = np.unravel_index(int(np.argmax(values)), values.shape)
            if values[b, p] > best:
                best = float(values[b, p])
                support = [int(i) for i in batch[b]]
                signs = [int(x) for x in patterns[p]]
    return best, support, signs, evaluations


def _ternary_ascent(arr: np.ndarray, x: np.ndarray, k: int, direction: float) -> Tuple[np.ndarray, int]:
    """Best-improvement moves (sign flip, removal, addition, swap) on direction * <x, A x>"""
    diag = np.diagonal(arr)
    evaluations = 0
    while True:
        ax = arr @ x
        q = float(x @ ax)
        inside = np.flatnonzero(x)
        outside = np.flatnonzero(x == 0)
        moves = []
        flip = q - 4.0 * x[inside] * ax[inside] + 4.0 * diag[inside]
        moves.extend(("flip", int(i), 0, 0.0, v) for i, v in zip(inside, flip))
        if len(inside) > 1:
            drop = q - 2.0 * x[inside] * ax[inside] + diag[inside]
            moves.extend(("drop", int(i), 0, 0.0, v) for i, v in zip(inside, drop))
        for s in (1.0, -1.0):
            if len(inside) < k:
                add = q + 2.0 * s * ax[outside] + diag[outside]
                moves.extend(("add", 0, int(j), s, v) for j, v in zip(outside, add))
            if len(inside) and len(outside):
                removed = q - 2.0 * x[inside] * ax[inside] + diag[inside]
                cross = ax[outside][None, :] - arr[np.ix_(inside, outside)] * x[inside][:, None]
                swap = removed[:, None] + 2.0 * s * cross + diag[outside][None, :]
                r, c = np.unravel_index(int(np.argmax(direction * swap)), swap.shape)
                moves.append(("swap", int(inside[r]), int(outside[c]), s, float(swap[r, c])))
                evaluations += swap.size
        evaluations += len(inside) * 2 + len(outside) * 2
        kind, i, j, s, value = max(moves, key=lambda m: direction * m[4])
        if not direction * value > direction * q + 1e-12:
            return x, evaluations
        if kind == "flip":
            x[i] = -x[i]
        elif kind == "drop":
            x[i] = 0.0
        elif kind == "add":
            x[j] = s
        else:
            x[i], x[j] = 0.0, s


def restricted_quadratic_form(
    A: Coupling,
    rho: float,
    mode: str = "heuristic",
    restarts: int = 20,
    seed: int = 0,
) -> QuadraticFormReport:
    """
    sup over x in {-1, 0, 1}^N with ||x||_1 <= floor(rho N) of |<x, A x>|

    Args:
        A: Symmetric coupling
        rho: Support fraction in (0, 1/2)
        mode: "exact" (supports and signs enumerated) or "heuristic" (sign-greedy local search)
        restarts: Random restarts per sign of the objective in heuristic mode
        seed: Seed of the restarts

    Returns:
        QuadraticFormReport: Best ternary vector and |<x, A x>|
    """
    _check_rho(rho)
    arr = coupling_array(A)
    n = arr.shape[0]
    k = subset_size(rho, n)
    if k < 1:
        raise ConfigError(f"floor(rho N) = 0 for rho={rho}, N={n}")
    if mode == "exact":
        value, support, signs, evaluations = _exact_quadratic_form(arr, k)
    elif mode == "heuristic":
        rng = make_rng(seed, STREAM_BOUNDS, 1)
        value, support, signs, evaluations = -1.0, [], [], 0
        for direction in (1.0, -1.0):
            for _ in range(restarts):
                x = np.zeros(n)
                x[rng.choice(n, k, replace=False)] = rng.choice([-1.0, 1.0], size=k)
                x, spent = _ternary_ascent(arr, x, k, direction)
                evaluations += spent
                q = abs(float(x @ arr @ x))
                if q > value:
                    idx = np.flatnonzero(x)
                    value, support, signs = q, [int(i) for i in idx], [int(x[i]) for i in idx]
    else:
        raise ConfigError(f"unknown restricted_quadratic_form mode {mode!r}")
    logger.info(f"restricted_quadratic_form N={n} rho={rho} mode={mode}: value={value:.6g} |support|={len(support)}")
    return QuadraticFormReport(n=n, rho=rho, mode=mode, support=support, signs=signs, value=value, evaluations=evaluations)


@dataclass
class _Expansion:
    """Quantities of sigma* used to expand H(sigma*) - H(sigma*) with the set F flipped"""
    spins: np.ndarray
    g: np.ndarray
    B: np.ndarray
    energy: float

    @classmethod
    def at(cls, arr: np.ndarray, reference: SpinConfiguration) -> "_Expansion":
        spins = reference.spins()
        field = arr @ spins
        return cls(spins=spins, g=spins * field, B=arr * np.outer(spins, spins), energy=0.5 * float(spins @ field))

    def first_order(self, flips: np.ndarray) -> np.ndarray:
        """<A sigma*, sigma* - sigma> = 2 sum_F sigma*_i (A sigma*)_i"""
        return 2.0 * self.g[flips].sum(axis=1)

    def second_order(self, flips: np.ndarray) -> np.ndarray:
        """<d, A d> / 2 with d = sigma* - sigma = 2 sigma*_F"""
        return 2.0 * self.B[flips[:, :, None], flips[:, None, :]].sum(axis=(1, 2))


@dataclass
class SphereGapReport:
    n: int
    rho: float
    distance: int
    reference: SpinConfiguration
    mode: str
    gamma: float
    visited: int
    min_drop: float
    first_order: float
    second_order: float
    argmin_flips: List[int]
    field_norm: float
    below_count: int
    quadratic_bound: float
    identity_residual: float

    @property
    def lemma_rhs(self) -> float:
        return self.rho * self.gamma * self.n / 2.0

    @property
    def field_norm_bound(self) -> float:
        return NORM_HYPOTHESIS * math.sqrt(self.n)

    @property
    def field_norm_ok(self) -> bool:
        return self.field_norm <= self.field_norm_bound

    @property
    def first_order_floor(self) -> float:
        """2 gamma (d* - below_count), the floor on 2 sum_F sigma*_i L_i when below-gamma sites are non-negative"""
        return 2.0 * self.gamma * max(self.distance - self.below_count, 0)

    def to_record(self) -> SphereGapRecord:
        return SphereGapRecord(
            rho=self.rho, distance=self.distance, reference_hex=self.reference.to_hex(), mode=self.mode,
            visited=self.visited, min_drop=self.min_drop, first_order=self.first_order,
            second_order=self.second_order, lemma_rhs=self.lemma_rhs, field_norm=self.field_norm,
            field_norm_bound=self.field_norm_bound, field_norm_ok=self.field_norm_ok,
            first_order_floor=self.first_order_floor, quadratic_bound=self.quadratic_bound,
            argmin_flips=list(self.argmin_flips), identity_residual=self.identity_residual,
        )


def _uniform_flip_sets(rng: np.random.Generator, n: int, size: int, count: int) -> np.ndarray:
    return np.sort(np.argsort(rng.random((count, n)), axis=1)[:, :size], axis=1)


def sphere_energy_gap(
    A: Coupling,
    reference: SpinConfiguration,
    rho: float,
    gamma: float,
    mode: str = "exhaustive",
    m: int = 10_000,
    seed: int = 0,
) -> SphereGapReport:
    """
    Smallest energy drop H(sigma*) - H(sigma) over the Hamming sphere of radius round(rho N)

    The drop at every visited point is split exactly into the first-order term
    <A sigma*, sigma* - sigma> and the quadratic term <d, A d> / 2.

    Args:
        A: Symmetric coupling
        reference: Centre sigma*
        rho: Radius fraction
        gamma: Gap level for the comparison value rho gamma N / 2
        mode: "exhaustive" (every flip set, gated) or "sampled" (m uniform flip sets)
        m: Sample count in sampled mode
        seed: Seed of the sampled flip sets

    Returns:
        SphereGapReport: min drop, its decomposition and the hypothesis margins
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    d = sphere_distance(rho, n)
    if d < 1:
        raise ConfigError(f"sphere radius round(rho N) = 0 for rho={rho}, N={n}")
    if d > n:
        raise ConfigError(f"sphere radius {d} exceeds N={n}")
    if reference.n != n:
        raise ConfigError(f"reference has N={reference.n}, coupling has N={n}")
    expansion = _Expansion.at(arr, reference)

    if mode == "exhaustive":
        require_gate("sphere_energy_gap[exhaustive]", math.comb(n, d) << d, get_settings().subset_budget)
        batches = _batches(combinations(range(n), d))
    elif mode == "sampled":
        if m < 1:
            raise ConfigError(f"sampled mode needs m >= 1, got {m}")
        rng = make_rng(seed, STREAM_BOUNDS, 2)
        batches = (_uniform_flip_sets(rng, n, d, min(BATCH, m - start)) for start in range(0, m, BATCH))
    else:
        raise ConfigError(f"unknown sphere_energy_gap mode {mode!r}")

    best = None
    visited = 0
    for flips in batches:
        first = expansion.first_order(flips)
        second = expansion.second_order(flips)
        drops = first - second
        visited += len(flips)
        j = int(np.argmin(drops))
        if best is None or drops[j] < best[0]:
            best = (float(drops[j]), float(first[j]), float(second[j]), [int(i) for i in flips[j]])

    min_drop, first, second, argmin = best
    flipped = reference.spins()
    flipped[argmin] *= -1.0
    direct = energy(arr, reference) - energy(arr, flipped)
    sub_norm = float(np.max(np.abs(np.linalg.eigvalsh(arr[np.ix_(argmin, argmin)]))))
    gaps = expansion.g - np.diagonal(arr)
    report = SphereGapReport(
        n=n, rho=rho, distance=d, reference=reference, mode=mode, gamma=gamma, visited=visited,
        min_drop=min_drop, first_order=first, second_order=second, argmin_flips=argmin,
        field_norm=float(np.linalg.norm(arr @ reference.spins())),
        below_count=int(np.count_nonzero(gaps < gamma)),
        quadratic_bound=0.5 * sub_norm * 4.0 * d,
        identity_residual=abs(direct - (first - second)),
    )
    if not report.field_norm_ok:
        logger.warning(f"sphere_energy_gap: ||A sigma*|| = {report.field_norm:.4g} exceeds 3 sqrt(N) = {report.field_norm_bound:.4g}")
    logger.info(
        f"sphere_energy_gap N={n} d={d} mode={mode}: visited={visited} min_drop={min_drop:.6g} "
        f"lemma_rhs={report.lemma_rhs:.6g}"
    )
    return report


@dataclass
class BottleneckReport:
    n: int
    beta: float
    rho: float
    radius: int
    reference: SpinConfiguration
    mode: str
    gamma: float
    log_ratio: float
    log_ratio_stderr: float = 0.0
    ball_mass: Optional[float] = None
    max_sphere_energy: Optional[float] = None
    reference_energy: float = 0.0

    @property
    def log_bound(self) -> float:
        """N log 2 - beta rho gamma N / 2"""
        return self.n * math.log(2.0) - self.beta * self.rho * self.gamma * self.n / 2.0

    def to_record(self) -> BottleneckRecord:
        return BottleneckRecord(
            beta=self.beta, rho=self.rho, radius=self.radius, reference_hex=self.reference.to_hex(),
            mode=self.mode, log_ratio=self.log_ratio, log_ratio_stderr=self.log_ratio_stderr,
            log_bound=self.log_bound, ball_mass=self.ball_mass, max_sphere_energy=self.max_sphere_energy,
        )


def _log_mean_exp(values: np.ndarray) -> Tuple[float, float]:
    """log of the sample mean of exp(values) and its delta-method standard error"""
    m = values.size
    log_mean = float(logsumexp(values) - math.log(m))
    if m < 2:
        return log_mean, math.inf
    w = np.exp(values - values.max())
    return log_mean, float(w.std(ddof=1) / (math.sqrt(m) * w.mean()))


def bottleneck_ratio(
    A: Coupling,
    reference: SpinConfiguration,
    beta: float,
    rho: float,
    mode: str = "exact",
    m: int = 10_000,
    seed: int = 0,
    gamma: Optional[float] = None,
) -> BottleneckReport:
    """
    log(mu_beta(S_rho) / mu_beta(sigma*)) and the Gibbs mass of the ball B_rho

    Sphere and ball use the radius r = round(rho N).

    Args:
        A: Symmetric coupling
        reference: Centre sigma*
        beta: Inverse temperature
        rho: Radius fraction in (0, 1/2)
        mode: "exact" (energy table, N <= 20) or "sampled" (m uniform draws per distance shell)
        m: Draws per shell in sampled mode
        seed: Seed of the sampled mode
        gamma: Gap level of the comparison value (realized min gap of sigma* when None)

    Returns:
        BottleneckReport: Log ratio, comparison value and ball mass
    """
    _check_rho(rho)
    arr = coupling_array(A)
    n = arr.shape[0]
    r = sphere_distance(rho, n)
    if r < 1:
        raise ConfigError(f"sphere radius round(rho N) = 0 for rho={rho}, N={n}")
    if gamma is None:
        gamma = max(verify_gapped(arr, reference, 1.0, 0.0).min_gap, 0.0)
    e_ref = energy(arr, reference)

    if mode == "exact":
        require_gate("bottleneck_ratio[exact]", n, get_settings().transition_max_n)
        table = energy_table(arr)
        distances = hamming_distances(reference)
        sphere = table[distances == r]
        log_z = float(logsumexp(beta * table))
        report = BottleneckReport(
            n=n, beta=beta, rho=rho, radius=r, reference=reference, mode=mode, gamma=gamma,
            log_ratio=float(logsumexp(beta * sphere)) - beta * e_ref,
            ball_mass=float(np.exp(logsumexp(beta * table[distances <= r]) - log_z)),
            max_sphere_energy=float(sphere.max()), reference_energy=e_ref,
        )
    elif mode == "sampled":
        if m < 2:
            raise ConfigError(f"sampled mode needs m >= 2, got {m}")
        rng = make_rng(seed, STREAM_BOUNDS, 3)
        expansion = _Expansion.at(arr, reference)
        shell_logs = []
        log_ratio = stderr = 0.0
        max_sphere = -math.inf
        for k in range(r + 1):
            if k == 0:
                shell_logs.append(beta * e_ref)
                continue
            flips = _uniform_flip_sets(rng, n, k, m)
            energies = e_ref - (expansion.first_order(flips) - expansion.second_order(flips))
            log_mean, se = _log_mean_exp(beta * energies)
            shell_log = math.log(math.comb(n, k)) + log_mean
            shell_logs.append(shell_log)
            if k == r:
                log_ratio, stderr = shell_log - beta * e_ref, se
                max_sphere = float(energies.max())
        ball_mass = None
        if n <= get_settings().enumeration_max_n:
            ball_mass = float(np.exp(logsumexp(shell_logs) - log_partition(arr, beta)))
        report = BottleneckReport(
            n=n, beta=beta, rho=rho, radius=r, reference=reference, mode=mode, gamma=gamma,
            log_ratio=log_ratio, log_ratio_stderr=stderr, ball_mass=ball_mass,
            max_sphere_energy=max_sphere, reference_energy=e_ref,
        )
    else:
        raise ConfigError(f"unknown bottleneck_ratio mode {mode!r}")

    if report.ball_mass is not None and report.ball_mass > 0.5:
        logger.warning(f"bottleneck_ratio N={n} beta={beta}: ball mass {report.ball_mass:.4g} exceeds 1/2")
    logger.info(f"bottleneck_ratio N={n} beta={beta} r={r} mode={mode}: log_ratio={report.log_ratio:.6g} log_bound={report.log_bound:.6g}")
    return report


@dataclass
class PipelineResult:
    record: PipelineRecord
    sphere: Optional[SphereGapReport] = None
    bottleneck: Optional[BottleneckReport] = None
    restricted: Optional[RestrictedNormReport] = None
    notes: List[str] = field(default_factory=list)

    def summary(self) -> str:
        return pipeline_summary(self.record)


def _step(name: str, passed: bool, value: float, threshold: float, margin: float, note: str = "") -> PipelineStep:
    return PipelineStep(name=name, passed=bool(passed), value=float(value), threshold=float(threshold), margin=float(margin), note=note)


def theorem_pipeline(
    A: Coupling,
    beta: float,
    gamma: float,
    delta: float,
    rho: float,
    reference: Optional[SpinConfiguration] = None,
    budget: int = 200_000,
    seed: int = 0,
    norm_constant: float = DEFAULT_NORM_CONSTANT,
    with_spectrum: bool = True,
) -> PipelineResult:
    """
    Chain every ingredient of the bottleneck argument on one instance and report margins

    Steps: operator norm <= 3, restricted norm, (gamma, delta) verdict of the
    reference (searched when None), sphere energy gap, bottleneck ratio, ball
    mass, ball conductance and, when the spectral gates allow, the Cheeger
    comparison with the exact relaxation time.

    Args:
        A: Symmetric coupling with N <= 20
        beta: Inverse temperature
        gamma: Gap level
        delta: Allowed fraction of sites below gamma
        rho: Ball radius fraction
        reference: Centre sigma* (search_gapped result when None)
        budget: Search budget when reference is None
        seed: Seed of the search and of the heuristic norm
        norm_constant: C of the restricted norm comparison
        with_spectrum: Compute the exact relaxation time

    Returns:
        PipelineResult: The pipeline record with the intermediate reports
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    settings = get_settings()
    require_gate("theorem_pipeline", n, settings.transition_max_n)
    _check_rho(rho)
    steps: List[PipelineStep] = []

    op = operator_norm(arr)
    steps.append(_step("operator_norm", op <= NORM_HYPOTHESIS, op, NORM_HYPOTHESIS, NORM_HYPOTHESIS - op))

    k = subset_size(rho, n)
    restricted = None
    if k >= 1:
        exact_cost = sum(math.comb(n, s) for s in range(1, k + 1))
        mode = "exact" if exact_cost <= settings.subset_budget else "heuristic"
        restricted = restricted_norm(arr, rho, mode=mode, seed=seed, constant=norm_constant)
        steps.append(_step(
            "restricted_norm", restricted.scaled_norm <= restricted.bound_rhs, restricted.scaled_norm,
            restricted.bound_rhs, restricted.bound_rhs - restricted.scaled_norm, f"mode={mode}, |I|={len(restricted.subset)}",
        ))

    if reference is None:
        reference = search_gapped(arr, gamma, delta, budget, seed=seed).config
    gapped = verify_gapped(arr, reference, gamma, delta)
    steps.append(_step(
        "gapped_state", gapped.verdict, gapped.below_count, delta * n, delta * n - gapped.below_count,
        f"min_gap={gapped.min_gap:.6g}",
    ))
    steps.append(_step("beta_positive", beta > 0, beta, 0.0, beta))
    hypotheses_met = (
        beta > 0
        and op <= NORM_HYPOTHESIS
        and (restricted is None or restricted.scaled_norm <= restricted.bound_rhs)
        and gapped.verdict
    )

    exhaustive = (math.comb(n, sphere_distance(rho, n)) << sphere_distance(rho, n)) <= settings.subset_budget
    sphere = sphere_energy_gap(arr, reference, rho, gamma, mode="exhaustive" if exhaustive else "sampled", seed=seed)
    steps.append(_step(
        "sphere_energy_gap", sphere.min_drop >= sphere.lemma_rhs, sphere.min_drop, sphere.lemma_rhs,
        sphere.min_drop - sphere.lemma_rhs, f"field_norm_ok={sphere.field_norm_ok}",
    ))

    bottleneck = bottleneck_ratio(arr, reference, beta, rho, mode="exact", gamma=gamma)
    steps.append(_step(
        "bottleneck_ratio", bottleneck.log_ratio <= bottleneck.log_bound, bottleneck.log_ratio,
        bottleneck.log_bound, bottleneck.log_bound - bottleneck.log_ratio,
    ))
    steps.append(_step("ball_mass", bottleneck.ball_mass <= 0.5, bottleneck.ball_mass, 0.5, 0.5 - bottleneck.ball_mass))

    P = build_transition(arr, beta)
    ball = hamming_distances(reference) <= bottleneck.radius
    cut = cut_conductance(P, ball)
    phi = cut.phi
    log_lower = -math.log(2.0 * phi) if phi > 0 else math.inf
    note = "complement of the ball used" if cut.complemented else ""
    steps.append(_step("conductance", phi < 0.5, phi, 0.5, 0.5 - phi, note))

    t_rel = None
    cheeger_consistent = None
    if with_spectrum:
        method = "dense" if n <= settings.dense_max_n else "iterative"
        t_rel = spectral_gap(P, method).t_rel
        cheeger_consistent = log_lower <= math.log(t_rel) + 1e-9
        steps.append(_step(
            "cheeger", cheeger_consistent, math.log(t_rel), log_lower, math.log(t_rel) - log_lower, f"method={method}",
        ))

    certified = hypotheses_met and sphere.min_drop > 0 and bottleneck.log_ratio < 0
    verdict = "certified" if certified else ("hypotheses unmet" if not hypotheses_met else "not certified")
    record = PipelineRecord(
        n=n, beta=beta, gamma=gamma, delta=delta, rho=rho, reference_hex=reference.to_hex(), steps=steps,
        hypotheses_met=hypotheses_met, certified=certified, conductance=phi, log_lower_bound=log_lower,
        t_rel=t_rel, cheeger_consistent=cheeger_consistent, verdict=verdict,
    )
    logger.info(f"theorem_pipeline N={n} beta={beta}: verdict={verdict} log_lower_bound={log_lower:.6g} t_rel={t_rel}")
    return PipelineResult(record=record, sphere=sphere, bottleneck=bottleneck, restricted=restricted)


def pipeline_summary(record: PipelineRecord) -> str:
    """Human-readable text of a pipeline record with every step margin"""
    lines = [
        f"theorem pipeline  N={record.n}  beta={record.beta}  gamma={record.gamma}  delta={record.delta}  rho={record.rho}",
        f"reference  {record.reference_hex}",
    ]
    for step in record.steps:
        mark = "ok  " if step.passed else "FAIL"
        extra = f"  ({step.note})" if step.note else ""
        lines.append(f"  [{mark}] {step.name:<18} value={step.value:.6g}  threshold={step.threshold:.6g}  margin={step.margin:+.6g}{extra}")
    lines.append(f"hypotheses met: {record.hypotheses_met}")
    lines.append(f"log t_rel lower bound -log(2 Phi(B)): {record.log_lower_bound:.6g}")
    if record.t_rel is not None:
        lines.append(f"exact t_rel: {record.t_rel:.6g}  cheeger consistent: {record.cheeger_consistent}")
    lines.append(f"verdict: {record.verdict}")
    return "\n".join(lines) + "\n"

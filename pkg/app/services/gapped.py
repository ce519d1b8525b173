"""
Gapped-state service: local maxima, (gamma, delta)-gapped verdicts and the gapped-state search
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Set, Tuple

import numpy as np

from app.config import get_settings
from app.models.lab_models import GappedStateRecord
from app.services.disorder import coupling_array
from app.services.model import Coupling, EnergyState, SpinConfiguration, energy_table, local_fields
from app.utils.errors import ConfigError, require_gate
from app.utils.seeding import STREAM_SEARCH, make_rng

logger = logging.getLogger(__name__)

DELTA_SLACK = 1e-9


class AscentRule(str, Enum):
    STEEPEST = "steepest"
    FIRST_IMPROVEMENT = "first-improvement"


@dataclass(frozen=True)
class GapProfile:
    """Sorted values sigma_i L_i(sigma)"""
    values: np.ndarray

    @classmethod
    def from_gaps(cls, gaps: np.ndarray) -> "GapProfile":
        values = np.sort(np.asarray(gaps, dtype=np.float64))
        values.setflags(write=False)
        return cls(values=values)

    @property
    def min_gap(self) -> float:
        return float(self.values[0])

    def below_count(self, gamma: float) -> int:
        """|{i : sigma_i L_i < gamma}|"""
        return int(np.searchsorted(self.values, gamma, side="left"))


@dataclass
class GappedStateReport:
    """A candidate configuration with its gap profile and gapped verdict"""
    config: SpinConfiguration
    profile: GapProfile
    gamma: float
    delta: float
    verdict: bool
    is_local_max: bool
    search_budget_used: int = 0
    seed: Optional[int] = None
    energy: Optional[float] = None

    @property
    def below_count(self) -> int:
        return self.profile.below_count(self.gamma)

    @property
    def min_gap(self) -> float:
        return self.profile.min_gap

    def rank(self) -> Tuple[bool, int, float]:
        """Ordering used to pick the best report: verdict, then fewer sites below gamma, then min gap"""
        return (self.verdict, -self.below_count, self.min_gap)

    def to_record(self) -> GappedStateRecord:
        return GappedStateRecord(
            config_hex=self.config.to_hex(),
            n=self.config.n,
            min_gap=self.min_gap,
            gamma=self.gamma,
            delta=self.delta,
            below_count=self.below_count,
            verdict=self.verdict,
            is_local_max=self.is_local_max,
            budget_used=self.search_budget_used,
            seed=self.seed,
            energy=self.energy,
        )


@dataclass
class LocalMaximaEnumeration:
    """All local maxima of an instance, one per +/- pair (site 0 spin +1)"""
    maxima: List[Tuple[SpinConfiguration, GapProfile]] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)
    degenerate: bool = False

    def maximin(self) -> float:
        """Largest minimum gap over the local maxima"""
        if not self.maxima:
            return 0.0
        return max(profile.min_gap for _, profile in self.maxima)

    def maximin_config(self) -> SpinConfiguration:
        best = max(range(len(self.maxima)), key=lambda k: (self.maxima[k][1].min_gap, -k))
        return self.maxima[best][0]

    def deepest(self) -> SpinConfiguration:
        """Local maximum of highest energy (the global maximum)"""
        best = max(range(len(self.maxima)), key=lambda k: (self.energies[k], -k))
        return self.maxima[best][0]


def _check_gamma_delta(gamma: float, delta: float) -> None:
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if not 0 <= delta < 1:
        raise ConfigError(f"delta must lie in [0, 1), got {delta}")


def _ascend(state: EnergyState, rule: AscentRule, rng: Optional[np.random.Generator] = None, frozen: Optional[Set[int]] = None) -> int:
    """Flip improving sites until none is left; returns the number of flip evaluations"""
    n = state.n
    evaluations = 0
    mask = np.zeros(n, dtype=bool)
    if frozen:
        mask[list(frozen)] = True
    if rule == AscentRule.STEEPEST:
        while True:
            deltas = -2.0 * state.gap_values()
            deltas[mask] = -np.inf
            evaluations += n
            i = int(np.argmax(deltas))
            if not deltas[i] > 0.0:
                return evaluations
            state.apply_flip(i)

    if rng is None:
        raise ConfigError("first-improvement ascent needs a random generator")
    while True:
        improved = False
        for i in rng.permutation(n):
            evaluations += 1
            if not mask[i] and state.flip_delta(int(i)) > 0.0:
                state.apply_flip(int(i))
                improved = True
        if not improved:
            return evaluations


def greedy_ascent(A: Coupling, sigma0: SpinConfiguration, rule: AscentRule = AscentRule.STEEPEST, seed: int = 0) -> SpinConfiguration:
    """
    Single-flip hill climbing to a local maximum of H

    Args:
        A: Symmetric coupling
        sigma0: Starting configuration
        rule: steepest (argmax, lowest index on ties) or first-improvement (seeded sweep order)
        seed: Seed of the sweep permutations

    Returns:
        SpinConfiguration: A configuration where every single flip has Delta H <= 0
    """
    state = EnergyState(A, sigma0)
    rng = make_rng(seed, STREAM_SEARCH) if AscentRule(rule) == AscentRule.FIRST_IMPROVEMENT else None
    _ascend(state, AscentRule(rule), rng)
    return state.config


def verify_gapped(A: Coupling, sigma: SpinConfiguration, gamma: float, delta: float) -> GappedStateReport:
    """
    Gap profile and verdict |{i : sigma_i L_i(sigma) < gamma}| <= delta N

    Args:
        A: Symmetric coupling
        sigma: Candidate configuration
        gamma: Gap threshold, > 0
        delta: Allowed fraction of sites below gamma, in [0, 1)

    Returns:
        GappedStateReport: The report (budget fields left at zero)
    """
    _check_gamma_delta(gamma, delta)
    arr = coupling_array(A)
    fields = local_fields(arr, sigma)
    profile = GapProfile.from_gaps(sigma.spins() * fields)
    verdict = profile.below_count(gamma) <= delta * sigma.n + DELTA_SLACK
    return GappedStateReport(
        config=sigma,
        profile=profile,
        gamma=gamma,
        delta=delta,
        verdict=bool(verdict),
        is_local_max=profile.min_gap >= 0.0,
    )


def _report_from_state(state: EnergyState, gamma: float, delta: float) -> GappedStateReport:
    profile = GapProfile.from_gaps(state.gap_values())
    return GappedStateReport(
        config=state.config,
        profile=profile,
        gamma=gamma,
        delta=delta,
        verdict=bool(profile.below_count(gamma) <= delta * state.n + DELTA_SLACK),
        is_local_max=profile.min_gap >= 0.0,
        energy=state.energy,
    )


def _lift_key(state: EnergyState, gamma: float) -> Tuple[int, float]:
    gaps = state.gap_values()
    return int(np.count_nonzero(gaps < gamma)), -float(gaps.min())


def _lift(state: EnergyState, gamma: float, delta: float, max_evaluations: int, max_iterations: int) -> Tuple[GappedStateReport, int]:
    """
    Tabu min-field lifting from a local maximum.

    Each move flips one site with sigma_i L_i < gamma, re-ascends with the tabu
    sites frozen, then ascends freely; the move with the lexicographically
    smallest (below_count, -min_gap) is taken even when it does not improve.
    """
    n = state.n
    tabu = deque(maxlen=2 * n)
    current = state
    best = _report_from_state(current, gamma, delta)
    evaluations = 0
    for _ in range(max_iterations):
        if best.verdict and delta > 0:
            break
        gaps = current.gap_values()
        candidates = [int(i) for i in np.flatnonzero(gaps < gamma) if int(i) not in tabu]
        chosen = None
        for i in candidates:
            if evaluations >= max_evaluations:
                break
            trial = current.copy().apply_flip(i)
            evaluations += _ascend(trial, AscentRule.STEEPEST, frozen=set(tabu) | {i})
            evaluations += _ascend(trial, AscentRule.STEEPEST)
            key = _lift_key(trial, gamma)
            if chosen is None or key < chosen[0]:
                chosen = (key, i, trial)
        if chosen is None:
            break
        _, site, current = chosen
        tabu.append(site)
        report = _report_from_state(current, gamma, delta)
        if report.rank() > best.rank():
            best = report
    return best, evaluations


def search_gapped(
    A: Coupling,
    gamma: float,
    delta: float,
    budget: int,
    seed: int = 0,
    initial: Optional[SpinConfiguration] = None,
    restarts: Optional[int] = None,
    lift_iterations: Optional[int] = None,
) -> GappedStateReport:
    """
    Multi-restart greedy ascent followed by tabu min-field lifting

    Args:
        A: Symmetric coupling
        gamma: Gap threshold
        delta: Allowed fraction of sites below gamma
        budget: Flip evaluations to spend, at least N
        seed: Seed of the restart and sweep streams
        initial: Start of the first restart (uniform random otherwise)
        restarts: Cap on the number of restarts (budget-limited when None)
        lift_iterations: Lifting moves per restart (2N when None)

    Returns:
        GappedStateReport: Best report found; budget exhaustion is not an error
    """
    _check_gamma_delta(gamma, delta)
    arr = coupling_array(A)
    n = arr.shape[0]
    if budget < n:
        raise ConfigError(f"budget must be at least N={n}, got {budget}")
    if restarts is not None and restarts < 1:
        raise ConfigError(f"restarts must be at least 1, got {restarts}")
    if initial is not None and initial.n != n:
        raise ConfigError(f"initial configuration has N={initial.n}, coupling has N={n}")
    rng = make_rng(seed, STREAM_SEARCH)
    lift_iterations = 2 * n if lift_iterations is None else lift_iterations

    best: Optional[GappedStateReport] = None
    used = 0
    restart = 0
    while used < budget and (restarts is None or restart < restarts):
        start = initial if (restart == 0 and initial is not None) else SpinConfiguration.random(n, rng)
        state = EnergyState(arr, start)
        used += _ascend(state, AscentRule.FIRST_IMPROVEMENT, rng)
        candidate = _report_from_state(state, gamma, delta)
        if used < budget and lift_iterations > 0:
            lifted, spent = _lift(state, gamma, delta, budget - used, lift_iterations)
            used += spent
            if lifted.rank() > candidate.rank():
                candidate = lifted
        if best is None or candidate.rank() > best.rank():
            best = candidate
        restart += 1

    best.search_budget_used = used
    best.seed = seed
    logger.info(
        f"search_gapped N={n} gamma={gamma} delta={delta}: min_gap={best.min_gap:.4f} "
        f"below={best.below_count} verdict={best.verdict} restarts={restart} budget_used={used}"
    )
    return best


def enumerate_local_maxima(A: Coupling) -> LocalMaximaEnumeration:
    """
    Every local maximum of H, one representative per +/- pair

    Zero-coupling instances, where every configuration is a degenerate local
    maximum, are flagged instead of listed.

    Args:
        A: Symmetric coupling with N <= 20

    Returns:
        LocalMaximaEnumeration: Local maxima with gap profiles and energies
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    require_gate("enumerate_local_maxima", n, get_settings().local_maxima_max_n)
    off_diagonal = arr - np.diag(np.diagonal(arr))
    if not np.any(off_diagonal):
        logger.warning(f"enumerate_local_maxima: zero coupling at N={n}, every configuration is a local maximum")
        return LocalMaximaEnumeration(degenerate=True)

    table = energy_table(arr, gate=n)
    states = np.arange(table.size, dtype=np.int64)
    is_max = (states & 1) == 1
    for i in range(n):
        is_max &= table[states ^ (1 << i)] <= table
    result = LocalMaximaEnumeration()
    for state in np.flatnonzero(is_max):
        config = SpinConfiguration.from_index(int(state), n)
        gaps = config.spins() * local_fields(arr, config)
        result.maxima.append((config, GapProfile.from_gaps(gaps)))
        result.energies.append(float(table[state]))
    logger.info(f"enumerate_local_maxima N={n}: {len(result.maxima)} local maxima, maximin={result.maximin():.4f}")
    return result

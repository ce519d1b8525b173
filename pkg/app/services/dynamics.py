"""
Glauber dynamics service: heat-bath chains, trajectories, escape times and empirical distributions
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from joblib import Parallel, delayed

from app.config import get_settings
from app.models.lab_models import EscapeStatsRecord
from app.services.disorder import coupling_array
from app.services.kernels import glauber_block, glauber_histogram, glauber_until_exit, heat_bath_probability
from app.services.model import Coupling, EnergyState, SpinConfiguration, gibbs_measure
from app.utils.errors import ConfigError, require_gate
from app.utils.seeding import STREAM_DYNAMICS, STREAM_ESCAPE, STREAM_START, derive_seed, make_rng

logger = logging.getLogger(__name__)

# Random draws are taken in blocks of this size, so a trajectory depends only
# on the seed and the total number of steps, never on how steps are batched.
DRAW_BLOCK = 1 << 16


class GlauberChain:
    """Discrete-time heat-bath Glauber dynamics with uniform site selection"""

    def __init__(self, coupling: Coupling, start: SpinConfiguration, beta: float, seed: int = 0):
        """
        Initialize the chain

        Args:
            coupling: Symmetric coupling, shared read-only
            start: Initial configuration
            beta: Inverse temperature, >= 0
            seed: Seed of the chain's draw stream
        """
        if not math.isfinite(beta) or beta < 0:
            raise ConfigError(f"beta must be finite and non-negative, got {beta}")
        self.coupling = coupling
        self.A = coupling_array(coupling)
        self.state = EnergyState(self.A, start)
        self.beta = float(beta)
        self.seed = seed
        self.rng = make_rng(seed, STREAM_DYNAMICS)
        self.steps_taken = 0
        self._sites = np.empty(0, dtype=np.int64)
        self._uniforms = np.empty(0, dtype=np.float64)
        self._cursor = 0

    @property
    def n(self) -> int:
        return self.state.n

    def _available(self) -> int:
        if self._cursor == self._sites.size:
            self._sites = self.rng.integers(0, self.n, size=DRAW_BLOCK, dtype=np.int64)
            self._uniforms = self.rng.random(DRAW_BLOCK)
            self._cursor = 0
        return self._sites.size - self._cursor

    def advance(self, steps: int) -> Dict[str, int]:
        """Advance `steps` steps; returns accepted and accepted energy-decreasing flip counts"""
        accepted = downhill = 0
        remaining = steps
        while remaining > 0:
            take = min(remaining, self._available())
            start = self._cursor
            energy, acc, down = glauber_block(
                self.A, self.state.spins, self.state.local_fields, self.state.energy,
                self.beta, self._sites, self._uniforms, start, start + take,
            )
            self.state.energy = float(energy)
            self._cursor += take
            self.steps_taken += take
            remaining -= take
            accepted += int(acc)
            downhill += int(down)
        return {"accepted": accepted, "downhill": downhill}

    def step(self) -> "GlauberChain":
        self.advance(1)
        return self


def flip_probability(delta: float, beta: float) -> float:
    """Heat-bath flip probability 1 / (1 + exp(-beta * Delta H))"""
    return float(heat_bath_probability(beta, delta))


def glauber_step(chain: GlauberChain) -> GlauberChain:
    """Pick a uniform site and flip it with the heat-bath probability"""
    return chain.step()


class Observer(Protocol):
    name: str

    def observe(self, step: int, state: EnergyState) -> None:
        ...


class EnergyTrace:
    name = "energy"

    def __init__(self):
        self.values: List[float] = []

    def observe(self, step: int, state: EnergyState) -> None:
        self.values.append(state.energy)


class OverlapTrace:
    """<sigma, sigma_ref> / N at each checkpoint"""
    name = "overlap"

    def __init__(self, reference: SpinConfiguration):
        self.reference = reference.spins()
        self.values: List[float] = []

    def observe(self, step: int, state: EnergyState) -> None:
        self.values.append(float(state.spins @ self.reference) / state.n)


@dataclass
class TrajectorySummary:
    steps: int
    thin: int
    checkpoints: List[int] = field(default_factory=list)
    traces: Dict[str, List[float]] = field(default_factory=dict)
    accepted: int = 0
    downhill_accepted: int = 0
    final_config: Optional[SpinConfiguration] = None
    final_energy: float = 0.0

    def rows(self) -> List[Dict[str, float]]:
        """One CSV row per checkpoint with step, energy and overlap columns"""
        energies = self.traces.get("energy", [])
        overlaps = self.traces.get("overlap", [])
        return [
            {"step": step, "energy": energies[k] if k < len(energies) else float("nan"),
             "overlap": overlaps[k] if k < len(overlaps) else float("nan")}
            for k, step in enumerate(self.checkpoints)
        ]


def run(chain: GlauberChain, steps: int, observers: Optional[Sequence[Observer]] = None, thin: int = 1) -> TrajectorySummary:
    """
    Advance the chain, calling the observers every `thin` steps

    Args:
        chain: Chain to advance
        steps: Number of steps
        observers: Observers (energy and overlap-with-start traces when None)
        thin: Thinning factor between checkpoints

    Returns:
        TrajectorySummary: Thinned traces, acceptance counts and the final state
    """
    if steps < 0 or thin < 1:
        raise ConfigError(f"run needs steps >= 0 and thin >= 1, got steps={steps} thin={thin}")
    if observers is None:
        observers = [EnergyTrace(), OverlapTrace(chain.state.config)]
    summary = TrajectorySummary(steps=steps, thin=thin)
    done = 0
    while done < steps:
        chunk = min(thin, steps - done)
        counts = chain.advance(chunk)
        summary.accepted += counts["accepted"]
        summary.downhill_accepted += counts["downhill"]
        done += chunk
        if chunk == thin:
            summary.checkpoints.append(chain.steps_taken)
            for observer in observers:
                observer.observe(chain.steps_taken, chain.state)
    summary.traces = {observer.name: list(getattr(observer, "values", [])) for observer in observers}
    summary.final_config = chain.state.config
    summary.final_energy = chain.state.energy
    return summary


@dataclass
class EscapeTimeStats:
    """Exit times from the Hamming ball B_rho(reference)"""
    samples: List[int]
    rho: float
    radius: int
    reference: SpinConfiguration
    censored_count: int
    cap: int
    beta: float

    @property
    def reps(self) -> int:
        return len(self.samples) + self.censored_count

    def median(self) -> Optional[float]:
        """Median over all runs, defined only when fewer than half are censored"""
        if self.reps == 0 or self.censored_count * 2 >= self.reps:
            return None
        return self.median_lower_bound()

    def median_lower_bound(self) -> Optional[float]:
        """Median with censored runs counted at the cap"""
        if self.reps == 0:
            return None
        return float(np.median(self.samples + [self.cap] * self.censored_count))

    def mean(self) -> Optional[float]:
        if not self.samples or self.censored_count:
            return None
        return float(np.mean(self.samples))

    def to_record(self) -> EscapeStatsRecord:
        return EscapeStatsRecord(
            reference_hex=self.reference.to_hex(),
            beta=self.beta,
            rho=self.rho,
            radius=self.radius,
            cap=self.cap,
            samples=list(self.samples),
            censored_count=self.censored_count,
            median=self.median(),
            mean=self.mean(),
        )


def ball_radius(rho: float, n: int) -> int:
    """Largest Hamming distance inside B_rho: floor(rho N)"""
    if not 0 < rho < 0.5:
        raise ConfigError(f"rho must lie in (0, 1/2), got {rho}")
    return int(math.floor(rho * n + 1e-12))


def _escape_once(A: np.ndarray, reference: SpinConfiguration, beta: float, radius: int, cap: int, seed: int) -> Optional[int]:
    chain = GlauberChain(A, reference, beta, seed)
    ref = reference.spins()
    distance = 0
    while chain.steps_taken < cap:
        take = min(cap - chain.steps_taken, chain._available())
        start = chain._cursor
        used, distance, energy, exited = glauber_until_exit(
            chain.A, chain.state.spins, chain.state.local_fields, chain.state.energy,
            chain.beta, chain._sites, chain._uniforms, start, start + take, ref, distance, radius,
        )
        chain.state.energy = float(energy)
        chain._cursor += int(used)
        chain.steps_taken += int(used)
        if exited:
            return chain.steps_taken
    return None


def escape_time(
    A: Coupling,
    reference: SpinConfiguration,
    beta: float,
    rho: float,
    reps: int,
    cap: int,
    seed: int = 0,
    n_jobs: int = 1,
) -> EscapeTimeStats:
    """
    Steps until the chain started at reference first leaves B_rho(reference)

    Args:
        A: Symmetric coupling
        reference: Start and ball centre (typically a gapped state)
        beta: Inverse temperature
        rho: Ball radius fraction in (0, 1/2); rho N must be at least 1
        reps: Independent replicate runs
        cap: Step cap per run; runs reaching it are censored
        seed: Seed; replicate r uses the stream (seed, escape, r)
        n_jobs: Worker threads across replicates

    Returns:
        EscapeTimeStats: Uncensored exit times and the censored count
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    radius = ball_radius(rho, n)
    if rho * n < 1:
        raise ConfigError(f"rho * N = {rho * n} < 1: the ball is a single point")
    if cap < 1 or reps < 0:
        raise ConfigError(f"escape_time needs cap >= 1 and reps >= 0, got cap={cap} reps={reps}")
    outcomes = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_escape_once)(arr, reference, beta, radius, cap, derive_seed(seed, STREAM_ESCAPE, rep))
        for rep in range(reps)
    )
    samples = [t for t in outcomes if t is not None]
    censored = reps - len(samples)
    if censored:
        logger.warning(f"escape_time N={n} beta={beta}: {censored}/{reps} runs censored at cap={cap}")
    stats = EscapeTimeStats(samples=samples, rho=rho, radius=radius, reference=reference,
                            censored_count=censored, cap=cap, beta=beta)
    logger.info(f"escape_time N={n} beta={beta} rho={rho}: median={stats.median()} censored={censored}")
    return stats


def uniform_starts(n: int, count: int, seed: int) -> List[SpinConfiguration]:
    """Uniformly drawn start configurations for exploratory escape runs"""
    rng = make_rng(seed, STREAM_START)
    return [SpinConfiguration.random(n, rng) for _ in range(count)]


@dataclass
class EmpiricalDistribution:
    counts: np.ndarray
    steps: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.steps, 1)

    def tv_distance(self, target: np.ndarray) -> float:
        return 0.5 * float(np.abs(self.frequencies - target).sum())


def empirical_distribution(chain: GlauberChain, steps: int) -> EmpiricalDistribution:
    """
    Visit counts of every state over `steps` further steps (N <= 20)

    Args:
        chain: Chain to advance
        steps: Steps to record

    Returns:
        EmpiricalDistribution: Counts indexed by SpinConfiguration.to_index()
    """
    require_gate("empirical_distribution", chain.n, get_settings().transition_max_n)
    counts = np.zeros(1 << chain.n, dtype=np.int64)
    state = chain.state.config.to_index()
    remaining = steps
    while remaining > 0:
        take = min(remaining, chain._available())
        start = chain._cursor
        state = int(glauber_histogram(chain.A, chain.state.spins, chain.state.local_fields, chain.beta,
                                      chain._sites, chain._uniforms, start, start + take, state, counts))
        chain._cursor += take
        chain.steps_taken += take
        remaining -= take
    chain.state.resync()
    return EmpiricalDistribution(counts=counts, steps=steps)


def gibbs_tv_distance(A: Coupling, beta: float, distribution: EmpiricalDistribution) -> float:
    """TV distance between an empirical distribution and the exact Gibbs measure"""
    return distribution.tv_distance(gibbs_measure(A, beta))

"""
Spectral service: exact Glauber transition kernels for small N, spectral gaps,
exact mixing curves, conductance and Cheeger checks
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Union

import numpy as np
import scipy.sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh
from scipy.special import expit

from app.config import get_settings
from app.models.lab_models import CheegerRecord, MixingCurveRecord, SpectralRecord
from app.services.disorder import coupling_array
from app.services.model import Coupling, SpinConfiguration, energy_table, gibbs_log_weights, hamming_distances
from app.utils.errors import ConfigError, NonConvergenceError, require_gate

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.25
DEFAULT_MIXING_CAP = 1 << 40
STEPPED_PREFIX = 64
CUT_SLACK = 1e-12


@dataclass
class TransitionMatrix:
    """
    Heat-bath Glauber kernel on {-1, +1}^N stored row-sparse.

    flip_probs[x, i] = P(x, x ^ e_i) and holding[x] = P(x, x); sym_flip[x, i]
    is the same entry of the symmetrized kernel D^{1/2} P D^{-1/2}.
    """
    n: int
    beta: float
    energies: np.ndarray
    log_pi: np.ndarray
    flip_probs: np.ndarray
    holding: np.ndarray
    sym_flip: np.ndarray

    @property
    def size(self) -> int:
        return self.energies.size

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.size, dtype=np.int64)

    def neighbours(self, i: int) -> np.ndarray:
        return self.states ^ (1 << i)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """(P v)(x) = sum_y P(x, y) v(y)"""
        out = self.holding * v
        for i in range(self.n):
            out += self.flip_probs[:, i] * v[self.neighbours(i)]
        return out

    def apply_left(self, mu: np.ndarray) -> np.ndarray:
        """(mu P)(y) = sum_x mu(x) P(x, y)"""
        out = self.holding * mu
        for i in range(self.n):
            nb = self.neighbours(i)
            out += mu[nb] * self.flip_probs[nb, i]
        return out

    def symmetric_matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.holding * v
        for i in range(self.n):
            out += self.sym_flip[:, i] * v[self.neighbours(i)]
        return out

    def row_sums(self) -> np.ndarray:
        return self.holding + self.flip_probs.sum(axis=1)

    def reversibility_residual(self) -> float:
        """max |pi(x) P(x, y) - pi(y) P(y, x)| over neighbouring pairs"""
        pi = self.pi
        worst = 0.0
        for i in range(self.n):
            nb = self.neighbours(i)
            worst = max(worst, float(np.max(np.abs(pi * self.flip_probs[:, i] - pi[nb] * self.flip_probs[nb, i]))))
        return worst

    def stationarity_residual(self) -> float:
        """|| pi P - pi ||_1"""
        pi = self.pi
        return float(np.abs(self.apply_left(pi) - pi).sum())

    def to_sparse(self) -> scipy.sparse.csr_array:
        rows = np.concatenate([self.states] + [self.states] * self.n)
        cols = np.concatenate([self.states] + [self.neighbours(i) for i in range(self.n)])
        data = np.concatenate([self.holding] + [self.flip_probs[:, i] for i in range(self.n)])
        return scipy.sparse.csr_array((data, (rows, cols)), shape=(self.size, self.size))

    def to_dense(self) -> np.ndarray:
        require_gate("TransitionMatrix.to_dense", self.n, get_settings().dense_max_n)
        return self.to_sparse().toarray()

    def symmetric_dense(self) -> np.ndarray:
        require_gate("TransitionMatrix.symmetric_dense", self.n, get_settings().dense_max_n)
        S = np.diag(self.holding)
        for i in range(self.n):
            S[self.states, self.neighbours(i)] = self.sym_flip[:, i]
        return S


def build_transition(A: Coupling, beta: float) -> TransitionMatrix:
    """
    Exact heat-bath Glauber kernel P(x, x ^ e_i) = (1/N) / (1 + exp(-beta Delta H_i))

    Flip energy differences are read from one Gray-code energy table, so the
    kernel is reversible against the Gibbs weights of the same table.

    Args:
        A: Symmetric coupling with N <= 20
        beta: Inverse temperature

    Returns:
        TransitionMatrix: The kernel with its Gibbs measure
    """
    arr = coupling_array(A)
    n = arr.shape[0]
    require_gate("build_transition", n, get_settings().transition_max_n)
    energies = energy_table(arr)
    log_pi, _ = gibbs_log_weights(arr, beta, energies)
    states = np.arange(energies.size, dtype=np.int64)
    flip_probs = np.empty((energies.size, n), dtype=np.float64)
    sym_flip = np.empty_like(flip_probs)
    with np.errstate(over="ignore"):
        for i in range(n):
            delta = energies[states ^ (1 << i)] - energies
            flip_probs[:, i] = expit(beta * delta) / n
            sym_flip[:, i] = 1.0 / (2.0 * n * np.cosh(0.5 * beta * delta))
    holding = 1.0 - flip_probs.sum(axis=1)
    logger.info(f"Built transition kernel N={n} beta={beta} ({energies.size} states)")
    return TransitionMatrix(
        n=n, beta=float(beta), energies=energies, log_pi=log_pi,
        flip_probs=flip_probs, holding=holding, sym_flip=sym_flip,
    )


@dataclass
class SpectralReport:
    n: int
    beta: float
    gap: float
    method: str
    residual: float
    eigenvalues: Optional[np.ndarray] = None

    @property
    def t_rel(self) -> float:
        return 1.0 / self.gap if self.gap > 0 else math.inf

    def to_record(self) -> SpectralRecord:
        return SpectralRecord(n=self.n, beta=self.beta, gap=self.gap, t_rel=self.t_rel,
                              method=self.method, residual=self.residual)


def _sqrt_pi(P: TransitionMatrix) -> np.ndarray:
    return np.exp(0.5 * P.log_pi)


def spectral_gap(P: TransitionMatrix, method: str = "dense") -> SpectralReport:
    """
    Spectral gap 1 - lambda_2 of the reversible kernel

    Both methods work on the symmetrized kernel with the top eigenvector
    sqrt(pi) projected out; heat-bath kernels are positive semidefinite, so
    lambda_2 is its largest remaining eigenvalue.

    Args:
        P: Transition matrix
        method: "dense" (N <= 12) or "iterative" (Lanczos, N <= 20)

    Returns:
        SpectralReport: Gap, relaxation time and eigen-residual
    """
    root = _sqrt_pi(P)
    if method == "dense":
        S = P.symmetric_dense() - np.outer(root, root)
        values, vectors = np.linalg.eigh(S)
        lam, vec = float(values[-1]), vectors[:, -1]
        residual = float(np.linalg.norm(S @ vec - lam * vec))
    elif method == "iterative":
        require_gate("spectral_gap[iterative]", P.n, get_settings().transition_max_n)
        op = LinearOperator(
            (P.size, P.size),
            matvec=lambda v: P.symmetric_matvec(v) - root * (root @ v),
            dtype=np.float64,
        )
        v0 = np.cos(np.arange(P.size, dtype=np.float64) + 1.0)
        v0 -= root * (root @ v0)
        try:
            values, vectors = eigsh(op, k=1, which="LA", v0=v0, tol=1e-12, maxiter=max(10 * P.size, 5000))
        except ArpackNoConvergence as e:
            best = float(e.eigenvalues[0]) if len(e.eigenvalues) else None
            logger.error(f"spectral_gap N={P.n} beta={P.beta}: Lanczos did not converge")
            raise NonConvergenceError(
                "iterative spectral gap did not converge",
                best_estimate=None if best is None else 1.0 - best,
            ) from e
        lam, vec = float(values[0]), vectors[:, 0]
        residual = float(np.linalg.norm(op.matvec(vec) - lam * vec))
    else:
        raise ConfigError(f"unknown spectral method {method!r}")

    gap = 1.0 - lam
    if not 0.0 < gap <= 1.0 + 1e-12:
        raise NonConvergenceError(f"spectral gap {gap} outside (0, 1]", best_estimate=gap, residual=residual)
    report = SpectralReport(n=P.n, beta=P.beta, gap=min(gap, 1.0), method=method, residual=residual)
    logger.info(f"spectral_gap N={P.n} beta={P.beta} method={method}: gap={report.gap:.6g} t_rel={report.t_rel:.6g}")
    return report


def full_spectrum(P: TransitionMatrix) -> np.ndarray:
    """All eigenvalues of P in decreasing order (dense gate)"""
    return np.linalg.eigvalsh(P.symmetric_dense())[::-1]


@dataclass
class MixingCurve:
    n: int
    beta: float
    epsilon: float
    times: List[int] = field(default_factory=list)
    distances: List[float] = field(default_factory=list)
    t_mix: Optional[int] = None
    censored: bool = False
    start: str = "worst"

    def rows(self) -> List[dict]:
        return [{"t": t, "d_t": d} for t, d in zip(self.times, self.distances)]

    def to_record(self) -> MixingCurveRecord:
        return MixingCurveRecord(
            n=self.n, beta=self.beta, epsilon=self.epsilon, times=list(self.times),
            distances=list(self.distances), t_mix=self.t_mix, censored=self.censored, start=self.start,
        )


def _worst_tv(M: np.ndarray, pi: np.ndarray) -> float:
    return float(0.5 * np.abs(M - pi[None, :]).sum(axis=1).max())


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon < 0.5:
        raise ConfigError(f"epsilon must lie in (0, 1/2), got {epsilon}")


def mixing_time_exact(P: TransitionMatrix, epsilon: float = DEFAULT_EPSILON, cap: int = DEFAULT_MIXING_CAP) -> MixingCurve:
    """
    Worst-start TV curve d(t) = max_x ||P^t(x, .) - pi||_TV and t_mix(epsilon)

    The curve holds every t up to 64, then t = 64 * 2^k from repeated
    squaring. t_mix is located exactly by descending through the stored
    binary powers once a doubling falls below epsilon.

    Args:
        P: Transition matrix with N <= 12
        epsilon: TV threshold in (0, 1/2)
        cap: Largest t examined; beyond it the result is censored

    Returns:
        MixingCurve: The curve and t_mix (None when censored)
    """
    require_gate("mixing_time_exact", P.n, get_settings().dense_max_n)
    _check_epsilon(epsilon)
    pi = P.pi
    sparse = P.to_sparse()
    curve = MixingCurve(n=P.n, beta=P.beta, epsilon=epsilon)

    M = np.eye(P.size)
    powers = {}
    curve.times.append(0)
    curve.distances.append(_worst_tv(M, pi))
    t = 0
    while t < min(STEPPED_PREFIX, cap):
        M = sparse @ M
        t += 1
        if t & (t - 1) == 0:
            powers[t] = M
        d = _worst_tv(M, pi)
        curve.times.append(t)
        curve.distances.append(d)
        if curve.t_mix is None and d <= epsilon:
            curve.t_mix = t
    if curve.t_mix is not None or t >= cap:
        curve.censored = curve.t_mix is None
        return _log_curve(curve)

    # t == 64 == a power of two; keep squaring
    while True:
        if 2 * t > cap:
            curve.censored = True
            return _log_curve(curve)
        M = M @ M
        t *= 2
        d = _worst_tv(M, pi)
        curve.times.append(t)
        curve.distances.append(d)
        if d <= epsilon:
            break
        powers[t] = M

    current_t = t // 2
    current = powers[current_t]
    step = current_t // 2
    while step >= 1:
        candidate = current @ powers[step]
        if _worst_tv(candidate, pi) > epsilon:
            current, current_t = candidate, current_t + step
        step //= 2
    curve.t_mix = current_t + 1
    return _log_curve(curve)


def _log_curve(curve: MixingCurve) -> MixingCurve:
    if curve.censored:
        logger.warning(f"mixing curve N={curve.n} beta={curve.beta} ({curve.start}) censored at t={curve.times[-1]}")
    else:
        logger.info(f"mixing curve N={curve.n} beta={curve.beta} ({curve.start}): t_mix({curve.epsilon})={curve.t_mix}")
    return curve


def uniform_start_curve(P: TransitionMatrix, epsilon: float = DEFAULT_EPSILON, cap: int = 1 << 16) -> MixingCurve:
    """
    TV distance to pi from the uniform start, stepped exactly up to cap

    Times up to 64 are all kept, later ones at powers of two; the crossing
    time is exact.
    """
    require_gate("uniform_start_curve", P.n, get_settings().transition_max_n)
    _check_epsilon(epsilon)
    pi = P.pi
    mu = np.full(P.size, 1.0 / P.size)
    curve = MixingCurve(n=P.n, beta=P.beta, epsilon=epsilon, start="uniform")
    for t in range(cap + 1):
        if t:
            mu = P.apply_left(mu)
        d = 0.5 * float(np.abs(mu - pi).sum())
        keep = t <= STEPPED_PREFIX or t & (t - 1) == 0
        if d <= epsilon and curve.t_mix is None:
            curve.t_mix = t
            keep = True
        if keep:
            curve.times.append(t)
            curve.distances.append(d)
        if curve.t_mix is not None:
            break
    curve.censored = curve.t_mix is None
    return _log_curve(curve)


@dataclass
class CutConductance:
    phi: float
    flow: float
    mass: float
    complemented: bool


def _as_mask(P: TransitionMatrix, S: Union[np.ndarray, Iterable[int], Iterable[SpinConfiguration]]) -> np.ndarray:
    if isinstance(S, np.ndarray) and S.dtype == bool:
        if S.shape != (P.size,):
            raise ConfigError(f"cut mask has shape {S.shape}, expected ({P.size},)")
        return S
    mask = np.zeros(P.size, dtype=bool)
    for item in S:
        mask[item.to_index() if isinstance(item, SpinConfiguration) else int(item)] = True
    return mask


def _cut_flow(P: TransitionMatrix, mask: np.ndarray, pi: np.ndarray) -> float:
    flow = 0.0
    for i in range(P.n):
        crossing = mask & ~mask[P.neighbours(i)]
        flow += float(np.sum(pi[crossing] * P.flip_probs[crossing, i]))
    return flow


def cut_conductance(P: TransitionMatrix, S, pi: Optional[np.ndarray] = None) -> CutConductance:
    """Conductance of a cut, with the complement taken when pi(S) > 1/2"""
    mask = _as_mask(P, S)
    if not mask.any() or mask.all():
        raise ConfigError("conductance needs a non-empty proper subset of states")
    pi = P.pi if pi is None else pi
    mass = float(pi[mask].sum())
    complemented = mass > 0.5
    if complemented:
        mask = ~mask
        mass = 1.0 - mass
    flow = _cut_flow(P, mask, pi)
    return CutConductance(phi=flow / mass, flow=flow, mass=mass, complemented=complemented)


def conductance(P: TransitionMatrix, S) -> float:
    """
    Phi(S) = Q(S, S^c) / pi(S) with Q(x, y) = pi(x) P(x, y)

    Args:
        P: Transition matrix
        S: Boolean mask over states, or state indices, or configurations

    Returns:
        float: Conductance of S, or of its complement when pi(S) > 1/2
    """
    result = cut_conductance(P, S)
    if result.complemented:
        logger.warning(f"conductance: pi(S) > 1/2, complement used (pi={result.mass:.6g})")
    return result.phi


@dataclass
class CheegerReport:
    n: int
    beta: float
    gap: float
    phi_star: float
    best_cut: str
    cuts_scanned: int

    @property
    def upper_ok(self) -> bool:
        return self.gap <= 2.0 * self.phi_star + CUT_SLACK

    @property
    def lower_ok(self) -> bool:
        return self.gap >= 0.5 * self.phi_star ** 2 - CUT_SLACK

    @property
    def verdict(self) -> str:
        """phi_star only bounds the true conductance from above, so a failed lower side is inconclusive"""
        if not self.upper_ok:
            return "violated"
        return "consistent" if self.lower_ok else "inconclusive"

    def to_record(self) -> CheegerRecord:
        return CheegerRecord(
            n=self.n, beta=self.beta, gap=self.gap, phi_star=self.phi_star, best_cut=self.best_cut,
            cuts_scanned=self.cuts_scanned, upper_ok=self.upper_ok, lower_ok=self.lower_ok, verdict=self.verdict,
        )


def _prefix_cuts(P: TransitionMatrix, pi: np.ndarray):
    """Conductances of energy-superlevel cuts, highest energies first, with incremental flow"""
    order = np.argsort(-P.energies, kind="stable")
    inside = np.zeros(P.size, dtype=bool)
    flow = 0.0
    mass = 0.0
    for count, x in enumerate(order[:-1], start=1):
        for i in range(P.n):
            y = x ^ (1 << i)
            q = pi[x] * P.flip_probs[x, i]
            flow += -q if inside[y] else q
        inside[x] = True
        mass += pi[x]
        small = min(mass, 1.0 - mass)
        if small > 0:
            yield count, max(flow, 0.0) / small


def cheeger_check(P: TransitionMatrix, gap: Optional[float] = None) -> CheegerReport:
    """
    Scanned-cut Cheeger sandwich gap in [phi*^2 / 2, 2 phi*]

    phi* is the smallest conductance over every Hamming ball of radius below
    N/2 around every centre, and every energy-superlevel cut.

    Args:
        P: Transition matrix with N <= 10
        gap: Spectral gap (dense computation when None)

    Returns:
        CheegerReport: gap, phi* and the sandwich verdict
    """
    require_gate("cheeger_check", P.n, get_settings().cheeger_max_n)
    if gap is None:
        gap = spectral_gap(P, "dense").gap
    pi = P.pi
    best_phi = math.inf
    best_cut = ""
    scanned = 0
    for center in range(P.size):
        distances = hamming_distances(SpinConfiguration.from_index(center, P.n))
        for radius in range((P.n + 1) // 2):
            mask = distances <= radius
            result = cut_conductance(P, mask, pi)
            scanned += 1
            if result.phi < best_phi:
                best_phi, best_cut = result.phi, f"ball(center={center}, radius={radius})"
    for count, phi in _prefix_cuts(P, pi):
        scanned += 1
        if phi < best_phi:
            best_phi, best_cut = phi, f"energy-top-{count}"
    report = CheegerReport(n=P.n, beta=P.beta, gap=gap, phi_star=best_phi, best_cut=best_cut, cuts_scanned=scanned)
    logger.info(f"cheeger_check N={P.n} beta={P.beta}: gap={gap:.6g} phi*={best_phi:.6g} ({best_cut}) verdict={report.verdict}")
    return report

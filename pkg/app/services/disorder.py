"""
Disorder service: sampling, symmetrization, operator norms and persistence of coupling matrices
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import get_settings
from app.models.lab_models import LAW_TAGS, DisorderLaw, DisorderSpec
from app.services.kernels import fnv1a64
from app.utils.errors import ConfigError, DimensionMismatchError, MatrixFormatError, NonConvergenceError
from app.utils.seeding import STREAM_DISORDER, STREAM_NORM, make_rng

logger = logging.getLogger(__name__)

MAGIC = b"SKG1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIBQQ")
CHECKSUM = struct.Struct("<Q")
TAG_LAWS = {tag: law for law, tag in LAW_TAGS.items()}


@dataclass(frozen=True)
class CouplingMatrix:
    """Raw asymmetric disorder G with its generating spec"""
    n: int
    entries: np.ndarray
    spec: DisorderSpec

    def __post_init__(self):
        if self.entries.shape != (self.n, self.n):
            raise DimensionMismatchError(f"coupling entries have shape {self.entries.shape}, expected ({self.n}, {self.n})")
        if not np.all(np.isfinite(self.entries)):
            raise ConfigError("coupling entries must be finite")
        self.entries.setflags(write=False)


@dataclass
class SymmetricCoupling:
    """A = (G + G^T) / sqrt(N), shared read-only by every other service"""
    n: int
    entries: np.ndarray
    op_norm_cache: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if self.entries.shape != (self.n, self.n):
            raise DimensionMismatchError(f"coupling entries have shape {self.entries.shape}, expected ({self.n}, {self.n})")
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        self.entries.setflags(write=False)

    @classmethod
    def from_array(cls, entries: Union[np.ndarray, Sequence[Sequence[float]]]) -> "SymmetricCoupling":
        """Wrap an already symmetric matrix"""
        arr = np.array(entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DimensionMismatchError(f"expected a square matrix, got shape {arr.shape}")
        if not np.array_equal(arr, arr.T):
            raise ConfigError("coupling matrix is not symmetric")
        return cls(n=arr.shape[0], entries=arr)

    def restrict(self, subset: Sequence[int]) -> np.ndarray:
        """Principal submatrix A_{I x I}"""
        idx = np.asarray(subset, dtype=np.intp)
        return self.entries[np.ix_(idx, idx)]

    def op_norm(self, rel_tol: float = 1e-8) -> float:
        """Operator norm, computed once and cached"""
        if self.op_norm_cache is None:
            self.op_norm_cache = operator_norm(self.entries, rel_tol=rel_tol)
        return self.op_norm_cache


def coupling_array(A: Union[SymmetricCoupling, np.ndarray]) -> np.ndarray:
    """Float64 array behind a coupling argument"""
    arr = A.entries if isinstance(A, SymmetricCoupling) else np.ascontiguousarray(A, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatchError(f"expected a square coupling matrix, got shape {arr.shape}")
    return arr


def _draw_entries(spec: DisorderSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.n, spec.n)
    if spec.law == DisorderLaw.GAUSSIAN:
        return rng.standard_normal(shape)
    if spec.law == DisorderLaw.RADEMACHER:
        return 2.0 * rng.integers(0, 2, size=shape).astype(np.float64) - 1.0
    values = np.array([v for v, _ in spec.custom_table], dtype=np.float64)
    probs = np.array([p for _, p in spec.custom_table], dtype=np.float64)
    return rng.choice(values, size=shape, p=probs / probs.sum())


def sample_disorder(spec: DisorderSpec) -> CouplingMatrix:
    """
    Sample the N x N IID grid G for a disorder spec

    Args:
        spec: Disorder specification; its (master_seed, instance_index) pair keys the stream

    Returns:
        CouplingMatrix: The sampled matrix, bit-identical for identical specs
    """
    if spec.n < 2:
        raise ConfigError(f"sample_disorder needs N >= 2, got {spec.n}")
    rng = make_rng(spec.master_seed, spec.instance_index, STREAM_DISORDER)
    entries = np.ascontiguousarray(_draw_entries(spec, rng), dtype=np.float64)
    logger.info(f"Sampled {spec.law.value} disorder N={spec.n} seed={spec.master_seed} instance={spec.instance_index}")
    return CouplingMatrix(n=spec.n, entries=entries, spec=spec)


def symmetrize(G: CouplingMatrix) -> SymmetricCoupling:
    """A_ij = (g_ij + g_ji) / sqrt(N)"""
    entries = (G.entries + G.entries.T) / math.sqrt(G.n)
    return SymmetricCoupling(n=G.n, entries=entries)


def sample_coupling(spec: DisorderSpec) -> SymmetricCoupling:
    """Sample and symmetrize in one call"""
    return symmetrize(sample_disorder(spec))


def operator_norm(
    A: Union[SymmetricCoupling, np.ndarray],
    rel_tol: float = 1e-8,
    max_iter: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Largest absolute eigenvalue of a symmetric matrix by power iteration

    The estimate ||A v|| over unit iterates v is non-decreasing, and the
    iteration stops once its relative increase drops below rel_tol. A run that
    settles within two iterations is confirmed from a seeded random start in
    case the all-ones start was orthogonal to the top eigenvector.

    Args:
        A: Symmetric finite matrix
        rel_tol: Relative stopping tolerance in (0, 1e-2]
        max_iter: Iteration cap (settings default when None)
        seed: Seed of the confirmation start vector

    Returns:
        float: Operator norm estimate
    """
    arr = coupling_array(A)
    if not 0.0 < rel_tol <= 1e-2:
        raise ConfigError(f"rel_tol must lie in (0, 1e-2], got {rel_tol}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("operator_norm needs a finite matrix")
    if not np.array_equal(arr, arr.T):
        raise ConfigError("operator_norm needs a symmetric matrix")
    max_iter = max_iter or get_settings().power_iteration_max_iter
    n = arr.shape[0]

    estimate, iterations = _power_iterate(arr, np.ones(n) / math.sqrt(n), rel_tol, max_iter)
    if iterations <= 2 and estimate > 0.0 and n > 1:
        start = make_rng(seed, STREAM_NORM).standard_normal(n)
        start /= np.linalg.norm(start)
        confirm, _ = _power_iterate(arr, start, rel_tol, max_iter)
        estimate = max(estimate, confirm)
    return estimate


def _power_iterate(arr: np.ndarray, v: np.ndarray, rel_tol: float, max_iter: int) -> Tuple[float, int]:
    previous = 0.0
    for iteration in range(1, max_iter + 1):
        w = arr @ v
        estimate = float(np.linalg.norm(w))
        if estimate == 0.0:
            return 0.0, iteration
        if iteration > 1 and estimate - previous <= rel_tol * estimate:
            return estimate, iteration
        previous = estimate
        v = w / estimate
    raise NonConvergenceError(f"power iteration did not converge in {max_iter} iterations", best_estimate=previous)


def save_matrix(G: CouplingMatrix, path: Union[str, Path]) -> Path:
    """
    Write a coupling matrix in the SKG1 binary format

    Args:
        G: Matrix to write
        path: Destination file

    Returns:
        Path: The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, G.n, G.spec.law_tag, G.spec.master_seed, G.spec.instance_index)
    body = header + np.ascontiguousarray(G.entries, dtype="<f8").tobytes(order="C")
    checksum = int(fnv1a64(np.frombuffer(body, dtype=np.uint8)))
    path.write_bytes(body + CHECKSUM.pack(checksum))
    logger.info(f"Saved N={G.n} coupling matrix to {path}")
    return path


def load_matrix(
    path: Union[str, Path],
    expected_n: Optional[int] = None,
    custom_table: Optional[List[Tuple[float, float]]] = None,
) -> CouplingMatrix:
    """
    Read a coupling matrix written by save_matrix

    Args:
        path: File to read
        expected_n: Raise DimensionMismatchError when the file holds another N
        custom_table: Law table to attach to a custom-law file (not stored in the file)

    Returns:
        CouplingMatrix: The stored matrix, bit-exact
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, n, tag, master_seed, instance_index = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    if expected_n is not None and n != expected_n:
        raise DimensionMismatchError(f"{path}: file holds N={n}, expected N={expected_n}")
    if tag not in TAG_LAWS:
        raise MatrixFormatError(f"{path}: unknown law tag {tag}")

    body_size = HEADER.size + 8 * n * n
    if len(data) != body_size + CHECKSUM.size:
        raise MatrixFormatError(f"{path}: expected {body_size + CHECKSUM.size} bytes, found {len(data)}")
    (stored,) = CHECKSUM.unpack_from(data, body_size)
    computed = int(fnv1a64(np.frombuffer(data[:body_size], dtype=np.uint8)))
    if stored != computed:
        raise MatrixFormatError(f"{path}: checksum mismatch (stored {stored:#x}, computed {computed:#x})")

    entries = np.frombuffer(data, dtype="<f8", count=n * n, offset=HEADER.size).reshape(n, n).astype(np.float64)
    law = TAG_LAWS[tag]
    fields = {"law": law, "n": n, "master_seed": master_seed, "instance_index": instance_index}
    if law == DisorderLaw.CUSTOM and custom_table is None:
        logger.warning(f"{path}: custom-law file loaded without its table")
        spec = DisorderSpec.model_construct(**fields, custom_table=None)
    else:
        spec = DisorderSpec(**fields, custom_table=custom_table)
    logger.info(f"Loaded N={n} coupling matrix from {path}")
    return CouplingMatrix(n=n, entries=entries, spec=spec)

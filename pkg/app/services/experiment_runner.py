"""
Experiment runner: dispatches declarative experiments to the lab services,
persists rows crash-safely and fits scaling models
"""
import json
import logging
import math
import os
import statistics
import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from app.config import get_settings
from app.models.experiment_models import (
    ExperimentConfig,
    ExperimentKind,
    ReferenceChoice,
    RunRecord,
    ScalingFit,
    ScalingFitPair,
)
from app.models.lab_models import DisorderLaw, DisorderSpec, MixingCurveRecord
from app.services.bounds import restricted_norm, restricted_quadratic_form, subset_size, theorem_pipeline
from app.services.disorder import SymmetricCoupling, sample_coupling
from app.services.dynamics import escape_time, uniform_starts
from app.services.gapped import enumerate_local_maxima, search_gapped, verify_gapped
from app.services.model import SpinConfiguration, free_energy_pair
from app.services.spectral import build_transition, mixing_time_exact, spectral_gap, uniform_start_curve
from app.utils.errors import ConfigError, LabError
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

ROWS_FILE = "rows.jsonl"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.yaml"
NO_WINNER_RATIO = 0.10
FIT_ALPHAS = ((1.0 / 3.0, "1/3"), (1.0, "1"))


@dataclass(frozen=True)
class Task:
    """One unit of instance-level work"""
    law: DisorderLaw
    n: int
    instance: int

    @property
    def key(self) -> str:
        return f"{self.law.value}:{self.n}:{self.instance}"


def _clean(value: Any) -> Any:
    """JSON-safe scalar: numpy types unwrapped, non-finite floats become None"""
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _row(**values: Any) -> Dict[str, Any]:
    return {key: _clean(value) for key, value in values.items()}


def _tasks(config: ExperimentConfig) -> List[Task]:
    laws = config.law_values if config.kind == ExperimentKind.RESTRICTED_NORM_STUDY else [config.law]
    return [Task(law, n, instance) for law in laws for n in config.n_list for instance in range(config.instance_count)]


def _coupling(config: ExperimentConfig, task: Task) -> SymmetricCoupling:
    spec = DisorderSpec(law=task.law, n=task.n, master_seed=config.master_seed, instance_index=task.instance)
    return sample_coupling(spec)


def _task_seed(config: ExperimentConfig, task: Task) -> int:
    return derive_seed(config.master_seed, task.n, task.instance)


def _reference(config: ExperimentConfig, A: SymmetricCoupling, seed: int) -> SpinConfiguration:
    if config.reference == ReferenceChoice.DEEPEST:
        return enumerate_local_maxima(A).deepest()
    return search_gapped(A, config.gamma, config.delta, config.search_budget, seed=seed).config


def _scaling_task(config: ExperimentConfig, task: Task, A: SymmetricCoupling, seed: int) -> Dict[str, Any]:
    settings = get_settings()
    result: Dict[str, Any] = {"rows": [], "curves": [], "gap_profile": None}
    search_min_gap = maximin = None
    if config.include_gapped:
        report = search_gapped(A, config.gamma, config.delta, config.search_budget, seed=seed)
        search_min_gap = report.min_gap
        result["gap_profile"] = [float(v) for v in report.profile.values]
        if task.n <= settings.local_maxima_max_n:
            maximin = enumerate_local_maxima(A).maximin()
    method = config.spectral_method or ("dense" if task.n <= settings.dense_max_n else "iterative")
    for beta in config.beta_list:
        P = build_transition(A, beta)
        report = spectral_gap(P, method)
        t_mix = t_mix_uniform = None
        if config.include_mixing:
            worst = mixing_time_exact(P, config.epsilon)
            uniform = uniform_start_curve(P, config.epsilon)
            t_mix, t_mix_uniform = worst.t_mix, uniform.t_mix
            if task.instance == 0:
                result["curves"].extend([worst.to_record().model_dump(mode="json"), uniform.to_record().model_dump(mode="json")])
        result["rows"].append(_row(
            n=task.n, instance=task.instance, beta=beta, method=method, gap=report.gap, t_rel=report.t_rel,
            log_t_rel=math.log(report.t_rel), t_mix=t_mix, t_mix_uniform=t_mix_uniform,
            search_min_gap=search_min_gap, maximin=maximin,
        ))
    return result


def _free_energy_task(config: ExperimentConfig, task: Task, A: SymmetricCoupling, seed: int) -> Dict[str, Any]:
    rows = []
    for beta in config.beta_list:
        quenched, annealed = free_energy_pair(A, beta)
        rows.append(_row(n=task.n, instance=task.instance, beta=beta, quenched=quenched,
                         annealed=annealed, difference=quenched - annealed))
    return {"rows": rows, "curves": [], "gap_profile": None}


def _pipeline_task(config: ExperimentConfig, task: Task, A: SymmetricCoupling, seed: int) -> Dict[str, Any]:
    reference = _reference(config, A, seed)
    rows = []
    for beta in config.beta_list:
        result = theorem_pipeline(A, beta, config.gamma, config.delta, config.rho, reference=reference,
                                  seed=seed, norm_constant=config.norm_constant)
        record = result.record
        rows.append(_row(
            n=task.n, instance=task.instance, beta=beta, reference=reference.to_hex(), verdict=record.verdict,
            hypotheses_met=record.hypotheses_met, certified=record.certified, min_drop=result.sphere.min_drop,
            lemma_rhs=result.sphere.lemma_rhs, log_ratio=result.bottleneck.log_ratio,
            log_bound=result.bottleneck.log_bound, ball_mass=result.bottleneck.ball_mass,
            conductance=record.conductance, log_lower_bound=record.log_lower_bound, t_rel=record.t_rel,
            cheeger_consistent=record.cheeger_consistent,
        ))
    profile = verify_gapped(A, reference, config.gamma, config.delta).profile
    return {"rows": rows, "curves": [], "gap_profile": [float(v) for v in profile.values]}


def _escape_task(config: ExperimentConfig, task: Task, A: SymmetricCoupling, seed: int) -> Dict[str, Any]:
    reference = _reference(config, A, seed)
    starts = [("reference", reference)]
    starts += [(f"uniform-{j}", s) for j, s in enumerate(uniform_starts(task.n, config.uniform_starts, seed))]
    rows = []
    for label, start in starts:
        for beta in config.beta_list:
            stats = escape_time(A, start, beta, config.rho, config.reps, config.cap, seed=seed)
            rows.append(_row(
                n=task.n, instance=task.instance, beta=beta, start=label, reference=start.to_hex(), rho=config.rho,
                reps=stats.reps, censored=stats.censored_count, median=stats.median(),
                median_lower_bound=stats.median_lower_bound(), mean=stats.mean(),
            ))
    profile = verify_gapped(A, reference, config.gamma, config.delta).profile
    return {"rows": rows, "curves": [], "gap_profile": [float(v) for v in profile.values]}


def _norm_task(config: ExperimentConfig, task: Task, A: SymmetricCoupling, seed: int) -> Dict[str, Any]:
    rows = []
    for rho in config.rho_values:
        report = restricted_norm(A, rho, mode=config.norm_mode, budget=config.norm_budget, seed=seed,
                                 constant=config.norm_constant, restarts=config.norm_restarts)
        quadratic = None
        if config.include_quadratic_form:
            quadratic = restricted_quadratic_form(A, rho, mode=config.norm_mode, seed=seed).value
        rows.append(_row(
            law=task.law.value, n=task.n, instance=task.instance, rho=rho, subset_size=subset_size(rho, task.n),
            mode=config.norm_mode, norm=report.norm, scaled_norm=report.scaled_norm, bound_rhs=report.bound_rhs,
            fitted_constant=report.fitted_constant, evaluations=report.evaluations, quadratic_form=quadratic,
        ))
    return {"rows": rows, "curves": [], "gap_profile": None}


TASK_RUNNERS = {
    ExperimentKind.SCALING_STUDY: _scaling_task,
    ExperimentKind.FREE_ENERGY: _free_energy_task,
    ExperimentKind.BOTTLENECK_PIPELINE: _pipeline_task,
    ExperimentKind.ESCAPE_STUDY: _escape_task,
    ExperimentKind.RESTRICTED_NORM_STUDY: _norm_task,
}


def _run_task(config: ExperimentConfig, task: Task) -> Tuple[str, Dict[str, Any]]:
    A = _coupling(config, task)
    return task.key, TASK_RUNNERS[config.kind](config, task, A, _task_seed(config, task))


def _atomic_write(path: Path, text: str) -> None:
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, encoding="utf-8", suffix=".tmp") as handle:
        handle.write(text)
        handle.flush()
        os.fsync(handle.fileno())
        temp = handle.name
    os.replace(temp, path)


def _load_partial(path: Path) -> Dict[str, Dict[str, Any]]:
    """Completed tasks of an interrupted run; a torn final line is dropped"""
    done: Dict[str, Dict[str, Any]] = {}
    if not path.exists():
        return done
    text = path.read_text(encoding="utf-8")
    kept: List[str] = []
    for number, line in enumerate(text.splitlines(), start=1):
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            logger.warning(f"{path}: dropping unreadable line {number}")
            continue
        done[entry["key"]] = entry["result"]
        kept.append(line + "\n")
    clean = "".join(kept)
    if clean != text:
        # later appends must start on a fresh line
        _atomic_write(path, clean)
    return done


def run_directory(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    return Path(out_dir or config.out_dir) / f"{config.name}-{config.config_hash()}"


def _assemble(config: ExperimentConfig, tasks: List[Task], done: Dict[str, Dict[str, Any]], complete: bool) -> RunRecord:
    record = RunRecord(kind=config.kind, config_hash=config.config_hash(), config=config, complete=complete)
    for task in tasks:
        if task.key not in done:
            continue
        result = done[task.key]
        record.instances.append(task.key)
        record.rows.extend(result["rows"])
        record.curves.extend(MixingCurveRecord.model_validate(c) for c in result.get("curves", []))
        if result.get("gap_profile") is not None:
            record.gap_profiles[task.key] = result["gap_profile"]
    if complete:
        record.summary = summarize(config.kind, record.rows)
        if config.kind == ExperimentKind.SCALING_STUDY:
            record.fits = fit_all_betas(record.rows)
    return record


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = True,
    n_jobs: Optional[int] = None,
) -> RunRecord:
    """
    Run an experiment, appending each instance's rows as it finishes

    Rows go to rows.jsonl one instance per line; manifest.json holds the
    record so far and is replaced atomically, with complete=True only at the
    end. A rerun with resume=True skips instances already in rows.jsonl.

    Args:
        config: Validated experiment config
        out_dir: Parent directory (config.out_dir when None)
        resume: Reuse rows of an interrupted run with the same config hash
        n_jobs: Worker threads (config.threads when None)

    Returns:
        RunRecord: The complete record
    """
    run_dir = run_directory(config, out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.dump(run_dir / CONFIG_FILE)
    rows_path = run_dir / ROWS_FILE
    manifest_path = run_dir / MANIFEST_FILE
    if not resume and rows_path.exists():
        rows_path.unlink()

    tasks = _tasks(config)
    done = _load_partial(rows_path)
    pending = [task for task in tasks if task.key not in done]
    logger.info(f"run_experiment {config.name} ({config.kind.value}, hash {config.config_hash()}): "
                f"{len(tasks)} instances, {len(tasks) - len(pending)} already done")

    started = time.perf_counter()
    _atomic_write(manifest_path, _assemble(config, tasks, done, complete=False).model_dump_json(indent=2))
    jobs = Parallel(n_jobs=n_jobs or config.threads, prefer="threads", return_as="generator")(
        delayed(_run_task)(config, task) for task in pending
    )
    try:
        with rows_path.open("a", encoding="utf-8") as handle:
            for key, result in tqdm(jobs, total=len(pending), desc=config.name, disable=None):
                handle.write(json.dumps({"key": key, "result": result}, sort_keys=True) + "\n")
                handle.flush()
                os.fsync(handle.fileno())
                done[key] = result
                _atomic_write(manifest_path, _assemble(config, tasks, done, complete=False).model_dump_json(indent=2))
    except LabError as e:
        logger.error(f"run_experiment {config.name} stopped after {len(done)}/{len(tasks)} instances: {e}")
        raise

    record = _assemble(config, tasks, done, complete=True)
    record.timing = {"wall_clock_seconds": time.perf_counter() - started}
    _atomic_write(manifest_path, record.model_dump_json(indent=2))
    logger.info(f"run_experiment {config.name}: {len(record.rows)} rows written to {run_dir}")
    return record


def load_record(path: Union[str, Path]) -> RunRecord:
    """Load a run record or manifest JSON file"""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.exists():
        raise ConfigError(f"run record {path} does not exist")
    return RunRecord.model_validate_json(path.read_text(encoding="utf-8"))


def _median(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return statistics.median(present) if present else None


def summarize(kind: ExperimentKind, rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Kind-specific aggregates in deterministic key order"""
    groups: Dict[Tuple, List[Dict[str, Any]]] = defaultdict(list)
    if kind == ExperimentKind.FREE_ENERGY:
        for row in rows:
            groups[(row["n"], row["beta"])].append(row)
        return {
            f"n={n},beta={beta}": {
                "mean_quenched": statistics.fmean(r["quenched"] for r in group),
                "annealed": group[0]["annealed"],
                "mean_difference": statistics.fmean(r["difference"] for r in group),
            }
            for (n, beta), group in sorted(groups.items())
        }
    if kind == ExperimentKind.SCALING_STUDY:
        for row in rows:
            groups[(row["n"], row["beta"])].append(row)
        return {
            f"n={n},beta={beta}": {
                "median_log_t_rel": _median(r["log_t_rel"] for r in group),
                "median_t_mix": _median(r["t_mix"] for r in group),
                "median_t_mix_uniform": _median(r["t_mix_uniform"] for r in group),
                "median_search_min_gap": _median(r["search_min_gap"] for r in group),
            }
            for (n, beta), group in sorted(groups.items())
        }
    if kind == ExperimentKind.ESCAPE_STUDY:
        for row in rows:
            groups[(row["n"], row["beta"], row["start"] == "reference")].append(row)
        return {
            f"n={n},beta={beta},start={'reference' if ref else 'uniform'}": {
                "median_of_medians": _median(r["median"] for r in group),
                "censored": sum(r["censored"] for r in group),
            }
            for (n, beta, ref), group in sorted(groups.items())
        }
    if kind == ExperimentKind.BOTTLENECK_PIPELINE:
        for row in rows:
            groups[(row["n"], row["beta"])].append(row)
        return {
            f"n={n},beta={beta}": {
                "certified": sum(bool(r["certified"]) for r in group),
                "cheeger_consistent": sum(bool(r["cheeger_consistent"]) for r in group),
                "median_log_lower_bound": _median(r["log_lower_bound"] for r in group),
            }
            for (n, beta), group in sorted(groups.items())
        }
    for row in rows:
        groups[(row["law"],)].append(row)
    summary = {}
    for (law,), group in sorted(groups.items()):
        constants = [r["fitted_constant"] for r in group]
        per_rho = defaultdict(list)
        for r in group:
            per_rho[r["rho"]].append(r["fitted_constant"])
        medians = {str(rho): statistics.median(v) for rho, v in sorted(per_rho.items())}
        summary[law] = {
            "fitted_constant": max(constants),
            "spread": max(medians.values()) / min(medians.values()) - 1.0,
            "median_constant_by_rho": medians,
        }
    return summary


def _fit(sizes: np.ndarray, medians: np.ndarray, alpha: float, label: str) -> ScalingFit:
    X = (sizes.astype(np.float64) ** alpha)[:, None]
    model = LinearRegression().fit(X, medians)
    residuals = medians - model.predict(X)
    return ScalingFit(alpha=alpha, label=label, a=float(model.intercept_), b=float(model.coef_[0]),
                      rss=float(residuals @ residuals), n_points=len(sizes))


def fit_scaling(rows: Iterable[Mapping[str, Any]], beta: Optional[float] = None, key: str = "log_t_rel") -> ScalingFitPair:
    """
    Fit log t_rel = a + b N^alpha for alpha = 1/3 and alpha = 1 on medians over instances

    Args:
        rows: Rows with n, beta and key columns
        beta: Inverse temperature to fit (the only one present when None)
        key: Column holding log relaxation times

    Returns:
        ScalingFitPair: Both fits; no winner when the residuals differ by less than 10%
    """
    rows = [r for r in rows if r.get(key) is not None]
    betas = sorted({r.get("beta") for r in rows}, key=lambda b: (b is None, b))
    if beta is None:
        if len(betas) > 1:
            raise ConfigError(f"rows hold several inverse temperatures {betas}; choose one")
        beta = betas[0] if betas else None
    else:
        rows = [r for r in rows if r.get("beta") == beta]

    by_size: Dict[int, List[float]] = defaultdict(list)
    for r in rows:
        by_size[int(r["n"])].append(float(r[key]))
    if len(by_size) < 4:
        raise ConfigError(f"fit_scaling needs at least 4 distinct N values, got {sorted(by_size)}")
    sizes = np.array(sorted(by_size))
    medians = np.array([statistics.median(by_size[n]) for n in sizes])

    third, linear = (_fit(sizes, medians, alpha, label) for alpha, label in FIT_ALPHAS)
    small, large = sorted([third, linear], key=lambda f: f.rss)
    tiny = 1e-12 * max(1.0, float(medians @ medians))
    if large.rss <= tiny or (large.rss - small.rss) < NO_WINNER_RATIO * large.rss:
        preferred = None
    else:
        preferred = small.label
    separation = large.rss / small.rss if small.rss > 0 else None
    pair = ScalingFitPair(beta=beta, sizes=[int(n) for n in sizes], medians=[float(m) for m in medians],
                          third=third, linear=linear, preferred=preferred, separation=separation)
    logger.info(f"fit_scaling beta={beta}: rss(1/3)={third.rss:.4g} rss(1)={linear.rss:.4g} preferred={preferred}")
    return pair


def fit_all_betas(rows: List[Dict[str, Any]]) -> List[ScalingFitPair]:
    """One fit pair per inverse temperature with at least 4 sizes"""
    fits = []
    for beta in sorted({r["beta"] for r in rows}):
        sizes = {r["n"] for r in rows if r["beta"] == beta and r.get("log_t_rel") is not None}
        if len(sizes) >= 4:
            fits.append(fit_scaling(rows, beta=beta))
    return fits

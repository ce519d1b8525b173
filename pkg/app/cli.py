"""
Command line surface of the lab
"""
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from pydantic import ValidationError

from app import __version__
from app.config import get_settings
from app.models.experiment_models import ExperimentConfig
from app.models.lab_models import DisorderLaw, DisorderSpec, MatrixSummary
from app.services import bounds, dynamics, gapped, spectral
from app.services.disorder import load_matrix, operator_norm, sample_disorder, save_matrix, symmetrize
from app.services.experiment_runner import fit_scaling, load_record, run_directory, run_experiment
from app.services.model import SpinConfiguration
from app.services.report_service import FORMATS, emit_report, write_curve_csv, write_trajectory_csv
from app.utils.errors import LabError

logger = logging.getLogger(__name__)


class LabGroup(click.Group):
    """click group that turns lab errors into documented exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except LabError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"error: invalid parameters: {e}", err=True)
            sys.exit(2)


def _emit(obj) -> None:
    click.echo(obj.model_dump_json(indent=2) if hasattr(obj, "model_dump_json") else json.dumps(obj, indent=2))


def _coupling(ctx, n: Optional[int], law: str, instance: int, matrix: Optional[str]):
    if matrix:
        G = load_matrix(matrix, expected_n=n)
    else:
        if n is None:
            raise click.UsageError("either --n or --matrix is required")
        G = sample_disorder(DisorderSpec(law=DisorderLaw(law), n=n, master_seed=ctx.obj["seed"], instance_index=instance))
    return symmetrize(G)


def _reference(ctx, A, start: str, gamma: float, delta: float, budget: int) -> SpinConfiguration:
    if start == "deepest":
        return gapped.enumerate_local_maxima(A).deepest()
    if start == "search":
        return gapped.search_gapped(A, gamma, delta, budget, seed=ctx.obj["seed"]).config
    if start == "random":
        return dynamics.uniform_starts(A.n, 1, ctx.obj["seed"])[0]
    return SpinConfiguration.from_hex(start, A.n)


def instance_options(f):
    f = click.option("--matrix", type=click.Path(exists=True, dir_okay=False), help="Load G from an SKG1 file")(f)
    f = click.option("--instance", default=0, show_default=True, help="Instance index")(f)
    f = click.option("--law", type=click.Choice([l.value for l in DisorderLaw if l != DisorderLaw.CUSTOM]),
                     default="gaussian", show_default=True)(f)
    f = click.option("--n", "n", type=int, help="System size N")(f)
    return f


@click.group(cls=LabGroup)
@click.version_option(__version__)
@click.option("--seed", type=int, default=None, help="Master seed (settings default when omitted)")
@click.option("--threads", type=int, default=None, help="Worker threads")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory")
@click.option("--format", "formats", type=click.Choice(FORMATS), multiple=True, help="Report formats (repeatable)")
@click.option("--log-level", default=None, help="Logging level")
@click.pass_context
def cli(ctx, seed, threads, out_dir, formats, log_level):
    """SK spin-glass lab"""
    settings = get_settings()
    logging.basicConfig(
        level=(log_level or settings.log_level).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj.update(
        seed=settings.master_seed if seed is None else seed,
        threads=threads or settings.threads,
        out_dir=Path(out_dir) if out_dir else settings.out_dir,
        formats=tuple(formats) or ("json",),
    )


@cli.command()
@instance_options
@click.option("--save", type=click.Path(dir_okay=False), help="Write G to this SKG1 file")
@click.pass_context
def sample(ctx, n, law, instance, matrix, save):
    """Sample a coupling matrix and print its summary"""
    if matrix:
        G = load_matrix(matrix, expected_n=n)
    else:
        if n is None:
            raise click.UsageError("either --n or --matrix is required")
        G = sample_disorder(DisorderSpec(law=DisorderLaw(law), n=n, master_seed=ctx.obj["seed"], instance_index=instance))
    if save:
        save_matrix(G, save)
    A = symmetrize(G)
    _emit(MatrixSummary(
        spec=G.spec, op_norm=operator_norm(A), entry_mean=float(G.entries.mean()),
        entry_variance=float(G.entries.var()), moments=G.spec.moments(),
    ))


@cli.command(name="gapped")
@instance_options
@click.option("--gamma", default=0.5, show_default=True)
@click.option("--delta", default=0.0, show_default=True)
@click.option("--budget", default=200_000, show_default=True, help="Flip evaluations")
@click.option("--enumerate", "enumerate_all", is_flag=True, help="Also enumerate every local maximum (N <= 20)")
@click.pass_context
def gapped_cmd(ctx, n, law, instance, matrix, gamma, delta, budget, enumerate_all):
    """Search for a (gamma, delta)-gapped state"""
    A = _coupling(ctx, n, law, instance, matrix)
    report = gapped.search_gapped(A, gamma, delta, budget, seed=ctx.obj["seed"])
    _emit(report.to_record())
    if enumerate_all:
        maxima = gapped.enumerate_local_maxima(A)
        click.echo(f"local maxima: {len(maxima.maxima)}  exhaustive maximin: {maxima.maximin():.6g}")


@cli.command(name="dynamics")
@instance_options
@click.option("--beta", type=float, required=True)
@click.option("--steps", default=100_000, show_default=True)
@click.option("--thin", default=100, show_default=True)
@click.option("--start", default="random", show_default=True, help="random, deepest, search or a hex configuration")
@click.option("--escape", is_flag=True, help="Measure escape times from the start instead")
@click.option("--rho", default=0.1, show_default=True)
@click.option("--reps", default=100, show_default=True)
@click.option("--cap", default=10**7, show_default=True)
@click.option("--gamma", default=0.5, show_default=True)
@click.option("--budget", default=200_000, show_default=True)
@click.pass_context
def dynamics_cmd(ctx, n, law, instance, matrix, beta, steps, thin, start, escape, rho, reps, cap, gamma, budget):
    """Run Glauber dynamics, or escape times from a reference state"""
    A = _coupling(ctx, n, law, instance, matrix)
    reference = _reference(ctx, A, start, gamma, 0.0, budget)
    if escape:
        stats = dynamics.escape_time(A, reference, beta, rho, reps, cap, seed=ctx.obj["seed"], n_jobs=ctx.obj["threads"])
        _emit(stats.to_record())
        return
    chain = dynamics.GlauberChain(A, reference, beta, seed=ctx.obj["seed"])
    summary = dynamics.run(chain, steps, thin=thin)
    if "csv" in ctx.obj["formats"]:
        write_trajectory_csv(summary.rows(), ctx.obj["out_dir"] / f"trajectory-n{A.n}-beta{beta}.csv")
    _emit({
        "steps": summary.steps, "accepted": summary.accepted, "downhill_accepted": summary.downhill_accepted,
        "final_energy": summary.final_energy, "final_config": summary.final_config.to_hex(),
    })


@cli.command(name="spectral")
@instance_options
@click.option("--beta", type=float, required=True)
@click.option("--method", type=click.Choice(["dense", "iterative"]), default="dense", show_default=True)
@click.option("--mixing", is_flag=True, help="Exact worst-start and uniform-start mixing curves (N <= 12)")
@click.option("--epsilon", default=0.25, show_default=True)
@click.option("--cheeger", is_flag=True, help="Scanned-cut Cheeger check (N <= 10)")
@click.pass_context
def spectral_cmd(ctx, n, law, instance, matrix, beta, method, mixing, epsilon, cheeger):
    """Spectral gap, mixing curves and Cheeger check of the exact kernel"""
    A = _coupling(ctx, n, law, instance, matrix)
    P = spectral.build_transition(A, beta)
    report = spectral.spectral_gap(P, method)
    _emit(report.to_record())
    if mixing:
        for curve in (spectral.mixing_time_exact(P, epsilon), spectral.uniform_start_curve(P, epsilon)):
            _emit(curve.to_record())
            if "csv" in ctx.obj["formats"]:
                write_curve_csv(curve.rows(), ctx.obj["out_dir"] / f"curve-{curve.start}-n{A.n}-beta{beta}.csv")
    if cheeger:
        _emit(spectral.cheeger_check(P, report.gap).to_record())


@cli.group(name="bounds", cls=LabGroup)
def bounds_group():
    """Restricted norms, sphere gaps, bottlenecks and the full pipeline"""


@bounds_group.command(name="norm")
@instance_options
@click.option("--rho", type=float, required=True)
@click.option("--mode", type=click.Choice(["exact", "heuristic"]), default="heuristic", show_default=True)
@click.option("--budget", default=bounds.DEFAULT_NORM_BUDGET, show_default=True)
@click.option("--restarts", type=int, default=None)
@click.option("--constant", default=bounds.DEFAULT_NORM_CONSTANT, show_default=True)
@click.option("--quadratic", is_flag=True, help="Also the ternary restricted quadratic form")
@click.pass_context
def norm_cmd(ctx, n, law, instance, matrix, rho, mode, budget, restarts, constant, quadratic):
    A = _coupling(ctx, n, law, instance, matrix)
    _emit(bounds.restricted_norm(A, rho, mode, budget, ctx.obj["seed"], constant, restarts).to_record())
    if quadratic:
        _emit(bounds.restricted_quadratic_form(A, rho, mode, seed=ctx.obj["seed"]).to_record())


@bounds_group.command(name="sphere")
@instance_options
@click.option("--rho", type=float, required=True)
@click.option("--gamma", default=0.5, show_default=True)
@click.option("--mode", type=click.Choice(["exhaustive", "sampled"]), default="exhaustive", show_default=True)
@click.option("--m", "m", default=10_000, show_default=True)
@click.option("--start", default="deepest", show_default=True)
@click.option("--budget", default=200_000, show_default=True)
@click.pass_context
def sphere_cmd(ctx, n, law, instance, matrix, rho, gamma, mode, m, start, budget):
    A = _coupling(ctx, n, law, instance, matrix)
    reference = _reference(ctx, A, start, gamma, 0.0, budget)
    _emit(bounds.sphere_energy_gap(A, reference, rho, gamma, mode, m, ctx.obj["seed"]).to_record())


@bounds_group.command(name="bottleneck")
@instance_options
@click.option("--beta", type=float, required=True)
@click.option("--rho", type=float, required=True)
@click.option("--mode", type=click.Choice(["exact", "sampled"]), default="exact", show_default=True)
@click.option("--m", "m", default=10_000, show_default=True)
@click.option("--start", default="deepest", show_default=True)
@click.option("--gamma", type=float, default=None)
@click.option("--budget", default=200_000, show_default=True)
@click.pass_context
def bottleneck_cmd(ctx, n, law, instance, matrix, beta, rho, mode, m, start, gamma, budget):
    A = _coupling(ctx, n, law, instance, matrix)
    reference = _reference(ctx, A, start, gamma or 0.5, 0.0, budget)
    _emit(bounds.bottleneck_ratio(A, reference, beta, rho, mode, m, ctx.obj["seed"], gamma).to_record())


@bounds_group.command(name="pipeline")
@instance_options
@click.option("--beta", type=float, required=True)
@click.option("--gamma", default=0.5, show_default=True)
@click.option("--delta", default=0.0, show_default=True)
@click.option("--rho", default=0.25, show_default=True)
@click.option("--start", default="deepest", show_default=True, help="deepest, search or a hex configuration")
@click.option("--budget", default=200_000, show_default=True)
@click.pass_context
def pipeline_cmd(ctx, n, law, instance, matrix, beta, gamma, delta, rho, start, budget):
    """Run every step of the bottleneck argument and print the margins"""
    A = _coupling(ctx, n, law, instance, matrix)
    reference = _reference(ctx, A, start, gamma, delta, budget)
    result = bounds.theorem_pipeline(A, beta, gamma, delta, rho, reference=reference, seed=ctx.obj["seed"])
    click.echo(result.summary(), nl=False)
    if "json" in ctx.obj["formats"]:
        _emit(result.record)


@cli.group(name="experiment", cls=LabGroup)
def experiment_group():
    """Declarative experiments"""


@experiment_group.command(name="run")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--no-resume", is_flag=True, help="Discard rows of an interrupted run")
@click.pass_context
def experiment_run(ctx, config_path, no_resume):
    config = ExperimentConfig.load(config_path)
    record = run_experiment(config, out_dir=ctx.obj["out_dir"], resume=not no_resume, n_jobs=ctx.obj["threads"])
    written = emit_report(record, ctx.obj["formats"], run_directory(config, ctx.obj["out_dir"]))
    for path in written:
        click.echo(str(path))


@experiment_group.command(name="fit")
@click.argument("record_path", type=click.Path())
@click.option("--beta", type=float, default=None)
def experiment_fit(record_path, beta):
    record = load_record(record_path)
    _emit(fit_scaling(record.rows, beta=beta))


@cli.command()
@click.argument("record_path", type=click.Path())
@click.pass_context
def report(ctx, record_path):
    """Emit report files for a saved run record"""
    record = load_record(record_path)
    for path in emit_report(record, ctx.obj["formats"], ctx.obj["out_dir"]):
        click.echo(str(path))


def main():
    cli(obj={})


if __name__ == "__main__":
    main()

import math
from pathlib import Path

import pytest

from app.models.experiment_models import ExperimentConfig, ExperimentKind, RunRecord
from app.services.experiment_runner import fit_all_betas, load_record
from app.services.report_service import (
    emit_report,
    render_csv,
    render_json,
    render_svgs,
    write_curve_csv,
    write_trajectory_csv,
)
from app.utils.errors import ConfigError

FIXTURES = Path(__file__).parent / "fixtures"

CONFIGS = {
    ExperimentKind.SCALING_STUDY: dict(n_list=[6]),
    ExperimentKind.FREE_ENERGY: dict(n_list=[6]),
    ExperimentKind.BOTTLENECK_PIPELINE: dict(n_list=[6]),
    ExperimentKind.ESCAPE_STUDY: dict(n_list=[8], rho=0.25),
    ExperimentKind.RESTRICTED_NORM_STUDY: dict(n_list=[10], rho=0.25),
}


def _empty_record(kind: ExperimentKind) -> RunRecord:
    config = ExperimentConfig(kind=kind, name=kind.value, **CONFIGS[kind])
    return RunRecord(kind=kind, config_hash=config.config_hash(), config=config, complete=True)


def _scaling_record() -> RunRecord:
    config = ExperimentConfig(kind="scaling_study", name="scaling", n_list=[4, 8, 12, 16], beta_list=[2.0])
    rows = [
        {"n": n, "instance": i, "beta": 2.0, "method": "dense", "gap": math.exp(-(1.0 + 0.1 * n + 0.01 * i)),
         "t_rel": math.exp(1.0 + 0.1 * n + 0.01 * i), "log_t_rel": 1.0 + 0.1 * n + 0.01 * i}
        for n in (4, 8, 12, 16) for i in range(3)
    ]
    return RunRecord(kind=ExperimentKind.SCALING_STUDY, config_hash=config.config_hash(), config=config,
                     rows=rows, fits=fit_all_betas(rows), complete=True)


@pytest.mark.parametrize("kind", list(ExperimentKind))
def test_empty_record_csv_matches_golden_header(kind, tmp_path):
    written = emit_report(_empty_record(kind), ["csv"], tmp_path)
    assert len(written) == 1
    expected = (FIXTURES / f"{kind.value}_header.csv").read_text(encoding="utf-8")
    assert written[0].read_text(encoding="utf-8") == expected


def test_empty_record_has_no_plots():
    assert render_svgs(_empty_record(ExperimentKind.FREE_ENERGY)) == {}


def test_csv_cells():
    text = render_csv(["a", "b", "c", "d"], [{"a": None, "b": True, "c": 0.1, "d": 3}], "demo")
    assert text.splitlines() == ["# schema: demo v1", "a,b,c,d", ",true,0.1,3"]


def test_scaling_plot_carries_data_and_both_fits():
    svg = render_svgs(_scaling_record())["t_rel_vs_n"]
    assert 'id="data_points"' in svg
    assert 'id="fit_alpha_1_3"' in svg
    assert 'id="fit_alpha_1"' in svg
    assert svg == render_svgs(_scaling_record())["t_rel_vs_n"]


def test_json_record_reloads_to_identical_output(tmp_path):
    record = _scaling_record()
    path = emit_report(record, ["json"], tmp_path)[0]
    reloaded = load_record(path)
    assert render_json(reloaded) == path.read_text(encoding="utf-8")
    assert reloaded.fits[0].preferred == record.fits[0].preferred


def test_emit_report_writes_every_format_in_order(tmp_path):
    written = emit_report(_scaling_record(), ["svg", "json", "csv"], tmp_path)
    assert [p.name for p in written] == ["scaling-metrics.csv", "scaling-record.json", "scaling-t_rel_vs_n.svg"]
    assert all(p.exists() for p in written)


def test_emit_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ConfigError):
        emit_report(_scaling_record(), ["pdf"], tmp_path)


def test_trajectory_and_curve_csv(tmp_path):
    path = write_trajectory_csv([{"step": 10, "energy": -1.5, "overlap": 0.25}], tmp_path / "t.csv")
    assert path.read_text().splitlines() == ["# schema: trajectory v1", "step,energy,overlap", "10,-1.5,0.25"]
    path = write_curve_csv([{"t": 0, "d_t": 0.75}], tmp_path / "c.csv")
    assert path.read_text().splitlines() == ["# schema: mixing_curve v1", "t,d_t", "0,0.75"]

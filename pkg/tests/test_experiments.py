import json
import math

import msgspec
import numpy as np
import pytest

from backend.app.config.config import get_settings
from backend.app.config.presets import PRESETS, get_preset
from backend.app.experiments import (
    EXPERIMENTS,
    McRecord,
    McReport,
    SpectralReport,
    TableReport,
    emit_report,
    load_report,
    mc_aggregates,
    render_csv,
    resolve_config,
    run_experiment,
)
from backend.app.experiments.runners import build_context
from backend.app.experiments.statistics import (
    aggregate,
    histogram,
    loglog_slope,
    qq_correlation,
    qq_pairs,
    standardize,
    tail_fraction,
)
from backend.app.models.sensing import load_measurements
from backend.app.utils.errors import ArgumentError, ParseError, ReportIOError

SMALL = {"h": 0.125, "tau": 0.125, "sensors_k": 6, "sigma": 0.01, "seed": 5}


def small_config(experiment, **overrides):
    return resolve_config(experiment, overrides={**SMALL, **overrides})


# Configuration


def test_presets_are_registered():
    assert set(PRESETS) == {"two_bump", "sine_mode", "indicator_block"}
    assert get_preset("two_bump").l2_norm() == pytest.approx(0.54, rel=1e-6)
    assert get_preset("sine_mode").l2_norm() == pytest.approx(0.5, rel=1e-5)
    with pytest.raises(ArgumentError):
        get_preset("gaussian_blob")


def test_resolve_config_precedence(tmp_path):
    manifest = tmp_path / "mc.json"
    manifest.write_text(json.dumps({"replications": 7, "sigma": 0.02, "experiment": "eig_study"}))

    defaults = resolve_config("mc_study")
    assert defaults.replications == 100
    assert defaults.out == str(get_settings().output_dir)

    from_file = resolve_config("mc_study", manifest)
    assert from_file.experiment == "mc_study"
    assert (from_file.replications, from_file.sigma) == (7, 0.02)

    overridden = resolve_config("mc_study", manifest, {"replications": 9, "sigma": None})
    assert (overridden.replications, overridden.sigma) == (9, 0.02)


def test_experiment_defaults():
    assert resolve_config("eig_study").h == 1 / 16
    rate = resolve_config("rate_check")
    assert (rate.sigma, rate.replications, rate.n_ladder) == (0.01, 20, [2500, 10000, 40000])
    assert resolve_config("invert").sweep_lambdas[0] == 0.1


def test_resolve_config_rejects_bad_input(tmp_path):
    with pytest.raises(ArgumentError):
        resolve_config("warp_drive")
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"mesh": 0.1})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"sigma": "loud"})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"h": -0.1})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"lambda_mode": "fixed"})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"lambdas": [1e-3, 0.0]})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"schema_version": 2})
    with pytest.raises(ArgumentError):
        resolve_config("invert", overrides={"source_preset": "gaussian_blob"})

    with pytest.raises(ReportIOError):
        resolve_config("invert", tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{\"h\": ")
    with pytest.raises(ParseError):
        resolve_config("invert", broken)
    listed = tmp_path / "listed.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ParseError):
        resolve_config("invert", listed)


# Statistics


def test_aggregate_and_standardize():
    stats = aggregate([1.0, 2.0, 3.0])
    assert (stats.mean, stats.std) == (2.0, 1.0)
    assert aggregate([4.0]).std == 0.0
    assert np.allclose(standardize([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])
    assert np.all(standardize([5.0, 5.0]) == 0.0)
    with pytest.raises(ArgumentError):
        aggregate([])


def test_qq_pairs_use_midpoint_probabilities():
    sample, normal = qq_pairs([3.0, 1.0, 2.0])
    assert np.allclose(sample, [-1.0, 0.0, 1.0])
    assert normal[1] == pytest.approx(0.0, abs=1e-15)
    assert normal[2] == pytest.approx(0.9674215661017009, rel=1e-12)
    assert qq_correlation(sample, normal) == pytest.approx(1.0)
    flat_sample, flat_normal = qq_pairs([2.0, 2.0, 2.0])
    assert qq_correlation(flat_sample, flat_normal) is None


def test_gaussian_sample_passes_the_normality_checks(rng):
    values = rng.normal(1.0, 0.1, size=2000)
    sample, normal = qq_pairs(values)
    assert qq_correlation(sample, normal) > 0.99
    assert tail_fraction(values) < 0.01


def test_histogram_and_slope():
    edges, counts = histogram([0.0, 0.5, 1.0, 1.0], bins=2)
    assert np.allclose(edges, [0.0, 0.5, 1.0])
    assert counts.tolist() == [1, 3]
    assert loglog_slope([1.0, 10.0, 100.0], [2.0, 200.0, 20000.0]) == pytest.approx(2.0)
    with pytest.raises(ArgumentError):
        loglog_slope([1.0], [1.0])
    with pytest.raises(ArgumentError):
        loglog_slope([1.0, 2.0], [0.0, 1.0])


# Reports


def make_mc_report(records):
    values = [r.pred_err_n for r in records]
    sample, normal = qq_pairs(values)
    edges, counts = histogram(values, 4)
    return McReport(
        records=records,
        aggregates=mc_aggregates(records),
        qq_sample=sample.tolist(),
        qq_normal=normal.tolist(),
        qq_correlation=qq_correlation(sample, normal),
        tail_fraction=tail_fraction(values),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
        rho0=0.55,
    )


def mc_records():
    return [
        McRecord(replication=r, seed=r + 10, lam=1e-4, pred_err_n=e, l2_err=2 * e, hminus1_err=e / 2, residual_n=0.01)
        for r, e in enumerate([0.011, 0.013, 0.012])
    ]


def test_empty_table_writes_header_only(tmp_path):
    report = TableReport(experiment="lambda_sweep", columns=["lambda", "pred_err_n"], rows=[])
    assert render_csv(report) == "lambda,pred_err_n\n"
    csv_path, json_path = emit_report(report, tmp_path / "out")
    assert csv_path.read_text() == "lambda,pred_err_n\n"
    assert isinstance(load_report(json_path), TableReport)


def test_csv_cells_round_trip_doubles():
    value = 0.1 + 0.2
    report = TableReport(experiment="invert", columns=["a", "b", "c"], rows=[[value, 3, None]])
    line = render_csv(report).splitlines()[1]
    cell_a, cell_b, cell_c = line.split(",")
    assert float(cell_a) == value
    assert (cell_b, cell_c) == ("3", "")


def test_mc_report_reloads_with_consistent_aggregates(tmp_path):
    report = make_mc_report(mc_records())
    _, json_path = emit_report(report, tmp_path)
    loaded = load_report(json_path)
    assert isinstance(loaded, McReport)
    assert loaded.records == report.records
    assert loaded.aggregates["pred_err_n"].mean == pytest.approx(0.012)
    columns, rows = loaded.table()
    assert columns[:2] == ["replication", "seed"]
    assert len(rows) == 3


def test_load_report_rejects_tampered_aggregates(tmp_path):
    report = make_mc_report(mc_records())
    _, json_path = emit_report(report, tmp_path)
    document = json.loads(json_path.read_text())
    document["aggregates"]["pred_err_n"]["mean"] = 1.0
    json_path.write_text(json.dumps(document))
    with pytest.raises(ParseError):
        load_report(json_path)

    document = json.loads(emit_report(report, tmp_path / "second")[1].read_text())
    document["qq_sample"] = document["qq_sample"][:2]
    json_path.write_text(json.dumps(document))
    with pytest.raises(ParseError):
        load_report(json_path)


def test_load_report_errors(tmp_path):
    with pytest.raises(ReportIOError):
        load_report(tmp_path / "nothing.json")
    unknown = tmp_path / "unknown.json"
    unknown.write_bytes(msgspec.json.encode({"type": "histogram", "experiment": "x"}))
    with pytest.raises(ParseError):
        load_report(unknown)


def test_emit_report_reports_unwritable_directory(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(ReportIOError):
        emit_report(TableReport(experiment="invert", columns=["a"], rows=[]), blocker / "out")


# Runners


def test_forward_check_falls_back_to_a_spectral_preset():
    report = run_experiment(small_config("forward_check", tau=1 / 16, sensors_k=5))
    assert report.summary["source_preset"] == "sine_mode"
    assert [row[0] for row in report.rows] == [0.125, 0.0625]
    assert report.rows[1][4] < report.rows[0][4]
    assert report.summary["l2_ratio"] > 2.0


def test_forward_check_l2_error_ratio_is_second_order():
    report = run_experiment(small_config("forward_check", h=1 / 16, tau=1 / 64, sensors_k=5))
    assert 3.0 <= report.summary["l2_ratio"] <= 5.0
    assert report.summary["sampled_relative_error"] <= 5e-2


def test_invert_writes_and_reuses_measurements(tmp_path):
    cfg = small_config("invert")
    report = run_experiment(cfg, save_data=tmp_path / "measurements.json")
    assert report.columns == ["dof", "x", "y", "f_h", "f_true"]
    assert len(report.rows) == 49
    assert report.summary["lambda"] > 0
    assert report.summary["solver"] == "dense"
    assert report.summary["hminus1_err"] <= report.summary["l2_err"]

    data = load_measurements(tmp_path / "measurements.json")
    reused = run_experiment(cfg, data=data)
    assert reused.rows[0][3] == pytest.approx(report.rows[0][3], rel=1e-9)
    assert reused.rows[0][4] is None
    assert "l2_err" not in reused.summary
    assert reused.summary["pred_err_n"] == pytest.approx(report.summary["pred_err_n"], rel=1e-9)


def test_measurement_files_are_only_for_data_experiments(tmp_path):
    with pytest.raises(ArgumentError):
        run_experiment(small_config("lambda_sweep"), save_data=tmp_path / "m.json")


def test_build_context_uses_dataset_noise(tmp_path):
    cfg = small_config("invert", noise_kind="uniform_bounded", sigma=0.02)
    run_experiment(cfg, save_data=tmp_path / "m.json")
    data = load_measurements(tmp_path / "m.json")
    ctx = build_context(small_config("invert"), data=data)
    assert ctx.noise.kind.value == "uniform_bounded"
    assert ctx.noise.sigma == 0.02


def test_select_lambda_records_the_iteration():
    report = run_experiment(small_config("select_lambda", max_lambda_iterations=30))
    assert report.columns[:2] == ["iteration", "lambda"]
    assert report.summary["iterations"] == len(report.rows)
    assert report.summary["stop_reason"] in ("converged", "max_iterations")
    if report.summary["converged"]:
        assert report.summary["identity_relative_gap"] <= 1e-8
    assert report.summary["rule_lambda"] > 0


def test_lambda_sweep_summary():
    report = run_experiment(small_config("lambda_sweep", lambdas=[1e-2, 1e-4, 1e-6]))
    assert [row[0] for row in report.rows] == [1e-2, 1e-4, 1e-6]
    assert report.summary["argmin_lambda"] in (1e-2, 1e-4, 1e-6)
    assert report.summary["min_pred_err_n"] == min(row[1] for row in report.rows)
    assert report.summary["argmin_vs_rule_decades"] >= 0.0


def test_mc_study_without_noise_has_identical_records():
    cfg = small_config("mc_study", replications=2, sigma=0.0, lambdas=[1e-3], lambda_mode="fixed")
    report = run_experiment(cfg)
    first, second = report.records
    assert first.pred_err_n == second.pred_err_n
    assert first.seed != second.seed
    assert report.aggregates["pred_err_n"].std == 0.0
    assert report.qq_correlation is None
    assert report.tail_fraction == 0.0


def test_mc_study_is_independent_of_worker_count():
    one = run_experiment(small_config("mc_study", replications=6, workers=1))
    three = run_experiment(small_config("mc_study", replications=6, workers=3))
    assert one.records == three.records
    assert [r.replication for r in one.records] == list(range(6))
    assert len(one.qq_sample) == 6
    assert sum(one.histogram_counts) == 6
    assert one.rho0 == pytest.approx(0.54 + 0.01 / 6)


def test_mc_study_needs_two_replications():
    with pytest.raises(ArgumentError):
        run_experiment(small_config("mc_study", replications=1))


def test_rule_lambda_needs_noise():
    with pytest.raises(ArgumentError):
        run_experiment(small_config("invert", sigma=0.0))


def test_rate_check_single_rung_is_flagged():
    report = run_experiment(small_config("rate_check", n_ladder=[16], replications=2))
    assert len(report.rows) == 1
    assert report.summary["insufficient_ladder"] is True
    assert report.summary["slope"] is None
    sigma, n, lam, sqrt_lam = report.rows[0][:4]
    assert (sigma, n) == (0.01, 16)
    assert sqrt_lam == pytest.approx(math.sqrt(lam))


def test_rate_check_fits_a_slope_per_sigma_factor():
    report = run_experiment(small_config("rate_check", n_ladder=[16, 64], replications=2, sigma_factors=[1.0, 2.0]))
    assert len(report.rows) == 4
    assert set(report.summary["slopes"]) == {"1.0", "2.0"}
    assert isinstance(report.summary["slope"], float)
    assert len(report.summary["sigma_ratios"]["2.0"]) == 2
    assert report.summary["expected_sigma_ratios"]["2.0"] == pytest.approx(2 ** (2 / 3))
    assert report.summary["expected_sigma_ratios"]["1.0"] == 1.0


def test_eig_study_matches_the_first_spectral_value():
    report = run_experiment(resolve_config("eig_study"))
    assert isinstance(report, SpectralReport)
    assert report.k == list(range(1, 21))
    assert np.all(np.diff(report.eigenvalues) >= 0)
    assert report.summary["rho1_expected"] == pytest.approx(389.6, rel=1e-3)
    assert report.summary["rho1_relative_error"] <= 0.05
    assert report.slope >= 1.8
    assert report.reference_slope == 2.0


def test_eig_study_rejects_large_meshes():
    with pytest.raises(ArgumentError):
        run_experiment(resolve_config("eig_study", overrides={"h": 1 / 32}))


RERUN_OVERRIDES = {
    "forward_check": {"tau": 1 / 16, "sensors_k": 5},
    "lambda_sweep": {"lambdas": [1e-2, 1e-4]},
    "mc_study": {"replications": 3},
    "rate_check": {"n_ladder": [16, 36], "replications": 2},
}


@pytest.mark.parametrize("experiment", EXPERIMENTS)
def test_reruns_are_byte_identical(experiment, tmp_path):
    cfg = small_config(experiment, **RERUN_OVERRIDES.get(experiment, {}))
    first = emit_report(run_experiment(cfg), tmp_path / "first")
    second = emit_report(run_experiment(cfg), tmp_path / "second")
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_noiseless_sweep_error_decreases_with_lambda():
    lambdas = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
    report = run_experiment(small_config("lambda_sweep", sigma=0.0, sensors_k=10, lambdas=lambdas))
    errors = [row[1] for row in report.rows]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(errors, errors[1:]))
    for _, pred_err_n, _, _, residual_n, _ in report.rows:
        assert pred_err_n == pytest.approx(residual_n, rel=1e-9)
    assert "rule_lambda" not in report.summary


def test_matrix_free_context_uses_the_probed_jacobi_preconditioner():
    ctx = build_context(small_config("invert", solver="cg"))
    assert ctx.method == "cg"
    assert ctx.cg.preconditioner == "jacobi"
    assert ctx.solver()._gram_diagonal is not None
    dense = build_context(small_config("invert"))
    assert dense.method == "dense"
    assert dense.cg.preconditioner == "none"

    fixed = {"lambdas": [1e-3], "lambda_mode": "fixed"}
    by_cg = run_experiment(small_config("invert", solver="cg", **fixed))
    by_dense = run_experiment(small_config("invert", **fixed))
    assert by_cg.summary["solver"] == "cg"
    assert by_cg.summary["cg_iterations"] > 0
    coefficients = np.array([row[3] for row in by_dense.rows])
    got = np.array([row[3] for row in by_cg.rows])
    assert np.abs(got - coefficients).max() <= 1e-6 * max(1.0, np.abs(coefficients).max())


def test_run_experiment_rejects_unknown_names():
    cfg = msgspec.structs.replace(small_config("invert"), experiment="eig-study")
    with pytest.raises(ArgumentError):
        run_experiment(cfg)


# Desk-scale acceptance studies


@pytest.mark.slow
def test_fixed_point_selection_at_desk_scale():
    report = run_experiment(resolve_config("select_lambda", overrides={"sigma": 0.001}))
    assert report.summary["converged"]
    assert report.summary["iterations"] <= 20
    assert report.summary["identity_relative_gap"] <= 1e-8
    assert report.summary["residual_over_sigma"] == pytest.approx(1.0, abs=0.1)


@pytest.mark.slow
def test_sweep_argmin_is_near_the_rule_value():
    report = run_experiment(resolve_config("lambda_sweep", overrides={"sigma": 0.1}))
    assert report.summary["rule_lambda"] == pytest.approx(2.3e-4, rel=0.05)
    assert report.summary["argmin_vs_rule_decades"] <= 1.0
    assert report.summary["argmin_vs_fixed_point_decades"] <= 1.0


@pytest.mark.slow
def test_prediction_error_is_close_to_gaussian():
    report = run_experiment(resolve_config("mc_study", overrides={"replications": 500, "sigma": 0.001, "seed": 7}))
    assert report.qq_correlation >= 0.98
    assert report.tail_fraction <= 0.01


@pytest.mark.slow
def test_prediction_error_scales_with_sqrt_lambda():
    report = run_experiment(resolve_config("rate_check", overrides={"sigma_factors": [1.0, 2.0]}))
    assert 0.8 <= report.summary["slope"] <= 1.2
    expected = report.summary["expected_sigma_ratios"]["2.0"]
    for ratio in report.summary["sigma_ratios"]["2.0"]:
        assert ratio == pytest.approx(expected, rel=0.2)

import logging

from flask import Blueprint, Response, jsonify, request

from backend.app.config.config import get_settings
from backend.app.config.presets import PRESETS
from backend.app.experiments.config import resolve_config
from backend.app.experiments.reports import emit_report
from backend.app.experiments.runners import run_experiment
from backend.app.utils.decorators import json_errors
from backend.app.utils.errors import ArgumentError, ReportIOError
from backend.app.utils.run_registry import last_csv, list_runs, record_run

logger = logging.getLogger(__name__)

experiments_blueprint = Blueprint("experiments", __name__)


@experiments_blueprint.route("/presets", methods=["GET"])
def get_presets():
    """List the registered true sources."""
    presets = [
        {
            "name": preset.name,
            "description": preset.description,
            "l2_norm": preset.l2_norm(),
            "spectral": preset.spectral is not None,
        }
        for preset in PRESETS.values()
    ]
    return jsonify({"presets": presets}), 200


@experiments_blueprint.route("/runs", methods=["GET"])
def get_runs():
    """Recent runs, oldest first."""
    return jsonify({"runs": list_runs()}), 200


@experiments_blueprint.route("/<string:experiment>", methods=["POST"])
@json_errors
def post_experiment(experiment):
    """
    Run an experiment synchronously. The JSON body holds config overrides, e.g.
    {"h": 0.0625, "sensors_k": 20, "sigma": 0.01, "seed": 3}.
    """
    name = experiment.replace("-", "_")
    body = request.get_json(silent=True)
    if body is None:
        body = {}
    if not isinstance(body, dict):
        raise ArgumentError("request body must be a JSON object of config overrides")
    logger.info(f"HTTP run of {name} with overrides {sorted(body)}")

    settings = get_settings()
    cfg = resolve_config(name, overrides=body, settings=settings)
    report = run_experiment(cfg, settings)
    csv_path, json_path = emit_report(report, cfg.out)
    entry = {"experiment": name, "csv": str(csv_path), "json": str(json_path), "summary": report.summary}
    record_run(entry)
    return jsonify(entry), 201


@experiments_blueprint.route("/<string:experiment>/csv", methods=["GET"])
@json_errors
def get_experiment_csv(experiment):
    """Download the CSV table of the latest run of an experiment."""
    name = experiment.replace("-", "_")
    path = last_csv(name)
    if path is None:
        return jsonify({"error": "No run recorded", "details": f"no {name} run in this process"}), 404
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as e:
        raise ReportIOError(f"cannot read {path}: {e}") from e
    return Response(
        text,
        mimetype="text/csv",
        headers={"Content-Disposition": f"attachment; filename={name}.csv"},
    )

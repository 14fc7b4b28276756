from .config import EXPERIMENTS, ExperimentConfig, resolve_config
from .reports import (
    McRecord,
    McReport,
    Report,
    SpectralReport,
    TableReport,
    emit_report,
    load_report,
    mc_aggregates,
    render_csv,
    render_json,
)
from .runners import RUNNERS, run_experiment

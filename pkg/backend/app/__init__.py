"""
Flask application factory for the heat-source inversion service.
"""

import logging

from flask import Flask, jsonify

from backend.app.config.config import configure_logging, get_settings


def create_app():
    """
    Build the Flask application: logging, the experiments blueprint and a health route.
    """
    from backend.app.config.presets import PRESETS
    from backend.app.experiments.config import EXPERIMENTS
    from backend.app.routes.experiments import experiments_blueprint

    settings = get_settings()
    configure_logging(settings.log_level)
    logging.info("Starting application initialization")

    app = Flask(__name__)
    app.register_blueprint(experiments_blueprint, url_prefix="/api/experiments")

    @app.route("/")
    def home():
        """Service information."""
        return jsonify(
            {
                "service": "heatsource",
                "experiments": list(EXPERIMENTS),
                "presets": sorted(PRESETS),
                "output_dir": str(settings.output_dir),
            }
        )

    logging.info("Application ready")
    return app

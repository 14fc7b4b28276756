import logging
import time
from functools import wraps

import click
from flask import jsonify

from backend.app.utils.errors import HeatSourceError

logger = logging.getLogger(__name__)


def log_duration(f):
    """Log the wall time of an experiment runner."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        start = time.perf_counter()
        logger.info(f"{f.__name__} started")
        result = f(*args, **kwargs)
        logger.info(f"{f.__name__} finished in {time.perf_counter() - start:.2f}s")
        return result

    return decorated_function


def exit_on_error(f):
    """Turn toolkit errors raised by a CLI command into `Error: ...` on stderr and the matching exit code."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except HeatSourceError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(e.exit_code)

    return decorated_function


def json_errors(f):
    """Turn toolkit errors raised by a view into a JSON error body with the matching status code."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except HeatSourceError as e:
            logger.warning(f"{f.__name__} failed: {e}")
            return jsonify({"error": type(e).__name__, "details": str(e)}), e.status_code

    return decorated_function

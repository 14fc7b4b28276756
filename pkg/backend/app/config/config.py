"""
Runtime settings read from the environment (and an optional .env file) plus logging setup.
"""

import logging
import os
import sys
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv

from backend.app.utils.errors import ArgumentError

LOG_FORMAT = "[%(levelname)s] %(name)s - %(message)s"


@dataclass(frozen=True)
class Settings:
    """
    Environment-level defaults.

    Args:
        output_dir (Path): Default report directory (HEATSRC_OUT_DIR)
        log_level (str): Logging level name (HEATSRC_LOG_LEVEL)
        workers (int): Default thread count for replications (HEATSRC_WORKERS)
        dense_dof_limit (int): Largest n_dof for the automatic dense path (HEATSRC_DENSE_DOF_LIMIT)
    """

    output_dir: Path = Path("results")
    log_level: str = "INFO"
    workers: int = 1
    dense_dof_limit: int = 2500

    @classmethod
    def from_env(cls) -> "Settings":
        load_dotenv()
        try:
            workers = int(os.getenv("HEATSRC_WORKERS", "1"))
            dense_dof_limit = int(os.getenv("HEATSRC_DENSE_DOF_LIMIT", "2500"))
        except ValueError as exc:
            raise ArgumentError(f"invalid integer in environment: {exc}") from exc
        if workers < 1:
            raise ArgumentError(f"HEATSRC_WORKERS must be >= 1, got {workers}")
        return cls(
            output_dir=Path(os.getenv("HEATSRC_OUT_DIR", "results")),
            log_level=os.getenv("HEATSRC_LOG_LEVEL", "INFO").upper(),
            workers=workers,
            dense_dof_limit=dense_dof_limit,
        )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings.from_env()


def configure_logging(level: str = "INFO") -> None:
    """Send log records to stdout with a bracketed level prefix."""
    logging.basicConfig(stream=sys.stdout, level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)

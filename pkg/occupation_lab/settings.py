# occupation_lab/settings.py
import os
import logging
import dotenv
dotenv.load_dotenv()

from typing import Optional

from .errors import ConfigurationError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

SEED_ENV = "OCCUPATION_LAB_SEED"
WORKERS_ENV = "OCCUPATION_LAB_WORKERS"
LOG_LEVEL_ENV = "OCCUPATION_LAB_LOG_LEVEL"


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for an entry point (CLI or HTTP app)."""
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT)


def seed_override() -> Optional[int]:
    """
    Seed from the environment, if set.

    Returns:
        The integer value of OCCUPATION_LAB_SEED, or None when unset.
    """
    raw = os.getenv(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}")
    if value < 0:
        raise ConfigurationError(f"{SEED_ENV} must be nonnegative, got {value}")
    return value


def default_workers() -> int:
    raw = os.getenv(WORKERS_ENV)
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def environment_status() -> dict:
    """Which lab environment variables are set (for the health endpoint)."""
    return {
        name: "✓ Set" if os.getenv(name) else "✗ Missing"
        for name in (SEED_ENV, WORKERS_ENV, LOG_LEVEL_ENV)
    }

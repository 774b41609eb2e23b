import os
from dataclasses import dataclass

from .errors import InputError

DEFAULT_RUN_DIR = "runs"


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    threads: int = 1
    run_dir: str = DEFAULT_RUN_DIR
    log_level: str = "INFO"


def _int_env(name, default):
    value = os.getenv(name)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise InputError(f"{name} must be an integer, got {value!r}") from None


def load_settings():
    """Process settings from the environment (main.py loads .env first)."""
    threads = _int_env("SYNCHRONY_THREADS", os.cpu_count() or 1)
    if threads < 1:
        raise InputError(f"SYNCHRONY_THREADS must be at least 1, got {threads}")
    return Settings(
        seed=_int_env("SYNCHRONY_SEED", 0),
        threads=threads,
        run_dir=os.getenv("SYNCHRONY_RUN_DIR") or DEFAULT_RUN_DIR,
        log_level=(os.getenv("SYNCHRONY_LOG_LEVEL") or "INFO").upper(),
    )

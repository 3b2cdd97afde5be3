"""Process configuration via environment variables."""

from __future__ import annotations

from functools import lru_cache

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Central configuration loaded from .env / environment variables."""

    # ── Application ──
    APP_NAME: str = "quadlab"
    APP_ENV: str = "development"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # ── Execution ──
    QUADLAB_THREADS: int = Field(1, ge=1)
    EVAL_CHUNK_SIZE: int = Field(256, gt=0)
    SWEEP_EXECUTOR: str = "local"  # local | celery

    # ── Paths ──
    OUTPUT_DIR: str = "results"
    BENCHMARK_DIR: str = "benchmark"

    # ── Celery ──
    CELERY_BROKER_URL: str = "redis://localhost:6379/1"
    CELERY_RESULT_BACKEND: str = "redis://localhost:6379/2"

    @field_validator("SWEEP_EXECUTOR")
    @classmethod
    def _known_executor(cls, v: str) -> str:
        v = v.strip().lower()
        if v not in ("local", "celery"):
            raise ValueError(f"SWEEP_EXECUTOR must be 'local' or 'celery', got {v!r}")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def _upper_level(cls, v: str) -> str:
        return v.strip().upper()

    @property
    def use_celery(self) -> bool:
        return self.SWEEP_EXECUTOR == "celery"

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": True,
    }


@lru_cache()
def get_settings() -> Settings:
    """Cached settings singleton."""
    return Settings()

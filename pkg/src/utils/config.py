"""
Process settings.

Read once from SCN_* environment variables (and an optional .env.local).
Run-level knobs such as the instance, solver and noise suite are not settings;
they live in src.run_config and come from JSON config files.
"""

from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SCN_",
        env_file=".env.local",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    environment: str = Field(default="development", description="development or production")

    # Logging
    log_level: str = Field(default="INFO", description="Root log level")
    log_file: Optional[Path] = Field(default=None, description="Rotating log file, if any")
    json_logs: bool = Field(default=False, description="JSON lines instead of console output")

    # Runs
    output_dir: Path = Field(default=Path("runs/latest"), description="Default artifact directory")
    workers: int = Field(default=1, ge=1, description="Worker processes per noise ensemble")

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """Any case is accepted; unknown names fall back to INFO."""
        level = str(v).upper()
        return level if level in LOG_LEVELS else "INFO"

    @property
    def is_development(self) -> bool:
        return self.environment.lower() == "development"

    def ensure_directories(self) -> None:
        """Create the output directory and the log file's directory."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if self.log_file is not None:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)


@lru_cache
def get_settings() -> Settings:
    """
    Cached settings.

    Tests that change the environment call get_settings.cache_clear().
    """
    return Settings()


settings = get_settings()

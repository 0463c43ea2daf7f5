import logging
from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Settings(BaseSettings):
    """Process-level settings read from the environment (or a .env file)."""

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    log_level: str = Field("INFO", validation_alias="LOG_LEVEL")
    database_url: str = Field(
        "sqlite+aiosqlite:///./djepa_runs.db", validation_alias="DATABASE_URL"
    )
    cache_dir: Path = Field(Path("./.djepa_cache"), validation_alias="DJEPA_CACHE_DIR")
    device: str = Field("cpu", validation_alias="DJEPA_DEVICE")


@lru_cache
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once for CLI and API entry points."""
    level_name = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
    )

# src/config/settings.py
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        populate_by_name=True,
        extra="ignore",
    )

    # Logging
    log_level: str = Field("INFO", alias="LOG_LEVEL")

    # Report output
    output_dir: str = Field("./stiv_reports", alias="STIV_OUTPUT_DIR")

    # Numerical defaults
    max_workers: int = Field(4, alias="STIV_MAX_WORKERS", ge=1)
    zero_clip: float = Field(1e-6, alias="STIV_ZERO_CLIP", gt=0)
    lp_backend: Literal["native", "highs"] = Field("native", alias="STIV_LP_BACKEND")
    block_limit: int = Field(12, alias="STIV_BLOCK_LIMIT", ge=1)

    # Failed programs are written here when set
    dump_dir: Optional[str] = Field(None, alias="STIV_DUMP_DIR")


# Create a global settings instance
settings = Settings()

"""Process-level settings read from the environment and ``.env``."""

from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class HarnessSettings(BaseSettings):
    """Settings for the experiment harness.

    Every field can be overridden with a ``FEDEM_``-prefixed variable,
    e.g. ``FEDEM_OUTPUT_ROOT=/scratch/runs``.
    """

    model_config = SettingsConfigDict(env_prefix="FEDEM_", env_file=".env", extra="ignore")

    # Where run directories go when a manifest gives a relative output_dir
    output_root: Optional[Path] = None

    log_level: str = "INFO"
    progress: bool = False

    # Wall time makes rounds.csv differ between runs
    record_wall_time: bool = False

    # Client threads; overrides the manifest when set
    workers: Optional[int] = Field(default=None, ge=1)

    # MLflow
    track_mlflow: bool = False
    mlflow_tracking_uri: Optional[str] = None
    mlflow_experiment: str = "fedem-simulator"

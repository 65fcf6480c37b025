import logging
from typing import Optional
from pydantic import field_validator
from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    """Process-level settings.

    Experiment hyperparameters live in ``app.schemas.config``; these are the
    knobs that belong to the environment a run is launched from.

    Args:
        DEBUG: Enable debug logging regardless of LOG_LEVEL
        LOG_LEVEL: Root logging level name
        SEED: Overrides the seed of every resolved run config when set
        DATA_DIR: Default directory for generated datasets
        RUNS_DIR: Default directory for run outputs
    """
    # Application Settings
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Reproducibility
    SEED: Optional[int] = None

    # Storage Settings
    DATA_DIR: str = "data"
    RUNS_DIR: str = "runs"

    @field_validator("LOG_LEVEL")
    def validate_log_level(cls, v: str) -> str:
        """Validate the logging level name.

        Args:
            v: The level name to validate.

        Returns:
            The upper-cased level name.

        Raises:
            ValueError: If the level is not a known logging level.
        """
        level = v.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"Unknown log level: {v}")
        return level

    @property
    def log_level(self) -> int:
        """Get the effective numeric logging level.

        Returns:
            logging.DEBUG when DEBUG is set, otherwise LOG_LEVEL.
        """
        return logging.DEBUG if self.DEBUG else logging.getLevelName(self.LOG_LEVEL)

    class Config:
        env_file = ".env"
        env_prefix = "LMIM_"
        case_sensitive = True
        extra = "ignore"

# Create a global settings instance
settings = Settings()

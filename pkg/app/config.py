from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Process-level settings loaded from environment variables.

    Only presentation concerns live here (logging, default output root).
    Everything that changes a numerical result belongs in the run
    configuration file, so a run directory alone is enough to reproduce it.
    """

    # Application config
    app_name: str = "FP8 Federated Learning Simulator"

    # Logging config
    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Output config
    default_out_dir: str = "runs"

    # tells Pydantic to read from .env
    model_config = SettingsConfigDict(
        env_prefix="FP8FL_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Creating a global settings instance which can be imported elsewhere
settings = Settings()

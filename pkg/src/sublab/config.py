import os
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load .env file
load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="SSL_", extra="ignore")

    # Execution
    THREADS: int = Field(default=1, ge=1)
    MC_BLOCK_SIZE: int = Field(default=2048, ge=1)

    # Logging
    LOG_LEVEL: str = "INFO"

    # Outputs
    OUTPUT_DIR: str = "./runs"
    RECORD_TIMING: bool = False


settings = Settings()


# --- Run configuration (JSON, schema-validated) ---

CheckName = Literal[
    "conditions",
    "symbol_duality",
    "monotonicity",
    "refinement",
    "semigroup",
    "generator_limit",
    "representation",
    "feller",
    "maximal_inequality",
]

ALL_CHECKS: List[str] = list(CheckName.__args__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioSelection(_Strict):
    name: str
    params: Dict[str, Any] = Field(default_factory=dict)


class GridOverride(_Strict):
    lo: List[float]
    hi: List[float]
    n: List[int]

    @model_validator(mode="after")
    def _consistent(self) -> "GridOverride":
        if not (len(self.lo) == len(self.hi) == len(self.n)):
            raise ValueError("grid lo/hi/n must have the same length")
        return self


class SchemeSettings(_Strict):
    cfl_safety: float = Field(default=0.9, gt=0.0, le=1.0)
    kappa: float = Field(default=0.5, gt=0.0, lt=1.0)
    max_timestep: Optional[float] = Field(default=1e-2, gt=0.0)


class MonteCarloSettings(_Strict):
    n_paths: int = Field(default=20_000, ge=100)
    seed: int = Field(default=20240611, ge=0)
    n_steps: int = Field(default=100, ge=1)
    # extracted: solver argmax policy; best_constant: every constant policy; constant: `control` only
    policy: Literal["extracted", "best_constant", "constant"] = "extracted"
    control: int = Field(default=0, ge=0)


class RunConfig(_Strict):
    """Everything a batch run needs. Unknown keys are rejected."""

    scenario: ScenarioSelection
    grid: Optional[GridOverride] = None
    horizon: Optional[float] = Field(default=None, gt=0.0)
    output_times: Optional[List[float]] = None
    payoff: Optional[str] = None
    x0: Optional[List[float]] = None
    mc: MonteCarloSettings = Field(default_factory=MonteCarloSettings)
    scheme: SchemeSettings = Field(default_factory=SchemeSettings)
    checks: List[CheckName] = Field(default_factory=lambda: list(ALL_CHECKS))
    output_dir: Optional[str] = None

    @field_validator("output_times")
    @classmethod
    def _positive_increasing(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is None:
            return v
        if any(t <= 0 for t in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("output_times must be positive and strictly increasing")
        return v

    def resolved_output_dir(self) -> str:
        return self.output_dir or settings.OUTPUT_DIR


def load_run_config(path: str) -> RunConfig:
    """Reads and validates a JSON run config (raises pydantic.ValidationError / OSError)."""
    with open(os.fspath(path), "r", encoding="utf-8") as f:
        return RunConfig.model_validate_json(f.read())

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.federation import AggregationMode, CommunicationMode, ObjectiveQuantizer
from app.models.fp8 import Fp8Format
from app.models.training import LossKind, QuantMode

Task = Literal["simulate", "verify", "quantize", "report"]
BenchSuite = Literal["codec", "unbiasedness", "error_bounds", "ste", "qat", "fedavg"]
ALL_SUITES: Tuple[str, ...] = ("codec", "unbiasedness", "error_bounds", "ste", "qat", "fedavg")


class Section(BaseModel):
    """Base for config file sections: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


class RunSection(Section):
    task: Task = "simulate"
    seed: int = Field(default=0, ge=0)
    out_dir: str = Field(default="runs/default", description="Run directory (created if missing)")
    name: str = ""
    eval_every: int = Field(default=1, ge=1)
    log_every: int = Field(default=10, ge=0)


class ModelSection(Section):
    kind: Literal["linear", "logistic", "mlp"] = "mlp"
    hidden: List[int] = Field(default_factory=lambda: [32])
    loss: Optional[LossKind] = Field(default=None, description="Defaults to mse for linear, cross_entropy otherwise")
    quant_mode: QuantMode = "qat-det"
    bias: bool = True

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(h < 1 for h in value):
            raise ValueError("hidden widths must be >= 1")
        return value


class DataSection(Section):
    source: Literal["blobs", "csv", "quadratic"] = "blobs"
    classes: int = Field(default=10, ge=2)
    dims: int = Field(default=32, ge=1)
    n_train: int = Field(default=10000, ge=1)
    n_test: int = Field(default=2000, ge=1)
    separation: float = Field(default=3.0, gt=0.0)
    csv_path: Optional[str] = None
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    heterogeneity: float = Field(default=0.0, ge=0.0)
    noise: float = Field(default=0.1, ge=0.0)
    rows_per_client: int = Field(default=50, ge=1)


class PartitionSection(Section):
    scheme: Literal["iid", "dirichlet"] = "iid"
    concentration: float = Field(default=0.3, gt=0.0)
    clients: int = Field(default=100, ge=1)
    max_retries: int = Field(default=100, ge=1)


class FederatedSection(Section):
    participation: float = Field(default=0.1, gt=0.0, le=1.0)
    rounds: int = Field(default=300, ge=1)
    local_steps: int = Field(default=10, ge=1)
    local_epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=50, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    weight_decay: float = Field(default=0.001, ge=0.0)
    learn_clips: bool = True
    clip_floor: float = Field(default=1e-6, gt=0.0)


class ModesSection(Section):
    aggregation: AggregationMode = "uq"
    communication: CommunicationMode = "quantized-rand"


class Fp8Section(Section):
    exp_bits: int = 4
    man_bits: int = 3

    @model_validator(mode="after")
    def _check_layout(self) -> "Fp8Section":
        total = 1 + self.exp_bits + self.man_bits
        if self.exp_bits < 2 or self.man_bits < 1 or total != 8:
            raise ValueError(f"E{self.exp_bits}M{self.man_bits} is not an 8-bit layout with e >= 2, m >= 1")
        return self

    def format(self) -> Fp8Format:
        return Fp8Format(exp_bits=self.exp_bits, man_bits=self.man_bits)


class ServerOptSection(Section):
    gd_steps: int = Field(default=5, ge=1)
    lr_grid: List[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])
    alpha_grid_points: int = Field(default=50, ge=2)
    objective_quantizer: ObjectiveQuantizer = "rand-fixed-seed"
    alpha_objective_weights: Literal["updated", "previous"] = "updated"


class MetricsSection(Section):
    smoothing_window: int = Field(default=5, ge=1)
    record_wall_time: bool = False


class VerifySection(Section):
    """Sizes of the verification suites; defaults are the acceptance-scale settings."""

    suites: List[BenchSuite] = Field(default_factory=lambda: list(ALL_SUITES))
    tol: float = Field(default=0.1, ge=0.0)
    codec_alphas: int = Field(default=100, ge=1)
    unbias_points: int = Field(default=50, ge=1)
    unbias_draws: int = Field(default=100000, ge=10000)
    error_trials: int = Field(default=1000, ge=1000)
    error_draws: int = Field(default=200, ge=10)
    ste_trials: int = Field(default=200, ge=1)
    qat_dim: int = Field(default=10, ge=1)
    qat_horizons: List[int] = Field(default_factory=lambda: [1024, 4096, 16384])
    qat_seeds: int = Field(default=5, ge=1)
    fed_clients: int = Field(default=20, ge=1)
    fed_dim: int = Field(default=10, ge=1)
    fed_local_steps: int = Field(default=10, ge=1)
    fed_rounds: int = Field(default=500, ge=2)
    fed_seeds: int = Field(default=5, ge=1)
    fed_batch_size: int = Field(default=5, ge=1)
    fed_heterogeneity: float = Field(default=0.1, ge=0.0)

    @field_validator("qat_horizons")
    @classmethod
    def _two_horizons(cls, value: List[int]) -> List[int]:
        if len(value) < 2 or any(t < 2 for t in value):
            raise ValueError("need at least two horizons >= 2 to fit a slope")
        return sorted(value)


class RunConfig(Section):
    """Everything that determines a run's numbers; written back into each run directory."""

    run: RunSection = Field(default_factory=RunSection)
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    federated: FederatedSection = Field(default_factory=FederatedSection)
    modes: ModesSection = Field(default_factory=ModesSection)
    fp8: Fp8Section = Field(default_factory=Fp8Section)
    server_opt: ServerOptSection = Field(default_factory=ServerOptSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    verify: VerifySection = Field(default_factory=VerifySection)

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        if self.federated.participation * self.partition.clients < 1.0:
            raise ValueError("participation * clients must be at least 1")
        if self.data.source == "csv":
            if not self.data.csv_path:
                raise ValueError("data.csv_path is required when data.source = csv")
            if not Path(self.data.csv_path).is_file():
                raise ValueError(f"data.csv_path does not exist: {self.data.csv_path}")
        if self.modes.aggregation == "fp32-baseline" and self.modes.communication != "none":
            raise ValueError("modes.aggregation = fp32-baseline requires modes.communication = none")
        return self

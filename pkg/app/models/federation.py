from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.models.data import Dataset
from app.models.training import ParamSet

AggregationMode = Literal["uq", "uq+", "fp32-baseline"]
CommunicationMode = Literal["quantized-rand", "quantized-det", "none"]
ObjectiveQuantizer = Literal["rand-fixed-seed", "rand-resampled", "det"]


class ClientRecord(BaseModel):
    """Client k and its local shard D_k."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: int = Field(ge=0)
    shard: Dataset

    @property
    def n_k(self) -> int:
        return self.shard.size


class RoundPlan(BaseModel):
    """Active clients of round t (sorted ascending) and their example counts."""

    round: int = Field(ge=1)
    active: List[int]
    sizes: Dict[int, int]

    @property
    def m_t(self) -> int:
        return int(sum(self.sizes[k] for k in self.active))

    def weights(self) -> Dict[int, float]:
        m = self.m_t
        return {k: self.sizes[k] / m for k in self.active}


class GlobalState(BaseModel):
    """Server-side model w_t with its clips, plus the run's fixed modes."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParamSet
    round: int = 0
    aggregation: AggregationMode = "uq"
    communication: CommunicationMode = "quantized-rand"

    @property
    def quantized_links(self) -> bool:
        return self.communication != "none"


class ClientUpload(BaseModel):
    """
    What one client sends back after local training.

    `blobs` holds the serialized FP8 tensors (the clip travels in the blob
    header); `raw` holds the tensors sent in full precision. Activation clips
    are always sent unquantized.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    client_id: int
    n_k: int = Field(ge=1)
    blobs: Dict[str, bytes] = Field(default_factory=dict)
    raw: Dict[str, np.ndarray] = Field(default_factory=dict)
    weight_clips: Dict[str, float] = Field(default_factory=dict)
    act_clips: Dict[str, float] = Field(default_factory=dict)
    nbytes: int = Field(default=0, ge=0)


class ServerOptConfig(BaseModel):
    """Settings of the server-side alternating minimization (UQ+)."""

    gd_steps: int = Field(default=5, ge=1)
    lr_grid: Tuple[float, ...] = (0.01, 0.1, 1.0)
    alpha_grid_points: int = Field(default=50, ge=2)
    objective_quantizer: ObjectiveQuantizer = "rand-fixed-seed"
    alpha_objective_weights: Literal["updated", "previous"] = "updated"

    @field_validator("lr_grid")
    @classmethod
    def _positive_rates(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(not np.isfinite(lr) or lr <= 0 for lr in value):
            raise ValueError("lr_grid must hold positive learning rates")
        return tuple(float(lr) for lr in value)


class ServerOptResult(BaseModel):
    """Outcome of one server optimization pass, with its diagnostics."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensors: Dict[str, np.ndarray]
    alphas: Dict[str, float]
    mse_average: float
    mse_selected: float
    lrs: Dict[str, float] = Field(default_factory=dict, description="winning lr per tensor that did not fall back")
    fallback: bool = False

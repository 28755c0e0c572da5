import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

METRICS_COLUMNS = ["round", "uplink_bytes", "downlink_bytes", "cum_bytes", "eval_acc", "eval_loss", "wall_ms"]


class RoundEntry(BaseModel):
    """Byte counts and server evaluation of one round."""

    round: int = Field(ge=1)
    uplink_bytes: int = Field(ge=0)
    downlink_bytes: int = Field(ge=0)
    cum_bytes: int = Field(default=0, ge=0)
    eval_acc: float = math.nan
    eval_loss: float = math.nan
    wall_ms: float = 0.0

    # UQ+ diagnostics, empty for the other aggregation modes
    server_mse_average: Optional[float] = None
    server_mse_selected: Optional[float] = None
    server_lrs: Dict[str, float] = Field(default_factory=dict)
    server_fallback: bool = False

    @property
    def round_bytes(self) -> int:
        return self.uplink_bytes + self.downlink_bytes


class RoundLedger(BaseModel):
    """Append-only per-round record of a run."""

    name: str = ""
    entries: List[RoundEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_round(self) -> int:
        return self.entries[-1].round if self.entries else 0

    @property
    def accuracies(self) -> List[float]:
        return [e.eval_acc for e in self.entries]

    @property
    def cumulative_bytes(self) -> List[int]:
        return [e.cum_bytes for e in self.entries]

    @property
    def total_bytes(self) -> int:
        return self.entries[-1].cum_bytes if self.entries else 0


class GainReport(BaseModel):
    """Communication gain of a test run over a baseline at a shared accuracy threshold."""

    base_name: str = "base"
    test_name: str = "test"
    threshold: float
    window: int
    base_round: int
    test_round: int
    base_bytes: int
    test_bytes: int
    gain: float = Field(gt=0.0)

from .fp8 import ClipParam, Fp8Format, QuantError, QuantizedTensor, exponent_bias
from .data import Dataset, PartitionSpec, QuadraticProblem
from .training import GradSet, LayerSpec, LocalUpdateConfig, ModelSpec, ParamSet
from .federation import (
    ClientRecord, ClientUpload, GlobalState, RoundPlan, ServerOptConfig, ServerOptResult
)
from .ledger import METRICS_COLUMNS, GainReport, RoundEntry, RoundLedger
from .bench import BenchCheck, BenchReport
from .run_config import RunConfig, VerifySection

__all__ = [
    "ClipParam", "Fp8Format", "QuantError", "QuantizedTensor", "exponent_bias",
    "Dataset", "PartitionSpec", "QuadraticProblem",
    "GradSet", "LayerSpec", "LocalUpdateConfig", "ModelSpec", "ParamSet",
    "ClientRecord", "ClientUpload", "GlobalState", "RoundPlan",
    "ServerOptConfig", "ServerOptResult",
    "METRICS_COLUMNS", "GainReport", "RoundEntry", "RoundLedger",
    "BenchCheck", "BenchReport",
    "RunConfig", "VerifySection",
]

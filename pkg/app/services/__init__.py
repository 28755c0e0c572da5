from . import fp8_codec
from .rng import substream
from .qat_engine import backward_ste, evaluate_model, forward_qat, init_params, local_update
from .data_partition import partition, synth_classification, synth_quadratic
from .server_optimizer import ServerOptimizer
from .metrics_ledger import compute_gain, persist_run, record_round
from .fed_orchestrator import FederatedOrchestrator, RoundObserver
from .theory_bench import run_all
from .config_loader import dump_config, parse_config

__all__ = [
    "fp8_codec", "substream",
    "backward_ste", "evaluate_model", "forward_qat", "init_params", "local_update",
    "partition", "synth_classification", "synth_quadratic",
    "ServerOptimizer",
    "compute_gain", "persist_run", "record_round",
    "FederatedOrchestrator", "RoundObserver",
    "run_all",
    "dump_config", "parse_config",
]

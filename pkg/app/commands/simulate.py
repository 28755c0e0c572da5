import logging
from pathlib import Path
from typing import List, Tuple

from app.commands.common import EXIT_OK, exit_code_boundary
from app.exceptions import ConfigError
from app.models.data import Dataset, PartitionSpec
from app.models.federation import ClientRecord, ServerOptConfig
from app.models.run_config import RunConfig
from app.models.training import LocalUpdateConfig, ModelSpec
from app.services.config_loader import dump_config
from app.services.data_partition import (
    label_entropy,
    load_csv,
    partition,
    quadratic_clients,
    synth_classification,
    synth_quadratic,
    train_test_split,
)
from app.services.fed_orchestrator import FederatedOrchestrator
from app.services.metrics_ledger import persist_run

logger = logging.getLogger(__name__)


def build_data(cfg: RunConfig) -> Tuple[List[ClientRecord], Dataset]:
    """Client shards and the server's eval set described by the [data] and [partition] sections."""
    seed = cfg.run.seed
    data = cfg.data
    if data.source == "quadratic":
        problem = synth_quadratic(
            cfg.partition.clients,
            data.dims,
            data.heterogeneity,
            seed,
            rows_per_client=data.rows_per_client,
            noise=data.noise,
        )
        clients = quadratic_clients(problem)
        eval_data = Dataset(features=problem.stacked_matrix, labels=problem.stacked_targets)
        return clients, eval_data

    if data.source == "csv":
        train, test = train_test_split(load_csv(data.csv_path), data.test_fraction, seed)
    else:
        total = data.n_train + data.n_test
        full = synth_classification(data.classes, data.dims, total, data.separation, seed)
        train, test = train_test_split(full, data.n_test / total, seed)

    spec = PartitionSpec(
        scheme=cfg.partition.scheme,
        concentration=cfg.partition.concentration,
        clients=cfg.partition.clients,
        seed=seed,
        max_retries=cfg.partition.max_retries,
    )
    return partition(train, spec), test


def build_model(cfg: RunConfig, input_dim: int, num_classes: int) -> ModelSpec:
    """Model spec for the [model] section; regression data gets a single output."""
    m = cfg.model
    fmt = cfg.fp8.format()
    outputs = num_classes if num_classes > 0 else 1
    if m.kind == "linear":
        loss = m.loss or "mse"
        return ModelSpec.mlp(input_dim, [], outputs, loss=loss, bias=m.bias, quant_mode=m.quant_mode, fmt=fmt)
    if m.kind == "logistic":
        if num_classes == 0:
            raise ConfigError("model.kind = logistic needs class labels")
        return ModelSpec.logistic(input_dim, num_classes, bias=m.bias, quant_mode=m.quant_mode, fmt=fmt)
    loss = m.loss or ("cross_entropy" if num_classes > 0 else "mse")
    if loss == "cross_entropy" and num_classes == 0:
        raise ConfigError("cross_entropy loss needs class labels")
    return ModelSpec.mlp(input_dim, m.hidden, outputs, loss=loss, bias=m.bias, quant_mode=m.quant_mode, fmt=fmt)


def build_orchestrator(cfg: RunConfig, threads: int = 1) -> Tuple[FederatedOrchestrator, List[ClientRecord], Dataset]:
    clients, eval_data = build_data(cfg)
    spec = build_model(cfg, eval_data.input_dim, eval_data.num_classes)
    fed = cfg.federated
    local = LocalUpdateConfig(
        steps=fed.local_steps,
        lr=fed.lr,
        weight_decay=fed.weight_decay,
        batch_size=fed.batch_size,
        epochs=fed.local_epochs,
        learn_clips=fed.learn_clips,
        clip_floor=fed.clip_floor,
    )
    so = cfg.server_opt
    server_opt = ServerOptConfig(
        gd_steps=so.gd_steps,
        lr_grid=tuple(so.lr_grid),
        alpha_grid_points=so.alpha_grid_points,
        objective_quantizer=so.objective_quantizer,
        alpha_objective_weights=so.alpha_objective_weights,
    )
    orchestrator = FederatedOrchestrator(
        clients,
        spec,
        local,
        participation=fed.participation,
        aggregation=cfg.modes.aggregation,
        communication=cfg.modes.communication,
        seed=cfg.run.seed,
        server_opt=server_opt,
        threads=threads,
        eval_data=eval_data,
    )
    return orchestrator, clients, eval_data


@exit_code_boundary
def cmd_simulate(cfg: RunConfig, threads: int = 1) -> int:
    """Run the federated loop and write the run directory; 0 once the run completes."""
    orchestrator, clients, eval_data = build_orchestrator(cfg, threads)
    name = cfg.run.name or Path(cfg.run.out_dir).name
    ledger = orchestrator.run(
        cfg.federated.rounds,
        eval_every=cfg.run.eval_every,
        log_every=cfg.run.log_every,
        name=name,
    )

    extra = {
        "task": "simulate",
        "aggregation": cfg.modes.aggregation,
        "communication": cfg.modes.communication,
        "quant_mode": cfg.model.quant_mode,
        "format": cfg.fp8.format().name,
        "parameters": orchestrator.spec.parameter_count,
        "clients": len(clients),
        "active_per_round": orchestrator.active_per_round,
    }
    if eval_data.is_classification:
        extra["label_entropy"] = repr(label_entropy(clients, eval_data.num_classes))
    final_alphas = orchestrator.state.params.weight_clips
    for tensor_name in sorted(final_alphas):
        extra[f"alpha.{tensor_name}"] = repr(final_alphas[tensor_name].alpha)

    persist_run(
        cfg.run.out_dir,
        dump_config(cfg),
        ledger=ledger,
        record_wall_time=cfg.metrics.record_wall_time,
        extra=extra,
    )
    return EXIT_OK


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="run FP8 federated training and record the round ledger")
    parser.set_defaults(handler=lambda cfg, args: cmd_simulate(cfg, threads=args.threads))

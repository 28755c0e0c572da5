import logging

from app.commands.common import EXIT_FAILED, EXIT_OK, exit_code_boundary
from app.models.run_config import RunConfig
from app.services.config_loader import dump_config
from app.services.metrics_ledger import persist_run
from app.services.theory_bench import run_all

logger = logging.getLogger(__name__)


@exit_code_boundary
def cmd_verify(cfg: RunConfig, threads: int = 1) -> int:
    """Run the configured bench suites; 0 iff every check passes, failures are listed otherwise."""
    reports = run_all(cfg.verify, seed=cfg.run.seed, fmt=cfg.fp8.format(), threads=threads)
    persist_run(
        cfg.run.out_dir,
        dump_config(cfg),
        reports=reports,
        extra={"task": "verify", "suites": ", ".join(r.suite for r in reports)},
    )

    failures = [(r.suite, c) for r in reports for c in r.failures]
    for suite, check in failures:
        logger.error(
            f"FAILED {suite}.{check.name}: measured {check.measured:.6g} vs bound {check.bound:.6g} "
            f"(tol {check.tol:g}) {check.detail}".rstrip()
        )
    if failures:
        logger.error(f"{len(failures)} of {sum(len(r.checks) for r in reports)} checks failed")
        return EXIT_FAILED
    logger.info(f"All {sum(len(r.checks) for r in reports)} checks passed")
    return EXIT_OK


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("verify", help="check the quantizer error bounds and convergence rates empirically")
    parser.set_defaults(handler=lambda cfg, args: cmd_verify(cfg, threads=args.threads))

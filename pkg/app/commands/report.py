import logging
from pathlib import Path
from typing import Optional, Sequence

from app.commands.common import EXIT_FAILED, EXIT_OK, exit_code_boundary
from app.exceptions import ConfigError, ThresholdNotReachedError
from app.services.metrics_ledger import compute_gain, load_ledger, write_gain_report

logger = logging.getLogger(__name__)


@exit_code_boundary
def cmd_report(
    run_dirs: Sequence[str],
    out_dir: str,
    window: int = 5,
    threshold: Optional[float] = None,
) -> int:
    """
    Communication gain of every run against the first one (the baseline).

    Runs that never reach the threshold are logged and skipped; the exit code
    is 1 when any comparison could not be made.
    """
    if len(run_dirs) < 2:
        raise ConfigError("report needs a baseline run directory and at least one run to compare")
    base = load_ledger(run_dirs[0])
    gains = []
    unreached = 0
    for run_dir in run_dirs[1:]:
        test = load_ledger(run_dir)
        try:
            gain = compute_gain(base, test, window=window, threshold=threshold)
        except ThresholdNotReachedError as e:
            logger.warning(f"No gain for {Path(run_dir).name}: {e}")
            unreached += 1
            continue
        logger.info(
            f"{gain.test_name} vs {gain.base_name}: {gain.gain:.2f}x fewer bytes to reach "
            f"accuracy {gain.threshold:.4f} (round {gain.test_round} vs {gain.base_round})"
        )
        gains.append(gain)

    write_gain_report(out_dir, gains)
    return EXIT_FAILED if unreached else EXIT_OK


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("report", help="communication gains of run directories against a baseline")
    parser.add_argument("runs", nargs="+", help="baseline run directory followed by the runs to compare")
    parser.add_argument("--window", type=int, default=None, help="smoothing window (default from [metrics])")
    parser.add_argument("--threshold", type=float, default=None, help="accuracy threshold (default: shared best)")
    parser.set_defaults(
        handler=lambda cfg, args: cmd_report(
            args.runs,
            cfg.run.out_dir,
            window=args.window or cfg.metrics.smoothing_window,
            threshold=args.threshold,
        )
    )

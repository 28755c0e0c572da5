import csv
import logging
import math
from collections import deque
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from app.exceptions import LedgerError, ThresholdNotReachedError
from app.models.bench import BenchReport
from app.models.ledger import METRICS_COLUMNS, GainReport, RoundEntry, RoundLedger

logger = logging.getLogger(__name__)

SERVER_COLUMNS = ["round", "mse_average", "mse_selected", "fallback"]
TIMING_COLUMNS = ["round", "wall_ms"]


def record_round(ledger: RoundLedger, entry: RoundEntry) -> RoundLedger:
    """Append an entry and fill its cumulative byte count."""
    if entry.round <= ledger.last_round:
        raise LedgerError(f"out-of-order round {entry.round} after round {ledger.last_round}")
    entry.cum_bytes = ledger.total_bytes + entry.round_bytes
    ledger.entries.append(entry)
    return ledger


def smoothed_accuracy(ledger: RoundLedger, window: int) -> List[float]:
    """Trailing mean over the last `window` evaluated rounds; NaN for rounds without evaluation."""
    recent: deque = deque(maxlen=window)
    out = []
    for entry in ledger.entries:
        if math.isfinite(entry.eval_acc):
            recent.append(entry.eval_acc)
            out.append(sum(recent) / len(recent))
        else:
            out.append(math.nan)
    return out


def _first_reaching(ledger: RoundLedger, smoothed: List[float], threshold: float) -> Optional[RoundEntry]:
    for entry, acc in zip(ledger.entries, smoothed):
        if math.isfinite(acc) and acc >= threshold:
            return entry
    return None


def compute_gain(
    base: RoundLedger,
    test: RoundLedger,
    window: int = 5,
    threshold: Optional[float] = None,
) -> GainReport:
    """
    Bytes the baseline needs to reach an accuracy threshold, divided by the bytes the test run needs.

    The threshold defaults to the smaller of the two runs' best smoothed accuracies.

    Raises:
        ThresholdNotReachedError: If a run never reaches the threshold or has no evaluated rounds.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    base_curve = smoothed_accuracy(base, window)
    test_curve = smoothed_accuracy(test, window)
    base_best = max((a for a in base_curve if math.isfinite(a)), default=math.nan)
    test_best = max((a for a in test_curve if math.isfinite(a)), default=math.nan)
    if threshold is None:
        if not (math.isfinite(base_best) and math.isfinite(test_best)):
            raise ThresholdNotReachedError(
                f"no evaluated rounds to compare: {base.name or 'base'} has {len(base)} rounds, "
                f"{test.name or 'test'} has {len(test)}"
            )
        threshold = min(base_best, test_best)

    base_hit = _first_reaching(base, base_curve, threshold)
    test_hit = _first_reaching(test, test_curve, threshold)
    for label, ledger, hit, best in (("base", base, base_hit, base_best), ("test", test, test_hit, test_best)):
        if hit is None:
            raise ThresholdNotReachedError(
                f"{ledger.name or label} never reaches accuracy {threshold:.4f} "
                f"(best smoothed {best:.4f} over {len(ledger)} rounds)"
            )
    if test_hit.cum_bytes == 0:
        raise ThresholdNotReachedError(f"{test.name or 'test'} reaches the threshold without communicating")

    return GainReport(
        base_name=base.name or "base",
        test_name=test.name or "test",
        threshold=threshold,
        window=window,
        base_round=base_hit.round,
        test_round=test_hit.round,
        base_bytes=base_hit.cum_bytes,
        test_bytes=test_hit.cum_bytes,
        gain=base_hit.cum_bytes / test_hit.cum_bytes,
    )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise
    return path


def write_metrics(ledger: RoundLedger, path: Path, record_wall_time: bool = False) -> Path:
    rows = (
        (
            e.round,
            e.uplink_bytes,
            e.downlink_bytes,
            e.cum_bytes,
            e.eval_acc,
            e.eval_loss,
            e.wall_ms if record_wall_time else 0.0,
        )
        for e in ledger.entries
    )
    return _write_csv(path, METRICS_COLUMNS, rows)


def summary_lines(
    ledger: Optional[RoundLedger] = None,
    gains: Sequence[GainReport] = (),
    reports: Sequence[BenchReport] = (),
    extra: Optional[Dict[str, object]] = None,
) -> List[str]:
    lines = []
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    if ledger is not None:
        lines.append(f"rounds: {len(ledger)}")
        lines.append(f"total_bytes: {ledger.total_bytes}")
        evaluated = [e for e in ledger.entries if math.isfinite(e.eval_acc) or math.isfinite(e.eval_loss)]
        if evaluated:
            lines.append(f"final_eval_acc: {evaluated[-1].eval_acc!r}")
            lines.append(f"final_eval_loss: {evaluated[-1].eval_loss!r}")
        fallbacks = sum(1 for e in ledger.entries if e.server_fallback)
        if any(e.server_mse_average is not None for e in ledger.entries):
            lines.append(f"server_fallback_rounds: {fallbacks}")
    for g in gains:
        prefix = f"gain.{g.test_name}"
        lines.append(f"{prefix}.threshold: {g.threshold!r}")
        lines.append(f"{prefix}.base_round: {g.base_round}")
        lines.append(f"{prefix}.test_round: {g.test_round}")
        lines.append(f"{prefix}.base_bytes: {g.base_bytes}")
        lines.append(f"{prefix}.test_bytes: {g.test_bytes}")
        lines.append(f"{prefix}.gain: {g.gain!r}")
    for report in reports:
        lines.append(f"bench.{report.suite}.passed: {report.passed}")
        for c in report.checks:
            lines.append(
                f"bench.{report.suite}.{c.name}: measured={c.measured!r} bound={c.bound!r} "
                f"tol={c.tol!r} samples={c.samples} passed={c.passed}"
            )
    return lines


def persist_run(
    out_dir: Union[str, Path],
    config_snapshot: str,
    ledger: Optional[RoundLedger] = None,
    gains: Sequence[GainReport] = (),
    reports: Sequence[BenchReport] = (),
    record_wall_time: bool = False,
    extra: Optional[Dict[str, object]] = None,
) -> List[Path]:
    """
    Write a run directory: config.ini, metrics.csv, timing.csv, server_mse.csv
    (UQ+ runs), bench_<suite>.csv raw series and summary.txt.

    Raises:
        OSError: If the directory or a file cannot be written; the message names the path.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Could not create run directory {out}: {e}")
        raise

    written: List[Path] = []
    config_path = out / "config.ini"
    try:
        config_path.write_text(config_snapshot, encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not write {config_path}: {e}")
        raise
    written.append(config_path)

    if ledger is not None:
        written.append(write_metrics(ledger, out / "metrics.csv", record_wall_time))
        written.append(_write_csv(out / "timing.csv", TIMING_COLUMNS, ((e.round, e.wall_ms) for e in ledger.entries)))
        if any(e.server_mse_average is not None for e in ledger.entries):
            # one lr column per tensor; empty where that tensor fell back to the average
            tensors = sorted({name for e in ledger.entries for name in e.server_lrs})
            rows = (
                [e.round, e.server_mse_average, e.server_mse_selected, e.server_fallback]
                + [e.server_lrs.get(name) for name in tensors]
                for e in ledger.entries
            )
            columns = SERVER_COLUMNS + [f"lr.{name}" for name in tensors]
            written.append(_write_csv(out / "server_mse.csv", columns, rows))

    for report in reports:
        if not report.series:
            continue
        names = sorted(report.series)
        length = max(len(report.series[n]) for n in names)
        rows = (
            [i] + [report.series[n][i] if i < len(report.series[n]) else None for n in names] for i in range(length)
        )
        written.append(_write_csv(out / f"bench_{report.suite}.csv", ["index", *names], rows))

    summary = out / "summary.txt"
    try:
        summary.write_text("\n".join(summary_lines(ledger, gains, reports, extra)) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not write {summary}: {e}")
        raise
    written.append(summary)
    logger.info(f"Wrote {len(written)} files to {out}")
    return written


def load_ledger(run_dir: Union[str, Path]) -> RoundLedger:
    """Read metrics.csv of a run directory back into a ledger named after the directory."""
    path = Path(run_dir) / "metrics.csv"
    if not path.is_file():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != METRICS_COLUMNS:
            raise LedgerError(f"{path}: unexpected columns {header}")
        ledger = RoundLedger(name=Path(run_dir).name)
        for line_no, row in enumerate(reader, start=2):
            try:
                entry = RoundEntry(
                    round=int(row[0]),
                    uplink_bytes=int(row[1]),
                    downlink_bytes=int(row[2]),
                    eval_acc=float(row[4]),
                    eval_loss=float(row[5]),
                    wall_ms=float(row[6]),
                )
            except (ValueError, IndexError) as e:
                raise LedgerError(f"{path}:{line_no}: {e}") from e
            record_round(ledger, entry)
            if entry.cum_bytes != int(row[3]):
                raise LedgerError(f"{path}:{line_no}: cum_bytes is not the running sum")
    return ledger


GAIN_COLUMNS = ["base", "test", "threshold", "window", "base_round", "test_round", "base_bytes", "test_bytes", "gain"]


def write_gain_report(out_dir: Union[str, Path], gains: Sequence[GainReport]) -> List[Path]:
    """gains.csv with one row per compared run, plus the same figures as summary lines."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Could not create report directory {out}: {e}")
        raise
    rows = (
        (g.base_name, g.test_name, g.threshold, g.window, g.base_round, g.test_round, g.base_bytes, g.test_bytes, g.gain)
        for g in gains
    )
    written = [_write_csv(out / "gains.csv", GAIN_COLUMNS, rows)]
    summary = out / "gains.txt"
    try:
        summary.write_text("\n".join(summary_lines(gains=gains)) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not write {summary}: {e}")
        raise
    written.append(summary)
    return written

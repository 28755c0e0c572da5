import logging
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from app.commands.common import EXIT_OK, exit_code_boundary
from app.models.fp8 import Fp8Format
from app.services import fp8_codec
from app.services.rng import substream

logger = logging.getLogger(__name__)


def _read_tensor(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=1, encoding="utf-8")


def _write_tensor(path: Path, values: np.ndarray) -> None:
    values = np.atleast_1d(values)
    table = values.reshape(values.shape[0], -1) if values.ndim > 2 else values
    np.savetxt(path, table, delimiter=",", fmt="%.17g", encoding="utf-8")


@exit_code_boundary
def cmd_quantize(
    input_path: str,
    output_path: str,
    fmt: Fp8Format,
    alpha: Optional[float] = None,
    mode: Literal["det", "rand"] = "rand",
    seed: int = 0,
    decode: bool = False,
) -> int:
    """
    Standalone wire codec.

    Encoding reads a comma-separated tensor, quantizes it with the given clip
    (max|x| when omitted) and writes the FP8 blob. With `decode` the input is a
    blob and the output the decoded tensor as CSV.
    """
    source, target = Path(input_path), Path(output_path)
    if decode:
        qt = fp8_codec.from_bytes(source.read_bytes())
        _write_tensor(target, fp8_codec.decode(qt))
        logger.info(
            f"Decoded {qt.element_count} {qt.format.name} values (alpha={qt.clip.alpha!r}) from {source} to {target}"
        )
        return EXIT_OK

    x = _read_tensor(source)
    if alpha is None:
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        alpha = peak if peak > 0.0 else 1.0
    alpha = fp8_codec.wire_clip(alpha)
    values = fp8_codec.quantize(x, alpha, fmt, mode, rng=substream(seed, "codec"))
    blob = fp8_codec.to_bytes(fp8_codec.encode(values, alpha, fmt))
    target.write_bytes(blob)
    logger.info(f"Wrote {len(blob)} byte {fmt.name} blob of shape {x.shape} (alpha={alpha!r}, {mode}) to {target}")
    return EXIT_OK


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("quantize", help="encode a CSV tensor into an FP8 blob, or decode one")
    parser.add_argument("input", help="CSV tensor to encode, or blob to decode")
    parser.add_argument("output", help="where to write the blob (or the decoded CSV)")
    parser.add_argument("--alpha", type=float, default=None, help="clipping value (default max|x|)")
    parser.add_argument("--mode", choices=["det", "rand"], default="rand")
    parser.add_argument("--decode", action="store_true", help="decode a blob instead of encoding")
    parser.set_defaults(
        handler=lambda cfg, args: cmd_quantize(
            args.input,
            args.output,
            cfg.fp8.format(),
            alpha=args.alpha,
            mode=args.mode,
            seed=cfg.run.seed,
            decode=args.decode,
        )
    )

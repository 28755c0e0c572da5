"""
Flexible-bias FP8 quantization and the bit-exact 8-bit wire codec.

All grid arithmetic is expressed through one quantity, the scale of the top
binade `alpha / (2^(m+1) - 1)`. Every other scale is that value times an
exact power of two, so a grid value is always `scale * integer` computed the
same way by the quantizers, the encoder and the decoder. This is what makes
q_det idempotent and the 256-code round trip exact.
"""

import logging
import struct
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import BlobFormatError, QuantizationError
from app.models.fp8 import ClipParam, Fp8Format, QuantError, QuantizedTensor, exponent_bias

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray, Sequence[float]]
ClipLike = Union[ClipParam, float]

BLOB_MAGIC = b"FP8T"
BLOB_VERSION = 1
_HEADER = struct.Struct("<4sBBBB")
_ALPHA = struct.Struct("<f")

# x/s is treated as an exact integer when it is this many ulps away from one
_SNAP_ULPS = 8.0


def _alpha(clip: ClipLike) -> float:
    alpha = clip.alpha if isinstance(clip, ClipParam) else float(clip)
    if not np.isfinite(alpha) or alpha <= 0.0:
        raise QuantizationError("invalid clip")
    return alpha


def _as_array(x: ArrayLike) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite input")
    return arr, arr.ndim == 0


def _restore(out: np.ndarray, scalar: bool):
    return float(out) if scalar else out


def _top_scale(alpha: float, fmt: Fp8Format) -> float:
    return alpha / fmt.top_significand


def _exponent_fields(mag: np.ndarray, alpha: float, fmt: Fp8Format) -> np.ndarray:
    """floor(log2|x| + b) clamped below at 0; zeros map to 0 (subnormal)."""
    top = _top_scale(alpha, fmt)
    bias = exponent_bias(alpha, fmt)
    fields = np.zeros(mag.shape, dtype=np.int64)
    nonzero = mag > 0.0
    if not np.any(nonzero):
        return fields

    m = mag[nonzero]
    est = np.floor(np.log2(m) + bias).astype(np.int64)
    # log2 and the real-valued bias are inexact near binade edges; settle the
    # field against the same thresholds the decoder produces
    lower = np.ldexp(top * (1 << fmt.man_bits), est - fmt.max_exponent_field)
    est = np.where(m < lower, est - 1, est)
    est = np.where(m >= 2.0 * lower, est + 1, est)
    fields[nonzero] = np.maximum(est, 0)
    return fields


def _scales_for_fields(fields: np.ndarray, alpha: float, fmt: Fp8Format) -> np.ndarray:
    return np.ldexp(_top_scale(alpha, fmt), np.maximum(fields, 1) - fmt.max_exponent_field)


def _scales(x: np.ndarray, alpha: float, fmt: Fp8Format) -> np.ndarray:
    return _scales_for_fields(_exponent_fields(np.abs(x), alpha, fmt), alpha, fmt)


def _snap(t: np.ndarray) -> np.ndarray:
    nearest = np.rint(t)
    tol = _SNAP_ULPS * np.finfo(np.float64).eps * np.maximum(np.abs(t), 1.0)
    return np.where(np.abs(t - nearest) <= tol, nearest, t)


def grid_max(clip: ClipLike, fmt: Fp8Format) -> float:
    """Largest representable magnitude; equals alpha up to one rounding."""
    alpha = _alpha(clip)
    return _top_scale(alpha, fmt) * fmt.top_significand


def _saturate(x: np.ndarray, alpha: float, fmt: Fp8Format) -> np.ndarray:
    limit = _top_scale(alpha, fmt) * fmt.top_significand
    return np.clip(x, -limit, limit)


def compute_scale(x: ArrayLike, clip: ClipLike, fmt: Fp8Format):
    """
    Quantization step size s = 2^(floor(log2|x| + b) - b - m).

    Values whose exponent field would be 1 or below (zero included) get the
    subnormal scale 2^(1 - b - m). Input is not saturated here.
    """
    arr, scalar = _as_array(x)
    alpha = _alpha(clip)
    return _restore(_scales(arr, alpha, fmt), scalar)


def q_det(x: ArrayLike, clip: ClipLike, fmt: Fp8Format):
    """Deterministic quantizer s * round(x / s), ties to even, saturated at alpha."""
    arr, scalar = _as_array(x)
    alpha = _alpha(clip)
    xc = _saturate(arr, alpha, fmt)
    s = _scales(xc, alpha, fmt)
    return _restore(s * np.rint(_snap(xc / s)), scalar)


def q_rand(
    x: ArrayLike,
    clip: ClipLike,
    fmt: Fp8Format,
    rng: Optional[np.random.Generator] = None,
    uniforms: Optional[np.ndarray] = None,
):
    """
    Stochastic quantizer: rounds up with probability equal to the fractional
    part of x / s, so E[q_rand(x)] = x for every in-range x.

    Either a random stream or a precomputed array of Uniform[0, 1) draws with
    the shape of x must be supplied.
    """
    arr, scalar = _as_array(x)
    alpha = _alpha(clip)
    if uniforms is None:
        if rng is None:
            raise QuantizationError("q_rand requires a random stream")
        uniforms = rng.random(arr.shape)
    else:
        uniforms = np.broadcast_to(np.asarray(uniforms, dtype=np.float64), arr.shape)

    xc = _saturate(arr, alpha, fmt)
    s = _scales(xc, alpha, fmt)
    t = _snap(xc / s)
    low = np.floor(t)
    up = uniforms < (t - low)
    return _restore(s * (low + up), scalar)


def quantize(
    x: ArrayLike,
    clip: ClipLike,
    fmt: Fp8Format,
    mode: Literal["det", "rand"],
    rng: Optional[np.random.Generator] = None,
    uniforms: Optional[np.ndarray] = None,
):
    if mode == "det":
        return q_det(x, clip, fmt)
    if mode == "rand":
        return q_rand(x, clip, fmt, rng=rng, uniforms=uniforms)
    raise ValueError(f"unknown quantizer mode: {mode}")


def quant_error(
    x: ArrayLike,
    clip: ClipLike,
    fmt: Fp8Format,
    mode: Literal["det", "rand"] = "det",
    rng: Optional[np.random.Generator] = None,
) -> QuantError:
    """Residual r_Q(x) = Q(x) - x and the largest scale S used over the tensor."""
    arr, _ = _as_array(x)
    alpha = _alpha(clip)
    q = np.asarray(quantize(arr, alpha, fmt, mode, rng=rng), dtype=np.float64)
    scales = _scales(_saturate(arr, alpha, fmt), alpha, fmt)
    max_scale = float(np.max(scales)) if scales.size else 0.0
    return QuantError(residual=np.asarray(q - arr, dtype=np.float64), max_scale=max_scale)


def encode(values: ArrayLike, clip: ClipLike, fmt: Fp8Format) -> QuantizedTensor:
    """
    Pack grid values into 8-bit codes: bit 7 sign, then the exponent field,
    then the mantissa field. The sign of zero is preserved.
    """
    arr, _ = _as_array(values)
    alpha = _alpha(clip)
    mag = np.abs(arr).ravel()
    if np.any(mag > grid_max(alpha, fmt)):
        raise QuantizationError("not representable")

    fields = _exponent_fields(mag, alpha, fmt)
    n = mag / _scales_for_fields(fields, alpha, fmt)
    significand = np.rint(n)
    if np.any(np.abs(n - significand) > _SNAP_ULPS * np.finfo(np.float64).eps * np.maximum(n, 1.0)):
        raise QuantizationError("not representable")

    significand = significand.astype(np.int64)
    implicit = 1 << fmt.man_bits
    # a significand that rounded onto the next binade edge belongs to that binade
    carry = significand == 2 * implicit
    fields = np.where(carry, fields + 1, fields)
    significand = np.where(carry, implicit, significand)
    promoted = (fields == 0) & (significand == implicit)
    fields = np.where(promoted, 1, fields)

    mantissa = np.where(fields > 0, significand - implicit, significand)
    if np.any(fields > fmt.max_exponent_field) or np.any(mantissa < 0) or np.any(mantissa > fmt.max_mantissa_field):
        raise QuantizationError("not representable")

    sign = np.signbit(arr).ravel().astype(np.int64)
    codes = (sign << 7) | (fields << fmt.man_bits) | mantissa
    return QuantizedTensor(
        codes=codes.astype(np.uint8),
        shape=tuple(int(d) for d in arr.shape),
        clip=ClipParam(alpha=alpha),
        format=fmt,
    )


def decode(qt: QuantizedTensor) -> np.ndarray:
    """Real values of the codes, in row-major order reshaped to the tensor shape."""
    fmt = qt.format
    codes = qt.codes.astype(np.int64).ravel()
    sign = codes >> 7
    fields = (codes >> fmt.man_bits) & fmt.max_exponent_field
    mantissa = codes & fmt.max_mantissa_field
    significand = np.where(fields > 0, mantissa + (1 << fmt.man_bits), mantissa)
    values = _scales_for_fields(fields, qt.clip.alpha, fmt) * significand
    values = np.where(sign == 1, -values, values)
    return values.reshape(qt.shape)


def grid_values(clip: ClipLike, fmt: Fp8Format) -> np.ndarray:
    """All non-negative grid values in ascending order (zero first)."""
    alpha = _alpha(clip)
    codes = np.arange(128, dtype=np.uint8)
    qt = QuantizedTensor(codes=codes, shape=(128,), clip=ClipParam(alpha=alpha), format=fmt)
    return np.unique(decode(qt))


def wire_clip(alpha: float) -> float:
    """Clip value rounded to binary32, the precision it travels with."""
    wired = float(np.float32(alpha))
    if not np.isfinite(wired) or wired <= 0.0:
        raise QuantizationError("invalid clip")
    return wired


def _header_size(ndim: int) -> int:
    return _HEADER.size + 4 * ndim + _ALPHA.size


def blob_size(shape: Sequence[int]) -> int:
    """Exact length of the FP8 blob for a tensor of this shape."""
    return _header_size(len(shape)) + int(np.prod(shape, dtype=np.int64))


def fp32_blob_size(shape: Sequence[int]) -> int:
    """Length of the same tensor sent at 4 bytes per element behind an identical header."""
    return _header_size(len(shape)) + 4 * int(np.prod(shape, dtype=np.int64))


def to_bytes(qt: QuantizedTensor) -> bytes:
    """Serialize to the little-endian FP8 tensor blob."""
    ndim = len(qt.shape)
    if ndim > 255:
        raise BlobFormatError("too many dimensions for the blob header")
    header = _HEADER.pack(BLOB_MAGIC, BLOB_VERSION, qt.format.exp_bits, qt.format.man_bits, ndim)
    dims = struct.pack(f"<{ndim}I", *qt.shape)
    alpha = _ALPHA.pack(qt.clip.alpha)
    return header + dims + alpha + qt.codes.tobytes(order="C")


def from_bytes(blob: bytes) -> QuantizedTensor:
    """Parse an FP8 tensor blob; the clip comes back at binary32 precision."""
    if len(blob) < _HEADER.size:
        raise BlobFormatError("truncated blob header")
    magic, version, exp_bits, man_bits, ndim = _HEADER.unpack_from(blob, 0)
    if magic != BLOB_MAGIC:
        raise BlobFormatError(f"bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise BlobFormatError(f"unsupported blob version {version}")

    offset = _HEADER.size
    if len(blob) < _header_size(ndim):
        raise BlobFormatError("truncated blob header")
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (alpha,) = _ALPHA.unpack_from(blob, offset)
    offset += _ALPHA.size

    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != count:
        raise BlobFormatError(f"payload holds {len(blob) - offset} bytes, header promises {count}")
    try:
        fmt = Fp8Format(exp_bits=exp_bits, man_bits=man_bits)
        clip = ClipParam(alpha=alpha)
    except ValueError as e:
        raise BlobFormatError(f"invalid blob header: {e}") from e

    codes = np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset).copy()
    return QuantizedTensor(codes=codes, shape=tuple(shape), clip=clip, format=fmt)

import math
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Fp8Format(BaseModel):
    """
    Bit layout of an 8-bit floating point number with a flexible exponent bias.

    The bias is not part of the format: it is derived per tensor from the
    clipping value (see `ClipParam.bias`), so the largest code always decodes
    to the clipping value itself.
    """

    model_config = ConfigDict(frozen=True)

    exp_bits: int = Field(default=4, description="Exponent field width (e)")
    man_bits: int = Field(default=3, description="Mantissa field width (m)")
    sign_bits: Literal[1] = 1

    @model_validator(mode="after")
    def _check_widths(self) -> "Fp8Format":
        if self.exp_bits < 2:
            raise ValueError("exp_bits must be >= 2")
        if self.man_bits < 1:
            raise ValueError("man_bits must be >= 1")
        if self.sign_bits + self.exp_bits + self.man_bits != 8:
            raise ValueError("sign + exponent + mantissa bits must total 8")
        return self

    @property
    def max_exponent_field(self) -> int:
        return (1 << self.exp_bits) - 1

    @property
    def max_mantissa_field(self) -> int:
        return (1 << self.man_bits) - 1

    @property
    def top_significand(self) -> int:
        """Significand of the largest code in units of its scale: 2^(m+1) - 1."""
        return (1 << (self.man_bits + 1)) - 1

    @property
    def name(self) -> str:
        return f"E{self.exp_bits}M{self.man_bits}"


def exponent_bias(alpha: float, fmt: Fp8Format) -> float:
    """Exponent bias b = 2^e - log2(alpha) + log2(2 - 2^-m) - 1."""
    return float(1 << fmt.exp_bits) - math.log2(alpha) + math.log2(2.0 - 2.0 ** (-fmt.man_bits)) - 1.0


class ClipParam(BaseModel):
    """Per-tensor clipping value: the largest representable magnitude."""

    model_config = ConfigDict(frozen=True)

    alpha: float

    @field_validator("alpha")
    @classmethod
    def _positive_finite(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0.0:
            raise ValueError("invalid clip")
        return float(value)

    def bias(self, fmt: Fp8Format) -> float:
        return exponent_bias(self.alpha, fmt)


class QuantizedTensor(BaseModel):
    """Packed 8-bit codes plus everything needed to decode them: the wire unit."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    codes: np.ndarray
    shape: Tuple[int, ...]
    clip: ClipParam
    format: Fp8Format = Field(default_factory=Fp8Format)

    @model_validator(mode="after")
    def _check_codes(self) -> "QuantizedTensor":
        if self.codes.dtype != np.uint8:
            raise ValueError("codes must be uint8")
        if self.codes.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError("code count does not match shape")
        return self

    @property
    def element_count(self) -> int:
        return int(self.codes.size)


class QuantError(BaseModel):
    """Residual r_Q(x) = Q(x) - x of one quantization, with the largest scale used."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    residual: np.ndarray
    max_scale: float

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.residual.ravel()))

    @property
    def linf(self) -> float:
        if self.residual.size == 0:
            return 0.0
        return float(np.max(np.abs(self.residual)))

    @property
    def squared_l2(self) -> float:
        return float(np.sum(np.square(self.residual)))

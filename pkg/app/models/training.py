from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.fp8 import ClipParam, Fp8Format

QuantMode = Literal["fp32", "qat-det", "qat-rand"]
LossKind = Literal["mse", "cross_entropy"]


class LayerSpec(BaseModel):
    """One dense layer: y = act(x @ W + b) with W stored as (in_dim, out_dim)."""

    model_config = ConfigDict(frozen=True)

    in_dim: int = Field(ge=1)
    out_dim: int = Field(ge=1)
    activation: Literal["relu", "none"] = "none"
    bias: bool = True


class ModelSpec(BaseModel):
    """Layer stack, loss and quantization mode of the model every client trains."""

    model_config = ConfigDict(frozen=True)

    layers: List[LayerSpec]
    loss: LossKind = "cross_entropy"
    quant_mode: QuantMode = "qat-det"
    fmt: Fp8Format = Field(default_factory=Fp8Format)

    @model_validator(mode="after")
    def _check_chain(self) -> "ModelSpec":
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        return self

    @classmethod
    def linear(cls, in_dim: int, out_dim: int = 1, bias: bool = True, **kwargs) -> "ModelSpec":
        return cls(layers=[LayerSpec(in_dim=in_dim, out_dim=out_dim, bias=bias)], loss="mse", **kwargs)

    @classmethod
    def logistic(cls, in_dim: int, classes: int, bias: bool = True, **kwargs) -> "ModelSpec":
        return cls(layers=[LayerSpec(in_dim=in_dim, out_dim=classes, bias=bias)], loss="cross_entropy", **kwargs)

    @classmethod
    def mlp(
        cls,
        in_dim: int,
        hidden: List[int],
        out_dim: int,
        loss: LossKind = "cross_entropy",
        bias: bool = True,
        **kwargs,
    ) -> "ModelSpec":
        dims = [in_dim, *hidden, out_dim]
        layers = [
            LayerSpec(
                in_dim=dims[i],
                out_dim=dims[i + 1],
                activation="relu" if i < len(dims) - 2 else "none",
                bias=bias,
            )
            for i in range(len(dims) - 1)
        ]
        return cls(layers=layers, loss=loss, **kwargs)

    @property
    def quantized(self) -> bool:
        return self.quant_mode != "fp32"

    @property
    def forward_quantizer(self) -> Literal["det", "rand"]:
        return "rand" if self.quant_mode == "qat-rand" else "det"

    def weight_names(self) -> List[str]:
        return [f"layer{i}.weight" for i in range(len(self.layers))]

    def bias_names(self) -> List[str]:
        return [f"layer{i}.bias" for i, layer in enumerate(self.layers) if layer.bias]

    def activation_sites(self) -> List[str]:
        # every layer output except the final logits
        return [f"layer{i}.act" for i in range(len(self.layers) - 1)]

    def tensor_shapes(self) -> Dict[str, tuple]:
        shapes: Dict[str, tuple] = {}
        for i, layer in enumerate(self.layers):
            shapes[f"layer{i}.weight"] = (layer.in_dim, layer.out_dim)
            if layer.bias:
                shapes[f"layer{i}.bias"] = (layer.out_dim,)
        return shapes

    @property
    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.tensor_shapes().values()))


class ParamSet(BaseModel):
    """
    Full-precision master weights plus one clip per quantized weight tensor (alpha)
    and one per activation site (beta).

    Weight matrices are the quantized tensors; biases are always kept and
    communicated in full precision.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensors: Dict[str, np.ndarray]
    weight_clips: Dict[str, ClipParam] = Field(default_factory=dict)
    act_clips: Dict[str, ClipParam] = Field(default_factory=dict)
    quantized: Dict[str, bool] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_flags(self) -> "ParamSet":
        if set(self.quantized) != set(self.tensors):
            raise ValueError("quantization flags must cover every tensor exactly once")
        flagged = {name for name, q in self.quantized.items() if q}
        if set(self.weight_clips) != flagged:
            raise ValueError("every quantized tensor needs exactly one weight clip")
        return self

    def copy(self) -> "ParamSet":
        return ParamSet.model_construct(
            tensors={name: np.array(t, dtype=np.float64, copy=True) for name, t in self.tensors.items()},
            weight_clips=dict(self.weight_clips),
            act_clips=dict(self.act_clips),
            quantized=dict(self.quantized),
        )

    def alpha(self, name: str) -> float:
        return self.weight_clips[name].alpha

    def beta(self, site: str) -> float:
        return self.act_clips[site].alpha

    def quantized_names(self) -> List[str]:
        return [name for name, q in self.quantized.items() if q]

    def flat(self) -> np.ndarray:
        """All tensors concatenated in name order."""
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([self.tensors[name].ravel() for name in sorted(self.tensors)])


class GradSet(BaseModel):
    """Per-tensor gradients plus scalar gradients for every alpha and beta."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensors: Dict[str, np.ndarray]
    weight_clips: Dict[str, float] = Field(default_factory=dict)
    act_clips: Dict[str, float] = Field(default_factory=dict)

    def norm(self) -> float:
        total = sum(float(np.sum(np.square(g))) for g in self.tensors.values())
        return float(np.sqrt(total))


class LocalUpdateConfig(BaseModel):
    """Client-side SGD recipe for one round."""

    steps: int = Field(default=10, ge=1, description="U, SGD steps per round")
    lr: float = Field(default=0.1, gt=0.0)
    weight_decay: float = Field(default=0.001, ge=0.0)
    batch_size: int = Field(default=50, ge=1)
    epochs: Optional[int] = Field(default=None, ge=1, description="overrides steps when set")
    learn_clips: bool = True
    clip_floor: float = Field(default=1e-6, gt=0.0)

    def steps_for(self, n: int) -> int:
        if self.epochs is None:
            return self.steps
        per_epoch = -(-n // min(self.batch_size, n))
        return self.epochs * per_epoch

"""
Quantization-aware training of the desk-scale models with straight-through estimators.

Every quantized weight tensor and every activation site passes through an FP8
quantizer node. In the backward pass the rounding is the identity inside the
clip range and blocks the gradient outside it; the clip receives
(Q(x) - x) / alpha in range and Q(x) / alpha (= sign(x)) when saturated. Those
are exactly the derivatives of the forward pass with the exponent fields and
rounding offsets frozen, which `ste_surrogate_loss` evaluates.
"""

import logging
import math
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np

from app.exceptions import EmptyShardError, TrainingDivergedError
from app.models.data import Dataset
from app.models.fp8 import ClipParam, Fp8Format
from app.models.training import GradSet, LocalUpdateConfig, ModelSpec, ParamSet
from app.services.autodiff import Tensor, cross_entropy_loss, log_softmax, mse_loss
from app.services.fp8_codec import compute_scale, grid_max, q_det, q_rand

logger = logging.getLogger(__name__)

StepObserver = Callable[[int, ParamSet, GradSet], None]


class QuantizerRecord(NamedTuple):
    """What one quantizer node did: enough to replay it with frozen rounding."""

    alpha: float
    scales: np.ndarray
    offsets: np.ndarray  # (Q(x) - x) / s for in-range elements, 0 when saturated
    saturated: np.ndarray
    sign: np.ndarray


class ForwardCache:
    """Graph and leaves of one forward pass, consumed by `backward_ste`."""

    def __init__(
        self,
        loss: Tensor,
        outputs: np.ndarray,
        tensors: Dict[str, Tensor],
        weight_clips: Dict[str, Tensor],
        act_clips: Dict[str, Tensor],
        records: Dict[str, QuantizerRecord],
    ):
        self.loss = loss
        self.outputs = outputs
        self.tensors = tensors
        self.weight_clips = weight_clips
        self.act_clips = act_clips
        self.records = records
        self.consumed = False

    @property
    def loss_value(self) -> float:
        return float(self.loss.data)


def _quantizer_node(
    x: Tensor,
    alpha: Tensor,
    fmt: Fp8Format,
    mode: Literal["det", "rand"],
    rng: Optional[np.random.Generator],
    reference: Optional[QuantizerRecord] = None,
) -> Tuple[Tensor, QuantizerRecord]:
    a = float(alpha.data)
    gmax = grid_max(a, fmt)
    if reference is None:
        q = q_det(x.data, a, fmt) if mode == "det" else q_rand(x.data, a, fmt, rng=rng)
        saturated = np.abs(x.data) > gmax
        scales = compute_scale(np.clip(x.data, -gmax, gmax), a, fmt)
        offsets = np.where(saturated, 0.0, (q - x.data) / scales)
        record = QuantizerRecord(a, scales, offsets, saturated, np.sign(x.data))
    else:
        record = reference
        # every scale is proportional to alpha once the exponent field is frozen
        scales = record.scales * (a / record.alpha)
        q = np.where(record.saturated, record.sign * gmax, x.data + scales * record.offsets)
        saturated = record.saturated

    q = np.asarray(q, dtype=np.float64)
    x_data = x.data

    def backward(g):
        dx = np.where(saturated, 0.0, g)
        dalpha = np.sum(g * np.where(saturated, q, q - x_data)) / a
        return dx, np.asarray(dalpha)

    return Tensor.from_op(q, (x, alpha), backward), record


def _targets(batch: Dataset, spec: ModelSpec) -> np.ndarray:
    out_dim = spec.layers[-1].out_dim
    if spec.loss == "mse" and batch.is_classification and out_dim > 1:
        return np.eye(out_dim)[batch.labels.astype(np.int64)]
    return batch.labels


def _forward(
    params: ParamSet,
    batch: Dataset,
    spec: ModelSpec,
    mode: Optional[Literal["det", "rand"]],
    rng: Optional[np.random.Generator],
    reference: Optional[Dict[str, QuantizerRecord]],
) -> ForwardCache:
    if batch.input_dim != spec.layers[0].in_dim:
        raise ValueError(f"shape mismatch: batch has {batch.input_dim} features, model expects {spec.layers[0].in_dim}")
    missing = set(spec.tensor_shapes()) - set(params.tensors)
    if missing:
        raise ValueError(f"shape mismatch: parameters missing {sorted(missing)}")

    tensors = {name: Tensor(t, requires_grad=True, name=name) for name, t in params.tensors.items()}
    weight_clips = {name: Tensor(c.alpha, requires_grad=True, name=name) for name, c in params.weight_clips.items()}
    act_clips = {site: Tensor(c.alpha, requires_grad=True, name=site) for site, c in params.act_clips.items()}
    records: Dict[str, QuantizerRecord] = {}

    def quantize(name: str, x: Tensor, clip: Tensor) -> Tensor:
        ref = reference.get(name) if reference is not None else None
        q, records[name] = _quantizer_node(x, clip, spec.fmt, mode, rng, ref)
        return q

    h = Tensor(batch.features)
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        w_name = f"layer{i}.weight"
        w = tensors[w_name]
        if w.shape != (layer.in_dim, layer.out_dim):
            raise ValueError(f"shape mismatch: {w_name} is {w.shape}")
        if mode is not None and params.quantized.get(w_name, False):
            w = quantize(w_name, w, weight_clips[w_name])
        z = h @ w
        if layer.bias:
            z = z + tensors[f"layer{i}.bias"]
        if layer.activation == "relu":
            z = z.relu()
        if mode is not None and i < last:
            site = f"layer{i}.act"
            z = quantize(site, z, act_clips[site])
        h = z

    if spec.loss == "mse":
        loss = mse_loss(h, _targets(batch, spec))
    else:
        loss = cross_entropy_loss(h, batch.labels)
    return ForwardCache(loss, h.data, tensors, weight_clips, act_clips, records)


def forward_qat(
    params: ParamSet,
    batch: Dataset,
    spec: ModelSpec,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, ForwardCache]:
    """
    Loss of the model with quantized weights and activations.

    In fp32 mode the quantizers are bypassed entirely. In qat-rand mode the
    stochastic quantizer is drawn from `rng` on every call.

    Raises:
        ValueError: If the batch or parameters do not match the model spec.
        TrainingDivergedError: If the loss is not finite.
    """
    mode = spec.forward_quantizer if spec.quantized else None
    cache = _forward(params, batch, spec, mode, rng, None)
    loss = cache.loss_value
    if not math.isfinite(loss):
        raise TrainingDivergedError("diverged")
    return loss, cache


def backward_ste(cache: Optional[ForwardCache]) -> GradSet:
    """Straight-through gradients for every tensor and clip of a forward pass."""
    if cache is None:
        raise ValueError("missing cache")
    if cache.consumed:
        raise ValueError("cache already consumed by a backward pass")
    cache.consumed = True
    cache.loss.backward()

    def grad_of(t: Tensor) -> np.ndarray:
        return np.zeros_like(t.data) if t.grad is None else t.grad

    return GradSet.model_construct(
        tensors={name: grad_of(t) for name, t in cache.tensors.items()},
        weight_clips={name: float(grad_of(t)) for name, t in cache.weight_clips.items()},
        act_clips={site: float(grad_of(t)) for site, t in cache.act_clips.items()},
    )


def ste_surrogate_loss(
    params: ParamSet,
    batch: Dataset,
    spec: ModelSpec,
    reference: Dict[str, QuantizerRecord],
) -> float:
    """
    Loss with every quantizer replaced by its frozen-rounding replay.

    At the parameters that produced `reference` this equals the QAT loss; its
    derivatives are the STE gradients, so it serves as the finite-difference
    oracle for `backward_ste`.
    """
    mode = spec.forward_quantizer if spec.quantized else None
    return _forward(params, batch, spec, mode, None, reference).loss_value


def init_params(
    spec: ModelSpec,
    rng: np.random.Generator,
    calibration: Optional[Dataset] = None,
    weight_clip: Optional[float] = None,
    zero_init: bool = False,
) -> ParamSet:
    """
    Fresh parameters: He-normal weights before ReLU, Xavier-normal otherwise, zero biases.

    Args:
        spec: Model to initialize.
        rng: Stream for the weight draws.
        calibration: Batch whose full-precision activation maxima initialize beta.
        weight_clip: Fixed alpha for every weight tensor instead of max|w|.
        zero_init: Start all weights at zero (convex benches).

    Returns:
        ParamSet with alpha = max|w| per weight tensor and beta per activation site
        (1.0 when the calibration gives nothing to measure).
    """
    tensors: Dict[str, np.ndarray] = {}
    quantized: Dict[str, bool] = {}
    for i, layer in enumerate(spec.layers):
        name = f"layer{i}.weight"
        if zero_init:
            tensors[name] = np.zeros((layer.in_dim, layer.out_dim))
        else:
            if layer.activation == "relu":
                std = math.sqrt(2.0 / layer.in_dim)
            else:
                std = math.sqrt(2.0 / (layer.in_dim + layer.out_dim))
            tensors[name] = rng.normal(0.0, std, size=(layer.in_dim, layer.out_dim))
        quantized[name] = True
        if layer.bias:
            tensors[f"layer{i}.bias"] = np.zeros(layer.out_dim)
            quantized[f"layer{i}.bias"] = False

    weight_clips = {
        name: ClipParam(alpha=weight_clip if weight_clip is not None else _max_abs(tensors[name]))
        for name, q in quantized.items()
        if q
    }
    act_clips = {site: ClipParam(alpha=1.0) for site in spec.activation_sites()}
    params = ParamSet(tensors=tensors, weight_clips=weight_clips, act_clips=act_clips, quantized=quantized)

    if calibration is not None and calibration.size and act_clips:
        maxima = activation_maxima(params, calibration, spec)
        params.act_clips = {site: ClipParam(alpha=maxima[site] if maxima[site] > 0 else 1.0) for site in act_clips}
    return params


def _max_abs(t: np.ndarray) -> float:
    m = float(np.max(np.abs(t))) if t.size else 0.0
    return m if m > 0.0 and math.isfinite(m) else 1.0


def calibrate_weight_clips(params: ParamSet) -> ParamSet:
    """Reset every alpha to max|w| of its tensor (used when the model itself is not quantized)."""
    out = params.copy()
    out.weight_clips = {name: ClipParam(alpha=_max_abs(out.tensors[name])) for name in out.quantized_names()}
    return out


def activation_maxima(params: ParamSet, batch: Dataset, spec: ModelSpec) -> Dict[str, float]:
    """Largest full-precision activation magnitude per site."""
    h = batch.features
    maxima: Dict[str, float] = {}
    for i, layer in enumerate(spec.layers[:-1]):
        h = h @ params.tensors[f"layer{i}.weight"]
        if layer.bias:
            h = h + params.tensors[f"layer{i}.bias"]
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        maxima[f"layer{i}.act"] = float(np.max(np.abs(h))) if h.size else 0.0
    return maxima


def apply_sgd(params: ParamSet, grads: GradSet, spec: ModelSpec, cfg: LocalUpdateConfig) -> Tuple[ParamSet, bool]:
    """
    One step w <- w - lr * (g + decay * w); clips follow their own gradients
    when they are learned. Returns the new parameters and whether a clip hit the floor.
    """
    tensors = {
        name: w - cfg.lr * (grads.tensors[name] + cfg.weight_decay * w) for name, w in params.tensors.items()
    }
    weight_clips = params.weight_clips
    act_clips = params.act_clips
    floored = False
    if spec.quantized and cfg.learn_clips:

        def step(clips: Dict[str, ClipParam], g: Dict[str, float]) -> Dict[str, ClipParam]:
            nonlocal floored
            out = {}
            for name, clip in clips.items():
                value = clip.alpha - cfg.lr * g.get(name, 0.0)
                if not math.isfinite(value):
                    raise TrainingDivergedError("diverged")
                if value < cfg.clip_floor:
                    value = cfg.clip_floor
                    floored = True
                out[name] = ClipParam.model_construct(alpha=float(value))
            return out

        weight_clips = step(weight_clips, grads.weight_clips)
        act_clips = step(act_clips, grads.act_clips)

    for name, w in tensors.items():
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError("diverged")
    new = ParamSet.model_construct(
        tensors=tensors, weight_clips=weight_clips, act_clips=act_clips, quantized=params.quantized
    )
    return new, floored


def minibatches(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Row indices for `steps` minibatches, taken in order from per-epoch shuffles."""
    size = min(batch_size, n)
    batches: List[np.ndarray] = []
    while len(batches) < steps:
        perm = rng.permutation(n)
        for start in range(0, n, size):
            batches.append(perm[start : start + size])
            if len(batches) == steps:
                break
    return batches


def local_update(
    params: ParamSet,
    data: Dataset,
    spec: ModelSpec,
    cfg: LocalUpdateConfig,
    rng: np.random.Generator,
    observer: Optional[StepObserver] = None,
) -> ParamSet:
    """
    Client training for one round: U SGD steps on the master weights and clips.

    Args:
        params: Parameters received from the server (already on the grid when the link is quantized).
        data: The client's shard.
        spec: Model spec shared by the federation.
        cfg: Local SGD recipe.
        rng: Client stream, used for minibatches and stochastic quantizers.
        observer: Called as observer(u, params, grads) before step u is applied.

    Returns:
        New ParamSet; the input is left untouched.

    Raises:
        EmptyShardError: If the shard has no examples.
    """
    if data.size == 0:
        raise EmptyShardError("no local data")

    steps = cfg.steps_for(data.size)
    current = params.copy()
    hit_floor = False
    for u, rows in enumerate(minibatches(data.size, cfg.batch_size, steps, rng)):
        _, cache = forward_qat(current, data.take(rows), spec, rng=rng)
        grads = backward_ste(cache)
        if observer is not None:
            observer(u, current, grads)
        current, floored = apply_sgd(current, grads, spec, cfg)
        hit_floor = hit_floor or floored

    if hit_floor:
        logger.warning(f"Clipping value reached the floor {cfg.clip_floor:g} during local training")
    return current


def predict(params: ParamSet, features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Model outputs with deterministic quantizers (the deployed model)."""
    # targets only feed the loss node, which is discarded here
    dummy = Dataset(features=features, labels=np.zeros((features.shape[0], spec.layers[-1].out_dim)))
    mode = "det" if spec.quantized else None
    return _forward(params, dummy, spec.model_copy(update={"loss": "mse"}), mode, None, None).outputs


def evaluate_model(params: ParamSet, data: Dataset, spec: ModelSpec) -> Tuple[float, float]:
    """
    Accuracy and loss of the deterministic-quantized model (plain forward in fp32 mode).

    Accuracy is NaN for regression targets.
    """
    if data.size == 0:
        raise ValueError("eval set is empty")
    outputs = predict(params, data.features, spec)
    if spec.loss == "mse":
        diff = outputs - _targets(data, spec).reshape(outputs.shape)
        loss = 0.5 * float(np.sum(diff * diff)) / data.size
    else:
        logp = log_softmax(outputs)
        loss = -float(np.mean(logp[np.arange(data.size), data.labels.astype(np.int64)]))

    if not data.is_classification:
        return math.nan, loss
    if outputs.shape[1] == 1:
        predicted = (outputs[:, 0] > 0.5).astype(np.int64)
    else:
        predicted = np.argmax(outputs, axis=1)
    accuracy = float(np.mean(predicted == data.labels.astype(np.int64)))
    return accuracy, loss

"""
Empirical checks of the quantizer error bounds and the convergence rates of quantized training.

Each check compares a measured statistic with a bound computed from the same
run's constants (scale S, dimension d, gradient bound G, ...) and records the
pair in a BenchReport. Bounds are one-sided: a check passes when
measured <= bound * (1 + tol).
"""

import logging
import math
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import TrainingDivergedError
from app.models.bench import BenchReport
from app.models.data import Dataset, QuadraticProblem
from app.models.federation import CommunicationMode, GlobalState, RoundPlan
from app.models.fp8 import ClipParam, Fp8Format, QuantizedTensor
from app.models.run_config import VerifySection
from app.models.training import GradSet, LocalUpdateConfig, ModelSpec, ParamSet
from app.services import fp8_codec
from app.services.data_partition import quadratic_clients, synth_quadratic
from app.services.fed_orchestrator import FederatedOrchestrator, RoundObserver
from app.services.qat_engine import backward_ste, forward_qat, init_params, ste_surrogate_loss
from app.services.rng import substream

logger = logging.getLogger(__name__)

ProblemSource = Union[QuadraticProblem, Callable[[int], QuadraticProblem]]

E4M3 = Fp8Format(exp_bits=4, man_bits=3)
E3M4 = Fp8Format(exp_bits=3, man_bits=4)
E5M2 = Fp8Format(exp_bits=5, man_bits=2)


def _random_alphas(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.exp2(rng.uniform(-4.0, 10.0, size=count))


# --------------------------------------------------------------------- codec


def check_codec_exactness(
    formats: Sequence[Fp8Format] = (E4M3, E3M4, E5M2),
    alphas: int = 100,
    seed: int = 0,
) -> BenchReport:
    """All 256 codes survive decode -> encode, and the grid maximum equals alpha to one ulp."""
    report = BenchReport(suite="codec")
    rng = substream(seed, "bench", 1)
    for fmt in formats:
        codes = np.arange(256, dtype=np.uint8)
        for alpha in (480.0, *_random_alphas(rng, 3)):
            qt = QuantizedTensor(codes=codes, shape=(256,), clip=ClipParam(alpha=alpha), format=fmt)
            again = fp8_codec.encode(fp8_codec.decode(qt), alpha, fmt)
            mismatches = int(np.sum(again.codes != codes))
            report.add(f"{fmt.name}.round_trip.alpha={alpha:.6g}", mismatches, 0, samples=256)

        sample = _random_alphas(rng, alphas)
        ulps = [abs(fp8_codec.grid_max(a, fmt) - a) / np.spacing(a) for a in sample]
        report.add(f"{fmt.name}.grid_max_ulps", max(ulps), 1.0, samples=alphas)
    return report


# ---------------------------------------------------------------- unbiasedness


def check_unbiasedness(
    fmt: Fp8Format,
    alphas: Sequence[float],
    xs: Sequence[float],
    draws: int = 100000,
    seed: int = 0,
    quantizer: str = "rand",
) -> BenchReport:
    """
    Monte-Carlo mean of the quantizer at each (x, alpha) against 4 standard errors, 4 * (s/2) / sqrt(N).

    With quantizer="det" the same test demonstrates the bias of round-to-nearest.
    """
    if draws < 10000:
        raise ValueError("draws must be >= 10^4")
    report = BenchReport(suite=f"unbiasedness_{quantizer}")
    for i, (x, alpha) in enumerate(zip(xs, alphas)):
        rng = substream(seed, "bench", 2, i)
        s = fp8_codec.compute_scale(min(abs(x), fp8_codec.grid_max(alpha, fmt)), alpha, fmt)
        values = np.full(draws, float(x))
        q = fp8_codec.q_rand(values, alpha, fmt, rng=rng) if quantizer == "rand" else fp8_codec.q_det(values, alpha, fmt)
        deviation = abs(float(np.mean(q)) - float(x))
        report.add(f"x={x:.6g},alpha={alpha:.6g}", deviation, 4.0 * (s / 2.0) / math.sqrt(draws), samples=draws)
    return report


def unbiasedness_points(count: int, seed: int) -> Tuple[List[float], List[float]]:
    """Random (x, alpha) pairs with x inside the clip range."""
    rng = substream(seed, "bench", 3)
    alphas = _random_alphas(rng, count)
    xs = alphas * rng.uniform(-1.0, 1.0, size=count)
    return xs.tolist(), alphas.tolist()


# ------------------------------------------------------------- error bounds


def _binades(alpha: float, fmt: Fp8Format) -> List[Tuple[float, float, float]]:
    """(low, high, scale) of every run of grid values sharing one scale; high is exclusive except at the top."""
    grid = fp8_codec.grid_values(alpha, fmt)[1:]
    scales = fp8_codec.compute_scale(grid, alpha, fmt)
    gmax = fp8_codec.grid_max(alpha, fmt)
    out = []
    for s in np.unique(scales):
        members = grid[scales == s]
        out.append((float(members[0]), float(min(members[-1] + s, gmax)), float(s)))
    return out


def _mean_sq_residual(x: np.ndarray, alpha: float, fmt: Fp8Format, draws: int, rng) -> Tuple[float, float]:
    """Monte-Carlo E||r||^2 of the stochastic quantizer and its standard error."""
    batch = np.broadcast_to(x, (draws,) + x.shape)
    r = fp8_codec.q_rand(batch, alpha, fmt, rng=rng) - batch
    per_draw = np.sum(np.square(r).reshape(draws, -1), axis=1)
    return float(np.mean(per_draw)), float(np.std(per_draw) / math.sqrt(draws))


def check_error_bounds(
    fmt: Fp8Format,
    trials: int = 1000,
    draws: int = 200,
    dim: int = 16,
    seed: int = 0,
    tol: float = 0.1,
) -> BenchReport:
    """
    Quantization error moments against their bounds:

    - E||r(x)||^2 <= S * ||x||_1 for stochastic rounding,
    - E|r(g + y)|^2 <= S * |y| for grid point g, across the three ways g and
      g + y can sit relative to each other's binades,
    - ||r(x)||_2 <= sqrt(d) * S for both quantizers.

    Monte-Carlo estimates get 4 standard errors of slack on top of `tol`.
    """
    if trials < 1000:
        raise ValueError("trials must be >= 10^3")
    report = BenchReport(suite=f"error_bounds_{fmt.name}")
    rng = substream(seed, "bench", 4)

    zero = np.zeros(dim)
    zero_err = fp8_codec.quant_error(zero, 1.0, fmt, "rand", rng=rng).squared_l2
    zero_err += fp8_codec.quant_error(zero, 1.0, fmt, "det").squared_l2
    report.add("zero_vector", zero_err, 0.0, samples=1)

    # second moment vs S * ||x||_1, magnitudes log-uniform from the subnormals up to alpha
    violations, worst = 0, 0.0
    for _ in range(trials):
        alpha = float(_random_alphas(rng, 1)[0])
        smallest = float(fp8_codec.compute_scale(0.0, alpha, fmt))
        mags = np.exp(rng.uniform(math.log(smallest / 4.0), math.log(alpha), size=dim))
        x = rng.choice([-1.0, 1.0], size=dim) * mags
        S = float(np.max(fp8_codec.compute_scale(x, alpha, fmt)))
        mean, se = _mean_sq_residual(x, alpha, fmt, draws, rng)
        bound = S * float(np.sum(np.abs(x)))
        worst = max(worst, mean / bound)
        if mean > bound * (1.0 + tol) + 4.0 * se:
            violations += 1
    report.add("second_moment.violations", violations, 0, samples=trials, detail=f"worst ratio {worst:.4f}")

    # offsets from a grid point, one family at a time
    for family in ("i<=j", "i>j+1", "i=j+1"):
        violations, worst, used = 0, 0.0, 0
        for _ in range(trials):
            alpha = float(_random_alphas(rng, 1)[0])
            binades = _binades(alpha, fmt)
            n = len(binades)
            if family == "i<=j":
                i = int(rng.integers(n))
                j = int(rng.integers(i, n))
            elif family == "i>j+1":
                if n < 3:
                    continue
                i = int(rng.integers(2, n))
                j = int(rng.integers(0, i - 1))
            else:
                i = int(rng.integers(1, n))
                j = i - 1
            lo_i, hi_i, s_i = binades[i]
            g = lo_i + s_i * int(rng.integers(0, max(1, round((hi_i - lo_i) / s_i))))
            lo_j, hi_j, _ = binades[j]
            target = float(rng.uniform(max(lo_j, g) if i == j else lo_j, hi_j))
            sign = float(rng.choice([-1.0, 1.0]))
            g, target = sign * g, sign * target
            y = target - g
            if y == 0.0:
                continue
            S = float(max(fp8_codec.compute_scale(g, alpha, fmt), fp8_codec.compute_scale(target, alpha, fmt)))
            mean, se = _mean_sq_residual(np.array([target]), alpha, fmt, draws, rng)
            bound = S * abs(y)
            worst = max(worst, mean / bound)
            used += 1
            if mean > bound * (1.0 + tol) + 4.0 * se:
                violations += 1
        report.add(f"grid_offset[{family}].violations", violations, 0, samples=used, detail=f"worst ratio {worst:.4f}")

    # deterministic norm bound on Gaussian tensors
    d = 100
    violations, worst = 0, 0.0
    for _ in range(trials):
        x = rng.normal(size=d) * float(_random_alphas(rng, 1)[0])
        alpha = float(np.max(np.abs(x))) * float(rng.uniform(1.0, 2.0))
        for mode in ("det", "rand"):
            err = fp8_codec.quant_error(x, alpha, fmt, mode, rng=rng)
            bound = math.sqrt(d) * err.max_scale
            worst = max(worst, err.l2 / bound)
            if err.l2 > bound:
                violations += 1
    report.add("l2_norm.violations", violations, 0, samples=2 * trials, detail=f"worst ratio {worst:.4f}")
    return report


# ------------------------------------------------------------------ STE


def _ste_case(rng: np.random.Generator, fmt: Fp8Format) -> Tuple[ParamSet, Dataset, ModelSpec]:
    spec = ModelSpec.mlp(4, [5], 3, quant_mode="qat-det", fmt=fmt)
    batch = Dataset(features=rng.normal(size=(8, 4)), labels=rng.integers(0, 3, size=8), num_classes=3)
    params = init_params(spec, rng, calibration=batch)
    # clips below the largest magnitudes so that saturation is exercised too
    params.weight_clips = {
        name: ClipParam(alpha=0.8 * float(np.max(np.abs(params.tensors[name]))))
        for name in params.quantized_names()
    }
    params.act_clips = {site: ClipParam(alpha=0.8 * c.alpha) for site, c in params.act_clips.items()}
    return params, batch, spec


def _perturbed(params: ParamSet, kind: str, name: str, index: Optional[tuple], delta: float) -> ParamSet:
    out = params.copy()
    if kind == "tensor":
        out.tensors[name][index] += delta
    elif kind == "alpha":
        out.weight_clips[name] = ClipParam(alpha=out.weight_clips[name].alpha + delta)
    else:
        out.act_clips[name] = ClipParam(alpha=out.act_clips[name].alpha + delta)
    return out


def check_ste_gradients(trials: int = 200, seed: int = 0, fmt: Fp8Format = E4M3, rtol: float = 1e-4) -> BenchReport:
    """
    Analytic STE gradients against central differences of the frozen-rounding surrogate loss.

    Coordinates whose one-sided differences disagree (a ReLU kink inside the
    stencil) are skipped and redrawn.
    """
    report = BenchReport(suite="ste")
    rng = substream(seed, "bench", 5)
    worst = {"tensor": 0.0, "alpha": 0.0, "beta": 0.0}
    counts = {"tensor": 0, "alpha": 0, "beta": 0}
    surrogate_gap = 0.0
    skipped = 0
    done = 0
    while done < trials and skipped < 10 * trials:
        params, batch, spec = _ste_case(rng, fmt)
        loss, cache = forward_qat(params, batch, spec)
        reference = cache.records
        grads = backward_ste(cache)
        f0 = ste_surrogate_loss(params, batch, spec, reference)
        surrogate_gap = max(surrogate_gap, abs(f0 - loss) / max(1.0, abs(loss)))

        kind = ("tensor", "alpha", "beta")[int(rng.integers(3))]
        if kind == "tensor":
            name = sorted(params.tensors)[int(rng.integers(len(params.tensors)))]
            index = tuple(int(rng.integers(n)) for n in params.tensors[name].shape)
            value = float(params.tensors[name][index])
            analytic = float(grads.tensors[name][index])
        elif kind == "alpha":
            name = sorted(params.weight_clips)[int(rng.integers(len(params.weight_clips)))]
            index, value, analytic = None, params.alpha(name), grads.weight_clips[name]
        else:
            name = sorted(params.act_clips)[int(rng.integers(len(params.act_clips)))]
            index, value, analytic = None, params.beta(name), grads.act_clips[name]

        h = 1e-6 * max(1.0, abs(value))
        f_plus = ste_surrogate_loss(_perturbed(params, kind, name, index, h), batch, spec, reference)
        f_minus = ste_surrogate_loss(_perturbed(params, kind, name, index, -h), batch, spec, reference)
        forward_diff, backward_diff = (f_plus - f0) / h, (f0 - f_minus) / h
        if abs(forward_diff - backward_diff) > 1e-3 * max(abs(forward_diff), abs(backward_diff), 1e-6):
            skipped += 1
            continue

        numeric = (f_plus - f_minus) / (2.0 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        worst[kind] = max(worst[kind], rel)
        counts[kind] += 1
        done += 1

    report.add("surrogate_matches_forward", surrogate_gap, 1e-12, samples=done)
    for kind in ("tensor", "alpha", "beta"):
        report.add(f"d_{kind}.max_rel_error", worst[kind], rtol, samples=counts[kind])
    report.add("sampled_coordinates", done, trials, passed=done >= trials, detail=f"{skipped} skipped at kinks")
    return report


# ------------------------------------------------------------- QAT rate


def _problem_for(source: ProblemSource, seed: int) -> QuadraticProblem:
    return source(seed) if callable(source) else source


def _fixed_alpha(problem: QuadraticProblem) -> float:
    return 1.25 * float(np.max(np.abs(problem.w_star)))


def run_qat_sgd(
    problem: QuadraticProblem,
    horizon: int,
    rng: np.random.Generator,
    fmt: Optional[Fp8Format] = None,
    alpha: Optional[float] = None,
    rows: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[np.ndarray, float, float]:
    """
    SGD with quantized forward weights: w <- w - eta * grad F(Q_det(w); xi) with eta = 1/sqrt(T).

    Starts from zero and samples one row per step, or follows `rows` (one
    index array per step) when given. Returns the gap
    F(Q(w_t)) - F(w*) for every t, the largest stochastic gradient norm G and
    the largest scale S used (0 without quantization).

    Raises:
        TrainingDivergedError: If an iterate stops being finite.
    """
    eta = 1.0 / math.sqrt(horizon)
    if rows is None:
        rows = [np.array([i]) for i in rng.integers(problem.stacked_matrix.shape[0], size=horizon)]
    elif len(rows) != horizon:
        raise ValueError(f"need {horizon} row batches, got {len(rows)}")
    w = np.zeros(problem.dim)
    gaps = np.empty(horizon)
    G = 0.0
    S = 0.0
    for t in range(horizon):
        if fmt is not None:
            wq = fp8_codec.q_det(w, alpha, fmt)
            S = max(S, float(np.max(fp8_codec.compute_scale(np.clip(w, -alpha, alpha), alpha, fmt))))
        else:
            wq = w
        gaps[t] = problem.gap(wq)
        g = problem.stochastic_gradient(wq, np.asarray(rows[t]))
        G = max(G, float(np.linalg.norm(g)))
        w = w - eta * g
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(f"diverged at step {t} of {horizon}")
    return gaps, G, S


def bench_qat_convergence(
    problem: ProblemSource,
    formats: Sequence[Fp8Format] = (E4M3, E3M4),
    horizons: Sequence[int] = (1024, 4096, 16384),
    seeds: int = 5,
    tol: float = 0.1,
    tail_fraction: float = 0.25,
) -> BenchReport:
    """
    Rate and floor of quantized SGD on convex quadratics.

    - Without quantization the mean gap over all iterations (tau drawn uniformly)
      falls as 1/sqrt(T): the log-log slope over `horizons` is -0.5 +- 0.1.
    - The quantization floor is the square root of the excess tail gap over the
      unquantized run with the same minibatches; one extra mantissa bit halves it,
      so the ratio of the first two formats lies in [1.5, 2.5].
    - Every quantized run stays below (||w1 - w*||^2 + G^2) / (2 sqrt(T)) + G sqrt(d) S.

    `problem` is one instance or a factory called with the seed index.
    """
    report = BenchReport(suite="qat")
    horizons = sorted(horizons)
    top = horizons[-1]
    tail = max(1, int(tail_fraction * top))

    mean_gaps = {T: [] for T in horizons}
    base_tail = []
    excess = {fmt.name: [] for fmt in formats}
    for seed in range(seeds):
        prob = _problem_for(problem, seed)
        alpha = _fixed_alpha(prob)
        w1_dist = float(np.sum(np.square(prob.w_star)))
        for T in horizons:
            try:
                gaps, _, _ = run_qat_sgd(prob, T, substream(seed, "bench", 6, T))
            except TrainingDivergedError as e:
                report.add(f"unquantized.T={T}.seed={seed}", math.inf, 0.0, passed=False, detail=str(e))
                return report
            mean_gaps[T].append(float(np.mean(gaps)))
            if T == top:
                base_tail.append(float(np.mean(gaps[-tail:])))
                report.series[f"gap.fp32.seed{seed}"] = gaps[:: max(1, top // 512)].tolist()

        for fmt in formats:
            try:
                gaps, G, S = run_qat_sgd(prob, top, substream(seed, "bench", 6, top), fmt=fmt, alpha=alpha)
            except TrainingDivergedError as e:
                report.add(f"{fmt.name}.seed={seed}", math.inf, 0.0, passed=False, detail=str(e))
                return report
            excess[fmt.name].append(float(np.mean(gaps[-tail:])) - base_tail[-1])
            rhs = (w1_dist + G * G) / (2.0 * math.sqrt(top)) + G * math.sqrt(prob.dim) * S
            report.add(f"{fmt.name}.seed{seed}.gap_vs_rhs", float(np.mean(gaps)), rhs, tol=tol, samples=top)
            report.series[f"gap.{fmt.name}.seed{seed}"] = gaps[:: max(1, top // 512)].tolist()

    curve = [float(np.mean(mean_gaps[T])) for T in horizons]
    slope = float(np.polyfit(np.log(horizons), np.log(curve), 1)[0])
    report.constants["slope"] = slope
    report.series["mean_gap_by_horizon"] = curve
    report.add("unquantized.slope_deviation", abs(slope + 0.5), 0.1, samples=seeds * len(horizons), detail=f"slope {slope:.4f}")

    floors = {name: math.sqrt(max(float(np.mean(v)), 0.0)) for name, v in excess.items()}
    for name, floor in floors.items():
        report.constants[f"floor.{name}"] = floor
    if len(formats) >= 2:
        coarse, fine = formats[0].name, formats[1].name
        ratio = floors[coarse] / floors[fine] if floors[fine] > 0 else math.inf
        report.constants["floor_ratio"] = ratio
        report.add(
            f"floor_ratio.{coarse}/{fine}",
            ratio,
            2.5,
            samples=seeds,
            passed=1.5 <= ratio <= 2.5,
            detail="expected in [1.5, 2.5]",
        )
    return report


# ------------------------------------------------------ FedAvg-UQ drift


class DriftObserver(RoundObserver):
    """Collects the gap of the broadcast model and the drift V_t of local quantized iterates."""

    def __init__(self, problem: QuadraticProblem, fmt: Fp8Format):
        self.problem = problem
        self.fmt = fmt
        self._lock = threading.Lock()
        self._received: Dict[int, np.ndarray] = {}
        self._drift: Dict[Tuple[int, int], float] = {}
        self.gaps: List[float] = []
        self.drift: List[float] = []
        self.G = 0.0
        self.S = 0.0

    def on_broadcast(self, plan: RoundPlan, state: GlobalState, received: Dict[int, ParamSet]) -> None:
        self._received = {k: p.tensors["layer0.weight"].ravel().copy() for k, p in received.items()}
        self._drift = {}
        self.gaps.append(float(np.mean([self.problem.gap(w) for w in self._received.values()])))

    def on_local_step(self, round: int, client_id: int, step: int, params: ParamSet, grads: GradSet) -> None:
        w = params.tensors["layer0.weight"].ravel()
        alpha = params.alpha("layer0.weight")
        wq = fp8_codec.q_det(w, alpha, self.fmt)
        s = float(np.max(fp8_codec.compute_scale(np.clip(w, -alpha, alpha), alpha, self.fmt)))
        value = float(np.sum(np.square(self._received[client_id] - wq)))
        with self._lock:
            self._drift[(client_id, step)] = value
            self.G = max(self.G, grads.norm())
            self.S = max(self.S, s)

    def on_aggregate(self, plan: RoundPlan, state: GlobalState) -> None:
        values = [self._drift[key] for key in sorted(self._drift)]
        self.drift.append(float(np.mean(values)) if values else 0.0)


def run_fedavg_quadratic(
    problem: QuadraticProblem,
    communication: CommunicationMode,
    local_steps: int,
    rounds: int,
    seed: int,
    batch_size: int = 5,
    fmt: Fp8Format = E4M3,
    threads: int = 1,
    observer: Optional[DriftObserver] = None,
) -> DriftObserver:
    """Full federated rounds on the quadratic: linear model, fixed alpha, zero init, eta = 1/sqrt(UT), C = 1."""
    alpha = _fixed_alpha(problem)
    spec = ModelSpec.linear(problem.dim, 1, bias=False, quant_mode="qat-det", fmt=fmt)
    local = LocalUpdateConfig(
        steps=local_steps,
        lr=1.0 / math.sqrt(local_steps * rounds),
        weight_decay=0.0,
        batch_size=batch_size,
        learn_clips=False,
    )
    observer = observer if observer is not None else DriftObserver(problem, fmt)
    orchestrator = FederatedOrchestrator(
        quadratic_clients(problem),
        spec,
        local,
        participation=1.0,
        aggregation="uq",
        communication=communication,
        seed=seed,
        threads=threads,
        observer=observer,
        initial_params=init_params(spec, substream(seed, "init"), weight_clip=alpha, zero_init=True),
    )
    orchestrator.run(rounds, log_every=0)
    return observer


def _block_means(series: Sequence[float], blocks: int) -> List[float]:
    parts = np.array_split(np.asarray(series, dtype=np.float64), blocks)
    return [float(np.mean(p)) for p in parts if p.size]


def gap_trend(
    gaps: Sequence[float],
    blocks: int = 10,
    tol: float = 0.1,
    tail_fraction: float = 0.3,
) -> Tuple[int, float, float]:
    """
    Rises of the block-averaged gap before it reaches its floor.

    The floor band is the tail mean plus three standard deviations of the
    per-round tail gaps; a rise is a block exceeding its predecessor by more
    than `tol` while the predecessor is still above the band. Returns
    (rises, floor level, band top).
    """
    series = np.asarray(gaps, dtype=np.float64)
    tail = series[-max(2, int(tail_fraction * series.size)) :]
    level = float(np.mean(tail))
    band = level + 3.0 * float(np.std(tail))
    means = _block_means(series, blocks)
    rises = sum(1 for a, b in zip(means, means[1:]) if a > band and b > a * (1.0 + tol))
    return rises, level, band


BENCH_MODES: Dict[str, CommunicationMode] = {"unbiased": "quantized-rand", "biased": "quantized-det", "none": "none"}


def bench_fedavg_uq(
    problem: ProblemSource,
    local_steps: int = 10,
    rounds: int = 500,
    seeds: int = 5,
    tol: float = 0.1,
    batch_size: int = 5,
    fmt: Fp8Format = E4M3,
    threads: int = 1,
    modes: Sequence[str] = ("unbiased", "biased"),
) -> BenchReport:
    """
    Federated rounds under unbiased and biased link quantization (plus, on
    request, unquantized links as a reference).

    Checks, per seed and mode: the drift bound 18 U^3 S sqrt(d) G eta + 9 U^2 eta^2 G^2
    at every round, a block-averaged gap that does not rise before reaching its
    floor band, and a final gap no larger than the initial one. Across seeds:
    the median final gap with unbiased links is strictly below the one with
    biased links. A diverging run is recorded, not raised.
    """
    unknown = set(modes) - set(BENCH_MODES)
    if unknown or not {"unbiased", "biased"} <= set(modes):
        raise ValueError(f"modes must include unbiased and biased and come from {sorted(BENCH_MODES)}")
    report = BenchReport(suite="fedavg")
    finals: Dict[str, List[float]] = {m: [] for m in modes}
    eta = 1.0 / math.sqrt(local_steps * rounds)

    for seed in range(seeds):
        prob = _problem_for(problem, seed)
        for mode in modes:
            try:
                obs = run_fedavg_quadratic(
                    prob, BENCH_MODES[mode], local_steps, rounds, seed, batch_size, fmt, threads
                )
            except Exception as e:
                logger.warning(f"FedAvg bench run {mode}/seed {seed} failed: {e}")
                finals[mode].append(math.inf)
                report.add(f"{mode}.seed{seed}.completed", 1, 0, passed=(mode == "biased"), detail=str(e))
                continue

            final = float(np.mean(obs.gaps[-max(1, rounds // 10) :]))
            finals[mode].append(final)
            report.series[f"gap.{mode}.seed{seed}"] = obs.gaps
            report.series[f"drift.{mode}.seed{seed}"] = obs.drift

            U, d = local_steps, prob.dim
            drift_bound = 18 * U**3 * obs.S * math.sqrt(d) * obs.G * eta + 9 * U**2 * eta**2 * obs.G**2
            report.add(
                f"{mode}.seed{seed}.max_drift",
                max(obs.drift),
                drift_bound,
                tol=tol,
                samples=rounds,
                detail=f"G={obs.G:.4g} S={obs.S:.4g}",
            )

            rises, level, band = gap_trend(obs.gaps, tol=tol)
            report.add(
                f"{mode}.seed{seed}.gap_rises",
                rises,
                0,
                samples=rounds,
                detail=f"floor {level:.4g}, band {band:.4g}",
            )
            first = float(np.mean(obs.gaps[: max(1, rounds // 10)]))
            report.add(f"{mode}.seed{seed}.gap_decreased", final, first, tol=tol, samples=rounds)

    medians = {m: float(np.median(v)) for m, v in finals.items()}
    for m, value in medians.items():
        report.constants[f"median_final_gap.{m}"] = value
    report.add(
        "unbiased_below_biased",
        medians["unbiased"],
        medians["biased"],
        samples=seeds,
        passed=medians["unbiased"] < medians["biased"],
    )
    return report


# ------------------------------------------------------------------ driver


def run_all(cfg: VerifySection, seed: int = 0, fmt: Fp8Format = E4M3, threads: int = 1) -> List[BenchReport]:
    """Run the configured suites in a fixed order."""
    reports: List[BenchReport] = []
    suites = set(cfg.suites)

    if "codec" in suites:
        reports.append(check_codec_exactness(alphas=cfg.codec_alphas, seed=seed))
    if "unbiasedness" in suites:
        xs, alphas = unbiasedness_points(cfg.unbias_points, seed)
        reports.append(check_unbiasedness(fmt, alphas, xs, cfg.unbias_draws, seed))
        det = check_unbiasedness(fmt, alphas, xs, cfg.unbias_draws, seed, quantizer="det")
        caught = len(det.failures)
        demo = BenchReport(suite="det_bias")
        demo.add("off_grid_points_detected", caught, 1, samples=len(xs), passed=caught >= 1)
        reports.append(demo)
    if "error_bounds" in suites:
        reports.append(check_error_bounds(fmt, cfg.error_trials, cfg.error_draws, seed=seed, tol=cfg.tol))
    if "ste" in suites:
        reports.append(check_ste_gradients(cfg.ste_trials, seed, fmt))
    if "qat" in suites:
        reports.append(
            bench_qat_convergence(
                lambda s: synth_quadratic(1, cfg.qat_dim, 0.0, seed + s, rows_per_client=1000),
                horizons=cfg.qat_horizons,
                seeds=cfg.qat_seeds,
                tol=cfg.tol,
            )
        )
    if "fedavg" in suites:
        reports.append(
            bench_fedavg_uq(
                lambda s: synth_quadratic(cfg.fed_clients, cfg.fed_dim, cfg.fed_heterogeneity, seed + s),
                local_steps=cfg.fed_local_steps,
                rounds=cfg.fed_rounds,
                seeds=cfg.fed_seeds,
                tol=cfg.tol,
                batch_size=cfg.fed_batch_size,
                fmt=fmt,
                threads=threads,
            )
        )

    for report in reports:
        status = "passed" if report.passed else f"FAILED ({len(report.failures)} checks)"
        logger.info(f"Bench suite {report.suite}: {status}")
    return reports

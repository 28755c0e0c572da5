"""
Server-side aggregation for UQ+: alternating minimization of the weighted
quantized MSE between the new global tensor and the received client tensors.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.federation import ServerOptConfig, ServerOptResult
from app.models.fp8 import Fp8Format
from app.services.fp8_codec import grid_max, q_det, q_rand

logger = logging.getLogger(__name__)


def weighted_mean(values: Sequence, weights: Sequence[float]):
    """Sum of weight * value, accumulated in the given order."""
    total = np.zeros_like(np.asarray(values[0], dtype=np.float64))
    for value, weight in zip(values, weights):
        total = total + weight * np.asarray(value, dtype=np.float64)
    return total


class ServerOptimizer:
    """
    Finds (w, alpha) for one quantized tensor by gradient descent on w with alpha
    fixed at the weighted client mean, then a grid search on alpha with w fixed.
    """

    def __init__(self, cfg: ServerOptConfig, fmt: Fp8Format):
        self.cfg = cfg
        self.fmt = fmt

    def _quantize(
        self,
        w: np.ndarray,
        alpha: float,
        uniforms: Optional[np.ndarray],
        rng: Optional[np.random.Generator],
    ) -> np.ndarray:
        if self.cfg.objective_quantizer == "det":
            return q_det(w, alpha, self.fmt)
        if self.cfg.objective_quantizer == "rand-resampled":
            return q_rand(w, alpha, self.fmt, rng=rng)
        return q_rand(w, alpha, self.fmt, uniforms=uniforms)

    def _fixed_draw(
        self, shape, uniforms: Optional[np.ndarray], rng: Optional[np.random.Generator]
    ) -> Optional[np.ndarray]:
        if self.cfg.objective_quantizer == "rand-fixed-seed" and uniforms is None and rng is not None:
            return rng.random(shape)
        return uniforms

    def objective(
        self,
        w: np.ndarray,
        alpha: float,
        uploads: Sequence[np.ndarray],
        weights: Sequence[float],
        uniforms: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> float:
        """sum_k pi_k * ||Q(w; alpha) - u_k||^2."""
        q = self._quantize(w, alpha, uniforms, rng)
        return float(sum(p * np.sum(np.square(q - u)) for u, p in zip(uploads, weights)))

    def optimize_weights(
        self,
        uploads: Sequence[np.ndarray],
        weights: Sequence[float],
        alpha_fixed: float,
        uniforms: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[np.ndarray, float, Optional[float], bool]:
        """
        Gradient descent on w from the federated average, once per learning rate.

        Returns:
            The winning w, its MSE, the winning learning rate (None on fallback)
            and whether the federated average was returned because every
            candidate had a non-finite MSE.
        """
        avg = weighted_mean(uploads, weights)
        uniforms = self._fixed_draw(avg.shape, uniforms, rng)
        gmax = grid_max(alpha_fixed, self.fmt)
        best: Tuple[Optional[np.ndarray], float, Optional[float]] = (None, math.inf, None)
        for lr in self.cfg.lr_grid:
            w = avg.copy()
            for _ in range(self.cfg.gd_steps):
                q = self._quantize(w, alpha_fixed, uniforms, rng)
                # STE: identity inside the clip range, blocked outside
                grad = 2.0 * (q - avg) * (np.abs(w) <= gmax)
                w = w - lr * grad
            mse = self.objective(w, alpha_fixed, uploads, weights, uniforms, rng)
            if math.isfinite(mse) and mse < best[1]:
                best = (w, mse, lr)

        if best[0] is None:
            logger.warning("Server weight descent produced no finite MSE, keeping the federated average")
            return avg, self.objective(avg, alpha_fixed, uploads, weights, uniforms, rng), None, True
        return best[0], best[1], best[2], False

    def optimize_alpha(
        self,
        w_fixed: np.ndarray,
        uploads: Sequence[np.ndarray],
        weights: Sequence[float],
        client_alphas: Sequence[float],
        uniforms: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> float:
        """Grid search over [min alpha_k, max alpha_k]; ties go to the smaller alpha."""
        lo, hi = float(min(client_alphas)), float(max(client_alphas))
        if hi <= lo:
            return lo
        uniforms = self._fixed_draw(np.shape(w_fixed), uniforms, rng)
        candidates = np.linspace(lo, hi, self.cfg.alpha_grid_points)
        scores = np.array(
            [self.objective(w_fixed, float(a), uploads, weights, uniforms, rng) for a in candidates]
        )
        scores = np.where(np.isfinite(scores), scores, np.inf)
        return float(candidates[int(np.argmin(scores))])

    def server_optimize(
        self,
        uploads: Dict[str, List[np.ndarray]],
        client_alphas: Dict[str, List[float]],
        weights: Sequence[float],
        rng: np.random.Generator,
        previous: Optional[Dict[str, np.ndarray]] = None,
        links_quantized: bool = True,
    ) -> ServerOptResult:
        """
        One alternation pass (w, then alpha) for every quantized tensor.

        Args:
            uploads: Decoded client tensors per tensor name, in ascending client-id order.
            client_alphas: The clips those tensors were quantized with, same order.
            weights: n_k / m_t per client, same order.
            rng: Server stream for the objective's stochastic quantizer.
            previous: Last round's global tensors, used for the alpha search when
                `alpha_objective_weights` is "previous".
            links_quantized: With unquantized links the federated average is returned as is.

        Returns:
            ServerOptResult with the chosen tensors and clips. A tensor whose
            candidate does not beat the federated average (under the same quantizer
            draws) keeps the federated average and sets `fallback`.
        """
        tensors: Dict[str, np.ndarray] = {}
        alphas: Dict[str, float] = {}
        mse_average = 0.0
        mse_selected = 0.0
        lrs: Dict[str, float] = {}
        fallback = False

        for name in sorted(uploads):
            values = uploads[name]
            avg = weighted_mean(values, weights)
            alpha_avg = float(weighted_mean(client_alphas[name], weights))
            if not links_quantized:
                tensors[name], alphas[name] = avg, alpha_avg
                continue

            uniforms = rng.random(avg.shape) if self.cfg.objective_quantizer == "rand-fixed-seed" else None
            # the safety comparison always uses one fixed draw, whatever the objective mode
            check = uniforms if uniforms is not None else rng.random(avg.shape)

            def fixed_mse(w: np.ndarray, a: float) -> float:
                if self.cfg.objective_quantizer == "det":
                    return self.objective(w, a, values, weights)
                q = q_rand(w, a, self.fmt, uniforms=check)
                return float(sum(p * np.sum(np.square(q - u)) for u, p in zip(values, weights)))

            w_new, _, lr, descent_failed = self.optimize_weights(values, weights, alpha_avg, uniforms, rng)
            w_for_alpha = w_new
            if self.cfg.alpha_objective_weights == "previous" and previous is not None and name in previous:
                w_for_alpha = previous[name]
            alpha_new = self.optimize_alpha(w_for_alpha, values, weights, client_alphas[name], uniforms, rng)

            base = fixed_mse(avg, alpha_avg)
            candidate = fixed_mse(w_new, alpha_new)
            if descent_failed or not math.isfinite(candidate) or candidate > base:
                logger.warning(
                    f"Server optimization of {name} did not improve on the federated average "
                    f"({candidate:.6g} vs {base:.6g}), keeping the average"
                )
                tensors[name], alphas[name] = avg, alpha_avg
                candidate = base
                fallback = True
            else:
                tensors[name], alphas[name] = w_new, alpha_new
                lrs[name] = lr
            mse_average += base
            mse_selected += candidate

        return ServerOptResult(
            tensors=tensors,
            alphas=alphas,
            mse_average=mse_average,
            mse_selected=mse_selected,
            lrs=lrs,
            fallback=fallback,
        )

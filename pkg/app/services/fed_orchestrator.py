"""
Federated training loop: sample clients, broadcast the quantized global model,
train locally, upload quantized client models and aggregate them.

Every random decision draws from a stream keyed by (seed, round, client,
purpose), and aggregation always runs in ascending client-id order, so a run
gives the same result for any number of worker threads.
"""

import asyncio
import logging
import math
import time
from abc import ABC
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import ClientTrainingError, StragglerError
from app.models.data import Dataset
from app.models.federation import (
    AggregationMode,
    ClientRecord,
    ClientUpload,
    CommunicationMode,
    GlobalState,
    RoundPlan,
    ServerOptConfig,
)
from app.models.fp8 import ClipParam
from app.models.ledger import RoundEntry, RoundLedger
from app.models.training import GradSet, LocalUpdateConfig, ModelSpec, ParamSet
from app.services import fp8_codec
from app.services.metrics_ledger import record_round
from app.services.qat_engine import calibrate_weight_clips, evaluate_model, init_params, local_update
from app.services.rng import substream
from app.services.server_optimizer import ServerOptimizer, weighted_mean

logger = logging.getLogger(__name__)

CLIP_BYTES = 4


class RoundObserver(ABC):
    """Hooks into a running federation; every hook is a no-op by default.

    `on_local_step` is called from worker threads.
    """

    def on_broadcast(self, plan: RoundPlan, state: GlobalState, received: Dict[int, ParamSet]) -> None:
        pass

    def on_local_step(self, round: int, client_id: int, step: int, params: ParamSet, grads: GradSet) -> None:
        pass

    def on_aggregate(self, plan: RoundPlan, state: GlobalState) -> None:
        pass


class FederatedOrchestrator:
    """Runs FP8 federated averaging (UQ), its server-optimized variant (UQ+) or the FP32 baseline."""

    def __init__(
        self,
        clients: List[ClientRecord],
        spec: ModelSpec,
        local_cfg: LocalUpdateConfig,
        participation: float = 0.1,
        aggregation: AggregationMode = "uq",
        communication: CommunicationMode = "quantized-rand",
        seed: int = 0,
        server_opt: Optional[ServerOptConfig] = None,
        threads: int = 1,
        observer: Optional[RoundObserver] = None,
        eval_data: Optional[Dataset] = None,
        initial_params: Optional[ParamSet] = None,
    ):
        if not clients:
            raise ValueError("a federation needs at least one client")
        if not 0.0 < participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if aggregation == "fp32-baseline" and communication != "none":
            raise ValueError("the fp32 baseline communicates unquantized tensors")
        if threads < 1:
            raise ValueError("threads must be >= 1")

        self.clients = {c.id: c for c in sorted(clients, key=lambda c: c.id)}
        self.spec = spec
        self.local_cfg = local_cfg
        self.seed = seed
        self.threads = threads
        self.observer = observer
        self.eval_data = eval_data
        self.active_per_round = max(1, int(math.floor(participation * len(self.clients) + 0.5)))
        self.server_optimizer = ServerOptimizer(server_opt or ServerOptConfig(), spec.fmt)

        if initial_params is None:
            first = next(iter(self.clients.values())).shard
            calibration = first.take(np.arange(min(first.size, local_cfg.batch_size)))
            initial_params = init_params(spec, substream(seed, "init"), calibration=calibration)
        self.state = GlobalState(params=initial_params, aggregation=aggregation, communication=communication)

    # ------------------------------------------------------------------ links

    def _quantizer(self, x: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
        if self.state.communication == "quantized-det":
            return fp8_codec.q_det(x, alpha, self.spec.fmt)
        return fp8_codec.q_rand(x, alpha, self.spec.fmt, rng=rng)

    def _clip_bytes(self, params: ParamSet) -> int:
        # clips only exist on the wire for quantized models or quantized links;
        # alphas of quantized links already travel in the blob headers
        if not (self.spec.quantized or self.state.quantized_links):
            return 0
        count = len(params.act_clips) if self.spec.quantized else 0
        if not self.state.quantized_links:
            count += len(params.weight_clips)
        return CLIP_BYTES * count

    def _transmit(
        self, params: ParamSet, rng: np.random.Generator
    ) -> Tuple[Dict[str, bytes], Dict[str, np.ndarray], Dict[str, float], int]:
        """Serialize a model for one link: FP8 blobs for quantized tensors, raw otherwise."""
        blobs: Dict[str, bytes] = {}
        raw: Dict[str, np.ndarray] = {}
        alphas: Dict[str, float] = {}
        nbytes = 0
        for name in sorted(params.tensors):
            tensor = params.tensors[name]
            if self.state.quantized_links and params.quantized[name]:
                alpha = fp8_codec.wire_clip(params.alpha(name))
                values = self._quantizer(tensor, alpha, rng)
                blob = fp8_codec.to_bytes(fp8_codec.encode(values, alpha, self.spec.fmt))
                blobs[name] = blob
                alphas[name] = alpha
                nbytes += len(blob)
            else:
                raw[name] = np.array(tensor, copy=True)
                if params.quantized[name]:
                    alphas[name] = params.alpha(name)
                nbytes += fp8_codec.fp32_blob_size(tensor.shape)
        return blobs, raw, alphas, nbytes + self._clip_bytes(params)

    @staticmethod
    def _receive(blobs: Dict[str, bytes], raw: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
        tensors = dict(raw)
        alphas: Dict[str, float] = {}
        for name, blob in blobs.items():
            qt = fp8_codec.from_bytes(blob)
            tensors[name] = fp8_codec.decode(qt)
            alphas[name] = qt.clip.alpha
        return tensors, alphas

    # ---------------------------------------------------------------- phases

    def sample(self, t: int) -> RoundPlan:
        """P = round(C * K) clients drawn uniformly without replacement."""
        ids = list(self.clients)
        rng = substream(self.seed, t, "sample")
        chosen = rng.choice(len(ids), size=self.active_per_round, replace=False)
        active = sorted(ids[i] for i in chosen)
        return RoundPlan(round=t, active=active, sizes={k: self.clients[k].n_k for k in active})

    def broadcast(self, plan: RoundPlan) -> Tuple[Dict[int, ParamSet], int]:
        """
        Per-client copy of the global model as it arrives over the downlink.

        Quantized links hard-reset the client's master weights to the decoded
        grid values; each client's stochastic rounding uses its own stream.
        Returns the received models and the total downlink bytes.
        """
        if not plan.active:
            raise ValueError("empty active set")
        params = self.state.params
        received: Dict[int, ParamSet] = {}
        total = 0
        for k in plan.active:
            blobs, raw, alphas, nbytes = self._transmit(params, substream(self.seed, plan.round, k, "downlink"))
            tensors, wire_alphas = self._receive(blobs, raw)
            alphas.update(wire_alphas)
            received[k] = ParamSet(
                tensors=tensors,
                weight_clips={name: ClipParam(alpha=a) for name, a in alphas.items()},
                act_clips=dict(params.act_clips),
                quantized=dict(params.quantized),
            )
            total += nbytes
        if self.observer is not None:
            self.observer.on_broadcast(plan, self.state, received)
        return received, total

    def train_client(self, t: int, k: int, params: ParamSet) -> ClientUpload:
        """Local training plus the uplink serialization of one client."""
        client = self.clients[k]
        observer = None
        if self.observer is not None:

            def observer(u: int, p: ParamSet, g: GradSet) -> None:
                self.observer.on_local_step(t, k, u, p, g)

        try:
            trained = local_update(
                params, client.shard, self.spec, self.local_cfg, substream(self.seed, t, k, "local"), observer
            )
            if self.state.quantized_links and not self.spec.quantized:
                trained = calibrate_weight_clips(trained)
            blobs, raw, alphas, nbytes = self._transmit(trained, substream(self.seed, t, k, "uplink"))
        except Exception as e:
            logger.error(f"Client {k} failed in round {t}: {e}")
            raise ClientTrainingError(k, e) from e

        return ClientUpload(
            client_id=k,
            n_k=client.n_k,
            blobs=blobs,
            raw=raw,
            weight_clips=alphas,
            act_clips={site: c.alpha for site, c in trained.act_clips.items()},
            nbytes=nbytes,
        )

    def collect_and_average(self, uploads: Dict[int, ClientUpload], plan: RoundPlan) -> Tuple[GlobalState, RoundEntry]:
        """
        Weighted aggregation of the uploads (n_k / m_t, ascending client id).

        UQ+ replaces the quantized tensors and their alphas with the server
        optimizer's choice. Returns the new state and a ledger entry carrying
        the server diagnostics (bytes are filled in by the caller).

        Raises:
            StragglerError: If an active client did not upload.
        """
        missing = [k for k in plan.active if k not in uploads]
        if missing:
            raise StragglerError(f"straggler: clients {missing} did not report in round {plan.round}")

        order = plan.active
        pi = [plan.sizes[k] / plan.m_t for k in order]
        received = [self._receive(uploads[k].blobs, uploads[k].raw) for k in order]
        clip_values = [{**uploads[k].weight_clips, **alphas} for k, (_, alphas) in zip(order, received)]

        prev = self.state.params
        tensors = {name: weighted_mean([r[0][name] for r in received], pi) for name in sorted(prev.tensors)}
        weight_clips = {
            name: float(weighted_mean([c[name] for c in clip_values], pi)) for name in prev.quantized_names()
        }
        act_clips = {
            site: float(weighted_mean([uploads[k].act_clips[site] for k in order], pi)) for site in prev.act_clips
        }

        entry = RoundEntry(round=plan.round, uplink_bytes=0, downlink_bytes=0)
        if self.state.aggregation == "uq+":
            quantized = prev.quantized_names()
            result = self.server_optimizer.server_optimize(
                uploads={name: [r[0][name] for r in received] for name in quantized},
                client_alphas={name: [c[name] for c in clip_values] for name in quantized},
                weights=pi,
                rng=substream(self.seed, plan.round, "server"),
                previous={name: prev.tensors[name] for name in quantized},
                links_quantized=self.state.quantized_links,
            )
            tensors.update(result.tensors)
            weight_clips.update(result.alphas)
            entry.server_mse_average = result.mse_average
            entry.server_mse_selected = result.mse_selected
            entry.server_lrs = dict(result.lrs)
            entry.server_fallback = result.fallback

        params = ParamSet(
            tensors=tensors,
            weight_clips={name: ClipParam(alpha=a) for name, a in weight_clips.items()},
            act_clips={site: ClipParam(alpha=b) for site, b in act_clips.items()},
            quantized=dict(prev.quantized),
        )
        state = GlobalState(
            params=params,
            round=plan.round,
            aggregation=self.state.aggregation,
            communication=self.state.communication,
        )
        return state, entry

    def evaluate(self, data: Optional[Dataset] = None) -> Tuple[float, float]:
        """Accuracy and loss of the server model as deployed (deterministic quantizers)."""
        data = data if data is not None else self.eval_data
        if data is None or data.size == 0:
            raise ValueError("eval set is empty")
        return evaluate_model(self.state.params, data, self.spec)

    # ----------------------------------------------------------------- rounds

    async def run_round(self, evaluate: bool = True) -> RoundEntry:
        """One round t = state.round + 1; updates the state and returns its ledger entry."""
        start = time.perf_counter()
        t = self.state.round + 1
        plan = self.sample(t)
        received, downlink = self.broadcast(plan)

        if self.threads == 1:
            results = [self.train_client(t, k, received[k]) for k in plan.active]
        else:
            semaphore = asyncio.Semaphore(self.threads)

            async def run_client(k: int) -> ClientUpload:
                async with semaphore:
                    return await asyncio.to_thread(self.train_client, t, k, received[k])

            results = await asyncio.gather(*(run_client(k) for k in plan.active))
        uploads = {u.client_id: u for u in results}

        state, entry = self.collect_and_average(uploads, plan)
        self.state = state
        entry.uplink_bytes = sum(u.nbytes for u in results)
        entry.downlink_bytes = downlink
        if evaluate and self.eval_data is not None:
            entry.eval_acc, entry.eval_loss = self.evaluate()
        entry.wall_ms = (time.perf_counter() - start) * 1000.0

        if self.observer is not None:
            self.observer.on_aggregate(plan, self.state)
        return entry

    async def run_async(self, rounds: int, eval_every: int = 1, log_every: int = 10, name: str = "") -> RoundLedger:
        ledger = RoundLedger(name=name)
        logger.info(
            f"Starting {self.state.aggregation} run: {rounds} rounds, {len(self.clients)} clients, "
            f"{self.active_per_round} per round, links {self.state.communication}, model {self.spec.quant_mode}"
        )
        for _ in range(rounds):
            t = self.state.round + 1
            entry = await self.run_round(evaluate=(t % eval_every == 0 or t == rounds))
            record_round(ledger, entry)
            if log_every and t % log_every == 0:
                logger.info(
                    f"Round {t}/{rounds}: acc={entry.eval_acc:.4f} loss={entry.eval_loss:.4f} "
                    f"cum_bytes={ledger.total_bytes}"
                )
        logger.info(f"Finished run after {len(ledger)} rounds, {ledger.total_bytes} bytes communicated")
        return ledger

    def run(self, rounds: int, eval_every: int = 1, log_every: int = 10, name: str = "") -> RoundLedger:
        """Synchronous wrapper around `run_async`."""
        return asyncio.run(self.run_async(rounds, eval_every=eval_every, log_every=log_every, name=name))

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.exceptions import ClientTrainingError, StragglerError
from app.models.data import Dataset
from app.models.federation import ClientRecord, ClientUpload, RoundPlan
from app.models.fp8 import ClipParam
from app.models.training import LocalUpdateConfig, ModelSpec, ParamSet
from app.services import fp8_codec
from app.services.data_partition import quadratic_clients
from app.services.fed_orchestrator import FederatedOrchestrator, RoundObserver
from app.services.qat_engine import init_params, local_update
from app.services.rng import substream


def scalar_params(value: float, alpha: float) -> ParamSet:
    return ParamSet(
        tensors={"layer0.weight": np.array([[value]])},
        weight_clips={"layer0.weight": ClipParam(alpha=alpha)},
        quantized={"layer0.weight": True},
    )


def tiny_clients(sizes):
    return [
        ClientRecord(id=k, shard=Dataset(features=np.ones((n, 1)), labels=np.zeros(n)))
        for k, n in enumerate(sizes)
    ]


def quadratic_orchestrator(problem, communication="quantized-rand", aggregation="uq", threads=1, observer=None):
    spec = ModelSpec.linear(problem.dim, 1, bias=False, quant_mode="qat-det")
    return FederatedOrchestrator(
        quadratic_clients(problem),
        spec,
        LocalUpdateConfig(steps=3, lr=0.05, batch_size=5),
        participation=0.5,
        aggregation=aggregation,
        communication=communication,
        seed=9,
        threads=threads,
        observer=observer,
        eval_data=Dataset(features=problem.stacked_matrix, labels=problem.stacked_targets),
    )


class TestSampling:
    def test_active_count(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(tiny_clients([2] * 100), spec, LocalUpdateConfig(), participation=0.1)
        plan = orch.sample(1)
        assert len(plan.active) == 10
        assert plan.active == sorted(plan.active)
        assert plan.m_t == 20

    def test_sampling_is_keyed_by_round(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(tiny_clients([2] * 50), spec, LocalUpdateConfig(), participation=0.2, seed=4)
        assert orch.sample(3).active == orch.sample(3).active


class TestBroadcast:
    def test_scalar_lands_on_a_neighbouring_grid_point(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(
            tiny_clients([1] * 8), spec, LocalUpdateConfig(), participation=1.0, initial_params=scalar_params(1.07, 480.0)
        )
        received, nbytes = orch.broadcast(orch.sample(1))
        values = {float(p.tensors["layer0.weight"][0, 0]) for p in received.values()}
        assert values <= {1.0, 1.125}
        assert nbytes == 8 * fp8_codec.blob_size((1, 1))

    def test_unquantized_link_is_exact(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(
            tiny_clients([1, 1]),
            spec,
            LocalUpdateConfig(),
            participation=1.0,
            communication="none",
            initial_params=scalar_params(1.07, 480.0),
        )
        received, _ = orch.broadcast(orch.sample(1))
        for params in received.values():
            assert params.tensors["layer0.weight"][0, 0] == 1.07

    def test_empty_plan(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(tiny_clients([1]), spec, LocalUpdateConfig())
        with pytest.raises(ValueError, match="empty active set"):
            orch.broadcast(RoundPlan(round=1, active=[], sizes={}))


class TestAggregation:
    def _orchestrator(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        return FederatedOrchestrator(
            tiny_clients([1, 3]),
            spec,
            LocalUpdateConfig(),
            participation=1.0,
            communication="none",
            initial_params=scalar_params(0.0, 1.0),
        )

    def _upload(self, k, n, value, alpha):
        return ClientUpload(
            client_id=k, n_k=n, raw={"layer0.weight": np.array([[value]])}, weight_clips={"layer0.weight": alpha}
        )

    def test_weighted_by_shard_size(self):
        orch = self._orchestrator()
        plan = RoundPlan(round=1, active=[0, 1], sizes={0: 1, 1: 3})
        uploads = {0: self._upload(0, 1, 0.0, 1.0), 1: self._upload(1, 3, 4.0, 5.0)}
        state, entry = orch.collect_and_average(uploads, plan)
        assert state.params.tensors["layer0.weight"][0, 0] == 3.0
        assert state.params.alpha("layer0.weight") == 4.0
        assert state.round == 1
        assert entry.server_mse_average is None

    def test_identical_uploads(self):
        orch = self._orchestrator()
        plan = RoundPlan(round=1, active=[0, 1], sizes={0: 1, 1: 3})
        uploads = {k: self._upload(k, n, 0.625, 1.0) for k, n in ((0, 1), (1, 3))}
        state, _ = orch.collect_and_average(uploads, plan)
        assert state.params.tensors["layer0.weight"][0, 0] == 0.625

    def test_missing_upload(self):
        orch = self._orchestrator()
        plan = RoundPlan(round=1, active=[0, 1], sizes={0: 1, 1: 3})
        with pytest.raises(StragglerError, match="straggler"):
            orch.collect_and_average({0: self._upload(0, 1, 0.0, 1.0)}, plan)


class TestRounds:
    @pytest.mark.asyncio
    async def test_round_bytes_and_ledger(self, small_quadratic):
        orch = quadratic_orchestrator(small_quadratic)
        ledger = await orch.run_async(3, log_every=0)
        per_link = 2 * fp8_codec.blob_size((3, 1))
        assert [e.round for e in ledger.entries] == [1, 2, 3]
        assert all(e.uplink_bytes == per_link and e.downlink_bytes == per_link for e in ledger.entries)
        assert ledger.total_bytes == 3 * 2 * per_link
        assert all(np.isfinite(e.eval_loss) for e in ledger.entries)

    def test_fp32_baseline_bytes(self, small_quadratic):
        spec = ModelSpec.linear(3, 1, bias=False, quant_mode="fp32")
        orch = FederatedOrchestrator(
            quadratic_clients(small_quadratic),
            spec,
            LocalUpdateConfig(steps=2, lr=0.05, batch_size=5),
            participation=1.0,
            aggregation="fp32-baseline",
            communication="none",
        )
        ledger = orch.run(2, log_every=0)
        assert all(e.round_bytes == 4 * fp8_codec.fp32_blob_size((3, 1)) * 2 for e in ledger.entries)

    def test_thread_count_does_not_change_results(self, small_quadratic):
        first = quadratic_orchestrator(small_quadratic, threads=1)
        second = quadratic_orchestrator(small_quadratic, threads=4)
        a = first.run(4, log_every=0)
        b = second.run(4, log_every=0)
        assert [e.eval_loss for e in a.entries] == [e.eval_loss for e in b.entries]
        assert_array_equal(first.state.params.flat(), second.state.params.flat())

    def test_uq_plus_records_server_diagnostics(self, small_quadratic):
        orch = quadratic_orchestrator(small_quadratic, aggregation="uq+")
        ledger = orch.run(2, log_every=0)
        for e in ledger.entries:
            assert e.server_mse_selected <= e.server_mse_average + 1e-12
            assert set(e.server_lrs) <= set(orch.state.params.tensors)

    def test_client_failure_names_the_client(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        clients = tiny_clients([2, 0])
        orch = FederatedOrchestrator(
            clients, spec, LocalUpdateConfig(), participation=1.0, initial_params=scalar_params(0.5, 1.0)
        )
        with pytest.raises(ClientTrainingError, match="client 1"):
            orch.run(1, log_every=0)

    def test_observer_hooks(self, small_quadratic):
        class Recorder(RoundObserver):
            def __init__(self):
                self.events = []

            def on_broadcast(self, plan, state, received):
                self.events.append(("broadcast", plan.round, len(received)))

            def on_aggregate(self, plan, state):
                self.events.append(("aggregate", plan.round, state.round))

        recorder = Recorder()
        orch = quadratic_orchestrator(small_quadratic, observer=recorder)
        orch.run(2, log_every=0)
        assert recorder.events == [("broadcast", 1, 2), ("aggregate", 1, 1), ("broadcast", 2, 2), ("aggregate", 2, 2)]

    def test_zero_init_stays_put_without_data_signal(self):
        spec = ModelSpec.linear(2, 1, bias=False)
        clients = [ClientRecord(id=0, shard=Dataset(features=np.zeros((4, 2)), labels=np.zeros(4)))]
        params = init_params(spec, substream(0, "init"), weight_clip=1.0, zero_init=True)
        orch = FederatedOrchestrator(
            clients, spec, LocalUpdateConfig(learn_clips=False), participation=1.0, initial_params=params
        )
        orch.run(2, log_every=0)
        assert_allclose(orch.state.params.tensors["layer0.weight"], 0.0)


class TestDegenerateCases:
    def test_quantization_off_is_textbook_fedavg(self, small_quadratic):
        clients = quadratic_clients(small_quadratic)
        spec = ModelSpec.linear(small_quadratic.dim, 1, quant_mode="fp32")
        local = LocalUpdateConfig(steps=3, lr=0.05, batch_size=5)
        initial = init_params(spec, substream(0, "init"))
        orch = FederatedOrchestrator(
            clients,
            spec,
            local,
            participation=0.5,
            aggregation="fp32-baseline",
            communication="none",
            seed=9,
            initial_params=initial,
        )
        orch.run(4, log_every=0)

        params = initial
        for t in range(1, 5):
            plan = orch.sample(t)
            m = sum(clients[k].n_k for k in plan.active)
            trained = {
                k: local_update(params, clients[k].shard, spec, local, substream(9, t, k, "local")) for k in plan.active
            }
            tensors = {
                name: sum(clients[k].n_k / m * trained[k].tensors[name] for k in plan.active)
                for name in params.tensors
            }
            params = params.model_copy(update={"tensors": tensors})

        for name, value in params.tensors.items():
            assert_allclose(orch.state.params.tensors[name], value, rtol=0.0, atol=1e-12)

    def test_one_client_is_local_sgd(self, small_quadratic):
        client = quadratic_clients(small_quadratic)[:1]
        spec = ModelSpec.linear(small_quadratic.dim, 1, quant_mode="fp32")
        local = LocalUpdateConfig(steps=4, lr=0.05, batch_size=5)
        initial = init_params(spec, substream(0, "init"))
        orch = FederatedOrchestrator(
            client, spec, local, participation=1.0, communication="none", seed=2, initial_params=initial
        )
        orch.run(3, log_every=0)

        params = initial
        for t in range(1, 4):
            params = local_update(params, client[0].shard, spec, local, substream(2, t, 0, "local"))
        for name, value in params.tensors.items():
            assert_array_equal(orch.state.params.tensors[name], value)

    def test_stochastic_downlink_is_unbiased(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        count = 4000
        orch = FederatedOrchestrator(
            tiny_clients([1] * count),
            spec,
            LocalUpdateConfig(),
            participation=1.0,
            initial_params=scalar_params(1.07, 480.0),
        )
        received, _ = orch.broadcast(orch.sample(1))
        mean = np.mean([p.tensors["layer0.weight"][0, 0] for p in received.values()])
        # neighbours 1.0 and 1.125; round-to-nearest would sit at 1.125
        assert abs(mean - 1.07) <= 4 * 0.0625 / np.sqrt(count)

    def test_deterministic_downlink_is_biased(self):
        spec = ModelSpec.linear(1, 1, bias=False)
        orch = FederatedOrchestrator(
            tiny_clients([1] * 4),
            spec,
            LocalUpdateConfig(),
            participation=1.0,
            communication="quantized-det",
            initial_params=scalar_params(1.07, 480.0),
        )
        received, _ = orch.broadcast(orch.sample(1))
        assert {float(p.tensors["layer0.weight"][0, 0]) for p in received.values()} == {1.125}

"""Federated protocol: aggregation algebra, local training, the round loop."""

import json
from dataclasses import replace

import numpy as np
import pytest

from ranfault import (ClientState, DivergenceError, FlConfig,
                      GConvLSTMForecaster, LocalResult, ModelConfig,
                      TrainConfig, build_nw_graph, chain_sw_graph, comm_footprint,
                      cosine_sim, default_cells, fedavg_aggregate,
                      fedgraph_aggregate, generate_synthetic_panel, local_seed,
                      local_train, parse_preset, partition_clients, robust_scale,
                      run_rounds, similarity_matrix, train, write_round_log)
from ranfault.data import TimeSeriesPanel


def fl_fixture(n_cells=2, seed=0, n_steps=60):
    sw = chain_sw_graph(3)
    panel = generate_synthetic_panel(n_cells, 3, n_steps, seed=seed, sw_graph=sw)
    scaled, _ = robust_scale(panel)
    nw = build_nw_graph(default_cells(n_cells), rule="area_complete")
    model_cfg = ModelConfig(embed_dim=4, depth=1, cheb_order=2, history=8,
                            horizon=1)
    model = GConvLSTMForecaster(model_cfg, sw, seed=seed)
    train_cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1,
                            seed=seed)
    clients = partition_clients(scaled, nw, sw, model_cfg, 16)
    return scaled, nw, sw, model_cfg, model, train_cfg, clients


class TestConfig:
    def test_labels(self):
        assert FlConfig("fedavg", rounds=5, local_epochs=20).label == "FedAvg-5x20"
        assert FlConfig("fedavg_reg", rounds=10, local_epochs=10).label == "FedAvgReg-10x10"
        assert FlConfig("fedgraph", rounds=10, local_epochs=10).label == "FedGraph-10x10"
        assert (FlConfig("fedgraph_reg", rounds=20, local_epochs=5).label
                == "FedGraphReg-20x5")

    def test_loss_mode_follows_strategy(self):
        assert FlConfig("fedavg").loss_mode == "mse"
        assert FlConfig("fedgraph_reg").loss_mode == "mse_reg"
        assert not FlConfig("fedavg").regularized
        assert FlConfig("fedavg_reg").regularized

    def test_parse_preset(self):
        assert parse_preset("5x20") == (5, 20)
        assert parse_preset("20X5") == (20, 5)
        with pytest.raises(ValueError, match="5x20"):
            parse_preset("twenty")
        with pytest.raises(ValueError, match="5x20"):
            parse_preset("5x20x1")

    def test_validation(self):
        with pytest.raises(ValueError, match="strategy"):
            FlConfig("gossip")
        with pytest.raises(ValueError, match="rounds"):
            FlConfig("fedavg", rounds=0)
        with pytest.raises(ValueError, match="reg_lambda"):
            FlConfig("fedavg", reg_lambda=-0.1)
        with pytest.raises(ValueError, match="mp_steps"):
            FlConfig("fedavg", mp_steps=0)


class TestFedavgAggregate:
    def test_two_client_mean(self):
        g, per = fedavg_aggregate([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert np.array_equal(g, [2.0, 3.0])
        assert all(np.array_equal(p, g) for p in per)
        assert all(p is not g for p in per)

    def test_idempotent_on_equal_weights(self):
        w = np.array([0.5, -1.25, 8.0])
        g, per = fedavg_aggregate([w.copy(), w.copy(), w.copy(), w.copy()])
        assert np.array_equal(g, w)
        assert np.array_equal(per[2], w)

    def test_three_random_vectors(self):
        rng = np.random.default_rng(0)
        ws = [rng.standard_normal(7) for _ in range(3)]
        g, _ = fedavg_aggregate(ws)
        assert np.array_equal(g, ((ws[0] + ws[1]) + ws[2]) / 3.0)

    def test_errors(self):
        with pytest.raises(ValueError, match="no client weights"):
            fedavg_aggregate([])
        with pytest.raises(ValueError, match="lengths differ"):
            fedavg_aggregate([np.zeros(3), np.zeros(4)])


class TestCosine:
    def test_self_similarity_is_one(self):
        assert cosine_sim(np.array([2.0, 0.0]), np.array([2.0, 0.0])) == 1.0

    def test_orthogonal_is_zero(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_forty_five_degrees(self):
        s = cosine_sim(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert abs(s - 1.0 / np.sqrt(2.0)) < 1e-15

    def test_zero_vector_convention(self):
        assert cosine_sim(np.zeros(4), np.ones(4)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="lengths differ"):
            cosine_sim(np.zeros(3), np.zeros(2))

    def test_similarity_matrix_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(1)
        ws = [rng.standard_normal(5) for _ in range(4)]
        sim = similarity_matrix(ws)
        assert np.array_equal(sim, sim.T)
        assert np.array_equal(np.diag(sim), np.ones(4))
        assert (np.abs(sim) <= 1.0 + 1e-12).all()

    def test_clamp_drops_negative_entries(self):
        ws = [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]
        raw = similarity_matrix(ws)
        assert raw[0, 1] == -1.0
        clamped = similarity_matrix(ws, clamp=True)
        assert clamped[0, 1] == 0.0
        assert clamped[0, 0] == 1.0


class TestFedgraphAggregate:
    def test_identical_weights_are_a_fixed_point(self):
        w = np.array([0.1, -0.7, 3.3])
        per, g = fedgraph_aggregate([w.copy(), w.copy()])
        assert np.array_equal(per[0], w)
        assert np.array_equal(per[1], w)
        assert np.array_equal(g, w)

    def test_orthogonal_clients_keep_their_own_weights(self):
        w0, w1 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        per, g = fedgraph_aggregate([w0, w1])
        assert np.array_equal(per[0], w0)
        assert np.array_equal(per[1], w1)
        assert np.array_equal(g, [0.5, 1.0])

    def test_opposed_clients_clamp_to_isolation(self):
        w0 = np.array([1.0, 1.0])
        per, _ = fedgraph_aggregate([w0, -w0])
        assert np.array_equal(per[0], w0)
        assert np.array_equal(per[1], -w0)

    def test_hand_value_at_45_degrees(self):
        c = 1.0 / np.sqrt(2.0)
        per, g = fedgraph_aggregate([np.array([1.0, 0.0]), np.array([1.0, 1.0])])
        want0 = (np.array([1.0, 0.0]) + c * np.array([1.0, 1.0])) / (1.0 + c)
        want1 = (c * np.array([1.0, 0.0]) + np.array([1.0, 1.0])) / (1.0 + c)
        assert np.abs(per[0] - want0).max() < 1e-15
        assert np.abs(per[1] - want1).max() < 1e-15
        assert np.abs(g - (want0 + want1) / 2.0).max() < 1e-15

    def test_collinear_weights_reduce_to_fedavg(self):
        u = np.array([1.0, 2.0, 3.0])
        ws = [2.0 * u, 0.5 * u]
        g_avg, _ = fedavg_aggregate(ws)
        per, g = fedgraph_aggregate(ws)
        assert np.array_equal(per[0], g_avg)
        assert np.array_equal(per[1], g_avg)
        assert np.array_equal(g, g_avg)

    def test_multiple_message_passing_steps_contract(self):
        rng = np.random.default_rng(2)
        ws = [np.abs(rng.standard_normal(6)) for _ in range(4)]
        per1, _ = fedgraph_aggregate(ws, mp_steps=1)
        per3, _ = fedgraph_aggregate(ws, mp_steps=3)
        spread1 = max(np.linalg.norm(a - b) for a in per1 for b in per1)
        spread3 = max(np.linalg.norm(a - b) for a in per3 for b in per3)
        assert spread3 < spread1

    def test_convex_hull_property(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            ws = [rng.standard_normal(5) for _ in range(4)]
            per, g = fedgraph_aggregate(ws)
            stack = np.stack(ws)
            lo, hi = stack.min(axis=0), stack.max(axis=0)
            for p in per + [g]:
                assert (p >= lo - 1e-12).all() and (p <= hi + 1e-12).all()

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no client weights"):
            fedgraph_aggregate([])


class TestCommFootprint:
    def test_hand_value(self):
        assert comm_footprint(5, 10, 1000) == 0.05

    def test_zero_rounds_is_free(self):
        assert comm_footprint(0, 10**6, 100) == 0.0

    def test_preset_ratios(self):
        f5 = comm_footprint(5, 1234, 9999)
        f10 = comm_footprint(10, 1234, 9999)
        f20 = comm_footprint(20, 1234, 9999)
        assert abs(f10 / f5 - 2.0) < 1e-12
        assert abs(f20 / f5 - 4.0) < 1e-12

    def test_validation(self):
        with pytest.raises(ValueError, match="positive"):
            comm_footprint(5, 10, 0)
        with pytest.raises(ValueError, match="nonnegative"):
            comm_footprint(-1, 10, 10)


class TestLocalSeed:
    def test_matches_seed_sequence(self):
        want = np.random.SeedSequence([7, 3, 2]).generate_state(1)[0]
        assert local_seed(7, 3, 2) == int(want)

    def test_distinct_across_rounds_and_clients(self):
        seeds = {local_seed(0, r, c) for r in range(1, 6) for c in range(10)}
        assert len(seeds) == 50


class TestLocalTrain:
    def test_zero_epochs_returns_copy(self):
        _, _, _, _, model, train_cfg, clients = fl_fixture()
        omega0 = model.flatten()
        res = local_train(clients[0], omega0, 0, "mse", model, train_cfg,
                          0.0, seed=1)
        assert np.array_equal(res.omega, omega0)
        assert res.omega is not omega0
        assert np.isnan(res.mse)
        assert not res.diverged

    def test_regularizer_pulls_towards_anchor(self):
        _, _, _, _, model, train_cfg, clients = fl_fixture()
        omega0 = model.flatten()
        dists = []
        for lam in (0.0, 0.1, 1.0, 10.0):
            mode = "mse_reg" if lam else "mse"
            res = local_train(clients[0], omega0, 5, mode, model, train_cfg,
                              lam, seed=42)
            dists.append(float(np.linalg.norm(res.omega - omega0)))
        assert all(a > b for a, b in zip(dists, dists[1:]))

    def test_divergence_reported_not_raised(self):
        _, _, _, _, model, train_cfg, clients = fl_fixture()
        omega0 = model.flatten()
        hot = replace(train_cfg, learning_rate=1e12, optimizer="sgd")
        with np.errstate(over="ignore", invalid="ignore"):
            res = local_train(clients[0], omega0, 5, "mse", model, hot,
                              0.0, seed=0)
        assert res.diverged
        assert res.mse == float("inf")
        assert np.array_equal(res.omega, omega0)

    def test_wrong_weight_length_rejected(self):
        _, _, _, _, model, train_cfg, clients = fl_fixture()
        with pytest.raises(ValueError, match="omega_star_in"):
            local_train(clients[0], np.zeros(3), 1, "mse", model, train_cfg,
                        0.0, seed=0)


class TestPartitionClients:
    def test_one_client_per_cell_disjoint(self):
        scaled, nw, sw, model_cfg, _, _, clients = fl_fixture(n_cells=3)
        assert [c.cell_id for c in clients] == scaled.cell_ids()
        for i, client in enumerate(clients):
            assert client.panel.n_cells == 1
            assert np.array_equal(client.panel.values[0], scaled.values[i])
        total = sum(sum(b.batch_size for b in c.batches) for c in clients)
        per_cell = scaled.n_steps - model_cfg.history - model_cfg.horizon + 1
        assert total == 3 * per_cell

    def test_misaligned_topology_rejected(self):
        scaled, _, sw, model_cfg, _, _, _ = fl_fixture(n_cells=3)
        other = build_nw_graph(default_cells(4), rule="area_complete")
        with pytest.raises(ValueError, match="do not align"):
            partition_clients(scaled, other, sw, model_cfg, 16)


class TestRunRounds:
    def test_degenerate_single_client_equals_plain_training(self):
        sw = chain_sw_graph(3)
        panel = generate_synthetic_panel(1, 3, 60, seed=1, sw_graph=sw)
        scaled, _ = robust_scale(panel)
        nw = build_nw_graph(default_cells(1), rule="area_complete")
        model_cfg = ModelConfig(embed_dim=4, depth=1, cheb_order=2, history=8,
                                horizon=1)
        model = GConvLSTMForecaster(model_cfg, sw, seed=1)
        train_cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1,
                                seed=1)
        clients = partition_clients(scaled, nw, sw, model_cfg, 16)
        fl_cfg = FlConfig("fedavg", rounds=1, local_epochs=4, seed=9)
        records = run_rounds(clients, fl_cfg, model, train_cfg,
                             scaled.values.size)
        direct, _ = train(model, clients[0].batches,
                          replace(train_cfg, epochs=4, seed=local_seed(9, 1, 0)))
        assert np.array_equal(records[0].omega[0], direct.flatten())
        assert np.array_equal(records[0].omega_global, records[0].omega[0])
        assert np.array_equal(records[0].omega_star[0], records[0].omega[0])

    def test_seeded_runs_are_identical(self):
        scaled, nw, sw, model_cfg, model, train_cfg, _ = fl_fixture()
        fl_cfg = FlConfig("fedgraph_reg", rounds=2, local_epochs=2,
                          reg_lambda=0.1, seed=3)
        runs = []
        for _ in range(2):
            clients = partition_clients(scaled, nw, sw, model_cfg, 16)
            runs.append(run_rounds(clients, fl_cfg, model, train_cfg,
                                   scaled.values.size))
        for rec_a, rec_b in zip(*runs):
            assert np.array_equal(rec_a.omega_global, rec_b.omega_global)
            assert np.array_equal(rec_a.similarity, rec_b.similarity)
            assert rec_a.client_mse == rec_b.client_mse

    def test_reg_strategy_with_zero_lambda_matches_plain(self):
        scaled, nw, sw, model_cfg, model, train_cfg, _ = fl_fixture()
        plain = FlConfig("fedavg", rounds=2, local_epochs=3, seed=5)
        reg0 = FlConfig("fedavg_reg", rounds=2, local_epochs=3,
                        reg_lambda=0.0, seed=5)
        rec_a = run_rounds(partition_clients(scaled, nw, sw, model_cfg, 16),
                           plain, model, train_cfg, scaled.values.size)
        rec_b = run_rounds(partition_clients(scaled, nw, sw, model_cfg, 16),
                           reg0, model, train_cfg, scaled.values.size)
        for x, y in zip(rec_a[-1].omega, rec_b[-1].omega):
            assert np.array_equal(x, y)

    def test_round_bookkeeping(self):
        scaled, nw, sw, model_cfg, model, train_cfg, clients = fl_fixture()
        fl_cfg = FlConfig("fedavg", rounds=3, local_epochs=2, seed=0)
        records = run_rounds(clients, fl_cfg, model, train_cfg,
                             scaled.values.size)
        assert [r.round_index for r in records] == [1, 2, 3]
        assert all(r.strategy == "FedAvg-3x2" for r in records)
        n_params = model.n_params
        for i, rec in enumerate(records, start=1):
            assert rec.similarity.shape == (2, 2)
            assert np.array_equal(np.diag(rec.similarity), [1.0, 1.0])
            assert rec.footprint_to_date == comm_footprint(i, n_params,
                                                           scaled.values.size)
            assert not any(rec.failed)
            # fedavg hands every client the global model
            for star in rec.omega_star:
                assert np.array_equal(star, rec.omega_global)

    def test_client_data_stays_local(self):
        # corrupting one client's slice must not change another's local fit
        scaled, nw, sw, model_cfg, model, train_cfg, _ = fl_fixture()
        fl_cfg = FlConfig("fedavg", rounds=2, local_epochs=3, seed=5)
        rec_a = run_rounds(partition_clients(scaled, nw, sw, model_cfg, 16),
                           fl_cfg, model, train_cfg, scaled.values.size)
        poisoned = scaled.values.copy()
        poisoned[1] *= 1000.0
        other = TimeSeriesPanel(values=poisoned, cells=scaled.cells,
                                signal_names=scaled.signal_names,
                                timestamps=scaled.timestamps)
        rec_b = run_rounds(partition_clients(other, nw, sw, model_cfg, 16),
                           fl_cfg, model, train_cfg, scaled.values.size)
        assert np.array_equal(rec_a[0].omega[0], rec_b[0].omega[0])
        assert not np.array_equal(rec_a[0].omega[1], rec_b[0].omega[1])

    def test_failed_client_excluded_but_kept_in_record(self):
        scaled, nw, sw, model_cfg, model, train_cfg, clients = fl_fixture(n_cells=3)
        fixed = [np.full(model.n_params, float(j + 1)) for j in range(3)]

        def train_fn(client, omega_in, epochs, loss_mode, seed):
            j = int(client.cell_id[-1])
            if j == 1:
                return LocalResult(omega=omega_in.copy(), mse=float("inf"),
                                   diverged=True)
            return LocalResult(omega=fixed[j].copy(), mse=0.25)

        calls = []
        fl_cfg = FlConfig("fedavg", rounds=1, local_epochs=2, seed=0)
        records = run_rounds(clients, fl_cfg, model, train_cfg,
                             scaled.values.size,
                             eval_fn=lambda c, w: calls.append(c.cell_id) or
                             {"precision": 1.0, "recall": 1.0, "f1": 1.0},
                             train_fn=train_fn)
        rec = records[0]
        assert rec.failed == (False, True, False)
        assert np.array_equal(rec.omega_global, (fixed[0] + fixed[2]) / 2.0)
        # the failed client still receives the global model
        assert np.array_equal(rec.omega_star[1], rec.omega_global)
        assert rec.similarity.shape == (3, 3)
        assert calls == ["cell_00", "cell_02"]
        assert rec.client_metrics[1]["f1"] is None
        assert rec.client_metrics[0]["f1"] == 1.0

    def test_all_failed_aborts(self):
        scaled, nw, sw, model_cfg, model, train_cfg, clients = fl_fixture()

        def train_fn(client, omega_in, epochs, loss_mode, seed):
            return LocalResult(omega=omega_in.copy(), mse=float("inf"),
                               diverged=True)

        fl_cfg = FlConfig("fedavg", rounds=2, local_epochs=2, seed=0)
        with pytest.raises(DivergenceError, match="all clients diverged in round 1"):
            run_rounds(clients, fl_cfg, model, train_cfg, scaled.values.size,
                       train_fn=train_fn)

    def test_no_clients_rejected(self):
        _, _, _, _, model, train_cfg, _ = fl_fixture()
        with pytest.raises(ValueError, match="no clients"):
            run_rounds([], FlConfig("fedavg"), model, train_cfg, 10)


class TestRoundLog:
    def test_ndjson_schema_and_special_floats(self, tmp_path):
        scaled, nw, sw, model_cfg, model, train_cfg, clients = fl_fixture()

        def train_fn(client, omega_in, epochs, loss_mode, seed):
            if client.cell_id.endswith("1"):
                return LocalResult(omega=omega_in.copy(), mse=float("inf"),
                                   diverged=True)
            return LocalResult(omega=omega_in + 1.0, mse=0.5)

        fl_cfg = FlConfig("fedavg", rounds=2, local_epochs=1, seed=0)
        records = run_rounds(clients, fl_cfg, model, train_cfg,
                             scaled.values.size, train_fn=train_fn)
        path = tmp_path / "rounds.ndjson"
        write_round_log(records, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines, start=1):
            entry = json.loads(line)
            assert entry["round"] == i
            assert entry["strategy"] == "FedAvg-2x1"
            assert len(entry["clients"]) == 2
            assert len(entry["similarity"]) == 2
            assert entry["clients"][1]["mse"] == "inf"
            assert entry["clients"][1]["failed"] is True
            assert entry["clients"][0]["mse"] == 0.5
            assert entry["footprint_to_date"] > 0.0

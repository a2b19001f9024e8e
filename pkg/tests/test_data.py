"""Synthetic panel generation, CSV I/O, scaling, annotation, and windowing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ranfault import (AnnotationConfig, CellMeta, GeneratorProfile, LabelSet,
                      TimeSeriesPanel, annotate, build_sw_graph, chain_sw_graph,
                      default_cells, generate_synthetic_panel, load_labels_csv,
                      load_panel_csv, robust_scale, robust_unscale, save_labels_csv,
                      save_panel_csv, window_split)
from ranfault.data import empty_labels, n_windows, parse_cell_rule, robust_std


def tiny_panel(values, start="2024-01-01T00:00:00", signal_names=None):
    """Panel from a raw (N, K, T) array with quarter-hour timestamps."""
    values = np.asarray(values, dtype=np.float64)
    n, k, t = values.shape
    ts = np.datetime64(start, "s") + np.arange(t) * np.timedelta64(900, "s")
    return TimeSeriesPanel(
        values=values, timestamps=ts,
        cells=tuple(CellMeta(id=f"cell_{i:02d}") for i in range(n)),
        signal_names=signal_names or tuple(f"signal_{j + 1}" for j in range(k)),
        meta={"scaled": False})


class TestGenerator:
    def test_same_seed_bit_identical(self):
        a = generate_synthetic_panel(3, 4, 64, seed=5)
        b = generate_synthetic_panel(3, 4, 64, seed=5)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.timestamps, b.timestamps)
        assert a.identity_hash() == b.identity_hash()

    def test_different_seed_differs(self):
        a = generate_synthetic_panel(3, 4, 64, seed=5)
        b = generate_synthetic_panel(3, 4, 64, seed=6)
        assert not np.array_equal(a.values, b.values)

    def test_full_scale_shapes(self):
        panel = generate_synthetic_panel(67, 24, 3072, seed=0)
        assert panel.values.shape == (67, 24, 3072)
        assert panel.timestamps.shape == (3072,)
        step = panel.timestamps[1] - panel.timestamps[0]
        assert step == np.timedelta64(900, "s")
        areas = [c.area for c in panel.cells]
        assert (areas.count("airport"), areas.count("downtown"),
                areas.count("rural")) == (12, 29, 26)

    def test_zero_noise_is_pure_sinusoid(self):
        profile = GeneratorProfile(noise_scale=0.0)
        panel = generate_synthetic_panel(2, 3, 4 * 96, seed=1, profile=profile)
        # closed form: exactly periodic with the daily period
        assert np.allclose(panel.values[:, :, :96], panel.values[:, :, 96:192],
                           rtol=0, atol=1e-9)
        # and an offset+sinusoid least-squares fit leaves zero residual
        t = np.arange(panel.n_steps)
        design = np.stack([np.ones_like(t, dtype=float),
                           np.sin(2 * np.pi * t / 96.0),
                           np.cos(2 * np.pi * t / 96.0)], axis=1)
        for ci in range(2):
            for k in range(3):
                series = panel.values[ci, k]
                coef, *_ = np.linalg.lstsq(design, series, rcond=None)
                assert np.abs(design @ coef - series).max() < 1e-8

    def test_coupling_correlates_neighbors(self):
        g = build_sw_graph(["a", "b"], [("a", "b")])
        strong = GeneratorProfile(coupling=5.0)
        panel = generate_synthetic_panel(1, 2, 4096, seed=3, profile=strong, sw_graph=g)
        # deseasonalize, then check the downstream counter follows its source
        t = np.arange(panel.n_steps)
        design = np.stack([np.ones_like(t, dtype=float),
                           np.sin(2 * np.pi * t / 96.0),
                           np.cos(2 * np.pi * t / 96.0)], axis=1)
        resid = []
        for k in range(2):
            series = panel.values[0, k]
            coef, *_ = np.linalg.lstsq(design, series, rcond=None)
            resid.append(series - design @ coef)
        lagged = float(np.corrcoef(resid[0][:-1], resid[1][1:])[0, 1])
        assert lagged > 0.8  # coupling 5 -> theoretical corr 5/sqrt(26) = 0.98

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            generate_synthetic_panel(0, 4, 10, seed=0)

    def test_graph_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="node count"):
            generate_synthetic_panel(1, 4, 10, seed=0, sw_graph=chain_sw_graph(3))

    def test_default_cells_proportions(self):
        cells = default_cells(67)
        areas = [c.area for c in cells]
        assert (areas.count("airport"), areas.count("downtown"),
                areas.count("rural")) == (12, 29, 26)
        assert len({c.id for c in cells}) == 67
        assert all(c.position is not None for c in cells)


class TestPanelValidation:
    def test_rejects_non_finite(self):
        values = np.zeros((1, 1, 4))
        values[0, 0, 2] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            tiny_panel(values)

    def test_rejects_non_increasing_timestamps(self):
        panel = tiny_panel(np.zeros((1, 1, 3)))
        ts = panel.timestamps.copy()
        ts[2] = ts[1]
        with pytest.raises(ValueError, match="increasing"):
            TimeSeriesPanel(values=panel.values, timestamps=ts, cells=panel.cells,
                            signal_names=panel.signal_names, meta={})

    def test_cell_panel_slices_one_cell(self):
        panel = generate_synthetic_panel(3, 2, 16, seed=0)
        sub = panel.cell_panel(1)
        assert sub.n_cells == 1
        assert sub.cells[0].id == panel.cells[1].id
        assert np.array_equal(sub.values[0], panel.values[1])

    def test_identity_hash_tracks_values(self):
        a = tiny_panel(np.zeros((1, 1, 4)))
        b = tiny_panel(np.zeros((1, 1, 4)))
        assert a.identity_hash() == b.identity_hash()
        c = tiny_panel(np.ones((1, 1, 4)))
        assert a.identity_hash() != c.identity_hash()


class TestPanelCsv:
    def test_round_trip_identity(self, tmp_path):
        panel = generate_synthetic_panel(3, 4, 20, seed=2)
        path = tmp_path / "panel.csv"
        save_panel_csv(panel, path)
        back = load_panel_csv(path)
        assert np.array_equal(back.values, panel.values)
        assert np.array_equal(back.timestamps, panel.timestamps)
        assert back.cell_ids() == panel.cell_ids()
        assert back.signal_names == panel.signal_names

    def test_header_format(self, tmp_path):
        panel = generate_synthetic_panel(1, 2, 3, seed=0)
        path = tmp_path / "panel.csv"
        save_panel_csv(panel, path)
        header = path.read_text().splitlines()[0]
        assert header == "timestamp,cell_id,signal_1,signal_2"

    def test_small_file_shapes(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text(
            "timestamp,cell_id,signal_1,signal_2\n"
            "2024-01-01T00:00:00,a,1.0,2.0\n"
            "2024-01-01T00:00:00,b,3.0,4.0\n"
            "2024-01-01T00:15:00,a,5.0,6.0\n"
            "2024-01-01T00:15:00,b,7.0,8.0\n"
            "2024-01-01T00:30:00,a,9.0,10.0\n"
            "2024-01-01T00:30:00,b,11.0,12.0\n")
        panel = load_panel_csv(path)
        assert panel.n_cells == 2
        assert panel.n_signals == 2
        assert panel.n_steps == 3
        assert panel.values[0, :, 0].tolist() == [1.0, 2.0]
        assert panel.values[1, :, 2].tolist() == [11.0, 12.0]

    def test_non_numeric_cell_is_an_error(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("timestamp,cell_id,signal_1\n"
                        "2024-01-01T00:00:00,a,1.0\n"
                        "2024-01-01T00:15:00,a,NaN\n")
        with pytest.raises(ValueError, match="non-numeric value at row 2"):
            load_panel_csv(path)

    def test_ragged_row_is_an_error(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("timestamp,cell_id,signal_1,signal_2\n"
                        "2024-01-01T00:00:00,a,1.0,2.0\n"
                        "2024-01-01T00:15:00,a,1.0\n")
        with pytest.raises(ValueError, match="ragged row at row 2"):
            load_panel_csv(path)

    def test_missing_timestamp_column_is_an_error(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("time,cell_id,signal_1\n2024-01-01T00:00:00,a,1.0\n")
        with pytest.raises(ValueError, match="missing timestamp column"):
            load_panel_csv(path)


class TestLabelsCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        panel = generate_synthetic_panel(2, 3, 10, seed=0)
        labels = LabelSet(flags=rng.random((2, 3, 10)) < 0.3,
                          cell_ids=tuple(panel.cell_ids()),
                          signal_names=panel.signal_names,
                          timestamps=panel.timestamps)
        path = tmp_path / "labels.csv"
        save_labels_csv(labels, path)
        back = load_labels_csv(path)
        assert np.array_equal(back.flags, labels.flags)
        assert back.same_axes(labels)

    def test_non_binary_rejected(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("timestamp,cell_id,signal_1\n2024-01-01T00:00:00,a,2\n")
        with pytest.raises(ValueError, match="non-binary"):
            load_labels_csv(path)


class TestRobustScale:
    def test_constant_series_maps_to_zero(self):
        panel = tiny_panel(np.full((1, 2, 8), 7.0))
        scaled, params = robust_scale(panel)
        assert np.array_equal(scaled.values, np.zeros((1, 2, 8)))
        assert np.all(params.iqr >= 1e-8)

    def test_median_maps_to_zero(self):
        panel = tiny_panel(np.array([1.0, 2.0, 3.0, 100.0]).reshape(1, 1, 4))
        scaled, params = robust_scale(panel)
        assert params.median[0, 0] == 2.5
        center = robust_unscale(tiny_panel(np.zeros((1, 1, 4))), params)
        assert np.allclose(center.values, 2.5)

    def test_scaled_statistics(self):
        panel = generate_synthetic_panel(4, 3, 256, seed=9)
        scaled, _ = robust_scale(panel)
        med = np.median(scaled.values, axis=2)
        q25, q75 = np.percentile(scaled.values, [25, 75], axis=2)
        assert np.abs(med).max() < 1e-12
        assert np.abs((q75 - q25) - 1.0).max() < 1e-12
        assert scaled.meta["scaled"] is True

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_unscale_inverts_scale(self, seed):
        panel = generate_synthetic_panel(2, 3, 32, seed=seed)
        scaled, params = robust_scale(panel)
        back = robust_unscale(scaled, params)
        assert np.allclose(back.values, panel.values, rtol=0, atol=1e-10)

    def test_needs_two_steps(self):
        with pytest.raises(ValueError, match="at least 2"):
            robust_scale(tiny_panel(np.zeros((1, 1, 1))))


class TestAnnotationConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="anomaly_prob"):
            AnnotationConfig(anomaly_prob=1.5)
        with pytest.raises(ValueError, match="scenario"):
            AnnotationConfig(anomaly_prob=0.1, scenario="melt")
        with pytest.raises(ValueError, match="damping"):
            AnnotationConfig(anomaly_prob=0.1, damping=0.0)
        with pytest.raises(ValueError, match="cell_rule"):
            AnnotationConfig(anomaly_prob=0.1, cell_rule="bogus")

    def test_cell_rules(self):
        air = CellMeta(id="a", area="airport")
        down = CellMeta(id="b", area="downtown")
        assert parse_cell_rule("all")(air) and parse_cell_rule("all")(down)
        assert not parse_cell_rule("none")(air)
        assert parse_cell_rule("area:airport")(air)
        assert not parse_cell_rule("area:airport")(down)
        assert parse_cell_rule("ids:a,zz")(air)
        assert not parse_cell_rule("ids:a,zz")(down)
        with pytest.raises(ValueError, match="unknown area"):
            parse_cell_rule("area:suburb")

    def test_amplitude_map(self):
        cfg = AnnotationConfig(anomaly_prob=0.1, amplitude={"signal_1": 3.0})
        assert cfg.amplitude_for("signal_1") == 3.0
        assert cfg.amplitude_for("signal_2") == 8.0


class TestAnnotate:
    def graph(self, k):
        return chain_sw_graph(k)

    def test_p_zero_is_identity(self):
        panel = generate_synthetic_panel(2, 3, 32, seed=0)
        cfg = AnnotationConfig(anomaly_prob=0.0)
        out, labels = annotate(panel, cfg, self.graph(3), rng_seed=1)
        assert np.array_equal(out.values, panel.values)
        assert labels.n_flags == 0

    def test_binomial_label_count(self):
        panel = generate_synthetic_panel(1, 8, 3072, seed=4)
        cfg = AnnotationConfig(anomaly_prob=0.01)
        _, labels = annotate(panel, cfg, self.graph(8), rng_seed=11)
        n_series = 8
        expect = 0.01 * 3072 * n_series
        sd = np.sqrt(3072 * n_series * 0.01 * 0.99)
        assert abs(labels.n_flags - expect) <= 3 * sd

    def test_propagation_roughly_fivefold(self):
        # complete digraph on 5 counters: every counter has out-degree 4
        names = [f"s{i}" for i in range(5)]
        edges = [(a, b) for a in names for b in names if a != b]
        g = build_sw_graph(names, edges)
        panel = generate_synthetic_panel(2, 5, 2048, seed=6, sw_graph=g)
        base_cfg = AnnotationConfig(anomaly_prob=0.005)
        prop_cfg = AnnotationConfig(anomaly_prob=0.005, propagate=True)
        _, plain = annotate(panel, base_cfg, g, rng_seed=2)
        _, spread = annotate(panel, prop_cfg, g, rng_seed=2)
        ratio = spread.n_flags / plain.n_flags
        assert 3.0 <= ratio <= 7.0  # 5x target, +/-40%

    def test_spike_adds_scaled_amplitude(self):
        panel = generate_synthetic_panel(1, 2, 64, seed=1)
        cfg = AnnotationConfig(anomaly_prob=1.0, amplitude=4.0)
        out, labels = annotate(panel, cfg, self.graph(2), rng_seed=0)
        delta = out.values - panel.values
        expected = 4.0 * robust_std(panel)
        assert np.allclose(delta, expected[:, :, None])
        assert labels.n_flags == 2 * 64

    def test_drop_to_zero(self):
        panel = generate_synthetic_panel(1, 2, 64, seed=1)
        cfg = AnnotationConfig(anomaly_prob=1.0, scenario="drop_to_zero")
        out, labels = annotate(panel, cfg, self.graph(2), rng_seed=0)
        assert np.array_equal(out.values, np.zeros_like(panel.values))
        assert labels.n_flags == 2 * 64

    def test_drop_propagation_damps_successor(self):
        g = build_sw_graph(["a", "b"], [("a", "b")])
        values = np.zeros((1, 2, 4))
        values[0, 0] = [10.0, 10.0, 10.0, 10.0]
        values[0, 1] = [8.0, 8.0, 8.0, 8.0]
        panel = tiny_panel(values, signal_names=("a", "b"))
        cfg = AnnotationConfig(anomaly_prob=1.0, scenario="drop_to_zero",
                               cell_rule="all", propagate=True, damping=0.25)
        out, labels = annotate(panel, cfg, g, rng_seed=0)
        assert np.array_equal(out.values[0, 0], np.zeros(4))
        # b is hit directly (set to 0) after a's propagation scaled it by 0.75
        assert np.array_equal(out.values[0, 1], np.zeros(4))
        assert labels.n_flags == 8

    def test_level_shift_spans_window(self):
        panel = tiny_panel(np.zeros((1, 1, 100)))
        # exactly one hit: seed chosen so a single point is drawn
        cfg = AnnotationConfig(anomaly_prob=0.01, scenario="level_shift",
                               amplitude=2.0, level_shift_width=8)
        out, labels = annotate(panel, cfg, build_sw_graph(["signal_1"], []), rng_seed=3)
        hits = np.flatnonzero(labels.flags[0, 0])
        assert hits.size > 0
        diffs = np.flatnonzero(out.values[0, 0] != 0.0)
        assert np.array_equal(hits, diffs)
        # flags come in runs of up to the configured width
        starts = hits[np.diff(hits, prepend=-10) > 1]
        for s in starts:
            run = hits[(hits >= s) & (hits < s + 8)]
            assert run.size >= 1

    def test_zero_match_warns(self):
        panel = generate_synthetic_panel(1, 2, 16, seed=0)  # all airport at n=1? no: rural
        cfg = AnnotationConfig(anomaly_prob=0.5, cell_rule="ids:nope")
        with pytest.warns(UserWarning, match="matches no cells"):
            out, labels = annotate(panel, cfg, self.graph(2), rng_seed=0)
        assert labels.n_flags == 0
        assert np.array_equal(out.values, panel.values)

    def test_labels_reproducible(self):
        panel = generate_synthetic_panel(2, 3, 128, seed=0)
        cfg = AnnotationConfig(anomaly_prob=0.05)
        _, a = annotate(panel, cfg, self.graph(3), rng_seed=9)
        _, b = annotate(panel, cfg, self.graph(3), rng_seed=9)
        assert np.array_equal(a.flags, b.flags)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_no_propagation_diff_equals_labels(self, seed):
        panel = generate_synthetic_panel(2, 3, 64, seed=seed)
        cfg = AnnotationConfig(anomaly_prob=0.05, scenario="spike")
        out, labels = annotate(panel, cfg, chain_sw_graph(3), rng_seed=seed + 1)
        changed = out.values != panel.values
        assert np.array_equal(changed, labels.flags)

    def test_area_rule_only_touches_matching_cells(self):
        panel = generate_synthetic_panel(10, 3, 64, seed=0)
        airport = [i for i, c in enumerate(panel.cells) if c.area == "airport"]
        other = [i for i in range(10) if i not in airport]
        cfg = AnnotationConfig(anomaly_prob=0.2, cell_rule="area:airport")
        out, labels = annotate(panel, cfg, self.graph(3), rng_seed=5)
        assert labels.flags[other].sum() == 0
        assert labels.flags[airport].sum() > 0
        assert np.array_equal(out.values[other], panel.values[other])


class TestWindowSplit:
    def test_window_count_formula(self):
        assert n_windows(10, 4, 1, 1) == 6
        assert n_windows(5, 4, 1, 1) == 1  # T == history + horizon
        assert n_windows(3072, 192, 1, 1) == 2880

    def test_enumeration_matches_formula(self):
        for t, h, hz, s in [(10, 4, 1, 1), (20, 4, 2, 3), (3072, 192, 1, 1)]:
            count = sum(1 for start in range(0, t, s)
                        if start % s == 0 and start + h + hz <= t)
            assert n_windows(t, h, hz, s) == count

    def test_single_cell_windows(self):
        panel = tiny_panel(np.arange(10.0).reshape(1, 1, 10))
        batches = window_split(panel, 4, 1, 1, 100, chain_sw_graph(1))
        assert len(batches) == 1
        assert batches[0].batch_size == 6
        assert batches[0].x.shape == (6, 1, 4)
        assert batches[0].x[0, 0].tolist() == [0.0, 1.0, 2.0, 3.0]
        assert batches[0].y[0, 0].tolist() == [4.0]

    def test_no_leakage_y_follows_x(self):
        panel = generate_synthetic_panel(2, 3, 40, seed=7)
        for batch in window_split(panel, 8, 2, 3, 4, chain_sw_graph(3)):
            k = 3
            for s, (ci, start) in enumerate(batch.samples):
                rows = slice(s * k, (s + 1) * k)
                assert np.array_equal(batch.x[rows, 0, :],
                                      panel.values[ci, :, start:start + 8])
                assert np.array_equal(batch.y[rows, 0, :],
                                      panel.values[ci, :, start + 8:start + 10])

    def test_cell_major_order_and_partial_batch(self):
        panel = generate_synthetic_panel(2, 2, 12, seed=0)
        batches = window_split(panel, 4, 1, 1, 5, chain_sw_graph(2))
        # 8 windows per cell -> 16 samples -> batches of 5,5,5,1
        assert [b.batch_size for b in batches] == [5, 5, 5, 1]
        flat = [s for b in batches for s in b.samples]
        assert flat == [(ci, w) for ci in range(2) for w in range(8)]

    def test_too_short_panel_rejected(self):
        panel = tiny_panel(np.zeros((1, 1, 4)))
        with pytest.raises(ValueError, match="history"):
            window_split(panel, 4, 1, 1, 8, chain_sw_graph(1))

    def test_empty_labels_matches_panel(self):
        panel = generate_synthetic_panel(2, 3, 8, seed=0)
        labels = empty_labels(panel)
        assert labels.flags.shape == panel.values.shape
        assert labels.n_flags == 0

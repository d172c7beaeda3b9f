"""Network core: propagators, layers, forward pass, init, checkpoints.

The heavyweight correctness checks compare against independent oracles:
a per-node aggregation loop for the GCN layer, a scalar loop for the GRU
step, and a straight-line reimplementation of the whole forward pass.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from gcgru.graphs import AdjacencyMatrix, Laplacian, normalized_laplacian
from gcgru.model import (
    ModelDims,
    ModelParams,
    assemble_propagator,
    build_propagators,
    forward_window,
    gcn_layer,
    gru_output,
    gru_step,
    init_params,
    load_checkpoint,
    multi_gcn_forward,
    predict,
    save_checkpoint,
)


def random_laplacian(rng, n, kind="industry", symmetric=False) -> Laplacian:
    w = rng.uniform(0, 1, (n, n))
    w[rng.uniform(size=(n, n)) < 0.4] = 0.0
    if symmetric:
        w = np.triu(w, 1)
        w = w + w.T
    np.fill_diagonal(w, 0.0)
    return normalized_laplacian(AdjacencyMatrix(kind, w))


def identity_laplacian(n: int) -> Laplacian:
    return normalized_laplacian(AdjacencyMatrix("shareholding", np.zeros((n, n))))


def small_dims(n=3, mode_k=1, **overrides) -> ModelDims:
    defaults = dict(
        n_stocks=n, n_features=2, gcn_hidden=3, gcn_out=2, gru_hidden=2, gru_out=2,
        kernel_size=mode_k,
    )
    defaults.update(overrides)
    return ModelDims(**defaults)


class TestAssemblePropagator:
    def test_multi_identity_laplacians_k1(self):
        n = 4
        laps = [identity_laplacian(n) for _ in range(3)]
        params = init_params(small_dims(n), "multi", seed=0)
        prop = assemble_propagator("multi", laps, params)
        total = params.poly_coeffs[0, 0] * params.graph_coeffs.sum()
        np.testing.assert_allclose(prop, total * np.eye(n), atol=1e-15)

    def test_multi_masks_down_to_single(self):
        rng = np.random.default_rng(0)
        n = 4
        laps = [random_laplacian(rng, n, k, s) for k, s in
                (("shareholding", True), ("industry", False), ("topicality", False))]
        multi = init_params(small_dims(n), "multi", seed=1)
        multi.graph_coeffs[:] = (1.0, 0.0, 0.0)
        single = init_params(small_dims(n), "single", seed=1)
        single.poly_coeffs[:] = multi.poly_coeffs
        np.testing.assert_allclose(
            assemble_propagator("multi", laps, multi),
            assemble_propagator("single", laps[:1], single),
            atol=1e-15,
        )

    def test_multi_k2_matches_term_by_term_sum(self):
        rng = np.random.default_rng(1)
        n = 3
        laps = [random_laplacian(rng, n, k, s) for k, s in
                (("shareholding", True), ("industry", False), ("topicality", False))]
        params = init_params(small_dims(n, mode_k=2), "multi", seed=2)
        params.poly_coeffs[:] = rng.normal(size=params.poly_coeffs.shape)
        params.graph_coeffs[:] = rng.normal(size=3)
        for layer in (0, 1):
            expected = np.zeros((n, n))
            for i, power in enumerate((np.eye(n), None)):
                for g, lap in enumerate(laps):
                    basis = np.eye(n) if i == 0 else lap.matrix
                    expected += (
                        params.poly_coeffs[layer, i] * params.graph_coeffs[g] * basis
                    )
            got = assemble_propagator("multi", laps, params, layer=layer)
            np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)

    def test_k1_uses_one_hop_propagator(self):
        rng = np.random.default_rng(5)
        lap = random_laplacian(rng, 4, "shareholding", symmetric=True)
        params = init_params(small_dims(4), "single", seed=0)
        params.poly_coeffs[:] = 1.0
        np.testing.assert_array_equal(
            assemble_propagator("single", [lap], params), lap.one_hop
        )

    def test_mode_needs_matching_laplacian_count(self):
        params = init_params(small_dims(4), "multi", seed=0)
        with pytest.raises(ValueError, match="3 laplacian"):
            assemble_propagator("multi", [identity_laplacian(4)], params)


class TestGcnLayer:
    def test_identity_composition(self):
        h = np.random.default_rng(0).normal(size=(4, 3))
        out = gcn_layer(h, np.eye(4), np.eye(3), activation="identity")
        np.testing.assert_allclose(out, h, atol=1e-15)

    def test_zero_weight_zero_output(self):
        rng = np.random.default_rng(1)
        out = gcn_layer(rng.normal(size=(4, 3)), np.eye(4), np.zeros((3, 2)))
        assert not out.any()

    def test_one_hot_averaging_propagator(self):
        # row i of an averaging propagator yields the mean of its neighbors
        n = 4
        prop = np.zeros((n, n))
        prop[0, 1] = prop[0, 2] = 0.5
        h = np.eye(n)
        w = np.random.default_rng(2).normal(size=(n, 2))
        out = gcn_layer(h, prop, w, activation="identity")
        np.testing.assert_allclose(out[0], 0.5 * (w[1] + w[2]), atol=1e-14)

    def test_matches_per_node_aggregation_loop(self):
        rng = np.random.default_rng(3)
        for n in (2, 5, 8):
            prop = rng.normal(size=(n, n))
            h = rng.normal(size=(n, 6))
            w = rng.normal(size=(6, 4))
            got = gcn_layer(h, prop, w)
            expected = np.empty((n, 4))
            for i in range(n):
                agg = np.zeros(6)
                for j in range(n):
                    agg += prop[i, j] * h[j]
                expected[i] = np.maximum(agg @ w, 0.0)
            np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_non_finite_output_errors(self):
        h = np.array([[1e308, 1e308]])
        with pytest.raises(ValueError, match="non-finite"):
            gcn_layer(h, np.eye(1) * 10, np.full((2, 2), 1e308), activation="identity")


class TestMultiGcnForward:
    def test_single_node_is_a_perceptron(self):
        rng = np.random.default_rng(4)
        dims = small_dims(n=2)
        params = init_params(dims, "single", seed=0)
        x = rng.uniform(size=(2, dims.n_features))
        out = multi_gcn_forward(x, [np.eye(2), np.eye(2)], params)
        expected = np.maximum(
            np.maximum(x @ params.gcn_w1, 0.0) @ params.gcn_w2, 0.0
        )
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_identity_propagator_keeps_stocks_independent(self):
        rng = np.random.default_rng(5)
        dims = small_dims(n=5)
        params = init_params(dims, "single", seed=1)
        x = rng.uniform(size=(5, dims.n_features))
        base = multi_gcn_forward(x, [np.eye(5), np.eye(5)], params)
        x2 = x.copy()
        x2[3] += 10.0
        bumped = multi_gcn_forward(x2, [np.eye(5), np.eye(5)], params)
        np.testing.assert_array_equal(np.delete(bumped, 3, axis=0), np.delete(base, 3, axis=0))

    def test_path_graph_matches_matrix_chain_oracle(self):
        rng = np.random.default_rng(6)
        w = np.zeros((3, 3))
        w[0, 1] = w[1, 0] = w[1, 2] = w[2, 1] = 1.0
        lap = normalized_laplacian(AdjacencyMatrix("shareholding", w))
        dims = small_dims(n=3, mode_k=2)
        params = init_params(dims, "single", seed=3)
        params.poly_coeffs[:] = rng.normal(size=params.poly_coeffs.shape)
        props = build_propagators(params, [lap])
        x = rng.uniform(size=(3, dims.n_features))
        got = multi_gcn_forward(x, props.per_layer, params)
        p0 = params.poly_coeffs[0, 0] * np.eye(3) + params.poly_coeffs[0, 1] * lap.matrix
        p1 = params.poly_coeffs[1, 0] * np.eye(3) + params.poly_coeffs[1, 1] * lap.matrix
        expected = np.maximum(p1 @ np.maximum(p0 @ x @ params.gcn_w1, 0) @ params.gcn_w2, 0)
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


class TestGruStep:
    def test_saturated_update_gate_keeps_previous_state(self):
        dims = small_dims(n=3)
        params = init_params(dims, "none", seed=0)
        params.gru_bu[:] = 50.0  # sigmoid(50) rounds to exactly 1.0
        rng = np.random.default_rng(7)
        h_prev = rng.normal(size=(3, dims.gru_hidden))
        x = rng.uniform(size=(3, dims.n_features))
        h_t, _ = gru_step(h_prev, x, np.zeros((3, 0)), params)
        np.testing.assert_array_equal(h_t, h_prev)

    def test_zero_everything_fixed_point(self):
        dims = small_dims(n=3)
        params = init_params(dims, "none", seed=0)
        for name, tensor in params.named_tensors():
            tensor[:] = 0.0
        h_t, trace = gru_step(
            np.zeros((3, dims.gru_hidden)), np.zeros((3, dims.n_features)),
            np.zeros((3, 0)), params,
        )
        np.testing.assert_array_equal(trace["r"], np.full_like(trace["r"], 0.5))
        np.testing.assert_array_equal(trace["u"], np.full_like(trace["u"], 0.5))
        assert not trace["h_cand"].any()
        assert not h_t.any()

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(8)
        n, h, f, c = 3, 2, 2, 2
        dims = ModelDims(n_stocks=n, n_features=f, gcn_hidden=2, gcn_out=c,
                         gru_hidden=h, gru_out=2)
        params = init_params(dims, "single", seed=9)
        h_prev = rng.normal(size=(n, h))
        x = rng.normal(size=(n, f))
        x_gcn = rng.normal(size=(n, c))
        got, _ = gru_step(h_prev, x, x_gcn, params)

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        expected = np.empty((n, h))
        for s in range(n):
            concat = list(h_prev[s]) + list(x[s]) + list(x_gcn[s])
            for unit in range(h):
                a_r = sum(concat[i] * params.gru_wr[i, unit] for i in range(len(concat)))
                a_u = sum(concat[i] * params.gru_wu[i, unit] for i in range(len(concat)))
                r_su = sig(a_r + params.gru_br[unit])
                u_su = sig(a_u + params.gru_bu[unit])
                concat_h = (
                    [r_su * h_prev[s, k] if k == unit else 0.0 for k in range(h)]
                    + list(x[s]) + list(x_gcn[s])
                )
                # the reset product uses every hidden unit, recompute properly
                reset_row = [0.0] * h
                for k in range(h):
                    a_rk = sum(concat[i] * params.gru_wr[i, k] for i in range(len(concat)))
                    reset_row[k] = sig(a_rk + params.gru_br[k]) * h_prev[s, k]
                concat_h = reset_row + list(x[s]) + list(x_gcn[s])
                a_h = sum(concat_h[i] * params.gru_wh[i, unit] for i in range(len(concat_h)))
                cand = math.tanh(a_h + params.gru_bh[unit])
                expected[s, unit] = u_su * h_prev[s, unit] + (1.0 - u_su) * cand
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


class TestOutputsAndPredictor:
    def test_zero_weight_gives_half(self):
        h = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(gru_output(h, np.zeros((3, 2))), np.full((4, 2), 0.5))
        np.testing.assert_array_equal(predict(np.zeros((4, 2)), np.random.default_rng(1).normal(size=(2, 1))), np.full(4, 0.5))

    def test_saturation(self):
        x = np.full((3, 2), 50.0)
        w = np.ones((2, 1))
        assert (predict(x, w) >= 1.0 - 1e-6).all()

    def test_hand_case(self):
        h = np.array([[0.5, -0.5], [1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.0, -1.0]])
        got = gru_output(h, w)
        expected = 1.0 / (1.0 + np.exp(-np.array([[0.5, 0.5], [1.0, -2.0]])))
        np.testing.assert_allclose(got, expected, rtol=1e-15)


def _forward_setup(mode="multi", n=4, lag=3, seed=0, kernel_size=1):
    rng = np.random.default_rng(seed)
    dims = ModelDims(n_stocks=n, n_features=3, gcn_hidden=4, gcn_out=4,
                     gru_hidden=4, gru_out=4, kernel_size=kernel_size)
    if mode == "single":
        laps = [random_laplacian(rng, n)]
    elif mode == "multi":
        laps = [
            random_laplacian(rng, n, "shareholding", True),
            random_laplacian(rng, n, "industry", False),
            random_laplacian(rng, n, "topicality", False),
        ]
    else:
        laps = []
    params = init_params(dims, mode, seed + 1)
    window = rng.uniform(size=(lag, n, dims.n_features))
    props = build_propagators(params, laps)
    return params, laps, props, window


class TestForwardWindow:
    def test_unit_window_reduces_to_single_step(self):
        params, laps, props, window = _forward_setup(lag=1)
        yhat, trace = forward_window(window, params, props)
        x_gcn = multi_gcn_forward(window[0], props.per_layer, params)
        h1, _ = gru_step(np.zeros((4, params.dims.gru_hidden)), window[0], x_gcn, params)
        expected = predict(gru_output(h1, params.gru_wg), params.out_w)
        np.testing.assert_array_equal(yhat, expected)
        assert len(trace.steps) == 1

    def test_zero_input_invariance(self):
        params, laps, props, window = _forward_setup()
        zeros = np.zeros_like(window)
        y1, _ = forward_window(zeros, params, props)
        y2, _ = forward_window(2.0 * zeros, params, props)
        np.testing.assert_array_equal(y1, y2)

    def test_deterministic(self):
        params, laps, props, window = _forward_setup()
        y1, _ = forward_window(window, params, props)
        y2, _ = forward_window(window.copy(), params, props)
        np.testing.assert_array_equal(y1, y2)

    def test_matches_straight_line_reimplementation(self):
        params, laps, props, window = _forward_setup(mode="multi", n=4, lag=3, seed=12)

        def straight_line(window, params, per_layer):
            def sig(v):
                return 1.0 / (1.0 + np.exp(-v))

            h = np.zeros((window.shape[1], params.dims.gru_hidden))
            for t in range(window.shape[0]):
                x = window[t]
                a1 = np.maximum(per_layer[0] @ x @ params.gcn_w1, 0.0)
                g = np.maximum(per_layer[1] @ a1 @ params.gcn_w2, 0.0)
                cat = np.hstack([h, x, g])
                r = sig(cat @ params.gru_wr + params.gru_br)
                u = sig(cat @ params.gru_wu + params.gru_bu)
                cand = np.tanh(np.hstack([r * h, x, g]) @ params.gru_wh + params.gru_bh)
                h = u * h + (1 - u) * cand
            return sig(sig(h @ params.gru_wg) @ params.out_w).ravel()

        yhat, _ = forward_window(window, params, props)
        expected = straight_line(window, params, props.per_layer)
        np.testing.assert_allclose(yhat, expected, rtol=1e-12, atol=1e-14)

    def test_probabilities_strictly_inside_unit_interval(self):
        params, laps, props, window = _forward_setup(mode="dynamic")
        params.dynamic_l *= 100.0
        props = build_propagators(params, laps)
        yhat, _ = forward_window(window, params, props)
        assert (yhat > 0.0).all() and (yhat < 1.0).all()

    def test_none_mode_runs_without_graphs(self):
        params, _, props, window = _forward_setup(mode="none")
        yhat, trace = forward_window(window, params, props)
        assert yhat.shape == (4,)
        assert trace.steps[0].gcn_out.shape == (4, 0)


class TestPermutationEquivariance:
    @pytest.mark.parametrize("mode,kernel_size", [("single", 1), ("single", 2), ("multi", 1), ("multi", 2)])
    def test_forward_is_bit_exact_under_relabeling(self, mode, kernel_size):
        params, laps, props, window = _forward_setup(mode=mode, n=6, seed=21, kernel_size=kernel_size)
        yhat, _ = forward_window(window, params, props)
        rng = np.random.default_rng(33)
        for _ in range(5):
            perm = rng.permutation(6)
            plaps = [
                Laplacian(l.kind, l.matrix[np.ix_(perm, perm)], l.one_hop[np.ix_(perm, perm)])
                for l in laps
            ]
            pprops = build_propagators(params, plaps)
            pyhat, _ = forward_window(window[:, perm, :], params, pprops)
            np.testing.assert_array_equal(pyhat, yhat[perm])

    def test_dynamic_mode_with_permuted_mixing_matrix(self):
        params, _, props, window = _forward_setup(mode="dynamic", n=5, seed=22)
        yhat, _ = forward_window(window, params, props)
        perm = np.random.default_rng(1).permutation(5)
        permuted = params.copy()
        permuted.dynamic_l[:] = params.dynamic_l[np.ix_(perm, perm)]
        pprops = build_propagators(permuted, None)
        pyhat, _ = forward_window(window[:, perm, :], permuted, pprops)
        np.testing.assert_array_equal(pyhat, yhat[perm])


class TestLocality:
    def test_identity_propagator_locality_is_bitwise(self):
        n = 5
        laps = [identity_laplacian(n)]
        dims = ModelDims(n_stocks=n, n_features=3, gcn_hidden=4, gcn_out=4,
                         gru_hidden=4, gru_out=4)
        params = init_params(dims, "single", seed=3)
        props = build_propagators(params, laps)
        rng = np.random.default_rng(4)
        window = rng.uniform(size=(3, n, 3))
        base, _ = forward_window(window, params, props)
        for j in range(n):
            bumped = window.copy()
            bumped[:, j, :] += rng.uniform(0.5, 1.0, size=(3, 3))
            out, _ = forward_window(bumped, params, props)
            others = [i for i in range(n) if i != j]
            np.testing.assert_array_equal(out[others], base[others])
            assert out[j] != base[j]


class TestInitParams:
    def test_same_seed_bit_identical(self):
        dims = small_dims(n=4)
        a = init_params(dims, "multi", seed=5)
        b = init_params(dims, "multi", seed=5)
        for (name, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            np.testing.assert_array_equal(ta, tb)

    def test_coefficients_at_init(self):
        params = init_params(small_dims(n=4), "multi", seed=0)
        assert params.graph_coeffs.sum() == pytest.approx(1.0)
        np.testing.assert_array_equal(params.poly_coeffs, np.ones_like(params.poly_coeffs))

    def test_fan_based_bound_holds(self):
        dims = ModelDims(n_stocks=6, n_features=5, gcn_hidden=7, gcn_out=4,
                         gru_hidden=3, gru_out=8)
        params = init_params(dims, "multi", seed=11)
        for name, tensor in params.named_tensors():
            if name in ("poly_coeffs", "graph_coeffs") or name.startswith("gru_b"):
                continue
            fan_in, fan_out = tensor.shape[0], tensor.shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert (np.abs(tensor) <= bound).all(), name

    def test_mode_specific_tensors(self):
        dims = small_dims(n=4)
        none = init_params(dims, "none", seed=0)
        assert none.gcn_w1 is None and none.poly_coeffs is None
        assert none.gru_wr.shape[0] == dims.gru_hidden + dims.n_features
        dyn = init_params(dims, "dynamic", seed=0)
        assert dyn.dynamic_l.shape == (4, 4)
        assert dyn.poly_coeffs is None
        off = dyn.dynamic_l - np.eye(4)
        assert (np.abs(off) <= 0.01).all()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            init_params(small_dims(), "both", seed=0)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        for mode in ("single", "multi", "dynamic", "none"):
            params = init_params(small_dims(n=4, mode_k=2 if mode in ("single", "multi") else 1), mode, seed=7)
            path = tmp_path / f"{mode}.npz"
            save_checkpoint(path, params, extra={"note": mode})
            loaded, meta = load_checkpoint(path)
            assert meta["mode"] == mode and meta["extra"]["note"] == mode
            assert loaded.mode == params.mode and loaded.dims == params.dims
            for (name, ta), (_, tb) in zip(params.named_tensors(), loaded.named_tensors()):
                assert ta.dtype == tb.dtype
                np.testing.assert_array_equal(ta, tb)

    def test_reloaded_params_reproduce_forward_bitwise(self, tmp_path):
        params, laps, props, window = _forward_setup(mode="multi", seed=31)
        yhat, _ = forward_window(window, params, props)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params)
        loaded, _ = load_checkpoint(path)
        props2 = build_propagators(loaded, laps)
        yhat2, _ = forward_window(window, loaded, props2)
        np.testing.assert_array_equal(yhat, yhat2)

    def test_version_mismatch_rejected(self, tmp_path):
        params = init_params(small_dims(n=4), "none", seed=0)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params)
        import json, numpy as np_, io, zipfile
        # rewrite the meta entry with a bogus version
        with np_.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            tensors = {k: data[k] for k in data.files if k != "__meta__"}
        meta["format_version"] = 99
        buffer = io.BytesIO()
        np_.savez(buffer, __meta__=np_.frombuffer(json.dumps(meta).encode(), dtype=np_.uint8), **tensors)
        path.write_bytes(buffer.getvalue())
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

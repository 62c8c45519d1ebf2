import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deductmwp.numerics import (Adam, GruCell, GruCellSpec, Mlp, MlpSpec, Parameter, ParamSet, ShapeError, Tensor,
                                backward, bigru_scan, concat, finite_difference_check, gru_cell, gru_scan, linear,
                                load_checkpoint, matmul, max_element, mlp_forward, relative_error, relu, reshape,
                                save_checkpoint, sigmoid, stack, take, tanh, tmean, tsum)
from oracles import adam_reference, gru_reference, mlp_reference

# frozen outputs of the plain-float oracles in oracles.py
MLP_SEED7_OUTPUT = 0.008918880526741516
GRU_SEED11_OUTPUT = [0.2096510076317477, -0.39268070356667595]

SEEDS = [0, 1, 2, 3, 4]


def mlp_layers(mlp):
    ps = [p.data.tolist() for p in mlp.params]
    return list(zip(ps[0::2], ps[1::2]))


class TestMlp:
    def test_zero_weights_give_zero(self):
        store = ParamSet()
        mlp = Mlp(MlpSpec(3, 4, 2), store, "m", np.random.default_rng(0))
        for p in mlp.params:
            p.data[...] = 0.0
        out = mlp(Tensor([1.0, -2.0, 3.0]))
        assert np.array_equal(out.data, np.zeros(2))

    def test_identity_single_layer(self):
        spec = MlpSpec(2, 2, 2, hidden_layers=1)
        eye = [Parameter("w0", np.eye(2)), Parameter("b0", np.zeros(2)),
               Parameter("w1", np.eye(2)), Parameter("b1", np.zeros(2))]
        out = mlp_forward(spec, eye, Tensor([1.0, 2.0]))
        assert out.data.tolist() == [1.0, 2.0]

    def test_seed7_matches_oracle(self):
        store = ParamSet()
        mlp = Mlp(MlpSpec(2, 3, 1, hidden_layers=2), store, "m", np.random.default_rng(7))
        out = mlp(Tensor([0.5, -0.5])).item()
        assert out == pytest.approx(MLP_SEED7_OUTPUT, abs=1e-15)
        assert mlp_reference(mlp_layers(mlp), [0.5, -0.5])[0] == pytest.approx(out, abs=1e-15)

    def test_shape_error_names_layer(self):
        mlp = Mlp(MlpSpec(3, 4, 2), ParamSet(), "scorer", np.random.default_rng(0))
        with pytest.raises(ShapeError, match="scorer: layer 0"):
            mlp(Tensor([1.0, 2.0]))

    def test_init_bounds(self):
        mlp = Mlp(MlpSpec(16, 9, 4), ParamSet(), "m", np.random.default_rng(3))
        w0, b0 = mlp.params[0].data, mlp.params[1].data
        assert np.all(np.abs(w0) <= 1 / np.sqrt(16))
        assert not b0.any()

    @pytest.mark.parametrize("bad", [dict(hidden_layers=0), dict(input_dim=0), dict(activation="tanh")])
    def test_spec_validation(self, bad):
        args = dict(input_dim=2, hidden_dim=2, output_dim=1) | bad
        with pytest.raises(ValueError):
            MlpSpec(**args)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamSet()
        mlp = Mlp(MlpSpec(4, 5, 3), store, "m", rng)
        for p in mlp.params:
            p.data = p.data + rng.normal(0, 0.1, p.shape)  # move biases off zero
        x = Tensor(rng.normal(size=(3, 4)))
        target = rng.normal(size=(3, 3))
        report = finite_difference_check(lambda: tsum((mlp(x) - target) * (mlp(x) - target)), store)
        assert report.max_error < 1e-4, report.failing(1e-4)


class TestGru:
    def test_zero_weights_half_hidden(self):
        h = np.array([0.4, -1.0, 2.0])
        z = [np.zeros((9, 2)), np.zeros((9, 3)), np.zeros(9), np.zeros(9)]
        out = gru_cell(Tensor([1.0, -1.0]), Tensor(h), *map(Tensor, z))
        assert np.array_equal(out.data, 0.5 * h)

    def test_zero_hidden_zero_weights(self):
        z = [np.zeros((6, 4)), np.zeros((6, 2)), np.zeros(6), np.zeros(6)]
        out = gru_cell(Tensor(np.ones(4)), Tensor(np.zeros(2)), *map(Tensor, z))
        assert not out.data.any()

    def test_seeded_matches_gate_oracle(self):
        cell = GruCell(GruCellSpec(3, 2), ParamSet(), "g", np.random.default_rng(11))
        x, h = [0.3, -1.2, 0.7], [0.5, -0.25]
        out = cell(Tensor(x), Tensor(h)).data
        np.testing.assert_allclose(out, GRU_SEED11_OUTPUT, rtol=0, atol=1e-15)
        np.testing.assert_allclose(gru_reference(x, h, *[p.data.tolist() for p in cell.params]), out, atol=1e-15)

    def test_batched_rows_match_single(self):
        cell = GruCell(GruCellSpec(3, 4), ParamSet(), "g", np.random.default_rng(2))
        rng = np.random.default_rng(5)
        xs, h = rng.normal(size=(5, 3)), rng.normal(size=4)
        batched = cell(Tensor(xs), Tensor(h)).data
        for i in range(5):
            np.testing.assert_allclose(batched[i], cell(Tensor(xs[i]), Tensor(h)).data, atol=1e-14)

    def test_shape_errors(self):
        cell = GruCell(GruCellSpec(3, 4), ParamSet(), "g", np.random.default_rng(0))
        with pytest.raises(ShapeError):
            cell(Tensor(np.zeros(2)), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            cell(Tensor(np.zeros(3)), Tensor(np.zeros(5)))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1),
           x=arrays(np.float64, 3, elements=st.floats(-5, 5)),
           h=arrays(np.float64, 4, elements=st.floats(-3, 3)))
    def test_output_within_gate_convexity_bounds(self, seed, x, h):
        cell = GruCell(GruCellSpec(3, 4), ParamSet(), "g", np.random.default_rng(seed))
        out = cell(Tensor(x), Tensor(h)).data
        assert np.all(out >= np.minimum(h, -1.0) - 1e-12)
        assert np.all(out <= np.maximum(h, 1.0) + 1e-12)

    def test_scan_matches_cell_loop(self):
        cell = GruCell(GruCellSpec(3, 4), ParamSet(), "g", np.random.default_rng(9))
        xs = np.random.default_rng(1).normal(size=(6, 3))
        for reverse in (False, True):
            got = cell.scan(Tensor(xs), reverse=reverse).data
            h = Tensor(np.zeros(4))
            rows = {}
            for t in (reversed(range(6)) if reverse else range(6)):
                h = cell(Tensor(xs[t]), h)
                rows[t] = h.data
            np.testing.assert_allclose(got, np.stack([rows[t] for t in range(6)]), atol=1e-14)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cell_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamSet()
        cell = GruCell(GruCellSpec(3, 4), store, "g", rng)
        x = Parameter("x", rng.normal(size=(2, 3)))
        h = Parameter("h", rng.normal(size=4))
        w = rng.normal(size=(2, 4))
        report = finite_difference_check(lambda: tsum(cell(x, h) * w), list(store) + [x, h])
        assert report.max_error < 1e-4, report.failing(1e-4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_bidirectional_scan_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamSet()
        fwd = GruCell(GruCellSpec(3, 4), store, "f", rng)
        bwd = GruCell(GruCellSpec(3, 4), store, "b", rng)
        xs = Parameter("xs", rng.normal(size=(5, 3)))
        w = rng.normal(size=(5, 8))
        report = finite_difference_check(lambda: tsum(bigru_scan(xs, fwd.params, bwd.params) * w),
                                         list(store) + [xs])
        assert report.max_error < 1e-4, report.failing(1e-4)

    def test_single_direction_scan_gradcheck(self):
        rng = np.random.default_rng(0)
        store = ParamSet()
        cell = GruCell(GruCellSpec(2, 3), store, "g", rng)
        xs = Parameter("xs", rng.normal(size=(4, 2)))
        w = rng.normal(size=(4, 3))
        report = finite_difference_check(lambda: tsum(gru_scan(xs, *cell.params, reverse=True) * w),
                                         list(store) + [xs])
        assert report.max_error < 1e-4


class TestOps:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_and_structural_ops_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        a = Parameter("a", rng.normal(size=(3, 4)))
        b = Parameter("b", rng.normal(size=4))
        w = Parameter("w", rng.normal(size=(2, 4)))
        idx = np.array([2, 0, 2])

        def closure():
            x = sigmoid(a) * tanh(a + b) - relu(a - 0.3)
            y = linear(x, w, b[:2])
            z = concat([take(y, idx), reshape(tmean(y, axis=0), (1, 2))], axis=0)
            s = stack([tsum(z), max_element(reshape(z, (8,))), matmul(b, b)])
            return tsum(s * Tensor([0.7, -1.3, 0.2]))

        report = finite_difference_check(closure, [a, b, w])
        assert report.max_error < 1e-4, report.failing(1e-4)

    def test_broadcast_gradients_reduce(self):
        a = Parameter("a", np.ones((3, 2)))
        b = Parameter("b", np.ones(2))
        backward(tsum(a * b))
        assert b.grad.tolist() == [3.0, 3.0]

    def test_max_element_routes_to_first_argmax(self):
        x = Parameter("x", np.array([1.0, 3.0, 3.0]))
        backward(max_element(x))
        assert x.grad.tolist() == [0.0, 1.0, 0.0]


class TestBackward:
    def test_sum_of_parameter_gives_ones(self):
        p = Parameter("p", np.arange(4.0))
        backward(tsum(p))
        assert p.grad.tolist() == [1.0] * 4

    def test_constant_loss_leaves_zero_grads(self):
        p = Parameter("p", np.ones(3))
        backward(Tensor(0.0))
        assert not p.grad.any()

    def test_twice_raises(self):
        p = Parameter("p", np.ones(3))
        loss = tsum(p * p)
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            backward(Parameter("p", np.ones(3)) * 2.0)

    def test_unreachable_parameter_keeps_zero(self):
        used, unused = Parameter("u", np.ones(2)), Parameter("v", np.ones(2))
        backward(tsum(used))
        assert not unused.grad.any()

    def test_accumulates_until_reset(self):
        store = ParamSet()
        p = store.add("p", np.ones(2))
        backward(tsum(p * 2.0))
        backward(tsum(p * 2.0))
        assert p.grad.tolist() == [4.0, 4.0]
        store.zero_grad()
        assert all(not q.grad.any() for q in store)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_bitwise_deterministic(self, seed):
        def run():
            store = ParamSet()
            mlp = Mlp(MlpSpec(3, 5, 2), store, "m", np.random.default_rng(seed))
            loss = tsum(relu(mlp(Tensor(np.linspace(-1, 1, 3)))))
            backward(loss)
            return loss.item(), [p.grad.tobytes() for p in store]
        assert run() == run()


class TestAdam:
    def test_zero_gradient_leaves_value(self):
        p = Parameter("p", np.array([1.5, -2.0]))
        Adam([p], lr=0.1).step()
        assert p.data.tolist() == [1.5, -2.0]

    def test_first_step_matches_hand_formula(self):
        p = Parameter("p", np.array([0.0]))
        p.grad = np.array([1.0])
        Adam([p], lr=0.1).step()
        assert p.data[0] == pytest.approx(adam_reference(0.0, [1.0], 0.1), abs=1e-15)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_gradients_untouched(self):
        p = Parameter("p", np.zeros(2))
        p.grad = np.array([0.5, -0.5])
        Adam([p]).step()
        assert p.grad.tolist() == [0.5, -0.5]

    @settings(max_examples=40, deadline=None)
    @given(grads=st.lists(st.floats(-10, 10), min_size=1, max_size=20),
           lr=st.floats(1e-4, 1.0))
    def test_trajectory_matches_reference(self, grads, lr):
        p = Parameter("p", np.array([0.25]))
        opt = Adam([p], lr=lr)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert p.data[0] == pytest.approx(adam_reference(0.25, grads, lr), rel=1e-9, abs=1e-12)

    def test_constant_gradient_step_approaches_lr(self):
        p = Parameter("p", np.array([0.0]))
        opt = Adam([p], lr=0.01)
        before = 0.0
        for _ in range(200):
            p.grad = np.array([3.0])
            opt.step()
            delta, before = before - p.data[0], p.data[0]
        assert delta == pytest.approx(0.01, rel=1e-6)

    def test_non_finite_gradient_named(self):
        p = Parameter("dec.var.0.weight", np.zeros(2))
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="dec.var.0.weight"):
            Adam([p]).step()


class TestFiniteDifference:
    def test_quadratic_exact(self):
        p = Parameter("p", np.array([0.3, -1.2, 2.0]))
        report = finite_difference_check(lambda: tsum(p * p), [p])
        assert report["p"].max_rel_error < 1e-8

    def test_ignored_parameter_reports_zero(self):
        p, q = Parameter("p", np.ones(2)), Parameter("q", np.ones(2))
        report = finite_difference_check(lambda: tsum(p * p), [p, q])
        entry = report["q"]
        assert entry.max_abs_analytic == 0.0 and entry.max_abs_numeric == 0.0 and entry.max_rel_error == 0.0

    def test_non_deterministic_closure_detected(self):
        p = Parameter("p", np.ones(2))
        rng = np.random.default_rng(0)
        with pytest.raises(RuntimeError, match="not deterministic"):
            finite_difference_check(lambda: tsum(p * rng.normal()), [p])

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-6)


class TestCheckpoint:
    def make_store(self, seed=0):
        store = ParamSet()
        rng = np.random.default_rng(seed)
        store.add("a.weight", rng.normal(size=(3, 2)))
        store.add("a.bias", rng.normal(size=3))
        store.add("scalar", np.array(rng.normal()))
        return store

    def test_round_trip_bit_exact(self, tmp_path):
        store = self.make_store()
        save_checkpoint(tmp_path / "c.bin", store, {"note": "x"})
        meta, state = load_checkpoint(tmp_path / "c.bin")
        assert meta == {"note": "x"}
        assert list(state) == store.names()
        for p in store:
            assert state[p.name].tobytes() == p.data.tobytes()

    def test_byte_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "1", self.make_store(), {})
        save_checkpoint(tmp_path / "2", self.make_store(), {})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c", self.make_store(), {})
        raw = (tmp_path / "c").read_bytes()
        assert raw[:8] == b"DMWPCKPT"
        (n,) = struct.unpack("<Q", raw[8:16])
        assert len(raw) == 16 + n + 8 * (6 + 3 + 1)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c")

    def test_load_state_shape_mismatch(self):
        store = self.make_store()
        with pytest.raises(ShapeError):
            store.load_state({"a.weight": np.zeros((2, 2)), "a.bias": np.zeros(3), "scalar": np.zeros(())})

import numpy as np
import pytest

from bagssl.errors import DataError, NumericalError
from bagssl.nn import (
    Model,
    OptimState,
    load_checkpoint,
    load_model,
    load_table,
    parse_layer_specs,
    save_model,
    save_table,
)
from bagssl.nn.layers import Standardize

from oracles import fd_grad, grad_rel_err


def tiny_model(encoder="dense(4)", projector="dense(3)", input_shape=(1, 2, 2), seed=0):
    return Model(input_shape, encoder, projector, seed)


class TestForward:
    def test_identity_dense_returns_flat_input(self, rng):
        model = tiny_model(encoder="dense(4)", projector="dense(4)")
        enc = model.encoder[0]
        enc.w.values[...] = np.eye(4)
        enc.b.values[...] = 0.0
        x = rng.random((3, 1, 2, 2))
        h, _, _ = model.forward(x)
        np.testing.assert_array_equal(h, x.reshape(3, 4))

    def test_known_dense_arithmetic(self):
        model = tiny_model(encoder="dense(2)", projector="dense(2)", input_shape=(1, 1, 3))
        enc = model.encoder[0]
        # 2x3 hand computation: W column-major (in_dim, out_dim)
        enc.w.values[...] = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
        enc.b.values[...] = np.array([0.5, -1.0])
        v = np.array([1.0, 0.0, 2.0])
        h, _, _ = model.forward(v.reshape(1, 1, 1, 3))
        # [1*1 + 0*2 + 2*3 + 0.5, 1*4 + 0*5 + 2*6 - 1] = [7.5, 15.0]
        np.testing.assert_allclose(h[0], [7.5, 15.0], atol=1e-12)

    def test_l2norm_rows_unit(self, rng):
        model = tiny_model(encoder="dense(5)|l2norm", projector="dense(3)", input_shape=(1, 2, 2))
        h, _, _ = model.forward(rng.random((6, 1, 2, 2)) + 0.1)
        np.testing.assert_allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-9)

    def test_shape_mismatch_raises(self, rng):
        model = tiny_model()
        with pytest.raises(ValueError, match="shape"):
            model.forward(rng.random((2, 1, 3, 3)))

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            parse_layer_specs("dense(4)|bogus")
        with pytest.raises(ValueError, match="conv needs"):
            parse_layer_specs("conv(3,2)")
        with pytest.raises(ValueError, match="conv needs"):
            Model((1, 4, 4), "pool|conv(3,2,4)", "dense(2)", 0)


class TestBackward:
    def test_zero_upstream_zero_grads(self, rng):
        model = tiny_model(encoder="conv(2,1,3)|relu|pool|dense(4)", projector="dense(2)",
                           input_shape=(1, 4, 4))
        _, z, tape = model.forward(rng.random((3, 1, 4, 4)))
        model.zero_grads()
        model.backward(tape, np.zeros_like(z))
        for p in model.parameters():
            assert np.all(p.grad == 0.0)

    def test_tape_single_use(self, rng):
        model = tiny_model()
        _, z, tape = model.forward(rng.random((2, 1, 2, 2)))
        model.backward(tape, np.zeros_like(z))
        with pytest.raises(ValueError, match="tape"):
            model.backward(tape, np.zeros_like(z))

    def test_gradient_shape_mismatch(self, rng):
        model = tiny_model()
        _, _, tape = model.forward(rng.random((2, 1, 2, 2)))
        with pytest.raises(ValueError, match="dZ shape"):
            model.backward(tape, np.zeros((2, 7)))

    def test_three_layer_net_matches_finite_differences(self, rng):
        model = Model((2, 6, 6), "conv(3,2,3)|standardize|relu|pool|dense(5)",
                      "dense(4)|relu|dense(3)", seed=3)
        x = rng.normal(size=(4, 2, 6, 6))
        gh = rng.normal(size=(4, 5))
        gz = rng.normal(size=(4, 3))
        _, _, tape = model.forward(x)
        model.zero_grads()
        model.backward(tape, gz, gh)
        for p in model.parameters():
            analytic = p.grad.copy()

            def scalar(pv, _p=p):
                saved = _p.values.copy()
                _p.values[...] = pv
                h, z, _ = model.forward(x)
                _p.values[...] = saved
                return float((h * gh).sum() + (z * gz).sum())

            numeric = fd_grad(scalar, p.values.copy())
            assert grad_rel_err(analytic, numeric) < 1e-4, p.name

    def test_linear_model_squared_loss_closed_form(self, rng):
        # grads of mean squared loss must match the normal-equation gradient
        model = Model((1, 1, 4), "dense(3)", "dense(3)", seed=1)
        proj = model.projector[0]
        proj.w.values[...] = np.eye(3)
        proj.b.values[...] = 0.0
        x = rng.normal(size=(6, 1, 1, 4))
        y = rng.normal(size=(6, 3))
        h, _, tape = model.forward(x)
        n = x.shape[0]
        model.zero_grads()
        model.backward(tape, np.zeros_like(h), 2.0 * (h - y) / n)
        xf = x.reshape(n, 4)
        w = model.encoder[0].w.values
        b = model.encoder[0].b.values
        grad_w = 2.0 * xf.T @ (xf @ w + b - y) / n
        grad_b = 2.0 * (xf @ w + b - y).sum(axis=0) / n
        np.testing.assert_allclose(model.encoder[0].w.grad, grad_w, atol=1e-10)
        np.testing.assert_allclose(model.encoder[0].b.grad, grad_b, atol=1e-10)


class TestStandardize:
    def test_constant_column_maps_to_zero(self):
        layer = Standardize()
        x = np.full((4, 3), 2.5)
        y, _ = layer.forward(x)
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_already_standardized_column(self):
        layer = Standardize()
        y, _ = layer.forward(np.array([[-1.0], [1.0]]))
        np.testing.assert_allclose(y, [[-1.0], [1.0]], atol=1e-5)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="batch size"):
            Standardize().forward(np.ones((1, 3)))

    def test_gradient_matches_finite_differences(self, rng):
        layer = Standardize()
        x = rng.normal(size=(4, 3))
        g = rng.normal(size=(4, 3))
        _, ctx = layer.forward(x)
        dx = layer.backward(g, ctx)

        def scalar(xv):
            yv, _ = layer.forward(xv)
            return float((yv * g).sum())

        assert grad_rel_err(dx, fd_grad(scalar, x.copy())) < 1e-4


class TestOptimizer:
    def test_zero_lr_freezes_params(self, rng):
        model = tiny_model()
        before = model.flat_parameters()
        opt = OptimState(0.0, warmup_steps=0, total_steps=10)
        for p in model.parameters():
            p.grad[...] = rng.normal(size=p.shape)
        opt.step(model.parameters(), 5)
        np.testing.assert_array_equal(model.flat_parameters(), before)

    def test_warmup_endpoints(self):
        opt = OptimState(0.3, warmup_steps=10, total_steps=100)
        assert opt.lr_at(0) == 0.0
        assert opt.lr_at(10) == pytest.approx(0.3)
        assert opt.lr_at(100) == pytest.approx(0.0, abs=1e-15)

    def test_schedule_continuous_and_peaked(self):
        opt = OptimState(0.3, warmup_steps=10, total_steps=100)
        lrs = [opt.lr_at(s) for s in range(101)]
        assert max(lrs) == pytest.approx(0.3)
        assert np.argmax(lrs) == 10
        assert abs(opt.lr_at(9) - opt.lr_at(10)) < 0.31 / 10 + 1e-12
        assert all(b <= a + 1e-12 for a, b in zip(lrs[10:], lrs[11:]))  # decay after peak

    def test_momentum_two_step_recursion(self):
        model = tiny_model(encoder="dense(4)", projector="dense(4)")
        p = model.encoder[0].w
        start = p.values.copy()
        g = np.full(p.shape, 0.25)
        opt = OptimState(0.1, warmup_steps=0, total_steps=10, momentum=0.9, weight_decay=0.0)
        p.grad[...] = g
        opt.step([p], 0)
        np.testing.assert_allclose(p.values, start - 0.1 * g, atol=1e-15)
        p.grad[...] = g
        opt.step([p], 0)
        np.testing.assert_allclose(p.values, start - 0.1 * g - 0.1 * 1.9 * g, atol=1e-15)

    def test_nonfinite_gradient_names_param(self):
        model = tiny_model()
        p = model.parameters()[0]
        p.grad[...] = np.nan
        opt = OptimState(0.1, 0, 10)
        with pytest.raises(NumericalError, match=p.name):
            opt.step(model.parameters(), 0)


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, tmp_path, rng):
        model = Model((1, 6, 6), "conv(3,2,4)|standardize|relu|pool|dense(8)",
                      "dense(6)|relu|dense(4)", seed=11)
        a = tmp_path / "a.bssl"
        b = tmp_path / "b.bssl"
        save_model(a, model, step=17)
        loaded, step = load_model(a)
        assert step == 17
        save_model(b, loaded, step=17)
        assert a.read_bytes() == b.read_bytes()

    def test_load_reproduces_forward_bitwise(self, tmp_path, rng):
        model = Model((1, 6, 6), "conv(3,2,4)|relu|pool|dense(8)", "dense(4)", seed=2)
        x = rng.random((3, 1, 6, 6))
        h0, z0, _ = model.forward(x)
        path = tmp_path / "m.bssl"
        save_model(path, model, step=0)
        loaded, _ = load_model(path)
        h1, z1, _ = loaded.forward(x)
        assert np.array_equal(h0, h1) and np.array_equal(z0, z1)

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "bad.bssl"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="BSSL"):
            load_checkpoint(path)

    def test_table_roundtrip(self, tmp_path, rng):
        table = rng.normal(size=(12, 4))
        path = tmp_path / "t.bssl"
        save_table(path, table, step=5, seed=9)
        np.testing.assert_array_equal(load_table(path), table)
        with pytest.raises(DataError, match="table"):
            load_model(path)


class TestDeterminism:
    def test_same_seed_same_training_trajectory(self, rng):
        def run():
            model = tiny_model(encoder="dense(6)|standardize|relu|dense(4)",
                               projector="dense(3)", seed=5)
            opt = OptimState(0.05, 2, 20, momentum=0.9, weight_decay=1e-4)
            r = np.random.default_rng(77)
            for step in range(20):
                x = r.normal(size=(8, 1, 2, 2))
                _, z, tape = model.forward(x)
                model.backward(tape, 2 * z / z.size)
                opt.step(model.parameters(), step)
            return model.flat_parameters()

        np.testing.assert_array_equal(run(), run())

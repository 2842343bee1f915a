import numpy as np
import pytest
import scipy.sparse as sp

from _oracles import fd_gradient_check, small_problem
from wbe.born import adjoint_impl1, adjoint_impl2, build_kernel, polar_to_cart, shift_data
from wbe.core import Grids, Rng
from wbe.model import (Adam, ModelConfig, Tape, TapeError, TrainConfig, TrainingError,
                       closed_form_counts, conv_filter, forward, init_params, load_checkpoint,
                       loss_and_grads, loss_mse, metric_rel_rmse, param_count, predict,
                       save_checkpoint, staircase_lr, train, write_history)
from wbe.media import Medium, rotate_medium
from wbe.model import networks


def polar_rows(params, lam):
    """Back-projected polar field ``(B, channels, n_theta, n_rho)`` of the first frequency."""
    cfg = params.config
    tape = Tape()
    P = {k: tape.param(v) for k, v in params.tensors.items()}
    sh = networks._shifted(lam)
    lr, li = sh.real.copy(), sh.imag.copy()
    if cfg.kind == "uncompressed":
        out = [networks._bp_uncompressed(tape, P, "bp0.", lr, li)]
    else:
        out = networks._bp_compressed(tape, P, "bp0.", cfg, networks._layout(cfg), lr, li)
    return np.stack([o.value for o in out], axis=1)


def _crand(rng, shape):
    return rng.uniform(-1, 1, shape) + 1j * rng.uniform(-1, 1, shape)


# ---------------------------------------------------------------------------
# tape primitives
# ---------------------------------------------------------------------------

def _check_primitive(build, inputs, seed=0, step=1e-6):
    """Compare tape gradients of ``sum(w * build(tape, *vars))`` with central differences."""
    def run(vals):
        tape = Tape()
        vs = [tape.param(v) for v in vals]
        out = build(tape, *vs)
        return tape, vs, out

    tape, vs, out = run(inputs)
    w = Rng(seed).uniform(-1, 1, out.value.shape)
    tape.backward(out, seed=w)
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        for i in range(x.size):
            xp = [v.copy() for v in inputs]
            xm = [v.copy() for v in inputs]
            xp[k].reshape(-1)[i] += step
            xm[k].reshape(-1)[i] -= step
            num.reshape(-1)[i] = (np.sum(w * run(xp)[2].value) - np.sum(w * run(xm)[2].value)) / (2 * step)
        np.testing.assert_allclose(vs[k].grad, num, rtol=1e-6, atol=1e-8)


class TestTape:
    r = Rng(0)

    def test_einsum_with_internal_sum(self):
        _check_primitive(lambda t, a, b: t.einsum("ijk,k->i", a, b),
                         [self.r.uniform(-1, 1, (2, 3, 4)), self.r.uniform(-1, 1, 4)])
        _check_primitive(lambda t, a: t.einsum("ij->i", a), [self.r.uniform(-1, 1, (3, 4))])

    def test_elementwise_and_shape(self):
        a, b = self.r.uniform(-1, 1, (3, 4)), self.r.uniform(-1, 1, (3, 4))
        _check_primitive(lambda t, x, y: t.relu(t.sub(t.add(x, y), t.scale(y, 0.3))), [a, b])
        _check_primitive(lambda t, x: t.transpose(t.reshape(x, (4, 3)), (1, 0)), [a])
        _check_primitive(lambda t, x, y: t.concat([x, y, x], 1), [a, b])
        _check_primitive(lambda t, x, y: t.stack([x, y], 2), [a, b])

    def test_gather_repeated_index(self):
        _check_primitive(lambda t, x: t.gather(x, np.array([0, 2, 2, 1]), 1),
                         [self.r.uniform(-1, 1, (2, 3))])

    def test_sparse_map(self):
        M = sp.random(5, 4, density=0.5, random_state=1, format="csr")
        _check_primitive(lambda t, x: t.sparse_map(x, M, axis=1), [self.r.uniform(-1, 1, (2, 4, 3))])

    def test_bsmm(self):
        ri = np.array([[0, 1], [2, 3], [0, 1]])
        ci = np.array([[0, 1, 2], [3, 4, 5], [3, 4, 5]])
        _check_primitive(lambda t, w, x: t.bsmm(w, x, ri, ci, 4),
                         [self.r.uniform(-1, 1, (3, 2, 3)), self.r.uniform(-1, 1, (2, 6, 2))])

    def test_conv2d(self):
        _check_primitive(lambda t, x, k, b: t.conv2d(x, k, b),
                         [self.r.uniform(-1, 1, (2, 2, 5, 5)), self.r.uniform(-1, 1, (3, 2, 3, 3)),
                          self.r.uniform(-1, 1, 3)])

    def test_mse(self):
        _check_primitive(lambda t, x, y: t.mse(x, y),
                         [self.r.uniform(-1, 1, (3, 3)), self.r.uniform(-1, 1, (3, 3))])

    def test_replay_bit_identical(self):
        params, lam, eta = small_problem("compressed", L=2, r=2)
        tape = Tape()
        out, _ = forward(params, lam, tape)
        before = out.value.copy()
        tape.replay()
        assert out.value.tobytes() == before.tobytes()

    def test_replay_detects_change(self):
        tape = Tape()
        x = tape.param(np.ones(3))
        tape.relu(x)
        x.value = -x.value
        with pytest.raises(TapeError):
            tape.replay()

    def test_foreign_variable(self):
        a, b = Tape(), Tape()
        with pytest.raises(TapeError):
            b.relu(a.param(np.ones(2)))


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class TestForward:
    def test_zero_input_zero_output(self):
        for kind, kw in (("uncompressed", {}), ("compressed", {"L": 2, "r": 2})):
            params, lam, _ = small_problem(kind, **kw)
            out = predict(params, np.zeros_like(lam))
            assert not out.any()

    def test_kernel_init_uncompressed_matches_impl1(self):
        cfg = ModelConfig("uncompressed", 16, 16, (1.0, 2.0))
        params = init_params(cfg, "kernel-init")
        g = cfg.grids
        lam = _crand(Rng(1), (2, 2, 16, 16))
        x, _ = forward(params, lam, Tape(), channels_only=True)
        for b in range(2):
            for f, w in enumerate(2 * np.pi * np.array(cfg.freqs)):
                ref = polar_to_cart(adjoint_impl1(lam[b, f], build_kernel(w, g), g).alpha, g)
                assert np.abs(x.value[b, f] - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_kernel_init_compressed_matches_impl2(self):
        cfg = ModelConfig("compressed", 16, 16, (2.0,), L=2, r=8, n_sr=2)
        params = init_params(cfg, "kernel-init")
        g = cfg.grids
        lam = _crand(Rng(2), (1, 1, 16, 16))
        x, _ = forward(params, lam, Tape(), channels_only=True)
        alpha = adjoint_impl2(lam[0, 0], build_kernel(4 * np.pi, g), g).alpha
        for c, part in enumerate((alpha.real, alpha.imag)):
            ref = polar_to_cart(part, g)
            assert np.abs(x.value[0, c] - ref).max() <= 1e-8 * np.abs(ref).max()

    @pytest.mark.parametrize("kind,kw", [("uncompressed", {}), ("compressed", {"L": 2, "r": 2})])
    def test_polar_rows_equivariant(self, kind, kw):
        params, lam, _ = small_problem(kind, n=16, **kw)
        a = polar_rows(params, lam[:, 0])
        for j in range(16):
            b = polar_rows(params, shift_data(lam[:, 0], j))
            ref = np.roll(a, -j, axis=-2)
            assert np.linalg.norm(b - ref) <= 1e-13 * np.linalg.norm(ref)

    @pytest.mark.parametrize("kind,kw", [("uncompressed", {}), ("compressed", {"L": 2, "r": 2})])
    def test_c4_output_quarter_turn(self, kind, kw):
        params, lam, _ = small_problem(kind, n=16, conv_symmetry="c4", **kw)
        a = predict(params, lam)
        for q in (1, 2, 3):
            b = predict(params, shift_data(lam, 4 * q))
            ra = np.array([rotate_medium(Medium(m), q).grid for m in a])
            assert np.linalg.norm(b - ra) <= 1e-12 * np.linalg.norm(ra)

    def test_plain_kernels_not_forced_equivariant(self):
        # without tied kernels the conv stack may break the symmetry; only the channels are exact
        params, lam, _ = small_problem("uncompressed", n=16)
        a = predict(params, lam)
        b = predict(params, shift_data(lam, 4))
        ra = np.array([rotate_medium(Medium(m), 1).grid for m in a])
        assert np.linalg.norm(b - ra) > 1e-6 * np.linalg.norm(ra)

    def test_output_vanishes_off_support(self):
        params, lam, _ = small_problem("uncompressed", n=16)
        out = predict(params, lam)
        mask = Grids(1, 16).interior_mask()
        assert not out[:, ~mask].any()

    def test_shape_mismatch(self):
        params, lam, _ = small_problem("uncompressed")
        with pytest.raises(ValueError):
            predict(params, lam[:, :, :4, :4])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig("compressed", 12, 12, (1.0,), L=3)
        with pytest.raises(ValueError):
            ModelConfig("other", 8, 8, (1.0,))
        with pytest.raises(ValueError):
            ModelConfig("uncompressed", 8, 8, (1.0,), conv_kernel=4)


class TestConvFilter:
    def test_identity_passthrough(self):
        tape = Tape()
        x = Rng(0).uniform(-1, 1, (2, 1, 6, 6))
        P = {"conv0.W": tape.param(np.ones((1, 1, 1, 1))), "conv0.b": tape.param(np.zeros(1))}
        np.testing.assert_array_equal(conv_filter(tape, P, tape.const(x), 1).value, x)

    def test_zero_weights_bias_constant(self):
        tape = Tape()
        P = {"conv0.W": tape.param(np.zeros((1, 2, 3, 3))), "conv0.b": tape.param(np.array([0.7]))}
        y = conv_filter(tape, P, tape.const(np.ones((1, 2, 5, 5))), 1).value
        np.testing.assert_array_equal(y, 0.7)

    def test_translation(self):
        rng = Rng(3)
        tape = Tape()
        P = {"conv0.W": tape.param(rng.uniform(-1, 1, (2, 1, 3, 3))), "conv0.b": tape.param(np.zeros(2)),
             "conv1.W": tape.param(rng.uniform(-1, 1, (1, 2, 3, 3))), "conv1.b": tape.param(np.zeros(1))}
        x = np.zeros((1, 1, 12, 12))
        x[0, 0, 4:8, 4:7] = rng.uniform(-1, 1, (4, 3))
        a = conv_filter(tape, P, tape.const(x), 2).value
        b = conv_filter(tape, P, tape.const(np.roll(x, 1, axis=2)), 2).value
        np.testing.assert_allclose(b[..., 3:10, 2:10], np.roll(a, 1, axis=2)[..., 3:10, 2:10], atol=1e-15)


class TestCounts:
    def test_uncompressed(self):
        cfg = ModelConfig("uncompressed", 16, 16, (0.5, 1.0, 2.0), n_rho=12)
        p = init_params(cfg)
        cf = closed_form_counts(cfg)
        assert param_count(p) == cf
        assert cf["per_frequency"] == 2 * 16 * 12 + 4 * 16

    def test_compressed_6144(self):
        cfg = ModelConfig("compressed", 80, 80, (10.0,), L=4, r=3, n_sr=2)
        p = init_params(cfg)
        assert closed_form_counts(cfg)["per_frequency"] == 6144
        assert param_count(p) == closed_form_counts(cfg)

    def test_compressed_smaller_at_80(self):
        kw = dict(n_sc=80, n_eta=80, freqs=(2.5, 5.0, 10.0))
        c = closed_form_counts(ModelConfig("compressed", L=4, r=3, n_sr=2, **kw))
        u = closed_form_counts(ModelConfig("uncompressed", **kw))
        assert c["total"] < u["total"]


# ---------------------------------------------------------------------------
# gradients, loss and optimizer
# ---------------------------------------------------------------------------

class TestGradients:
    @pytest.mark.parametrize("kind,kw", [("uncompressed", {}), ("compressed", {"L": 2, "r": 2})])
    def test_finite_differences(self, kind, kw):
        params, lam, eta = small_problem(kind, **kw)
        worst = fd_gradient_check(params, lam, eta)
        assert max(worst.values()) <= 1e-5, worst

    def test_zero_at_perfect_fit(self):
        params, lam, _ = small_problem("uncompressed")
        eta = predict(params, lam)
        _, grads = loss_and_grads(params, lam, eta)
        assert all(not g.any() for g in grads.values())

    def test_seed_scaling(self):
        params, lam, eta = small_problem("uncompressed")
        tape = Tape()
        out, P = forward(params, lam, tape)
        loss = tape.mse(out, tape.const(eta))
        tape.backward(loss)
        g1 = {k: v.grad.copy() for k, v in P.items()}
        tape.backward(loss, seed=3.0)
        for k, v in P.items():
            np.testing.assert_allclose(v.grad, 3.0 * g1[k], rtol=0, atol=1e-13 * np.abs(g1[k]).max())


class TestLossMetric:
    def test_identity(self):
        e = Rng(0).uniform(-1, 1, (3, 4, 4))
        assert loss_mse(e, e) == 0 and metric_rel_rmse(e, e) == 0

    def test_zero_prediction(self):
        e = Rng(1).uniform(-1, 1, (3, 4, 4))
        assert metric_rel_rmse(np.zeros_like(e), e) == pytest.approx(1.0)

    def test_constant_offset(self):
        e = Rng(2).uniform(-1, 1, (5, 5))
        assert loss_mse(e + 0.3, e) == pytest.approx(0.09)

    def test_zero_norm_excluded(self):
        e = np.zeros((2, 3, 3))
        e[1, 1, 1] = 1.0
        with pytest.warns(UserWarning):
            assert metric_rel_rmse(np.zeros_like(e), e) == pytest.approx(1.0)


class TestAdam:
    def test_first_step_sign(self):
        opt = Adam(lr=1e-3)
        p = {"w": np.zeros(4)}
        opt.step(p, {"w": np.array([2.0, -0.5, 1e-3, -7.0])})
        np.testing.assert_allclose(p["w"], -1e-3 * np.sign([2.0, -0.5, 1e-3, -7.0]), rtol=1e-4)

    def test_staircase(self):
        assert staircase_lr(1.0, 49) == 1.0
        assert staircase_lr(1.0, 50) == pytest.approx(0.96)
        assert staircase_lr(1.0, 149) == pytest.approx(0.96 ** 2)

    def test_zero_gradient(self):
        opt = Adam()
        p = {"w": np.arange(3.0)}
        opt.step(p, {"w": np.zeros(3)})
        np.testing.assert_array_equal(p["w"], np.arange(3.0))


class TestTrain:
    def _data(self):
        params, lam, eta = small_problem("uncompressed", batch=6)
        return params, lam, eta

    def test_zero_epochs(self):
        params, lam, eta = self._data()
        out, hist = train(params, lam[:4], eta[:4], lam[4:], eta[4:], TrainConfig(epochs=0))
        assert hist == []
        for k in params.tensors:
            np.testing.assert_array_equal(out.tensors[k], params.tensors[k])

    def test_deterministic(self, tmp_path):
        params, lam, eta = self._data()
        cfg = TrainConfig(epochs=3, batch=2, lr=1e-3)
        a, ha = train(params, lam[:4], eta[:4], lam[4:], eta[4:], cfg)
        b, hb = train(params, lam[:4], eta[:4], lam[4:], eta[4:], cfg)
        assert ha == hb
        for k in a.tensors:
            assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
        write_history(ha, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_mse,val_rel_rmse,lr" and len(lines) == 4

    def test_nan_aborts(self):
        params, lam, eta = self._data()
        lam = lam.copy()
        lam[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="step 1"):
            train(params, lam[:4], eta[:4], lam[4:], eta[4:], TrainConfig(epochs=1, batch=4))

    def test_checkpoint_roundtrip(self, tmp_path):
        params, lam, _ = small_problem("compressed", L=2, r=2, conv_symmetry="c4")
        save_checkpoint(params, tmp_path / "ck", TrainConfig())
        back = load_checkpoint(tmp_path / "ck")
        assert back.config == params.config
        np.testing.assert_array_equal(predict(back, lam), predict(params, lam))

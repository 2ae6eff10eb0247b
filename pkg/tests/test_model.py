import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from tempodiff.data import toy_dataset
from tempodiff.diffusion import cosine_beta_schedule, sample_loop, simple_loss, simple_loss_grad
from tempodiff.model import Denoiser, DenoiserConfig, init_params, param_count
from tempodiff.nn import ParameterError
from tempodiff.metrics import wasserstein1
from tempodiff.training import TrainArrays, early_stopping, new_train_state, train_epoch

TINY = DenoiserConfig(D=2, T_seq=4, T_diffusion=10, d_t=4, d_c=4, n_classes=3, d_hidden=8)


def tiny_batch(rng, cfg=TINY, B=3):
    xt = rng.normal(size=(B, cfg.T_seq, cfg.D))
    t = rng.integers(1, cfg.T_diffusion + 1, size=B)
    y = rng.integers(0, cfg.n_classes, size=B)
    M = (rng.random((B, cfg.T_seq, cfg.D)) > 0.3).astype(float)
    return xt, t, y, M


def full_gradient_check(cfg, seed=0, training=True):
    """Per-parameter relative error of backprop against central differences."""
    rng = np.random.default_rng(seed)
    model = Denoiser(cfg, rng=rng)
    for p in model.parameters():  # non-zero biases exercise every path
        p.value += rng.normal(0, 0.1, p.shape)
    xt, t, y, M = tiny_batch(rng, cfg)
    eps = rng.normal(size=xt.shape)

    def loss():
        pred, _ = model.forward(xt, t, y, M, training=training, rng=np.random.default_rng(7))
        return simple_loss(eps, pred)

    model.zero_grad()
    pred, cache = model.forward(xt, t, y, M, training=training, rng=np.random.default_rng(7))
    gx = model.backward(cache, simple_loss_grad(eps, pred))
    errors = {p.name: rel_err(p.grad, numeric_grad(loss, p.value)) for p in model.parameters()}
    errors["x_t"] = rel_err(gx, numeric_grad(loss, xt))
    return errors


class TestConfig:
    def test_rejects_odd_dims(self):
        with pytest.raises(ParameterError):
            DenoiserConfig(d_t=3)
        with pytest.raises(ParameterError):
            DenoiserConfig(D=0)

    @pytest.mark.parametrize("cfg", [TINY, DenoiserConfig(), DenoiserConfig(adapters_enabled=False),
                                     DenoiserConfig(n_adapters=2, d_hidden=16)])
    def test_param_count(self, cfg):
        params = init_params(cfg, np.random.default_rng(0))
        assert sum(p.value.size for p in params.values()) == param_count(cfg)

    def test_default_count_by_hand(self):
        # 1000*32 + 6*16 + 128*54+128 + 2*(3*128*128+128) + 128*128+128 + 128*128+128 + 3*128+3
        assert param_count(DenoiserConfig()) == 32000 + 96 + 7040 + 98560 + 16512 + 16512 + 387


class TestInit:
    def test_seeded(self):
        a = init_params(TINY, np.random.default_rng(3))
        b = init_params(TINY, np.random.default_rng(3))
        assert all(np.array_equal(a[k].value, b[k].value) for k in a)

    def test_biases_zero(self):
        params = init_params(DenoiserConfig(), np.random.default_rng(0))
        assert all(not p.value.any() for n, p in params.items() if n.endswith(".b"))

    def test_glorot_std(self):
        W = init_params(DenoiserConfig(), np.random.default_rng(0))["mlp1.W"].value
        expected = np.sqrt(6 / 256) / np.sqrt(3)  # std of U(-a, a) is a / sqrt(3)
        assert abs(W.std() / expected - 1) < 0.2

    def test_embedding_std(self):
        E = init_params(DenoiserConfig(), np.random.default_rng(0))["t_emb"].value
        assert abs(E.std() - 0.02) < 0.002


class TestBuildInput:
    def test_width_and_slices(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt, t, y, M = tiny_batch(rng)
        inp = model.build_input(xt, t, y, M)
        assert inp.shape == (3, TINY.T_seq, TINY.input_width)
        np.testing.assert_array_equal(inp[..., :2], xt)
        np.testing.assert_array_equal(inp[..., -2:], M)

    def test_equal_conditions_equal_embeddings(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt = rng.normal(size=(2, 4, 2))
        inp = model.build_input(xt, [5, 5], [1, 1], np.ones_like(xt))
        np.testing.assert_array_equal(inp[0, :, 2:-2], inp[1, :, 2:-2])

    def test_mask_slice_isolated(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt = rng.normal(size=(1, 4, 2))
        a = model.build_input(xt, [2], [0], np.ones_like(xt))
        b = model.build_input(xt, [2], [0], np.zeros_like(xt))
        diff = np.any(a != b, axis=(0, 1))
        assert diff[-2:].all() and not diff[:-2].any()

    def test_invalid_label(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt = np.zeros((1, 4, 2))
        with pytest.raises(IndexError):
            model.build_input(xt, [1], [3], np.ones_like(xt))
        with pytest.raises(IndexError):
            model.build_input(xt, [11], [0], np.ones_like(xt))


class TestAdapter:
    def test_disabled_is_bypass(self, rng):
        model = Denoiser(DenoiserConfig(adapters_enabled=False, d_hidden=8, T_seq=5), rng=rng)
        h = rng.normal(size=(2, 5, 8))
        out, _ = model.adapter_forward(h)
        assert out is h

    def test_zero_weights_zero_output(self, rng):
        model = Denoiser(TINY, rng=rng)
        for name, p in model.params.items():
            if name.startswith("adapter"):
                p.value[...] = 0
        out, _ = model.adapter_forward(rng.normal(size=(2, 4, 8)))
        assert out.shape == (2, 4, 8) and not out.any()


class TestDenoiser:
    def test_shape_and_eval_determinism(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt, t, y, M = tiny_batch(rng)
        a = model.predict(xt, t, y, M)
        assert a.shape == xt.shape
        assert a.tobytes() == model.predict(xt, t, y, M).tobytes()

    def test_batch_permutation_equivariance(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt, t, y, M = tiny_batch(rng, B=5)
        perm = rng.permutation(5)
        np.testing.assert_allclose(model.predict(xt[perm], t[perm], y[perm], M[perm]),
                                   model.predict(xt, t, y, M)[perm], atol=1e-12)

    def test_zero_upstream_gradient(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt, t, y, M = tiny_batch(rng)
        _, cache = model.forward(xt, t, y, M)
        model.backward(cache, np.zeros_like(xt))
        assert all(not p.grad.any() for p in model.parameters())

    def test_t_emb_rows_sparse(self, rng):
        model = Denoiser(TINY, rng=rng)
        xt, _, y, M = tiny_batch(rng)
        t = np.array([2, 2, 7])
        pred, cache = model.forward(xt, t, y, M)
        model.backward(cache, rng.normal(size=pred.shape))
        touched = np.flatnonzero(np.abs(model.params["t_emb"].grad).sum(axis=1))
        assert set(touched) <= {1, 6}

    @pytest.mark.parametrize("training", [False, True])
    def test_full_gradient(self, training):
        errors = full_gradient_check(TINY, training=training)
        assert max(errors.values()) < 1e-4, errors

    def test_gradient_two_adapters_last_dropout(self):
        cfg = DenoiserConfig(D=2, T_seq=5, T_diffusion=10, d_t=4, d_c=2, n_classes=2, d_hidden=6,
                             n_adapters=2, dropout_placement="last")
        errors = full_gradient_check(cfg, seed=3)
        assert max(errors.values()) < 1e-4, errors

    def test_ablation_is_plain_mlp(self, rng):
        cfg = DenoiserConfig(D=2, T_seq=6, T_diffusion=10, d_t=4, d_c=4, n_classes=3, d_hidden=8,
                             adapters_enabled=False)
        model = Denoiser(cfg, rng=np.random.default_rng(0))
        xt, t, y, M = tiny_batch(rng, cfg)
        P = {k: p.value for k, p in model.params.items()}
        ref = np.zeros_like(xt)
        for b in range(len(t)):
            for s in range(cfg.T_seq):
                v = np.concatenate([xt[b, s], P["t_emb"][t[b] - 1], P["c_emb"][y[b]], M[b, s]])
                h = np.maximum(P["in.W"] @ v + P["in.b"], 0)
                h = np.maximum(P["mlp1.W"] @ h + P["mlp1.b"], 0)
                ref[b, s] = P["mlp2.W"] @ h + P["mlp2.b"]
        np.testing.assert_allclose(model.predict(xt, t, y, M), ref, atol=1e-12)


def toy_arrays(rng, n=40, T=8, D=2, n_classes=2):
    x0 = np.stack([np.sin(np.arange(T)[:, None] * (1 + k % n_classes) + rng.normal(size=D)) for k in range(n)])
    return TrainArrays(x0, np.arange(n) % n_classes, np.ones_like(x0))


class TestTraining:
    cfg = DenoiserConfig(D=2, T_seq=8, T_diffusion=20, d_t=8, d_c=4, n_classes=2, d_hidden=16)

    def test_empty_dataset(self):
        model = Denoiser(self.cfg)
        data = TrainArrays(np.zeros((0, 8, 2)), np.zeros(0, dtype=int), np.zeros((0, 8, 2)))
        with pytest.raises(ParameterError):
            train_epoch(data, model, new_train_state(model, 10), cosine_beta_schedule(20))

    def test_loss_decreases(self):
        data = toy_arrays(np.random.default_rng(0), n=256)
        model = Denoiser(self.cfg, rng=np.random.default_rng(0))
        state = new_train_state(model, total_steps=1000, seed=0, lr=3e-3)
        sched = cosine_beta_schedule(20)
        losses = [train_epoch(data, model, state, sched, batch_size=16) for _ in range(5)]
        assert all(a > b for a, b in zip(losses, losses[1:])), losses

    def test_zero_lr_freezes(self):
        data = toy_arrays(np.random.default_rng(1))
        model = Denoiser(self.cfg, rng=np.random.default_rng(0))
        before = {k: p.value.copy() for k, p in model.params.items()}
        state = new_train_state(model, 10, lr=0.0, weight_decay=0.0)
        train_epoch(data, model, state, cosine_beta_schedule(20), batch_size=16)
        assert all(np.array_equal(before[k], p.value) for k, p in model.params.items())
        assert state.optimizer.step == 3

    def test_reproducible(self):
        def run():
            model = Denoiser(self.cfg, rng=np.random.default_rng(0))
            state = new_train_state(model, 20, seed=4)
            data = toy_arrays(np.random.default_rng(2))
            losses = [train_epoch(data, model, state, cosine_beta_schedule(20), batch_size=16) for _ in range(2)]
            return losses, model.params["mlp2.W"].value.tobytes()

        assert run() == run()


class TestEarlyStopping:
    def test_decreasing_never_stops(self):
        d = early_stopping([1.0, 0.8, 0.6, 0.4, 0.2], patience=2)
        assert not d.stop and d.best_index == 4

    def test_plateau(self):
        d = early_stopping([1.0, 0.9, 0.9, 0.9, 0.9, 0.9], patience=2)
        assert d.stop and d.stop_index == 3 and d.best_index == 1

    def test_empty(self):
        with pytest.raises(ParameterError):
            early_stopping([])

    def test_small_improvements_do_not_reset(self):
        d = early_stopping([1.0, 0.99995, 0.99993, 0.99991], patience=3, min_delta=1e-4)
        assert d.stop and d.stop_index == 3 and d.best_index == 3


@pytest.fixture(scope="module")
def toy_trained():
    """Small denoiser trained briefly on a static class and a sinusoid class."""
    cfg = DenoiserConfig(D=2, T_seq=16, T_diffusion=50, d_t=8, d_c=4, n_classes=2, d_hidden=32)
    wins = toy_dataset(128, T_seq=16, D=2, n_classes=2, rng=np.random.default_rng(0))
    data = TrainArrays.from_windows(wins)
    model = Denoiser(cfg, rng=np.random.default_rng(0))
    state = new_train_state(model, total_steps=400, seed=0, lr=3e-3)
    sched = cosine_beta_schedule(50)
    for _ in range(100):
        train_epoch(data, model, state, sched, batch_size=64)
    return model, sched


class TestTrainedProperties:
    def test_class_conditioning_is_live(self, toy_trained):
        model, sched = toy_trained
        M = np.ones((16, 2))
        a1 = sample_loop(model, sched, 60, 0, M, np.random.default_rng(1))
        a2 = sample_loop(model, sched, 60, 0, M, np.random.default_rng(2))
        b = sample_loop(model, sched, 60, 1, M, np.random.default_rng(3))
        same = wasserstein1(a1, a2)
        assert wasserstein1(a1, b) > same and wasserstein1(a2, b) > same

    def test_mask_is_live(self, toy_trained, rng):
        model, _ = toy_trained
        xt = rng.normal(size=(4, 16, 2))
        t, y = [5, 20, 35, 50], [0, 1, 0, 1]
        delta = model.predict(xt, t, y, np.ones_like(xt)) - model.predict(xt, t, y, np.zeros_like(xt))
        assert np.abs(delta).max() > 1e-6

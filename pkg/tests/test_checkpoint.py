import numpy as np
import pytest

from tempodiff import nn
from tempodiff.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from tempodiff.model import Denoiser, DenoiserConfig

CFG = DenoiserConfig(D=2, T_seq=6, T_diffusion=10, d_t=4, d_c=4, n_classes=3, d_hidden=8)


def trained_state(rng):
    model = Denoiser(CFG, rng=rng)
    opt = nn.AdamWState.for_params(model.parameters())
    for _ in range(3):
        for p in model.parameters():
            p.grad = rng.normal(size=p.shape)
        nn.adamw_step(model.parameters(), opt, 1e-3)
    return model, opt


def test_bit_exact_round_trip(tmp_path, rng):
    model, opt = trained_state(rng)
    save_checkpoint(tmp_path / "c.ckpt", model.params, opt, {"epoch": 3, "note": "x"})
    params, opt2, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert list(params) == list(model.params)
    for k, p in model.params.items():
        assert params[k].value.tobytes() == p.value.tobytes() and params[k].shape == p.shape
        assert opt2.m[k].tobytes() == opt.m[k].tobytes() and opt2.v[k].tobytes() == opt.v[k].tobytes()
    assert opt2.step == 3 and opt2.lr0 == opt.lr0 and meta == {"epoch": 3, "note": "x"}


def test_resumed_optimizer_matches_uninterrupted(tmp_path, rng):
    model, opt = trained_state(rng)
    save_checkpoint(tmp_path / "c.ckpt", model.params, opt)
    params, opt2, _ = load_checkpoint(tmp_path / "c.ckpt")
    grads = {k: rng.normal(size=p.shape) for k, p in model.params.items()}
    for k in grads:
        model.params[k].grad = grads[k].copy()
        params[k].grad = grads[k].copy()
    nn.adamw_step(model.parameters(), opt, 1e-3)
    nn.adamw_step(list(params.values()), opt2, 1e-3)
    assert all(params[k].value.tobytes() == p.value.tobytes() for k, p in model.params.items())


def test_without_optimizer(tmp_path, rng):
    model = Denoiser(CFG, rng=rng)
    save_checkpoint(tmp_path / "c.ckpt", model.params)
    params, opt, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert opt is None and meta == {}
    restored = Denoiser(CFG, params=params)
    x = rng.normal(size=(2, 6, 2))
    assert restored.predict(x, [1, 5], [0, 2], np.ones_like(x)).tobytes() == \
        model.predict(x, [1, 5], [0, 2], np.ones_like(x)).tobytes()


def test_magic_header(tmp_path, rng):
    save_checkpoint(tmp_path / "c.ckpt", Denoiser(CFG, rng=rng).params)
    assert (tmp_path / "c.ckpt").read_bytes().startswith(MAGIC)
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")

import numpy as np
import pytest

from mptrain import autodiff as ad
from mptrain.surrogates import (
    MLPConfig,
    MLPSurrogate,
    SpectralLayerConfig,
    FNOLiteSurrogate,
    build_surrogate,
    save_checkpoint,
    load_checkpoint,
    CheckpointError,
)

from helpers import finite_difference_grad, rel_err

NORM3 = {"mean": [0.0, 0.0, 20.0], "std": [8.0, 9.0, 8.5]}
NORM_FIELD = {"mean": [0.1], "std": [2.0]}


def small_mlp(seed=0):
    return MLPSurrogate(3, MLPConfig(width=8, depth=2), NORM3, seed=seed)


def small_fno(seed=0, n=8):
    return FNOLiteSurrogate(n, SpectralLayerConfig(modes=2, width=2, n_layers=1),
                            NORM_FIELD, seed=seed)


def test_mlp_identity_at_init():
    m = small_mlp()
    q = np.array([1.0, -2.0, 25.0])
    out = m.forward(ad.tensor(q))
    np.testing.assert_array_equal(out.data, q)


def test_mlp_forward_deterministic():
    m = small_mlp()
    m.params["w_out"].data[:] = 0.3
    q = ad.tensor([0.5, 1.5, 18.0])
    a = m.forward(q).data
    b = m.forward(q).data
    assert np.array_equal(a, b)


def test_mlp_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        small_mlp().forward(ad.tensor([1.0, 2.0]))


def param_grad_vs_fd(surrogate, q0, tol):
    """Check d(loss)/dparam against central differences for every parameter."""
    def loss_value():
        out = surrogate.forward(ad.tensor(q0))
        return ad.sq_norm(out * out + out)

    loss = loss_value()
    ad.backward(loss)
    for name, p in surrogate.params.items():
        orig = p.data.copy()

        def f(v):
            p.data[...] = v.reshape(p.data.shape)
            val = loss_value().item()
            p.data[...] = orig
            return val

        g_fd = finite_difference_grad(f, orig.copy().reshape(-1))
        g = np.zeros_like(orig) if p.grad is None else p.grad
        assert rel_err(g.reshape(-1), g_fd) < tol, name


def test_mlp_param_gradients_vs_fd():
    m = small_mlp(seed=3)
    rng = np.random.default_rng(0)
    for name in ("w_out", "b_out"):
        m.params[name].data[...] = rng.normal(size=m.params[name].shape) * 0.1
    param_grad_vs_fd(m, rng.normal(size=3) * 5, 1e-5)


def test_mlp_input_gradient_vs_fd():
    m = small_mlp(seed=4)
    m.params["w_out"].data[...] = 0.2
    q0 = np.array([0.3, -1.0, 21.0])
    q = ad.tensor(q0, requires_grad=True)
    ad.backward(ad.sq_norm(m.forward(q)))

    def f(v):
        return ad.sq_norm(m.forward(ad.tensor(v))).item()

    assert rel_err(q.grad, finite_difference_grad(f, q0.copy())) < 1e-5


def test_fno_identity_at_init():
    m = small_fno()
    rng = np.random.default_rng(1)
    q = rng.normal(size=(8, 8))
    out = m.forward(ad.tensor(q))
    np.testing.assert_array_equal(out.data, q)


def test_fno_shape_preserved():
    m = small_fno(seed=2)
    m.params["proj"].data[:] = 0.5
    out = m.forward(ad.tensor(np.random.default_rng(2).normal(size=(8, 8))))
    assert out.shape == (8, 8)


def test_fno_modes_config_error():
    with pytest.raises(ValueError, match="modes"):
        FNOLiteSurrogate(8, SpectralLayerConfig(modes=5, width=2, n_layers=1),
                         NORM_FIELD)


def test_fno_translation_equivariance():
    m = small_fno(seed=5)
    m.params["proj"].data[...] = np.random.default_rng(5).normal(size=(1, 2))
    rng = np.random.default_rng(6)
    q = rng.normal(size=(8, 8))
    out = m.forward(ad.tensor(q)).data
    shifted = np.roll(q, 1, axis=1)
    out_shifted = m.forward(ad.tensor(shifted)).data
    assert np.abs(np.roll(out, 1, axis=1) - out_shifted).max() < 1e-6


def test_fno_param_gradients_vs_fd():
    m = small_fno(seed=7)
    rng = np.random.default_rng(7)
    m.params["proj"].data[...] = rng.normal(size=(1, 2)) * 0.5
    param_grad_vs_fd(m, rng.normal(size=(8, 8)), 1e-4)


def test_init_determinism():
    a = small_fno(seed=9)
    b = small_fno(seed=9)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_fan_in_scaling():
    m = MLPSurrogate(256, MLPConfig(width=256, depth=2),
                     {"mean": [0.0] * 256, "std": [1.0] * 256}, seed=11)
    var = m.params["w1"].data.var()
    assert abs(var - 1.0 / 256) / (1.0 / 256) < 0.2


def test_checkpoint_roundtrip(tmp_path):
    m = small_mlp(seed=12)
    rng = np.random.default_rng(12)
    m.params["w_out"].data[...] = rng.normal(size=m.params["w_out"].shape)
    path = tmp_path / "ck.mpck"
    opt = {"m/w_out": np.ones_like(m.params["w_out"].data)}
    save_checkpoint(m, path, step=17, curriculum_state={"mu": 1e-4, "r": 2, "s": 2},
                    optimizer_state=opt)
    back, step, cur, opt_back = load_checkpoint(path)
    assert step == 17
    assert cur == {"mu": 1e-4, "r": 2, "s": 2}
    assert np.array_equal(opt_back["m/w_out"], opt["m/w_out"])
    for k in m.params:
        assert np.array_equal(back.params[k].data, m.params[k].data)
    q = np.array([0.4, -0.2, 19.0])
    np.testing.assert_array_equal(back.forward(ad.tensor(q)).data,
                                  m.forward(ad.tensor(q)).data)


def test_checkpoint_arch_mismatch(tmp_path):
    m = small_mlp()
    path = tmp_path / "ck.mpck"
    save_checkpoint(m, path)
    with pytest.raises(CheckpointError, match="architecture mismatch"):
        load_checkpoint(path, expect_arch="fno_lite")


def test_build_surrogate_unknown():
    with pytest.raises(ValueError, match="architecture"):
        build_surrogate("unet", {}, NORM3)

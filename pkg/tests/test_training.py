import numpy as np
import pytest

from mptrain import autodiff as ad
from mptrain.training import (
    LossConfig,
    MPConfig,
    DiscontinuityBank,
    CurriculumSchedule,
    OptimizerConfig,
    AdamState,
    adam_update,
    curriculum_step,
    loss_one_step,
    loss_multi_rollout,
    loss_mp,
    make_windows,
    train,
    NonFiniteLossError,
)
from mptrain.systems import SystemSpec, generate_dataset
from mptrain.surrogates import MLPSurrogate, MLPConfig

from helpers import (
    finite_difference_grad,
    mp_frozen_entries,
    mp_truncated_objective,
    rel_err,
)


class ScalarLinear:
    """Toy surrogate F(q) = theta * q for hand-computable losses."""

    arch_tag = "toy"

    def __init__(self, theta=1.0):
        self.params = {"theta": ad.tensor([theta], requires_grad=True)}
        self.state_shape = (1,)

    def forward(self, q):
        return self.params["theta"] * q


class TinyMLP:
    """3-parameter nonlinear toy surrogate on scalar states."""

    arch_tag = "toy3"

    def __init__(self, w=(0.9, 0.3, 0.1)):
        self.params = {
            "a": ad.tensor([w[0]], requires_grad=True),
            "b": ad.tensor([w[1]], requires_grad=True),
            "c": ad.tensor([w[2]], requires_grad=True),
        }
        self.state_shape = (1,)

    def forward(self, q):
        return self.params["a"] * q + self.params["b"] * ad.tanh(
            self.params["c"] * q)


def test_loss_one_step_identity_zero():
    m = ScalarLinear(theta=1.0)
    window = np.array([[2.0], [2.0]])
    assert loss_one_step(m, window).item() == 0.0


def test_loss_one_step_hand_value_and_gradient():
    m = ScalarLinear(theta=1.0)
    window = np.array([[2.0], [6.0]])
    loss = loss_one_step(m, window, LossConfig(norm="mse"))
    assert loss.item() == pytest.approx(16.0)
    ad.backward(loss)
    # dL/dtheta = 2 (theta q - 6) q = -16
    assert m.params["theta"].grad[0] == pytest.approx(-16.0)


def test_loss_one_step_window_too_short():
    with pytest.raises(ValueError, match="at least 2"):
        loss_one_step(ScalarLinear(), np.array([[1.0]]))


def test_loss_multi_rollout_perfect_model():
    m = ScalarLinear(theta=2.0)
    window = np.array([[1.0], [2.0], [4.0], [8.0]])
    cfg = LossConfig(mode="multi_rollout", n_rollouts=3, lambda_decay=0.7)
    assert loss_multi_rollout(m, window, cfg).item() == 0.0


def test_loss_multi_rollout_hand_value():
    # per-step squared errors 4 and 8, gamma = 0.5 -> 4 + 0.5*8 = 8
    m = ScalarLinear(theta=1.0)
    window = np.array([[1.0], [3.0], [1.0 + np.sqrt(8.0)]])
    cfg = LossConfig(mode="multi_rollout", n_rollouts=2, lambda_decay=0.5)
    assert loss_multi_rollout(m, window, cfg).item() == pytest.approx(8.0)


def test_loss_multi_rollout_window_too_short():
    cfg = LossConfig(mode="multi_rollout", n_rollouts=5)
    with pytest.raises(ValueError, match="needs 6 states"):
        loss_multi_rollout(ScalarLinear(), np.zeros((3, 1)), cfg)


def test_pushforward_same_value_different_gradient():
    m = TinyMLP()
    window = np.array([[0.8], [0.5], [0.3], [0.6]])
    full = LossConfig(mode="multi_rollout", n_rollouts=3, pushforward=False)
    push = LossConfig(mode="multi_rollout", n_rollouts=3, pushforward=True)
    l_full = loss_multi_rollout(m, window, full)
    l_push = loss_multi_rollout(m, window, push)
    assert l_full.item() == l_push.item()

    ad.backward(l_push)
    g_push = {k: p.grad.copy() for k, p in m.params.items()}
    ad.zero_grads(m.params.values())
    ad.backward(l_full)
    g_full = {k: p.grad.copy() for k, p in m.params.items()}
    assert any(abs(g_push[k][0] - g_full[k][0]) > 1e-10 for k in g_push)

    # pushforward gradient must match finite differences of the truncated
    # objective: each term sees gradient only through its final rollout, so
    # the oracle feeds every step its frozen (base-parameter) input
    frozen_inputs = [window[0]]
    pred = ad.tensor(window[0])
    for _ in range(2):
        pred = m.forward(pred)
        frozen_inputs.append(pred.data.copy())

    def truncated(params_by_name):
        total = 0.0
        for t in range(1, 4):
            out = m.forward(ad.tensor(frozen_inputs[t - 1]))
            total += ((out.data - window[t]) ** 2).sum() / window[t].size
        return total

    for name in m.params:
        orig = m.params[name].data.copy()

        def f(v, name=name, orig=orig):
            m.params[name].data[...] = v
            out = truncated(m.params)
            m.params[name].data[...] = orig
            return out

        g_fd = finite_difference_grad(f, orig.copy())
        assert rel_err(g_push[name], g_fd) < 1e-5, name


def test_loss_mp_perfect_model_zero():
    m = ScalarLinear(theta=2.0)
    window = np.array([[1.0], [2.0], [4.0], [8.0], [16.0]])
    bank = DiscontinuityBank()
    total, gt, pen = loss_mp(m, window, MPConfig(r=2, s=2, mu=0.1), bank, "w0")
    assert total.item() == 0.0 and gt.item() == 0.0 and pen.item() == 0.0


def test_loss_mp_hand_computed_example():
    # frozen identity model, truth (1, 2, 4), s=2, r=1, delta1 = 0.5, mu = 0.1
    m = ScalarLinear(theta=1.0)
    window = np.array([[1.0], [2.0], [4.0]])
    bank = DiscontinuityBank()
    bank.get("w0", 1, (1,)).data[0] = 0.5
    cfg = MPConfig(r=1, s=2, mu=0.1, penalty_norm="l2_sq")
    total, gt, pen = loss_mp(m, window, cfg, bank, "w0")
    assert gt.item() == pytest.approx(7.25)
    assert pen.item() == pytest.approx(0.25)
    assert total.item() == pytest.approx(7.275)

    ad.backward(total)
    # dL/ddelta1 = mu * 2 * 0.5 + 2 * (1.5 - 4) = 0.1 - 5 = -4.9
    assert bank.get("w0", 1, (1,)).grad[0] == pytest.approx(-4.9)


def test_loss_mp_gradients_vs_fd():
    # the oracle is the truncated objective: entry states frozen at their
    # detached values, exactly what the detach-at-junction backward computes
    rng = np.random.default_rng(0)
    m = TinyMLP(w=(1.1, -0.4, 0.7))
    window = rng.normal(size=(7, 1))
    bank = DiscontinuityBank()
    cfg = MPConfig(r=2, s=3, mu=0.01, penalty_norm="l2_sq")
    lcfg = LossConfig(mode="mp")
    for k in (1, 2):
        bank.get("w0", k, (1,)).data[0] = rng.normal() * 0.3

    ad.backward(loss_mp(m, window, cfg, bank, "w0", lcfg)[0])
    frozen = mp_frozen_entries(m, window, cfg, bank, "w0")
    deltas = [bank.get("w0", k, (1,)).data for k in (1, 2, 3)]

    for name, p in m.params.items():
        orig = p.data.copy()

        def f(v, p=p, orig=orig):
            p.data[...] = v
            out = mp_truncated_objective(m, window, cfg, lcfg, deltas, frozen)
            p.data[...] = orig
            return out

        g_fd = finite_difference_grad(f, orig.copy())
        assert rel_err(p.grad, g_fd) < 1e-5, name

    for k in (1, 2, 3):
        d = bank.get("w0", k, (1,))

        def f(v, k=k):
            ds = [x.copy() for x in deltas]
            ds[k - 1] = v
            return mp_truncated_objective(m, window, cfg, lcfg, ds, frozen)

        g_fd = finite_difference_grad(f, d.data.copy())
        g = d.grad if d.grad is not None else np.zeros_like(d.data)
        assert rel_err(g, g_fd) < 1e-5, f"delta_{k}"


def test_loss_mp_detachment_blocks_upstream_theta_gradient():
    # with the model frozen out of segment 1, a change upstream of the cut
    # must not alter the gradient of the segment-2 terms
    m = TinyMLP()
    window = np.random.default_rng(1).normal(size=(5, 1))
    bank = DiscontinuityBank()
    cfg = MPConfig(r=2, s=2, mu=1e-3)

    # finite-difference of segment-2-only objective wrt theta, holding the
    # segment-2 entry state fixed at its detached value
    total, gt, pen = loss_mp(m, window, cfg, bank, "w0")
    ad.backward(total)
    g_theta = {k: p.grad.copy() for k, p in m.params.items()}
    ad.zero_grads(m.params.values())

    def segment_objective(entry, trange):
        pred = ad.tensor(entry)
        out = None
        for t in trange:
            pred = m.forward(pred)
            term = ad.sq_norm(pred - ad.tensor(window[t])) / 1.0
            out = term if out is None else out + term
        return out

    # entry states per segment, computed with current params
    pred = ad.tensor(window[0])
    for t in (1, 2):
        pred = m.forward(pred)
    entry2 = pred.data.copy()

    for name in m.params:
        orig = m.params[name].data.copy()

        def f(v, name=name, orig=orig):
            m.params[name].data[...] = v
            val = (segment_objective(window[0], (1, 2)).item()
                   + segment_objective(entry2, (3, 4)).item())
            m.params[name].data[...] = orig
            return val

        g_fd = finite_difference_grad(f, orig.copy())
        assert rel_err(g_theta[name], g_fd) < 1e-5, name


def test_loss_mp_reduction_to_multi_rollout():
    m = TinyMLP(w=(1.05, 0.2, -0.3))
    window = np.random.default_rng(2).normal(size=(4, 1))
    bank = DiscontinuityBank()
    total, gt, pen = loss_mp(m, window, MPConfig(r=3, s=1, mu=0.5), bank, "w0")
    mr = loss_multi_rollout(m, window, LossConfig(mode="multi_rollout",
                                                  n_rollouts=3))
    assert gt.item() == mr.item()  # bit-identical evaluation order
    assert total.item() == gt.item()  # delta zero-initialized


def test_penalty_monotonicity():
    m = TinyMLP()
    window = np.random.default_rng(3).normal(size=(5, 1))
    bank = DiscontinuityBank()
    bank.get("w0", 1, (1,)).data[0] = 0.7
    t1, _, p1 = loss_mp(m, window, MPConfig(r=2, s=2, mu=0.1), bank, "w0")
    t2, _, p2 = loss_mp(m, window, MPConfig(r=2, s=2, mu=0.4), bank, "w0")
    assert t2.item() - t1.item() == pytest.approx(0.3 * p1.item())
    assert t2.item() >= t1.item()


def test_loss_mp_window_too_short():
    with pytest.raises(ValueError, match="needs 5 states"):
        loss_mp(ScalarLinear(), np.zeros((3, 1)), MPConfig(r=2, s=2, mu=0.1),
                DiscontinuityBank(), "w0")


def test_bank_lazy_zero_init():
    bank = DiscontinuityBank()
    d = bank.get("w3", 2, (4,))
    assert d.requires_grad and np.array_equal(d.data, np.zeros(4))
    assert bank.get("w3", 2, (4,)) is d
    assert len(bank) == 1


def test_curriculum_mu_growth():
    sched = CurriculumSchedule(mu_init=1e-5, mu_growth=10.0, mu_update_every=5)
    assert sched.config_at(10).mu == pytest.approx(1e-3)


def test_curriculum_entry_point():
    sched = CurriculumSchedule(r_schedule=[(20, 4)], s_schedule=[(30, 2)])
    cfg = sched.config_at(0)
    assert cfg.r == 1 and cfg.s == 1


def test_curriculum_mu_cap():
    sched = CurriculumSchedule(mu_init=1e-5, mu_growth=10.0, mu_update_every=1,
                               mu_max=1e-2)
    assert sched.config_at(1000).mu == pytest.approx(1e-2)


def test_curriculum_resets_bank_on_milestone():
    sched = CurriculumSchedule(r_schedule=[(5, 3)])
    bank = DiscontinuityBank()
    bank.get("w0", 1, (2,))
    prev = curriculum_step(sched, 4, bank)
    assert len(bank) == 1
    cfg = curriculum_step(sched, 5, bank, previous=prev)
    assert cfg.r == 3 and len(bank) == 0


def test_adam_zero_gradient_no_move():
    p = ad.tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamState(OptimizerConfig(clip=0.0))
    adam_update(opt, [("p", p)])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_magnitude():
    p = ad.tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    opt = AdamState(OptimizerConfig(lr=1e-3, clip=0.0))
    adam_update(opt, [("p", p)])
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_global_norm_clipping():
    p = ad.tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([6.0, 8.0])  # norm 10, clip 1 -> scaled by 0.1
    opt = AdamState(OptimizerConfig(lr=1.0, beta1=0.0, beta2=0.0, eps=0.0, clip=1.0))
    adam_update(opt, [("p", p)])
    # with beta = 0 the update is exactly -lr * sign of the clipped grad
    np.testing.assert_allclose(p.data, [-1.0, -1.0])
    assert opt.t["p"] == 1


def test_adam_nonfinite_grad_names_parameter():
    p = ad.tensor([0.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteLossError, match="parameter p"):
        adam_update(AdamState(OptimizerConfig()), [("p", p)])


def test_make_windows():
    trajs = np.zeros((2, 7, 3))
    ws = make_windows(trajs, 3)
    assert len(ws) == 4
    assert ws[0][0] == "0-0" and ws[3][0] == "1-1"


@pytest.fixture(scope="module")
def lorenz_ds():
    spec = SystemSpec(kind="lorenz63", integrator_dt=0.01,
                      subsample_factor=10, spinup_steps=500)
    return generate_dataset(spec, n_traj=4, n_steps=40, seed=3)


def make_surrogate(ds, seed=0):
    return MLPSurrogate(3, MLPConfig(width=16, depth=2), ds.normalization,
                        seed=seed)


def test_train_one_step_loss_decreases(lorenz_ds):
    m = make_surrogate(lorenz_ds)
    _, rows = train(lorenz_ds, m, LossConfig(mode="one_step"),
                    OptimizerConfig(lr=1e-3), seed=0, epochs=10)
    losses = [r["loss_total"] for r in rows]
    assert losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_determinism(lorenz_ds):
    rows = []
    for _ in range(2):
        m = make_surrogate(lorenz_ds, seed=5)
        _, r = train(lorenz_ds, m, LossConfig(mode="one_step"), seed=9,
                     epochs=3, deterministic_timing=True)
        rows.append(r)
    assert rows[0] == rows[1]


def test_train_mp_smoke_and_delta_annealing(lorenz_ds):
    m = make_surrogate(lorenz_ds, seed=1)
    sched = CurriculumSchedule(mu_init=1e-4, mu_growth=10.0, mu_update_every=4,
                               mu_max=1e5, r_schedule=[(0, 2)],
                               s_schedule=[(0, 2)])
    _, rows = train(lorenz_ds, m, LossConfig(mode="mp"),
                    OptimizerConfig(lr=3e-3), mp_schedule=sched,
                    seed=2, epochs=40)
    delta_norms = [r["mean_delta_norm"] for r in rows]
    assert delta_norms[1] > 0  # deltas move away from zero early
    assert delta_norms[-1] < 0.5 * max(delta_norms)  # annealing pulls them back
    # monotone decrease across the annealing tail
    tail = delta_norms[-5:]
    assert all(b < a for a, b in zip(tail, tail[1:]))
    assert rows[-1]["mu"] == pytest.approx(1e5)

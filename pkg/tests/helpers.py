"""Shared test utilities: central finite-difference gradient oracle."""

import numpy as np

from mptrain import autodiff as ad


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f wrt flat numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(f, x):
    """Gradient of scalar graph-building f wrt a fresh leaf tensor at x."""
    t = ad.tensor(np.array(x, dtype=np.float64), requires_grad=True)
    loss = f(t)
    ad.backward(loss)
    return t.grad.copy()


def mp_frozen_entries(surrogate, window, mp_cfg, bank, window_id):
    """Detached segment-end predictions from a base forward pass.

    Returns {k: prediction value at the end of segment k} for k = 1..s-1,
    before the discontinuity is added.
    """
    frozen = {}
    pred = ad.tensor(np.asarray(window)[0])
    for k in range(1, mp_cfg.s + 1):
        for _ in range(mp_cfg.r):
            pred = surrogate.forward(pred)
        if k < mp_cfg.s:
            frozen[k] = pred.data.copy()
            pred = ad.tensor(frozen[k] + bank.get(window_id, k,
                                                  pred.data.shape).data)
    return frozen


def mp_truncated_objective(surrogate, window, mp_cfg, loss_cfg, deltas, frozen):
    """MP objective with segment entry states held at their frozen values.

    This is the function whose exact gradient the detach-at-junction backward
    pass computes: parameter perturbations do not propagate across segment
    boundaries, and a perturbation of delta_k only affects segment k+1 and
    the penalty.  `deltas` is a list [delta_1 .. delta_s] of numpy arrays.
    """
    window = np.asarray(window)
    total = 0.0
    for k in range(1, mp_cfg.s + 1):
        entry = window[0] if k == 1 else frozen[k - 1] + deltas[k - 2]
        pred = ad.tensor(entry)
        for j in range(mp_cfg.r):
            t = (k - 1) * mp_cfg.r + j + 1
            pred = surrogate.forward(pred)
            diff = pred.data - window[t]
            err = (diff ** 2).sum()
            if loss_cfg.norm == "mse":
                err /= diff.size
            total += loss_cfg.lambda_decay ** (t - 1) * err
    penalty = 0.0
    for d in deltas:
        if mp_cfg.penalty_norm == "l2_sq":
            penalty += (d ** 2).sum()
        elif mp_cfg.penalty_norm == "l2":
            penalty += np.sqrt((d ** 2).sum())
        else:
            penalty += np.abs(d).sum()
    return total + mp_cfg.mu * penalty


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom

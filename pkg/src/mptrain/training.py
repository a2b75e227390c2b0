"""Loss construction and optimization.

Three training regimes over ground-truth windows:
  one_step       -- mismatch after a single surrogate application
  multi_rollout  -- weighted mismatch over n autoregressive steps, with an
                    optional pushforward variant that detaches the graph
                    between intermediate rollouts
  mp             -- segmented rollouts with learnable discontinuities at the
                    segment junctions and a penalty on their magnitude

The multi-step penalty total is L_GT + mu * L_P, where L_GT accumulates the
per-step mismatch across all s segments of r rollouts and L_P sums the
discontinuity norms.  The graph is detached at every junction, so parameter
gradients never cross segment boundaries; the discontinuities receive
gradient both from downstream mismatch terms and from the penalty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .surrogates import save_checkpoint


class NonFiniteLossError(RuntimeError):
    def __init__(self, context):
        super().__init__(f"non-finite loss ({context})")
        self.context = context


@dataclass
class LossConfig:
    mode: str = "one_step"  # one_step | multi_rollout | mp
    n_rollouts: int = 1
    lambda_decay: float = 1.0  # lam(t) = lambda_decay ** (t - 1)
    pushforward: bool = False
    norm: str = "mse"  # mse | sum_sq

    def __post_init__(self):
        if self.mode not in ("one_step", "multi_rollout", "mp"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        if not (0.0 < self.lambda_decay <= 1.0):
            raise ValueError("lambda_decay must lie in (0, 1]")
        if self.norm not in ("mse", "sum_sq"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass
class MPConfig:
    r: int = 1  # rollouts per segment
    s: int = 1  # number of splits
    mu: float = 1e-5
    penalty_norm: str = "l2_sq"  # l2_sq | l2 | l1

    def __post_init__(self):
        if self.r < 1 or self.s < 1:
            raise ValueError("r and s must be >= 1")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.penalty_norm not in ("l2_sq", "l2", "l1"):
            raise ValueError(f"unknown penalty norm {self.penalty_norm!r}")

    @property
    def window_steps(self):
        return self.s * self.r


def _state_norm(diff, kind):
    if kind == "mse":
        return ad.sq_norm(diff) / float(diff.size)
    return ad.sq_norm(diff)


def _penalty_norm(delta, kind):
    if kind == "l2_sq":
        return ad.sq_norm(delta)
    if kind == "l2":
        return ad.power(ad.sq_norm(delta), 0.5)
    return ad.reduce_sum(ad.absval(delta))


class DiscontinuityBank:
    """Learnable discontinuities keyed by (window_id, split index).

    Entries are created lazily on first touch, zero-initialized, state-shaped.
    """

    def __init__(self):
        self._entries = {}

    def get(self, window_id, k, state_shape):
        key = (window_id, k)
        if key not in self._entries:
            self._entries[key] = ad.tensor(np.zeros(state_shape),
                                           requires_grad=True)
        return self._entries[key]

    def items(self):
        return list(self._entries.items())

    def __len__(self):
        return len(self._entries)

    def reset(self):
        self._entries.clear()

    def mean_norm(self):
        if not self._entries:
            return 0.0
        return float(np.mean([np.linalg.norm(t.data)
                              for t in self._entries.values()]))

    def state_dict(self):
        return {f"{wid}/{k}": t.data for (wid, k), t in self._entries.items()}

    def load_state_dict(self, d):
        self._entries.clear()
        for key, arr in d.items():
            wid, k = key.rsplit("/", 1)
            self._entries[(wid, int(k))] = ad.tensor(arr, requires_grad=True)


def _rollout_terms(surrogate, pred, truths, cfg, t_offset=0, total=None):
    """Roll len(truths) steps, accumulating lam(t)-weighted mismatch.

    `t_offset` is the number of global steps already taken (lambda weighting
    uses the global step index).  Returns (total, final prediction).
    """
    for j, target in enumerate(truths):
        t = t_offset + j + 1
        if cfg.pushforward and t > 1:
            pred = ad.detach(pred)
        pred = surrogate.forward(pred)
        term = _state_norm(pred - ad.tensor(target), cfg.norm)
        lam = cfg.lambda_decay ** (t - 1)
        term = term * lam
        total = term if total is None else total + term
    return total, pred


def loss_one_step(surrogate, window, cfg=None):
    """Mismatch between one surrogate step and the next ground-truth state."""
    cfg = cfg or LossConfig()
    window = np.asarray(window)
    if window.shape[0] < 2:
        raise ValueError("one-step loss needs a window of at least 2 states")
    pred = surrogate.forward(ad.tensor(window[0]))
    return _state_norm(pred - ad.tensor(window[1]), cfg.norm)


def loss_multi_rollout(surrogate, window, cfg):
    """Weighted mismatch over cfg.n_rollouts autoregressive steps."""
    window = np.asarray(window)
    n = cfg.n_rollouts
    if window.shape[0] < n + 1:
        raise ValueError(
            f"multi-rollout loss with n={n} needs {n + 1} states, "
            f"window has {window.shape[0]}")
    total, _ = _rollout_terms(surrogate, ad.tensor(window[0]), window[1:n + 1], cfg)
    return total


def loss_mp(surrogate, window, mp_cfg, bank, window_id, loss_cfg=None):
    """Multi-step penalty loss; returns (L_total, L_GT, L_P)."""
    loss_cfg = loss_cfg or LossConfig(mode="mp")
    window = np.asarray(window)
    steps = mp_cfg.window_steps
    if window.shape[0] < steps + 1:
        raise ValueError(
            f"mp loss with s={mp_cfg.s}, r={mp_cfg.r} needs {steps + 1} states, "
            f"window has {window.shape[0]}")
    state_shape = window.shape[1:]
    pred = ad.tensor(window[0])
    l_gt = None
    for k in range(1, mp_cfg.s + 1):
        t0 = (k - 1) * mp_cfg.r
        truths = window[t0 + 1:t0 + mp_cfg.r + 1]
        l_gt, pred = _rollout_terms(surrogate, pred, truths, loss_cfg,
                                    t_offset=t0, total=l_gt)
        if k < mp_cfg.s:
            pred = ad.detach(pred) + bank.get(window_id, k, state_shape)
    l_p = None
    for k in range(1, mp_cfg.s + 1):
        term = _penalty_norm(bank.get(window_id, k, state_shape),
                             mp_cfg.penalty_norm)
        l_p = term if l_p is None else l_p + term
    l_total = l_gt + l_p * mp_cfg.mu
    for name, value in (("L_GT", l_gt), ("L_P", l_p), ("L_total", l_total)):
        if not np.isfinite(value.data):
            raise NonFiniteLossError(f"{name} for window {window_id}")
    return l_total, l_gt, l_p


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

def _milestone_value(milestones, epoch, default):
    value = default
    for ep, v in milestones:
        if epoch >= ep:
            value = v
    return value


@dataclass
class CurriculumSchedule:
    """Evolving (mu, r, s) configuration over training epochs."""

    mu_init: float = 1e-5
    mu_growth: float = 10.0
    mu_update_every: int = 5
    mu_max: float = 1.0
    r_schedule: list = field(default_factory=list)  # [(epoch, r), ...]
    s_schedule: list = field(default_factory=list)
    penalty_norm: str = "l2_sq"

    def __post_init__(self):
        if self.mu_init <= 0:
            raise ValueError("mu_init must be positive")
        if self.mu_growth <= 1:
            raise ValueError("mu_growth must exceed 1")
        for sched in (self.r_schedule, self.s_schedule):
            epochs = [ep for ep, _ in sched]
            if epochs != sorted(set(epochs)):
                raise ValueError("milestone epochs must be strictly increasing")

    def config_at(self, epoch):
        k = epoch // self.mu_update_every
        # cap the exponent before exponentiating to avoid overflow
        k_cap = int(np.ceil(np.log(self.mu_max / self.mu_init)
                            / np.log(self.mu_growth)))
        mu = self.mu_max if k >= k_cap else min(
            self.mu_init * self.mu_growth ** k, self.mu_max)
        r = _milestone_value(self.r_schedule, epoch, 1)
        s = _milestone_value(self.s_schedule, epoch, 1)
        return MPConfig(r=r, s=s, mu=mu, penalty_norm=self.penalty_norm)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["r_schedule"] = [tuple(x) for x in d.get("r_schedule", [])]
        d["s_schedule"] = [tuple(x) for x in d.get("s_schedule", [])]
        return cls(**d)


def curriculum_step(schedule, epoch, bank, previous=None):
    """Config for `epoch`; resets the bank when segmentation changed."""
    cfg = schedule.config_at(epoch)
    if previous is not None and (cfg.r != previous.r or cfg.s != previous.s):
        bank.reset()
    return cfg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0  # global-norm gradient clip; <= 0 disables


class AdamState:
    """Per-parameter first/second moments with lazy creation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = {}

    def drop_prefix(self, prefix):
        for d in (self.m, self.v, self.t):
            for k in [k for k in d if k.startswith(prefix)]:
                del d[k]

    def state_dict(self):
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array([self.t[name]], dtype=np.float64)
        return out

    def load_state_dict(self, d):
        for key, arr in d.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = arr.copy()
            elif kind == "v":
                self.v[name] = arr.copy()
            elif kind == "t":
                self.t[name] = int(arr[0])


def global_grad_norm(named_params):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return np.sqrt(total)


def adam_update(opt, named_params):
    """One Adam step over (name, tensor) pairs with populated grads."""
    cfg = opt.cfg
    live = [(n, p) for n, p in named_params if p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteLossError(f"non-finite gradient for parameter {name}")
    scale = 1.0
    if cfg.clip > 0:
        gnorm = global_grad_norm(live)
        if gnorm > cfg.clip:
            scale = cfg.clip / gnorm
    for name, p in live:
        g = p.grad * scale
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
            opt.t[name] = 0
        opt.t[name] += 1
        t = opt.t[name]
        opt.m[name] = cfg.beta1 * opt.m[name] + (1 - cfg.beta1) * g
        opt.v[name] = cfg.beta2 * opt.v[name] + (1 - cfg.beta2) * g * g
        m_hat = opt.m[name] / (1 - cfg.beta1 ** t)
        v_hat = opt.v[name] / (1 - cfg.beta2 ** t)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteLossError(f"non-finite value for parameter {name}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ["epoch", "mode", "n_or_sr", "mu", "r", "s", "loss_total",
               "loss_gt", "loss_p", "mean_delta_norm", "grad_norm", "lr",
               "seconds"]


def make_windows(trajectories, length):
    """All maximal non-overlapping chunks of `length` states per trajectory."""
    windows = []
    for ti, traj in enumerate(trajectories):
        for ci in range(traj.shape[0] // length):
            windows.append((f"{ti}-{ci}", traj[ci * length:(ci + 1) * length]))
    return windows


def train(dataset, surrogate, loss_cfg, opt_cfg=None, mp_schedule=None,
          seed=0, epochs=10, bank=None, opt=None, start_epoch=0,
          checkpoint_path=None, log_rows=None, deterministic_timing=False,
          on_epoch_end=None):
    """Optimize the surrogate on the dataset's training split.

    Returns (surrogate, log_rows).  `bank`, `opt`, `start_epoch` and
    `log_rows` allow exact resumption from a checkpoint.
    """
    opt_cfg = opt_cfg or OptimizerConfig()
    opt = opt or AdamState(opt_cfg)
    bank = bank if bank is not None else DiscontinuityBank()
    log_rows = log_rows if log_rows is not None else []
    trajs = dataset.trajectories("train")
    if trajs.shape[0] == 0:
        raise ValueError("dataset has no training trajectories")
    mp_cfg = None
    if loss_cfg.mode == "mp":
        mp_schedule = mp_schedule or CurriculumSchedule()
        mp_cfg = mp_schedule.config_at(start_epoch - 1) if start_epoch else None

    theta = list(surrogate.params.items())

    for epoch in range(start_epoch, epochs):
        t_start = time.perf_counter()
        if loss_cfg.mode == "mp":
            new_cfg = curriculum_step(mp_schedule, epoch, bank, previous=mp_cfg)
            if mp_cfg is not None and (new_cfg.r != mp_cfg.r or new_cfg.s != mp_cfg.s):
                opt.drop_prefix("delta/")
            mp_cfg = new_cfg
            window_len = mp_cfg.window_steps + 1
        elif loss_cfg.mode == "multi_rollout":
            window_len = loss_cfg.n_rollouts + 1
        else:
            window_len = 2
        windows = make_windows(trajs, window_len)
        if not windows:
            raise ValueError(
                f"training trajectories too short for windows of {window_len} states")
        order = np.random.default_rng([seed, epoch]).permutation(len(windows))

        sum_total = sum_gt = sum_p = sum_gnorm = 0.0
        for wi in order:
            window_id, window = windows[wi]
            if loss_cfg.mode == "mp":
                l_total, l_gt, l_p = loss_mp(surrogate, window, mp_cfg, bank,
                                             window_id, loss_cfg)
                touched = [(f"delta/{window_id}/{k}",
                            bank.get(window_id, k, window.shape[1:]))
                           for k in range(1, mp_cfg.s + 1)]
            else:
                if loss_cfg.mode == "one_step":
                    l_total = loss_one_step(surrogate, window, loss_cfg)
                else:
                    l_total = loss_multi_rollout(surrogate, window, loss_cfg)
                l_gt, l_p = l_total, None
                touched = []
            if not np.isfinite(l_total.data):
                raise NonFiniteLossError(f"epoch {epoch}, window {window_id}")
            ad.backward(l_total)
            named = theta + touched
            sum_gnorm += global_grad_norm(named)
            adam_update(opt, named)
            ad.zero_grads([p for _, p in named])
            sum_total += l_total.item()
            sum_gt += l_gt.item()
            sum_p += l_p.item() if l_p is not None else 0.0

        n_w = len(windows)
        seconds = 0.0 if deterministic_timing else time.perf_counter() - t_start
        row = {
            "epoch": epoch,
            "mode": loss_cfg.mode,
            "n_or_sr": (mp_cfg.window_steps if mp_cfg else loss_cfg.n_rollouts
                        if loss_cfg.mode == "multi_rollout" else 1),
            "mu": mp_cfg.mu if mp_cfg else 0.0,
            "r": mp_cfg.r if mp_cfg else 0,
            "s": mp_cfg.s if mp_cfg else 0,
            "loss_total": sum_total / n_w,
            "loss_gt": sum_gt / n_w,
            "loss_p": sum_p / n_w,
            "mean_delta_norm": bank.mean_norm(),
            "grad_norm": sum_gnorm / n_w,
            "lr": opt_cfg.lr,
            "seconds": seconds,
        }
        log_rows.append(row)
        if checkpoint_path is not None:
            state = opt.state_dict()
            for key, arr in bank.state_dict().items():
                state[f"bank/{key}"] = arr
            save_checkpoint(
                surrogate, checkpoint_path, step=epoch + 1,
                curriculum_state={
                    "epoch": epoch + 1,
                    "schedule": mp_schedule.to_dict() if mp_schedule else None,
                },
                optimizer_state=state)
        if on_epoch_end is not None:
            on_epoch_end(epoch, row)
    return surrogate, log_rows


def write_log_csv(path, rows):
    with open(path, "w") as f:
        f.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)

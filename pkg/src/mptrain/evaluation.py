"""Inference-time rollout and forecast diagnostics.

Rollouts are plain autoregressive compositions of the surrogate (no
discontinuities, no gradients).  Diagnostics: per-step RMSE, the persistence
baseline, correlation with the reference trajectory, angle-averaged kinetic
energy spectra, and valid-prediction-time summaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class RolloutResult:
    predicted: np.ndarray  # [T, state_dims...]
    truth: np.ndarray      # [T, state_dims...]
    dt_effective: float
    blow_up_step: int | None = None


@dataclass
class MetricCurve:
    name: str
    values: np.ndarray
    dt_effective: float
    units: str = ""

    @property
    def times(self):
        return np.arange(len(self.values)) * self.dt_effective


def rollout(surrogate, q0, steps, truth=None, dt_effective=1.0,
            stability_bound=None):
    """Autoregressive rollout of `steps` states, the initial state included.

    Truncates at the first non-finite or bound-exceeding state, recording
    `blow_up_step`.  Blow-up is data, not an error.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    preds = np.empty((steps,) + q0.shape)
    blow_up = None
    state = q0
    for t in range(steps):
        if t > 0:
            state = np.asarray(surrogate.forward(ad.tensor(state)).data)
        bad = not np.all(np.isfinite(state))
        if not bad and stability_bound is not None:
            bad = np.abs(state).max() > stability_bound
        if bad:
            blow_up = t
            preds = preds[:t]
            break
        preds[t] = state
    if truth is None:
        truth_arr = np.empty((0,) + q0.shape)
    else:
        truth_arr = np.asarray(truth)[:len(preds)]
    return RolloutResult(predicted=preds, truth=truth_arr,
                         dt_effective=dt_effective, blow_up_step=blow_up)


def rmse_curve(result):
    """Per-step root-mean-square error over state elements."""
    diff = result.predicted - result.truth
    flat = diff.reshape(diff.shape[0], -1)
    values = np.sqrt((flat ** 2).mean(axis=1)) if flat.shape[0] else np.empty(0)
    return MetricCurve("rmse", values, result.dt_effective)


def persistence_baseline(q0, truth, dt_effective=1.0):
    """RMSE of the frozen initial condition against truth at every step."""
    truth = np.asarray(truth)
    diff = truth - np.asarray(q0)
    flat = diff.reshape(truth.shape[0], -1)
    values = np.sqrt((flat ** 2).mean(axis=1))
    return MetricCurve("persistence_rmse", values, dt_effective)


def correlation_curve(result, climatology=None):
    """Per-step Pearson correlation of flattened anomaly fields.

    Anomalies are taken about `climatology` (training-split mean state);
    when omitted, the time mean of the truth trajectory is used.  Zero
    variance yields NaN, never an exception.
    """
    truth = result.truth
    pred = result.predicted
    if climatology is None:
        climatology = truth.mean(axis=0) if truth.shape[0] else 0.0
    values = np.empty(pred.shape[0])
    for t in range(pred.shape[0]):
        a = (pred[t] - climatology).reshape(-1)
        b = (truth[t] - climatology).reshape(-1)
        sa, sb = a.std(), b.std()
        if sa == 0.0 or sb == 0.0:
            values[t] = np.nan
            continue
        values[t] = ((a - a.mean()) * (b - b.mean())).mean() / (sa * sb)
    return MetricCurve("correlation", values, result.dt_effective)


def energy_spectrum(velocity, dt_effective=1.0):
    """Angle-averaged kinetic energy spectrum of a [2, N, N] velocity field.

    Spectral energies 0.5*(|u_hat|^2 + |v_hat|^2) (unitary FFT) are summed
    into unit-width annuli centered on integer wavenumbers.
    """
    velocity = np.asarray(velocity)
    if velocity.ndim != 3 or velocity.shape[0] != 2 or \
            velocity.shape[1] != velocity.shape[2]:
        raise ValueError(f"expected [2, N, N] velocity field, got {velocity.shape}")
    n = velocity.shape[1]
    u_hat = np.fft.fft2(velocity[0], norm="ortho")
    v_hat = np.fft.fft2(velocity[1], norm="ortho")
    e_density = 0.5 * (np.abs(u_hat) ** 2 + np.abs(v_hat) ** 2)
    k = np.fft.fftfreq(n, d=1.0 / n)
    k_mag = np.sqrt(k[None, :] ** 2 + k[:, None] ** 2)
    k_bins = np.rint(k_mag).astype(int)
    n_bins = k_bins.max() + 1
    spectrum = np.bincount(k_bins.reshape(-1), weights=e_density.reshape(-1),
                           minlength=n_bins)
    return MetricCurve("energy_spectrum", spectrum, dt_effective,
                       units="energy per wavenumber")


def valid_prediction_time(corr, threshold=0.8):
    """First time the correlation drops below the threshold.

    Returns the full horizon when the curve never crosses (NaN counts as
    crossed: correlation is undefined there).
    """
    values = corr.values
    below = ~(values >= threshold)  # NaN -> True
    idx = np.argmax(below) if below.any() else len(values)
    return idx * corr.dt_effective


def _spectrum_rel_err(pred_field, true_field, band, velocity_fn):
    e_pred = energy_spectrum(velocity_fn(pred_field)).values
    e_true = energy_spectrum(velocity_fn(true_field)).values
    lo, hi = band
    hi = min(hi, len(e_true) - 1)
    ks = np.arange(lo, hi + 1)
    return float(np.mean(np.abs(e_pred[ks] - e_true[ks]) /
                         np.maximum(e_true[ks], 1e-300)))


def compare_runs(runs, threshold=0.8, spectrum_band=None, velocity_fn=None,
                 climatology=None):
    """Side-by-side summary of labeled rollouts plus a persistence baseline.

    `runs` is a list of (label, RolloutResult) sharing one reference
    trajectory.  Returns (rows, curves): one summary row per label and the
    per-label metric curves.  Mismatched horizons truncate to the shortest.
    """
    if not runs:
        raise ValueError("no runs to compare")
    horizon = min(r.predicted.shape[0] for _, r in runs)
    if any(r.predicted.shape[0] != horizon for _, r in runs):
        warnings.warn("mismatched rollout horizons; truncating to "
                      f"{horizon} steps", stacklevel=2)
    rows, curves = [], {}
    base = runs[0][1]
    for label, r in runs:
        clipped = RolloutResult(r.predicted[:horizon], r.truth[:horizon],
                                r.dt_effective, r.blow_up_step)
        rmse = rmse_curve(clipped)
        corr = correlation_curve(clipped, climatology)
        vpt = valid_prediction_time(corr, threshold)
        row = {
            "label": label,
            "vpt": vpt,
            "final_rmse": float(rmse.values[-1]) if len(rmse.values) else np.nan,
            "blow_up_step": -1 if r.blow_up_step is None else r.blow_up_step,
        }
        if spectrum_band is not None and velocity_fn is not None:
            row["spectrum_rel_err"] = _spectrum_rel_err(
                clipped.predicted[-1], clipped.truth[-1], spectrum_band,
                velocity_fn)
        rows.append(row)
        curves[label] = {"rmse": rmse, "correlation": corr}
    # persistence always rides along as a labeled baseline
    pers = persistence_baseline(base.truth[0], base.truth[:horizon],
                                base.dt_effective)
    rows.append({
        "label": "persistence",
        "vpt": np.nan,
        "final_rmse": float(pers.values[-1]) if len(pers.values) else np.nan,
        "blow_up_step": -1,
    })
    curves["persistence"] = {"rmse": pers}
    return rows, curves


def write_curve_csv(path, curve):
    with open(path, "w") as f:
        f.write("t_index,time,value\n")
        for i, v in enumerate(curve.values):
            f.write(f"{i},{i * curve.dt_effective:.17g},{v:.17g}\n")


def write_comparison_csv(path, rows):
    cols = sorted({k for row in rows for k in row}, key=lambda c: c != "label")
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            out = []
            for c in cols:
                v = row.get(c, "")
                out.append(f"{v:.17g}" if isinstance(v, float) else str(v))
            f.write(",".join(out) + "\n")

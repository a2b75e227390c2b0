"""Trajectory dataset generation and bit-exact binary persistence.

File layout: magic "MPDS", u16 version, u32 header length, UTF-8 JSON header
(spec, shapes, dtype, normalization, splits, seed), raw little-endian
C-contiguous payload, CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .specs import SystemSpec
from .lorenz import lorenz63_rhs, rk4_step, IntegrationBlowupError
from .kolmogorov import KolmogorovSolver

MAGIC = b"MPDS"
VERSION = 1


class DatasetIOError(Exception):
    pass


class DatasetFormatError(DatasetIOError):
    pass


class DatasetVersionError(DatasetIOError):
    pass


class DatasetChecksumError(DatasetIOError):
    pass


class GenerationBlowupError(RuntimeError):
    def __init__(self, traj_index, cause):
        super().__init__(f"trajectory {traj_index} blew up: {cause}")
        self.traj_index = traj_index


@dataclass
class TrajectoryDataset:
    states: np.ndarray  # [n_traj, n_steps, *state_dims]
    dt_effective: float
    spec: SystemSpec
    normalization: dict  # {"mean": [per-channel], "std": [per-channel]}
    splits: list  # per-trajectory tag: train | val | test
    seed: int

    @property
    def n_traj(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.states.shape[1]

    @property
    def state_shape(self):
        return self.states.shape[2:]

    def trajectories(self, split):
        idx = [i for i, tag in enumerate(self.splits) if tag == split]
        return self.states[idx]

    def normalize(self, x):
        mean, std = self._stats_arrays()
        return (x - mean) / std

    def denormalize(self, x):
        mean, std = self._stats_arrays()
        return x * std + mean

    def _stats_arrays(self):
        mean = np.asarray(self.normalization["mean"])
        std = np.asarray(self.normalization["std"])
        if self.spec.kind == "lorenz63":
            return mean, std  # broadcasts over the trailing component axis
        return float(mean[0]), float(std[0])


def _assign_splits(n_traj):
    """80/10/10 by trajectory; tiny datasets stay all-train."""
    if n_traj < 3:
        return ["train"] * n_traj
    n_test = max(1, int(round(0.1 * n_traj)))
    n_val = max(1, int(round(0.1 * n_traj)))
    n_train = n_traj - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def _channel_stats(train_states, kind):
    if kind == "lorenz63":
        flat = train_states.reshape(-1, train_states.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
    else:
        mean = np.array([train_states.mean()])
        std = np.array([train_states.std()])
    std = np.where(std < 1e-12, 1.0, std)
    return {"mean": mean.tolist(), "std": std.tolist()}


def _generate_lorenz_traj(spec, n_steps, rng, traj_index):
    params = spec.parameters
    state = rng.uniform(-1.0, 1.0, size=3) + np.array([1.0, 1.0, 20.0])
    rhs = lambda s: lorenz63_rhs(s, params)
    try:
        for i in range(spec.spinup_steps):
            state = rk4_step(rhs, state, spec.integrator_dt, i)
        out = np.empty((n_steps, 3))
        out[0] = state
        for t in range(1, n_steps):
            for j in range(spec.subsample_factor):
                state = rk4_step(rhs, state, spec.integrator_dt, t)
            out[t] = state
    except IntegrationBlowupError as e:
        raise GenerationBlowupError(traj_index, e) from e
    return out


def _generate_kolmogorov_traj(spec, n_steps, rng, traj_index):
    p = spec.parameters
    solver = KolmogorovSolver(n=int(p["n"]), re=p["re"], k_f=p["k_f"])
    w_hat = solver.random_initial_vorticity(rng)
    try:
        for i in range(spec.spinup_steps):
            w_hat = solver.step(w_hat, spec.integrator_dt, i)
        out = np.empty((n_steps, solver.n, solver.n))
        out[0] = np.fft.ifft2(w_hat).real
        for t in range(1, n_steps):
            for j in range(spec.subsample_factor):
                w_hat = solver.step(w_hat, spec.integrator_dt, t)
            out[t] = np.fft.ifft2(w_hat).real
    except IntegrationBlowupError as e:
        raise GenerationBlowupError(traj_index, e) from e
    return out


def generate_dataset(spec, n_traj, n_steps, seed):
    """Integrate `n_traj` independent trajectories; deterministic in seed."""
    trajs = []
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        if spec.kind == "lorenz63":
            trajs.append(_generate_lorenz_traj(spec, n_steps, rng, i))
        else:
            trajs.append(_generate_kolmogorov_traj(spec, n_steps, rng, i))
    states = np.stack(trajs)
    splits = _assign_splits(n_traj)
    train = states[[i for i, s in enumerate(splits) if s == "train"]]
    normalization = _channel_stats(train, spec.kind)
    return TrajectoryDataset(
        states=states,
        dt_effective=spec.dt_effective,
        spec=spec,
        normalization=normalization,
        splits=splits,
        seed=seed,
    )


def save_dataset(ds, path):
    payload = np.ascontiguousarray(ds.states, dtype="<f8").tobytes()
    header = {
        "spec": ds.spec.to_dict(),
        "shapes": list(ds.states.shape),
        "dtype": "<f8",
        "dt_effective": ds.dt_effective,
        "normalization": ds.normalization,
        "splits": ds.splits,
        "seed": ds.seed,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10:
        raise DatasetFormatError("file too short for header")
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VERSION:
        raise DatasetVersionError(f"unsupported version {version}")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen + 4:
        raise DatasetFormatError("truncated file")
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    shape = tuple(header["shapes"])
    n_bytes = int(np.prod(shape)) * 8
    start = 10 + hlen
    if len(blob) < start + n_bytes + 4:
        raise DatasetFormatError(
            f"payload shorter than header-declared shape {shape}")
    payload = blob[start:start + n_bytes]
    (crc,) = struct.unpack("<I", blob[start + n_bytes:start + n_bytes + 4])
    if zlib.crc32(payload) != crc:
        raise DatasetChecksumError("payload CRC mismatch")
    states = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return TrajectoryDataset(
        states=states,
        dt_effective=header["dt_effective"],
        spec=SystemSpec.from_dict(header["spec"]),
        normalization=header["normalization"],
        splits=list(header["splits"]),
        seed=int(header["seed"]),
    )

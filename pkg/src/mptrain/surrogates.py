"""Parameterized one-step surrogates: a fully-connected map for
low-dimensional states and a spectral-operator map for gridded fields.

Both are residual (output = input + correction) with a zero-initialized
head, so a freshly initialized surrogate is exactly the identity.  Inputs
are normalized by dataset statistics inside forward and the correction is
denormalized back to physical units.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class MLPConfig:
    width: int = 128
    depth: int = 3
    activation: str = "tanh"


@dataclass
class SpectralLayerConfig:
    modes: int = 12
    width: int = 16
    n_layers: int = 4
    activation: str = "gelu"

    def validate(self, n):
        if self.modes < 1 or self.width < 1:
            raise ValueError("modes and width must be >= 1")
        if self.modes > n // 2:
            raise ValueError(f"modes_kept {self.modes} exceeds N/2 = {n // 2}")


def _norm_arrays(normalization):
    mean = np.asarray(normalization["mean"], dtype=np.float64)
    std = np.asarray(normalization["std"], dtype=np.float64)
    return mean, std


class MLPSurrogate:
    """Residual fully-connected surrogate for vector states."""

    arch_tag = "mlp"

    def __init__(self, state_dim, config, normalization, seed=0, params=None):
        self.state_dim = int(state_dim)
        self.config = config
        self.normalization = normalization
        self.mean, self.std = _norm_arrays(normalization)
        self.state_shape = (self.state_dim,)
        self.params = params if params is not None else self._init_params(seed)
        self._act = ad.ELEMENTWISE_UNARY[config.activation]

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        widths = [self.state_dim] + [self.config.width] * self.config.depth
        params = {}
        for i in range(self.config.depth):
            fan_in = widths[i]
            params[f"w{i}"] = ad.tensor(
                rng.normal(size=(widths[i + 1], fan_in)) / np.sqrt(fan_in),
                requires_grad=True)
            params[f"b{i}"] = ad.tensor(np.zeros((widths[i + 1], 1)),
                                        requires_grad=True)
        # zero-initialized head: identity map at init
        params["w_out"] = ad.tensor(np.zeros((self.state_dim, self.config.width)),
                                    requires_grad=True)
        params["b_out"] = ad.tensor(np.zeros((self.state_dim, 1)),
                                    requires_grad=True)
        return params

    def forward(self, q):
        if q.shape != self.state_shape:
            raise ValueError(f"expected state shape {self.state_shape}, got {q.shape}")
        mean = ad.tensor(self.mean.reshape(-1, 1))
        std = ad.tensor(self.std.reshape(-1, 1))
        col = ad.reshape(q, (self.state_dim, 1))
        h = (col - mean) / std
        for i in range(self.config.depth):
            h = self._act(ad.matmul(self.params[f"w{i}"], h) + self.params[f"b{i}"])
        delta = ad.matmul(self.params["w_out"], h) + self.params["b_out"]
        return q + ad.reshape(delta * std, self.state_shape)

    def config_dict(self):
        return {"state_dim": self.state_dim, **asdict(self.config)}


class FNOLiteSurrogate:
    """Residual spectral-operator surrogate for scalar 2D fields.

    Each block sums a truncated per-mode complex channel mixing with a
    pointwise linear bypass, then applies a pointwise activation.
    """

    arch_tag = "fno_lite"

    def __init__(self, n, config, normalization, seed=0, params=None):
        config.validate(n)
        self.n = int(n)
        self.config = config
        self.normalization = normalization
        self.mean, self.std = _norm_arrays(normalization)
        self.state_shape = (self.n, self.n)
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        self.mask = (np.abs(k[None, :]) < config.modes) & \
                    (np.abs(k[:, None]) < config.modes)
        self.n_modes = int(self.mask.sum())
        self.params = params if params is not None else self._init_params(seed)
        self._act = ad.ELEMENTWISE_UNARY[config.activation]

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        w = self.config.width
        params = {"lift": ad.tensor(rng.normal(size=(w, 1)), requires_grad=True)}
        scale = 1.0 / w
        for i in range(self.config.n_layers):
            params[f"spec_re{i}"] = ad.tensor(
                rng.normal(size=(w, w, self.n_modes)) * scale, requires_grad=True)
            params[f"spec_im{i}"] = ad.tensor(
                rng.normal(size=(w, w, self.n_modes)) * scale, requires_grad=True)
            params[f"byp{i}"] = ad.tensor(
                rng.normal(size=(w, w)) / np.sqrt(w), requires_grad=True)
            params[f"bias{i}"] = ad.tensor(np.zeros((w, 1)), requires_grad=True)
        # zero-initialized projection: identity map at init
        params["proj"] = ad.tensor(np.zeros((1, w)), requires_grad=True)
        return params

    def _channel_mix(self, m, h, c_out):
        flat = ad.reshape(h, (h.shape[0], self.n * self.n))
        return ad.reshape(ad.matmul(m, flat), (c_out, self.n, self.n))

    def forward(self, q):
        if q.shape != self.state_shape:
            raise ValueError(f"expected state shape {self.state_shape}, got {q.shape}")
        mean, std = float(self.mean[0]), float(self.std[0])
        qhat = ad.reshape((q - mean) / std, (1, self.n, self.n))
        w = self.config.width
        h = self._channel_mix(self.params["lift"], qhat, w)
        for i in range(self.config.n_layers):
            z = ad.fft2(h)
            spec = ad.real(ad.ifft2(ad.mode_mix(
                z, self.params[f"spec_re{i}"], self.params[f"spec_im{i}"], self.mask)))
            byp = self._channel_mix(self.params[f"byp{i}"], h, w)
            bias = ad.reshape(self.params[f"bias{i}"], (w, 1, 1))
            h = self._act(spec + byp + bias)
        delta = self._channel_mix(self.params["proj"], h, 1)
        return q + ad.reshape(delta, self.state_shape) * std

    def config_dict(self):
        return {"n": self.n, **asdict(self.config)}


class IntegratorSurrogate:
    """Reference integrator wrapped behind the surrogate interface.

    Non-differentiable; used as the zero-error oracle in closure tests.
    """

    arch_tag = "oracle"

    def __init__(self, spec):
        self.spec = spec
        self.state_shape = spec.state_shape
        self.params = {}
        if spec.kind == "kolmogorov2d":
            from .systems.kolmogorov import KolmogorovSolver
            p = spec.parameters
            self._solver = KolmogorovSolver(n=int(p["n"]), re=p["re"], k_f=p["k_f"])

    def forward(self, q):
        from .systems.lorenz import lorenz63_rhs, rk4_step
        state = np.asarray(ad._as_value(q), dtype=np.float64)
        if self.spec.kind == "lorenz63":
            rhs = lambda s: lorenz63_rhs(s, self.spec.parameters)
            for _ in range(self.spec.subsample_factor):
                state = rk4_step(rhs, state, self.spec.integrator_dt)
            return ad.tensor(state)
        w_hat = np.fft.fft2(state)
        for _ in range(self.spec.subsample_factor):
            w_hat = self._solver.step(w_hat, self.spec.integrator_dt)
        return ad.tensor(np.fft.ifft2(w_hat).real)


def build_surrogate(arch_tag, config_dict, normalization, seed=0):
    cfg = dict(config_dict)
    if arch_tag == "mlp":
        state_dim = int(cfg.pop("state_dim"))
        return MLPSurrogate(state_dim, MLPConfig(**cfg), normalization, seed=seed)
    if arch_tag == "fno_lite":
        n = int(cfg.pop("n"))
        return FNOLiteSurrogate(n, SpectralLayerConfig(**cfg), normalization, seed=seed)
    raise ValueError(f"unknown architecture {arch_tag!r}")


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(surrogate, path, step=0, curriculum_state=None,
                    optimizer_state=None):
    """MPCK container: JSON header + named float64 payloads + CRC32."""
    entries = [(f"param/{k}", v.data) for k, v in surrogate.params.items()]
    if optimizer_state is not None:
        for k, arr in optimizer_state.items():
            entries.append((f"opt/{k}", np.asarray(arr, dtype=np.float64)))
    header = {
        "arch": surrogate.arch_tag,
        "config": surrogate.config_dict(),
        "normalization": surrogate.normalization,
        "step": int(step),
        "curriculum": curriculum_state,
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for _, a in entries)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, expect_arch=None):
    """Returns (surrogate, step, curriculum_state, optimizer_state)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", blob[6:10])
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    if expect_arch is not None and header["arch"] != expect_arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint has {header['arch']!r}, "
            f"expected {expect_arch!r}")
    offset = 10 + hlen
    arrays = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        raw = blob[offset:offset + nbytes]
        if len(raw) < nbytes:
            raise CheckpointError("truncated checkpoint payload")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    (crc,) = struct.unpack("<I", blob[offset:offset + 4])
    if zlib.crc32(blob[10 + hlen:offset]) != crc:
        raise CheckpointError("checkpoint CRC mismatch")

    surrogate = build_surrogate(header["arch"], header["config"],
                                header["normalization"])
    for name, t in surrogate.params.items():
        t.data[...] = arrays[f"param/{name}"]
    opt_state = {k[len("opt/"):]: v for k, v in arrays.items()
                 if k.startswith("opt/")}
    return surrogate, header["step"], header.get("curriculum"), opt_state or None

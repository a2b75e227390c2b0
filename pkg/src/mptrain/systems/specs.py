"""System specifications for ground-truth data generation."""

from __future__ import annotations

from dataclasses import dataclass, field


LORENZ_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
KOLMOGOROV_DEFAULTS = {"re": 1000.0, "k_f": 4.0, "n": 64.0}


@dataclass
class SystemSpec:
    """Which reference system to integrate and how."""

    kind: str  # "lorenz63" | "kolmogorov2d"
    parameters: dict = field(default_factory=dict)
    integrator_dt: float = 0.01
    subsample_factor: int = 10
    spinup_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("lorenz63", "kolmogorov2d"):
            raise ValueError(f"unknown system kind {self.kind!r}")
        if self.integrator_dt <= 0:
            raise ValueError("integrator_dt must be positive")
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.spinup_steps < 0:
            raise ValueError("spinup_steps must be non-negative")
        defaults = LORENZ_DEFAULTS if self.kind == "lorenz63" else KOLMOGOROV_DEFAULTS
        merged = dict(defaults)
        merged.update(self.parameters)
        self.parameters = merged
        if self.kind == "kolmogorov2d":
            n = int(self.parameters["n"])
            if n < 2 or (n & (n - 1)) != 0:
                raise ValueError(f"kolmogorov2d grid size must be a power of two, got {n}")
            if self.parameters["re"] <= 0:
                raise ValueError("Reynolds number must be positive")

    @property
    def dt_effective(self) -> float:
        return self.integrator_dt * self.subsample_factor

    @property
    def state_shape(self) -> tuple:
        if self.kind == "lorenz63":
            return (3,)
        n = int(self.parameters["n"])
        return (n, n)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "parameters": dict(self.parameters),
            "integrator_dt": self.integrator_dt,
            "subsample_factor": self.subsample_factor,
            "spinup_steps": self.spinup_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        return cls(
            kind=d["kind"],
            parameters=dict(d.get("parameters", {})),
            integrator_dt=d["integrator_dt"],
            subsample_factor=int(d["subsample_factor"]),
            spinup_steps=int(d.get("spinup_steps", 0)),
        )

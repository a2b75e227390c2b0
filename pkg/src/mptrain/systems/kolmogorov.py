"""Pseudo-spectral solver for 2D Kolmogorov flow in vorticity form.

Domain [0, 2pi)^2, integer wavenumbers.  Nonlinear advection is evaluated in
physical space with 2/3-rule dealiasing; the viscous term is integrated
exactly by a spectral decay factor after an RK4 step on the nonlinear and
forcing terms.  Forcing enters the vorticity equation as k_f*cos(k_f*y).
"""

from __future__ import annotations

import numpy as np

from .lorenz import IntegrationBlowupError


class CFLViolationError(RuntimeError):
    """Advective CFL number exceeded; advises a smaller dt."""

    def __init__(self, cfl, limit):
        super().__init__(
            f"CFL number {cfl:.3f} exceeds limit {limit:.3f}; reduce dt")
        self.cfl = cfl
        self.limit = limit


class KolmogorovSolver:
    def __init__(self, n, re, k_f=4.0, cfl_limit=0.5, forcing_on=True,
                 nonlinear_on=True):
        self.n = int(n)
        self.re = float(re)
        self.k_f = float(k_f)
        self.cfl_limit = float(cfl_limit)
        self.forcing_on = forcing_on
        self.nonlinear_on = nonlinear_on

        k = np.fft.fftfreq(self.n, d=1.0 / self.n)  # integer wavenumbers
        self.kx = k[None, :] * np.ones((self.n, 1))
        self.ky = k[:, None] * np.ones((1, self.n))
        self.k_sq = self.kx ** 2 + self.ky ** 2
        k_sq_safe = self.k_sq.copy()
        k_sq_safe[0, 0] = 1.0
        self.inv_k_sq = 1.0 / k_sq_safe
        self.inv_k_sq[0, 0] = 0.0

        k_max = self.n // 2
        self.dealias = (np.abs(self.kx) < (2.0 / 3.0) * k_max) & \
                       (np.abs(self.ky) < (2.0 / 3.0) * k_max)

        y = 2 * np.pi * np.arange(self.n)[:, None] / self.n * np.ones((1, self.n))
        forcing_phys = self.k_f * np.cos(self.k_f * y)
        self.forcing_hat = np.fft.fft2(forcing_phys) if forcing_on else 0.0

        self.dx = 2 * np.pi / self.n

    def velocity_hat(self, w_hat):
        """Velocity spectrum from vorticity via the streamfunction."""
        psi_hat = w_hat * self.inv_k_sq
        u_hat = 1j * self.ky * psi_hat
        v_hat = -1j * self.kx * psi_hat
        return u_hat, v_hat

    def velocity(self, w_hat):
        u_hat, v_hat = self.velocity_hat(w_hat)
        return np.fft.ifft2(u_hat).real, np.fft.ifft2(v_hat).real

    def _nonlinear_rhs(self, w_hat):
        rhs = np.zeros_like(w_hat)
        if self.nonlinear_on:
            u, v = self.velocity(w_hat)
            wx = np.fft.ifft2(1j * self.kx * w_hat).real
            wy = np.fft.ifft2(1j * self.ky * w_hat).real
            adv = u * wx + v * wy
            rhs = -(self.dealias * np.fft.fft2(adv))
        if self.forcing_on:
            rhs = rhs + self.forcing_hat
        return rhs

    def check_cfl(self, w_hat, dt):
        u, v = self.velocity(w_hat)
        vmax = max(np.abs(u).max(), np.abs(v).max())
        cfl = vmax * dt / self.dx
        if cfl > self.cfl_limit:
            raise CFLViolationError(cfl, self.cfl_limit)

    def step(self, w_hat, dt, step_index=0):
        """Advance vorticity spectrum by dt (RK4 + exact viscous decay)."""
        self.check_cfl(w_hat, dt)
        k1 = self._nonlinear_rhs(w_hat)
        k2 = self._nonlinear_rhs(w_hat + 0.5 * dt * k1)
        k3 = self._nonlinear_rhs(w_hat + 0.5 * dt * k2)
        k4 = self._nonlinear_rhs(w_hat + dt * k3)
        out = w_hat + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        # keep the state inside the dealiased set so the truncation is closed
        out = out * self.dealias
        if self.re < np.inf:
            out = out * np.exp(-self.k_sq * dt / self.re)
        if not np.all(np.isfinite(out)):
            raise IntegrationBlowupError(step_index, "non-finite vorticity spectrum")
        return out

    def kinetic_energy(self, w_hat):
        u, v = self.velocity(w_hat)
        return 0.5 * np.mean(u ** 2 + v ** 2)

    def random_initial_vorticity(self, rng, k_peak=4.0):
        """Random smooth vorticity field; velocity is divergence-free by
        construction (derived from the streamfunction)."""
        amp = np.exp(-0.5 * ((np.sqrt(self.k_sq) - k_peak) / 2.0) ** 2)
        amp[0, 0] = 0.0
        phase = rng.uniform(0, 2 * np.pi, size=(self.n, self.n))
        field_hat = amp * np.exp(1j * phase)
        # enforce a real physical field, then normalize the energy
        w = np.fft.ifft2(field_hat).real
        w_hat = np.fft.fft2(w)
        e = self.kinetic_energy(w_hat)
        if e > 0:
            w_hat = w_hat / np.sqrt(e)
        return w_hat

"""Pseudo-spectral Navier-Stokes solvers on periodic boxes.

Two flows are supported:

* ``kf4``: 2D Kolmogorov flow in vorticity form,
  ``dw/dt + u.grad w = nu lap w + k cos(k x) - mu w``;
* ``iso``: 3D forced isotropic turbulence in velocity form, with the
  low-mode power-injection forcing ``f_k = (P_in / E_1) u_k`` for ``0 < |k| <= 1``.

States store Fourier-series coefficients (``rfftn`` with ``norm="forward"``)
as torch tensors, so a 2D step can be differentiated. Time stepping is a
Strang split: half a Crank-Nicolson diffusion step, an RK4 step of the
filtered advection plus forcing, then the other diffusion half step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .basis import GridField

__all__ = [
    "SolverConfig",
    "FlowState",
    "Trajectory",
    "BlowUpError",
    "DegenerateForcingError",
    "init_random",
    "from_grid",
    "to_grid",
    "forcing",
    "tendency",
    "rk4",
    "step",
    "advance",
    "cfl_dt",
    "simulate",
    "kinetic_energy",
    "enstrophy",
    "injection_rate",
    "dissipation_rate",
    "downsample_spectrum",
]


class BlowUpError(FloatingPointError):
    """Energy exploded or became non-finite during a step."""


class DegenerateForcingError(ValueError):
    """Power-injection forcing with (almost) no energy in the forced modes."""


@dataclass(frozen=True)
class SolverConfig:
    """Physical and numerical parameters.

    Defaults describe the 2D Kolmogorov flow; :meth:`iso` gives the 3D
    forced-turbulence set.
    """

    kind: str = "kf4"
    nu: float = 1e-3
    resolution: int = 256
    output_resolution: int | None = None
    forcing_mode: int = 4
    damping: float = 0.1
    p_in: float = 1.0
    forced: bool = True
    c_max: float = 1.0
    filter_strength: float = 36.0
    filter_order: int = 36
    seed: int = 0
    burn_in: float = 40.0
    record_dt: float = 0.125
    duration: float = 10.0
    init_energy: float = 2.0061
    init_cutoff: float = 16.0
    length: float = 2 * math.pi
    velocity_output: bool = False

    def __post_init__(self):
        if self.kind not in ("kf4", "iso"):
            raise ValueError(f"unknown flow kind {self.kind!r}")
        if self.nu < 0:
            raise ValueError("viscosity must be non-negative")
        if self.forced and self.kind == "iso" and self.p_in <= 0:
            raise ValueError("input power must be positive")
        if self.resolution < 4 or self.resolution % 2:
            raise ValueError("resolution must be even and at least 4")
        if self.record_dt <= 0 or self.c_max <= 0:
            raise ValueError("record interval and CFL number must be positive")
        periods = self.forcing_mode * self.length / (2 * math.pi)
        if self.kind == "kf4" and abs(periods - round(periods)) > 1e-9:
            raise ValueError("forcing wavenumber must fit a whole number of periods in the box")

    @classmethod
    def kf4(cls, **kw) -> "SolverConfig":
        return cls(**kw)

    @classmethod
    def iso(cls, **kw) -> "SolverConfig":
        base = dict(kind="iso", nu=1e-2, resolution=64, burn_in=20.0, record_dt=0.1, duration=5.0,
                    init_energy=3.6023)
        base.update(kw)
        return cls(**base)

    @property
    def ndim(self) -> int:
        return 2 if self.kind == "kf4" else 3

    @property
    def out_resolution(self) -> int:
        return self.output_resolution or self.resolution

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class FlowState:
    """Spectral state: vorticity ``[n, n//2+1]`` in 2D, velocity ``[3, n, n, n//2+1]`` in 3D."""

    spec: torch.Tensor
    t: float
    config: SolverConfig

    @property
    def resolution(self) -> int:
        return self.spec.shape[-2]

    def physical(self) -> torch.Tensor:
        return _ifft(self.spec, self.resolution, self.config.ndim)

    def with_spec(self, spec: torch.Tensor, t: float | None = None) -> "FlowState":
        return FlowState(spec, self.t if t is None else t, self.config)


@dataclass
class Trajectory:
    snapshots: list[GridField]
    budget: dict = field(default_factory=dict)
    final_state: FlowState | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([g.time for g in self.snapshots])


# ---------------------------------------------------------------------------
# spectral grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Grid:
    k: tuple[torch.Tensor, ...]  # broadcastable wavenumber components
    k2: torch.Tensor
    inv_k2: torch.Tensor
    filt: torch.Tensor
    weight: torch.Tensor  # Hermitian multiplicity of each stored mode
    low: torch.Tensor  # 0 < |k| <= 1
    grad2d: torch.Tensor | None  # w -> (u, v, dw/dx, dw/dy) multipliers, 2D only


@lru_cache(maxsize=32)
def _grid(ndim: int, n: int, length: float, strength: float, order: int) -> _Grid:
    scale = 2 * math.pi / length
    full = torch.fft.fftfreq(n, 1.0 / n, dtype=torch.float64) * scale
    half = torch.fft.rfftfreq(n, 1.0 / n, dtype=torch.float64) * scale
    axes = [full] * (ndim - 1) + [half]
    k = []
    for a, v in enumerate(axes):
        shape = [1] * ndim
        shape[a] = -1
        k.append(v.reshape(shape))
    k2 = sum(c * c for c in k)
    kmag = torch.sqrt(k2)
    inv_k2 = torch.where(k2 > 0, 1.0 / torch.where(k2 > 0, k2, torch.ones_like(k2)), torch.zeros_like(k2))
    k_nyq = (n // 2) * scale
    filt = torch.exp(-strength * (kmag / k_nyq) ** order)
    weight = torch.full((n // 2 + 1,), 2.0, dtype=torch.float64)
    weight[0] = 1.0
    weight[-1] = 1.0
    weight = weight.reshape([1] * (ndim - 1) + [-1]).expand(k2.shape).clone()
    low = (k2 > 0) & (k2 <= 1 + 1e-12)  # physical |k| <= 1, so tiled boxes force the same modes
    grad2d = None
    if ndim == 2:
        kx, ky = k
        grad2d = torch.stack([1j * ky * inv_k2, -1j * kx * inv_k2, 1j * kx + 0 * ky, 1j * ky + 0 * kx])
    return _Grid(tuple(k), k2, inv_k2, filt, weight, low, grad2d)


def _grid_for(config: SolverConfig, n: int) -> _Grid:
    return _grid(config.ndim, n, config.length, config.filter_strength, config.filter_order)


def _fft(x: torch.Tensor, D: int) -> torch.Tensor:
    return torch.fft.rfftn(x, dim=tuple(range(-D, 0)), norm="forward")


def _ifft(x: torch.Tensor, n: int, D: int) -> torch.Tensor:
    # two passes beat a single irfftn by ~40% on CPU
    x = torch.fft.ifftn(x, dim=tuple(range(-D, -1)), norm="forward")
    return torch.fft.irfft(x, n=n, dim=-1, norm="forward")


def _inner(a: torch.Tensor, b: torch.Tensor, g: _Grid) -> torch.Tensor:
    """Domain mean of the product of two real fields given by their spectra."""
    return (g.weight * (a * b.conj()).real).sum()


def _velocity_spec(spec: torch.Tensor, g: _Grid, ndim: int) -> torch.Tensor:
    if ndim == 3:
        return spec
    kx, ky = g.k
    psi = spec * g.inv_k2
    return torch.stack([1j * ky * psi, -1j * kx * psi])


def _project(u: torch.Tensor, g: _Grid) -> torch.Tensor:
    div = sum(ki * ui for ki, ui in zip(g.k, u))
    return u - torch.stack([ki * div * g.inv_k2 for ki in g.k])


# ---------------------------------------------------------------------------
# diagnostics on states
# ---------------------------------------------------------------------------


def kinetic_energy(state: FlowState) -> float:
    """``0.5 <|u|^2>``."""
    g = _grid_for(state.config, state.resolution)
    u = _velocity_spec(state.spec, g, state.config.ndim)
    return float(0.5 * sum(_inner(c, c, g) for c in u))


def enstrophy(state: FlowState) -> float:
    """``0.5 <|w|^2>``."""
    g = _grid_for(state.config, state.resolution)
    u = _velocity_spec(state.spec, g, state.config.ndim)
    return float(0.5 * (g.weight * g.k2 * sum(c.abs() ** 2 for c in u)).sum())


def dissipation_rate(state: FlowState) -> float:
    """``2 nu <|S|^2>``, equal to ``nu <|grad u|^2>`` for periodic incompressible flow."""
    return 2 * state.config.nu * enstrophy(state)


def injection_rate(state: FlowState) -> float:
    """``<f.u>`` including the linear damping term of the 2D flow."""
    c = state.config
    if not c.forced:
        return 0.0
    g = _grid_for(c, state.resolution)
    u = _velocity_spec(state.spec, g, c.ndim)
    if c.ndim == 3:
        return float(sum(_inner(fi, ui, g) for fi, ui in zip(_iso_forcing(u, g, c), u)))
    fy = _kf4_velocity_forcing(state.resolution, c)
    return float(_inner(fy, u[1], g) - c.damping * 2 * kinetic_energy(state))


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------


def init_random(config: SolverConfig, seed: int | None = None) -> FlowState:
    """Random field with shell energy ``~ k^(-5/3)`` on ``0 < |k| < init_cutoff``.

    Mode amplitudes are complex Gaussian (the transform of white noise), so
    the shell spectrum holds in expectation. The total energy is then
    scaled to ``config.init_energy``.
    """
    n, D = config.resolution, config.ndim
    if n < 32:
        raise ValueError("random initial conditions need at least 32 points per axis")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    g = _grid_for(config, n)
    scale = 2 * math.pi / config.length
    kmag = torch.sqrt(g.k2) / scale
    shell = torch.round(kmag).long()
    counts = torch.bincount(shell.reshape(-1), weights=g.weight.reshape(-1))
    per_mode = torch.where(shell > 0, shell.double().clamp(min=1) ** (-5.0 / 3.0) / counts[shell], 0.0)
    active = (kmag > 0) & (kmag < config.init_cutoff)
    amp = torch.where(active, torch.sqrt(per_mode), torch.zeros_like(per_mode))
    comps = 1 if D == 2 else 3
    noise = torch.from_numpy(rng.standard_normal((comps,) + (n,) * D))
    xi = _fft(noise, D) * math.sqrt(n**D)  # unit-variance complex modes
    u = xi * amp
    if D == 2:
        spec = u[0] * torch.sqrt(g.k2)  # vorticity with |w_k| = |k| |u_k|
    else:
        spec = _project(u, g)
    state = FlowState(spec, 0.0, config)
    e = kinetic_energy(state)
    return state.with_spec(spec * math.sqrt(config.init_energy / e))


def from_grid(values, config: SolverConfig, t: float = 0.0) -> FlowState:
    """State from physical data: 2D vorticity ``[n, n(, 1)]`` or velocity ``[n, n, 2]``, 3D velocity ``[n, n, n, 3]``."""
    x = values.values if isinstance(values, GridField) else values
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float64)
    D = config.ndim
    if D == 2 and x.ndim == 3 and x.shape[-1] == 2:
        kx, ky = _grid_for(config, x.shape[0]).k
        uh = _fft(torch.movedim(x, -1, 0), D)
        spec = 1j * kx * uh[1] - 1j * ky * uh[0]
        return FlowState(spec, t, config)
    if x.ndim == D + 1:
        x = x[..., 0] if D == 2 else torch.movedim(x, -1, 0)
    spec = _fft(x, D)
    if D == 3:
        spec = _project(spec, _grid_for(config, x.shape[-1]))
    return FlowState(spec, t, config)


def downsample_spectrum(spec: torch.Tensor, n_out: int, ndim: int) -> torch.Tensor:
    """Keep modes with ``|k_a| < n_out / 2`` on every axis (Nyquist modes set to zero)."""
    n = spec.shape[-2]
    if n_out > n or n_out % 2:
        raise ValueError("can only downsample to an even, coarser grid")
    h = n_out // 2
    src = torch.cat([torch.arange(0, h), torch.arange(n - h + 1, n)])
    dst = torch.cat([torch.arange(0, h), torch.arange(h + 1, n_out)])
    part = spec[..., :h]
    for a in range(ndim - 1):
        part = torch.index_select(part, part.ndim - ndim + a, src)
    out = torch.zeros(spec.shape[:-ndim] + (n_out,) * (ndim - 1) + (h + 1,), dtype=spec.dtype)
    lead = (slice(None),) * (spec.ndim - ndim)
    rows = torch.meshgrid(*([dst] * (ndim - 1)), indexing="ij")
    out[lead + rows + (slice(0, h),)] = part
    return out


def to_grid(state: FlowState, resolution: int | None = None, velocity: bool | None = None) -> GridField:
    """FFT-downsampled physical snapshot (channels last)."""
    c = state.config
    D, n = c.ndim, state.resolution
    n_out = resolution or c.out_resolution
    spec = state.spec.detach()
    if n_out != n:
        spec = downsample_spectrum(spec, n_out, D)
    g = _grid_for(c, n_out)
    velocity = c.velocity_output if velocity is None else velocity
    if D == 2:
        fields = [spec]
        names = "omega"
        if velocity:
            fields += list(_velocity_spec(spec, g, 2))
            names = "omega,u,v"
        data = torch.stack([_ifft(f, n_out, 2) for f in fields], -1)
    else:
        data = torch.movedim(_ifft(spec, n_out, 3), 0, -1)
        names = "u,v,w"
    return GridField(data.numpy(), (c.length,) * D, time=state.t, channels=names)


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _kf4_forcing_spec(n: int, mode: int, length: float) -> torch.Tensor:
    """Spectrum of ``k cos(k x)`` (x along axis 0, ``k`` a physical wavenumber)."""
    x = torch.arange(n, dtype=torch.float64) * length / n
    w = mode * torch.cos(mode * x)[:, None].expand(n, n)
    return _fft(w, 2)


@lru_cache(maxsize=16)
def _kf4_velocity_forcing_cached(n: int, mode: int, length: float) -> torch.Tensor:
    x = torch.arange(n, dtype=torch.float64) * length / n
    fy = torch.sin(mode * x)[:, None].expand(n, n)
    return _fft(fy, 2)


def _kf4_velocity_forcing(n: int, c: SolverConfig) -> torch.Tensor:
    return _kf4_velocity_forcing_cached(n, c.forcing_mode, c.length)


def _iso_forcing(u: torch.Tensor, g: _Grid, c: SolverConfig) -> torch.Tensor:
    low = g.low
    e1 = 0.5 * (g.weight * low * sum(ui.abs() ** 2 for ui in u)).sum()
    if float(e1) < 1e-12:
        raise DegenerateForcingError("no energy in the forced modes |k| <= 1")
    return (c.p_in / e1) * u * low


def _forcing_spec(spec: torch.Tensor, g: _Grid, c: SolverConfig) -> torch.Tensor:
    if not c.forced:
        return torch.zeros_like(spec)
    if c.ndim == 2:
        return _kf4_forcing_spec(spec.shape[-2], c.forcing_mode, c.length).to(spec.dtype) - c.damping * spec
    return _iso_forcing(spec, g, c)


def forcing(state: FlowState, config: SolverConfig | None = None) -> torch.Tensor:
    """Spectral forcing tendency (vorticity in 2D, velocity in 3D)."""
    c = config or state.config
    return _forcing_spec(state.spec, _grid_for(c, state.resolution), c)


def _advection(spec: torch.Tensor, g: _Grid, c: SolverConfig) -> torch.Tensor:
    n, D = spec.shape[-2], c.ndim
    if D == 2:
        fields = _ifft(spec * g.grad2d, n, 2)
        nl = -(fields[0] * fields[2] + fields[1] * fields[3])
        return _fft(nl, 2) * g.filt
    kx, ky, kz = g.k
    u0, u1, u2 = spec
    w = torch.stack([1j * (ky * u2 - kz * u1), 1j * (kz * u0 - kx * u2), 1j * (kx * u1 - ky * u0)])
    phys = _ifft(torch.cat([spec, w]), n, 3)
    uu, ww = phys[:3], phys[3:]
    cross = torch.stack([uu[1] * ww[2] - uu[2] * ww[1], uu[2] * ww[0] - uu[0] * ww[2], uu[0] * ww[1] - uu[1] * ww[0]])
    return _project(_fft(cross, 3) * g.filt, g)


def tendency(spec: torch.Tensor, config: SolverConfig) -> torch.Tensor:
    """Explicit part of the right-hand side: filtered advection plus forcing."""
    g = _grid_for(config, spec.shape[-2])
    return _advection(spec, g, config) + _forcing_spec(spec, g, config)


def rk4(spec: torch.Tensor, dt: float, config: SolverConfig) -> torch.Tensor:
    """Classical fourth-order Runge-Kutta step of :func:`tendency` (``dt`` may be negative)."""
    k1 = tendency(spec, config)
    k2 = tendency(spec + 0.5 * dt * k1, config)
    k3 = tendency(spec + 0.5 * dt * k2, config)
    k4 = tendency(spec + dt * k3, config)
    return spec + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _diffuse_half(spec: torch.Tensor, dt: float, g: _Grid, nu: float) -> torch.Tensor:
    a = 0.25 * nu * dt * g.k2  # Crank-Nicolson over dt/2
    return spec * ((1 - a) / (1 + a))


def _energy_of(spec: torch.Tensor, g: _Grid, ndim: int) -> float:
    u = _velocity_spec(spec, g, ndim)
    return float(0.5 * sum(_inner(c, c, g) for c in u))


def step(state: FlowState, dt: float, config: SolverConfig | None = None,
         differentiable: bool = False) -> FlowState:
    """One Strang-split step of length ``dt``."""
    c = config or state.config
    if dt <= 0:
        raise ValueError("time step must be positive")
    if differentiable and c.ndim != 2:
        raise ValueError("differentiable stepping is only provided for the 2D solver")
    g = _grid_for(c, state.resolution)
    with torch.set_grad_enabled(differentiable and torch.is_grad_enabled()):
        spec = _diffuse_half(state.spec, dt, g, c.nu)
        spec = rk4(spec, dt, c)
        spec = _diffuse_half(spec, dt, g, c.nu)
        if c.ndim == 3:
            spec = _project(spec, g)
    e0 = _energy_of(state.spec.detach(), g, c.ndim)
    e1 = _energy_of(spec.detach(), g, c.ndim)
    if not math.isfinite(e1) or e1 > 10 * e0 + 1.0:  # absolute floor lets a fluid at rest spin up
        raise BlowUpError(f"energy grew from {e0:.4g} to {e1:.4g} in one step at t={state.t:.4f}")
    return FlowState(spec, state.t + dt, c)


def cfl_dt(state: FlowState, config: SolverConfig | None = None) -> float:
    """``C_max * dx / max|u|`` clamped to ``[1e-6, record_dt]``."""
    c = config or state.config
    n = state.resolution
    g = _grid_for(c, n)
    with torch.no_grad():
        u = _ifft(_velocity_spec(state.spec.detach(), g, c.ndim), n, c.ndim)
    umax = float(u.abs().max())
    dx = c.length / n
    if umax == 0:
        return c.record_dt
    return float(min(max(c.c_max * dx / umax, 1e-6), c.record_dt))


def advance(state: FlowState, T: float, config: SolverConfig | None = None,
            differentiable: bool = False, budget: dict | None = None) -> FlowState:
    """Integrate for time ``T`` with CFL-limited steps, landing exactly on ``t + T``."""
    c = config or state.config
    t_end = state.t + T
    while t_end - state.t > 1e-12 * max(1.0, abs(t_end)):
        dt = min(cfl_dt(state, c), t_end - state.t)
        new = step(state, dt, c, differentiable)
        if budget is not None:
            _accumulate(budget, state, new, dt)
        state = new
    return FlowState(state.spec, t_end, c)


def _accumulate(budget: dict, before: FlowState, after: FlowState, dt: float) -> None:
    if not budget:
        k0 = kinetic_energy(before)
        budget.update(t=[before.t], k=[k0], e_tot=[k0],
                      injection=[injection_rate(before)], dissipation=[dissipation_rate(before)])
    i1, d1 = injection_rate(after), dissipation_rate(after)
    i0, d0 = budget["injection"][-1], budget["dissipation"][-1]
    budget["e_tot"].append(budget["e_tot"][-1] + 0.5 * dt * ((i0 - d0) + (i1 - d1)))
    budget["t"].append(after.t)
    budget["k"].append(kinetic_energy(after))
    budget["injection"].append(i1)
    budget["dissipation"].append(d1)


def simulate(state: FlowState, T: float, config: SolverConfig | None = None,
             burn_in: float = 0.0, track_budget: bool = False) -> Trajectory:
    """Advance for ``T`` seconds recording snapshots every ``record_dt``.

    Snapshot times are relative to the start of recording, so the record
    count is ``floor(T / record_dt) + 1``. With ``track_budget`` the kinetic
    energy budget is accumulated by the trapezoid rule at every step.
    """
    c = config or state.config
    if T <= 0:
        raise ValueError("simulation time must be positive")
    if burn_in > 0:
        state = advance(state, burn_in, c)
    state = FlowState(state.spec, 0.0, c)
    count = int(math.floor(T / c.record_dt + 1e-9))
    budget: dict = {} if track_budget else None
    snaps = [to_grid(state)]
    for i in range(1, count + 1):
        state = advance(state, i * c.record_dt - state.t, c, budget=budget)
        state = FlowState(state.spec, i * c.record_dt, c)
        snaps.append(to_grid(state))
    return Trajectory(snaps, {k: np.asarray(v) for k, v in (budget or {}).items()}, state)

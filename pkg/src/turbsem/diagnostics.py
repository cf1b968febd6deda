"""Turbulence statistics and error metrics on uniform periodic grids (numpy)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .basis import GridField

__all__ = [
    "SpectrumReport",
    "FlowStats",
    "EnergyBalance",
    "velocity_field",
    "energy_spectrum",
    "structure_function_s3",
    "q_criterion",
    "velocity_gradient",
    "error_metrics",
    "energy_balance",
    "flow_stats",
    "stats_from_scalars",
    "write_csv",
]

VRMSE_EPS = 1e-7


@dataclass(frozen=True)
class SpectrumReport:
    k: np.ndarray
    energy: np.ndarray
    total: float
    slope: float
    fit_range: tuple[float, float]


@dataclass(frozen=True)
class FlowStats:
    energy: float
    dissipation: float
    u_rms: float
    taylor_microscale: float
    kolmogorov_scale: float
    re_lambda: float


@dataclass(frozen=True)
class EnergyBalance:
    t: np.ndarray
    k: np.ndarray
    injection: np.ndarray
    dissipation: np.ndarray
    e_tot: np.ndarray  # k(0) + int (I - eps)
    conserved: np.ndarray  # k(t) - int (I - eps); constant for an exact balance

    @property
    def defect(self) -> float:
        return float(abs(self.k[-1] - self.e_tot[-1]) / self.k[0])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _wavenumbers(shape: Sequence[int], lengths: Sequence[float]) -> list[np.ndarray]:
    D = len(shape)
    out = []
    for a, (n, L) in enumerate(zip(shape, lengths)):
        k = np.fft.fftfreq(n, 1.0 / n) * (2 * np.pi / L)
        s = [1] * D
        s[a] = n
        out.append(k.reshape(s))
    return out


def _channel_names(g: GridField) -> list[str]:
    return [c.strip() for c in g.channels.split(",")]


def velocity_field(g: GridField) -> np.ndarray:
    """Velocity ``[n.., D]`` from a snapshot holding velocity and/or 2D vorticity."""
    D = g.ndim
    names = _channel_names(g)
    comps = ["u", "v", "w"][:D]
    if all(c in names for c in comps):
        return np.stack([g.values[..., names.index(c)] for c in comps], -1)
    if names == ["omega"] and D == 2:
        axes = (0, 1)
        w = np.fft.fftn(g.values[..., 0], axes=axes)
        kx, ky = _wavenumbers(g.shape, g.lengths)
        k2 = kx**2 + ky**2
        psi = np.where(k2 > 0, w / np.where(k2 > 0, k2, 1), 0)
        u = np.real(np.fft.ifftn(1j * ky * psi, axes=axes))
        v = np.real(np.fft.ifftn(-1j * kx * psi, axes=axes))
        return np.stack([u, v], -1)
    if g.values.shape[-1] == D:
        return g.values
    raise ValueError(f"cannot find {D} velocity components in channels {g.channels!r}")


def velocity_gradient(u: np.ndarray, lengths: Sequence[float]) -> np.ndarray:
    """Spectral ``A[..., i, j] = d u_i / d x_j`` for periodic velocity ``[n.., D]``."""
    D = u.shape[-1]
    axes = tuple(range(D))
    uh = np.fft.fftn(u, axes=axes)
    k = _wavenumbers(u.shape[:-1], lengths)
    grads = [np.real(np.fft.ifftn(1j * k[j][..., None] * uh, axes=axes)) for j in range(D)]
    return np.stack(grads, -1)


def _strain_norm2(A: np.ndarray) -> np.ndarray:
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    return (S**2).sum((-1, -2))


# ---------------------------------------------------------------------------
# spectra and structure functions
# ---------------------------------------------------------------------------


def energy_spectrum(g: GridField, fit_range: tuple[float, float] | None = None) -> SpectrumReport:
    """Shell-summed energy ``E(k) = sum_{round|k| = k} 0.5 |u_k|^2`` (domain-mean normalization).

    The slope is a least-squares fit of ``log E`` against ``log k`` over
    ``fit_range`` (inclusive); by default shells ``2 .. n/8``.
    """
    u = velocity_field(g)
    D = g.ndim
    axes = tuple(range(D))
    npts = int(np.prod(g.shape))
    uh = np.fft.fftn(u, axes=axes) / npts
    k = _wavenumbers(g.shape, g.lengths)
    unit = 2 * np.pi / max(g.lengths)
    kmag = np.sqrt(sum(c**2 for c in k)) / unit
    shells = np.rint(kmag).astype(int)
    e = np.bincount(shells.ravel(), weights=0.5 * (np.abs(uh) ** 2).sum(-1).ravel())
    kk = np.arange(len(e))
    lo, hi = fit_range or (2, max(3, min(g.shape) // 8))
    sel = (kk >= lo) & (kk <= hi) & (e > 0)
    slope = float(np.polyfit(np.log(kk[sel]), np.log(e[sel]), 1)[0]) if sel.sum() >= 2 else float("nan")
    return SpectrumReport(kk, e, float(e.sum()), slope, (lo, hi))


def structure_function_s3(g: GridField, r_values: Iterable[float]) -> np.ndarray:
    """Third-order longitudinal structure function along the grid axes.

    ``S_L(r)`` averages ``((u(x + r e_a) - u(x)) . e_a)^3`` over every grid
    point and every axis ``a``. Separations must be multiples of the grid
    spacing.
    """
    u = velocity_field(g)
    D = g.ndim
    out = []
    for r in r_values:
        vals = []
        for a in range(D):
            s = r / g.spacing[a]
            if abs(s - round(s)) > 1e-9:
                raise ValueError(f"separation {r} is not a multiple of the grid spacing {g.spacing[a]}")
            du = np.roll(u[..., a], -int(round(s)), axis=a) - u[..., a]
            vals.append(np.mean(du**3))
        out.append(float(np.mean(vals)))
    return np.array(out)


def q_criterion(g: GridField, method: str = "spectral") -> GridField:
    """``q = 0.5 (|Omega|^2 - |S|^2)`` from the velocity gradient.

    ``method="fd"`` uses second-order finite differences with one-sided
    edges, for non-periodic patches.
    """
    u = velocity_field(g)
    if method == "spectral":
        A = velocity_gradient(u, g.lengths)
    elif method == "fd":
        D = g.ndim
        A = np.stack([np.stack(np.gradient(u[..., i], *g.spacing, edge_order=2), -1) for i in range(D)], -2)
    else:
        raise ValueError(f"unknown method {method!r}")
    W = 0.5 * (A - np.swapaxes(A, -1, -2))
    q = 0.5 * ((W**2).sum((-1, -2)) - _strain_norm2(A))
    return GridField(q[..., None], g.lengths, time=g.time, channels="q")


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------


def error_metrics(ref: GridField | np.ndarray, pred: GridField | np.ndarray) -> dict[str, float]:
    a = ref.values if isinstance(ref, GridField) else np.asarray(ref)
    b = pred.values if isinstance(pred, GridField) else np.asarray(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    norm2 = float(np.sum(a * a))
    if norm2 == 0:
        raise ValueError("reference field has zero norm")
    rel = math.sqrt(float(np.sum((a - b) ** 2)) / norm2)
    corr = float(np.sum(a * b)) / norm2
    axes = tuple(range(a.ndim - 1))
    mse = np.mean((a - b) ** 2, axis=axes)
    var = np.mean((a - a.mean(axis=axes)) ** 2, axis=axes)
    vrmse = float(np.mean(np.sqrt(mse / (var + VRMSE_EPS))))
    return {"rel_l2": rel, "correlation": corr, "vrmse": vrmse}


# ---------------------------------------------------------------------------
# energy budget and flow statistics
# ---------------------------------------------------------------------------


def _injection(u: np.ndarray, g: GridField, config) -> float:
    if config is None or not config.forced:
        return 0.0
    D = g.ndim
    if config.kind == "kf4":
        x = g.coords(0)
        fy = np.sin(config.forcing_mode * x)
        shape = [1] * D
        shape[0] = -1
        return float(np.mean(fy.reshape(shape) * u[..., 1]) - config.damping * np.mean((u**2).sum(-1)))
    axes = tuple(range(D))
    uh = np.fft.fftn(u, axes=axes) / np.prod(g.shape)
    k = _wavenumbers(g.shape, g.lengths)
    k2 = sum(c**2 for c in k)
    low = (k2 > 0) & (k2 <= 1 + 1e-12)
    e1 = 0.5 * np.sum(np.abs(uh[low]) ** 2)
    if e1 < 1e-12:
        raise ValueError("no energy in the forced modes")
    return float(config.p_in / e1 * np.sum(np.abs(uh[low]) ** 2))


def energy_balance(trajectory: Sequence[GridField], config) -> EnergyBalance:
    """Kinetic-energy budget along recorded snapshots (trapezoid in time).

    ``config`` supplies the viscosity and forcing (a solver configuration);
    the 2D injection rate includes the linear damping term.
    """
    t, k, inj, dis = [], [], [], []
    for g in trajectory:
        u = velocity_field(g)
        A = velocity_gradient(u, g.lengths)
        t.append(g.time)
        k.append(0.5 * float(np.mean((u**2).sum(-1))))
        inj.append(_injection(u, g, config))
        dis.append(2 * config.nu * float(np.mean(_strain_norm2(A))))
    t, k, inj, dis = map(np.asarray, (t, k, inj, dis))
    rate = inj - dis
    integral = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (rate[1:] + rate[:-1]))])
    return EnergyBalance(t, k, inj, dis, k[0] + integral, k - integral)


def stats_from_scalars(nu: float, dissipation: float, u_rms: float, energy: float | None = None) -> FlowStats:
    if dissipation <= 0:
        raise ValueError("dissipation rate must be positive")
    lam = u_rms * math.sqrt(15 * nu / dissipation)
    eta = (nu**3 / dissipation) ** 0.25
    e = 1.5 * u_rms**2 if energy is None else energy
    return FlowStats(e, dissipation, u_rms, lam, eta, u_rms * lam / nu)


def flow_stats(g: GridField, nu: float) -> FlowStats:
    """Single-snapshot statistics; ``u_rms = sqrt(2 E_k / 3)`` in both 2D and 3D."""
    u = velocity_field(g)
    e = 0.5 * float(np.mean((u**2).sum(-1)))
    eps = 2 * nu * float(np.mean(_strain_norm2(velocity_gradient(u, g.lengths))))
    if eps == 0:
        raise ValueError("zero dissipation: statistics are undefined")
    return stats_from_scalars(nu, eps, math.sqrt(2 * e / 3), e)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.10g}" if isinstance(x, float) else x for x in row])
    return path

"""Precomputed linear operators acting on batched SEM tensors.

Batched nodal fields use the layout ``[B, N_1..N_D, M_1..M_D, C]``; grid
tensors use ``[B, n_1..n_D, C]``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch

from ..basis import BasisKind, SemMesh, modal_vandermonde, quadrature_rule, trig_interp_matrix, truncation_indices

__all__ = [
    "window_offsets",
    "conv_weights",
    "cardinal_functions",
    "truncation_matrix",
    "upsample_matrix",
    "grid_to_nodes_matrix",
    "nodes_to_grid_matrix",
    "apply_mode_matrix",
    "apply_axis_transfer",
    "roll_gather",
]

_GL_POINTS = 48


def window_offsets(delta: float, s: float, n_elements: int) -> np.ndarray:
    """Element offsets ``-S..S`` touched by a kernel window of width ``s``."""
    S = math.ceil(s / (2 * delta) - 1e-12)
    if S >= n_elements:
        raise ValueError(f"kernel window s={s} needs {S} neighbours but the axis only has {n_elements} elements")
    return np.arange(-S, S + 1)


def cardinal_functions(kind: BasisKind, M: int, xi: np.ndarray) -> np.ndarray:
    """Lagrange cardinal functions of the collocation nodes evaluated at ``xi``."""
    nodes, _ = quadrature_rule(kind, M)
    V = modal_vandermonde(kind, M, nodes)
    return modal_vandermonde(kind, M, xi) @ np.linalg.inv(V)


@lru_cache(maxsize=64)
def conv_weights(kind: BasisKind, M: int, delta: float, s: float, m_k: int, n_elements: int):
    """Integration weights for the windowed Fourier-kernel convolution.

    Returns ``(offsets, A_cos, A_sin)`` with ``A[m, j, n, n'] =
    int_{window(x_n) ∩ element j} trig(pi m (x_n - y) / s) l_{n'}(y) dy``
    where ``x_n`` is node ``n`` of element 0 and ``l_{n'}`` the cardinal
    functions of element ``j``. Integrals use Gauss-Legendre on each
    sub-interval, exact to rounding for the polynomial-times-trig integrand.
    """
    offsets = window_offsets(delta, s, n_elements)
    nodes, _ = quadrature_rule(kind, M)
    gx, gw = np.polynomial.legendre.leggauss(_GL_POINTS + M + 2 * m_k)
    A_cos = np.zeros((m_k, len(offsets), M, M))
    A_sin = np.zeros_like(A_cos)
    freq = np.pi * np.arange(m_k) / s
    for jj, j in enumerate(offsets):
        for n, xn in enumerate(nodes * delta):
            lo = max(j * delta, xn - s / 2)
            hi = min((j + 1) * delta, xn + s / 2)
            if hi <= lo:
                continue
            y = lo + (hi - lo) * (gx + 1) / 2
            w = gw * (hi - lo) / 2
            ell = cardinal_functions(kind, M, np.clip(y / delta - j, 0.0, 1.0))  # [q, n']
            phase = np.outer(freq, xn - y)  # [m, q]
            A_cos[:, jj, n, :] = (np.cos(phase) * w) @ ell
            A_sin[:, jj, n, :] = (np.sin(phase) * w) @ ell
    return offsets, A_cos, A_sin


def truncation_matrix(kind: BasisKind, M: int, k_max: int) -> np.ndarray:
    """Nodal (M nodes) -> nodal (k_max nodes) spectral cutoff, shape ``(k_max, M)``."""
    keep = truncation_indices(M, k_max)
    nodes_M, _ = quadrature_rule(kind, M)
    nodes_k, _ = quadrature_rule(kind, k_max)
    Vinv = np.linalg.inv(modal_vandermonde(kind, M, nodes_M))
    return modal_vandermonde(kind, k_max, nodes_k) @ Vinv[keep]


def upsample_matrix(kind: BasisKind, M: int, k_max: int) -> np.ndarray:
    """Exact evaluation of a k_max-node field at the M nodes, shape ``(M, k_max)``."""
    nodes_M, _ = quadrature_rule(kind, M)
    nodes_k, _ = quadrature_rule(kind, k_max)
    return modal_vandermonde(kind, k_max, nodes_M) @ np.linalg.inv(modal_vandermonde(kind, k_max, nodes_k))


def grid_to_nodes_matrix(mesh: SemMesh, axis: int, n_grid: int) -> np.ndarray:
    """``[N, M, n_grid]`` trigonometric interpolation onto element nodes.

    Interface nodes of neighbouring elements get identical rows.
    """
    N, M = mesh.elements[axis], mesh.modes
    coords = mesh.axis_coords(axis)[:, :-1].reshape(-1)
    T = trig_interp_matrix(n_grid, mesh.lengths[axis], coords)
    index = (np.arange(N)[:, None] * (M - 1) + np.arange(M)[None, :]) % (N * (M - 1))
    return T[index]


def nodes_to_grid_matrix(mesh: SemMesh, axis: int, n_grid: int) -> np.ndarray:
    """``[n_grid, N, M]`` evaluation of nodal element data on a uniform grid."""
    N, M = mesh.elements[axis], mesh.modes
    delta = mesh.cell_size[axis]
    x = np.arange(n_grid) * mesh.lengths[axis] / n_grid
    s = x / delta
    h = np.minimum(np.floor(s + 1e-12).astype(int), N - 1)
    xi = np.clip(s - h, 0.0, 1.0)
    out = np.zeros((n_grid, N, M))
    out[np.arange(n_grid), h] = cardinal_functions(mesh.kind, M, xi)
    return out


# ---------------------------------------------------------------------------
# torch application helpers
# ---------------------------------------------------------------------------


def apply_mode_matrix(u: torch.Tensor, mat: torch.Tensor, ndim: int) -> torch.Tensor:
    """Apply ``mat`` (``M_out x M_in``) along every node axis of ``[B, N.., M.., C]``."""
    for a in range(ndim):
        dim = 1 + ndim + a
        u = torch.movedim(torch.tensordot(u, mat, dims=([dim], [1])), -1, dim)
    return u


def apply_axis_transfer(x: torch.Tensor, mats: list[torch.Tensor], ndim: int, to_sem: bool) -> torch.Tensor:
    """Grid <-> element-node transfer, one axis at a time.

    ``to_sem``: ``[B, n.., C] -> [B, N.., M.., C]`` with ``mats[a]`` of shape ``[N, M, n]``.
    otherwise: ``[B, N.., M.., C] -> [B, n.., C]`` with ``mats[a]`` of shape ``[n, N, M]``.
    """
    D = ndim
    if to_sem:
        for a in range(D):
            # the next grid axis is always at position 1
            x = torch.tensordot(x, mats[a], dims=([1], [2]))
        # x: [B, C, N_1, M_1, .., N_D, M_D]
        perm = [0] + [2 + 2 * a for a in range(D)] + [3 + 2 * a for a in range(D)] + [1]
        return x.permute(perm)
    for a in range(D):
        # element axis for the current leading remaining axis sits at 1, node axis at 1 + (D - a)
        x = torch.tensordot(x, mats[a], dims=([1, 1 + D - a], [1, 2]))
    # x: [B, C, n_1, .., n_D]
    return torch.movedim(x, 1, -1)


def roll_gather(u: torch.Tensor, offsets, dim: int) -> torch.Tensor:
    """Stack ``u[h + j]`` (periodic) for each offset ``j``, new axis right after ``dim``."""
    return torch.stack([torch.roll(u, shifts=-int(j), dims=dim) for j in offsets], dim=dim + 1)

"""Spectral-element basis machinery on uniform periodic meshes.

Fields live on a tensor-product mesh of ``N_a`` elements per axis, each
mapped to the unit cube and carrying ``M`` collocation nodes per axis.
Nodal values at shared interfaces are stored once per element (duplicated)
and kept identical by :func:`enforce_continuity`.

Array layout for :class:`SemField` values is ``[N_1..N_D, M_1..M_D, C]``
(element multi-index, then node/mode multi-index, then channel).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
from scipy import special

__all__ = [
    "BasisKind",
    "SemMesh",
    "SemField",
    "GridField",
    "eval_orthopoly",
    "eval_modal_basis",
    "modal_vandermonde",
    "quadrature_rule",
    "nodal_modal_transform",
    "enforce_continuity",
    "max_interface_jump",
    "grid_to_sem",
    "sem_eval",
    "sem_to_grid",
    "les_truncate",
    "truncation_indices",
    "trig_interp_matrix",
]

_DOMAIN_SLACK = 1e-12
_MAX_CONDITION = 1e12


class BasisKind(enum.Enum):
    CHEBYSHEV = "chebyshev"
    LEGENDRE = "legendre"

    @classmethod
    def parse(cls, value: "BasisKind | str") -> "BasisKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


# ---------------------------------------------------------------------------
# 1D polynomials, bases and quadrature
# ---------------------------------------------------------------------------


def _check_unit(x: np.ndarray) -> np.ndarray:
    if np.any(x < -_DOMAIN_SLACK) or np.any(x > 1 + _DOMAIN_SLACK):
        raise ValueError("evaluation point outside [0, 1]")
    return np.clip(x, 0.0, 1.0)


def eval_orthopoly(kind: BasisKind | str, m: int, x):
    """Shifted Chebyshev ``T_m(2x-1)`` or shifted Legendre ``P_m(2x-1)`` on [0, 1]."""
    kind = BasisKind.parse(kind)
    if m < 0:
        raise ValueError(f"polynomial degree must be non-negative, got {m}")
    x = _check_unit(np.asarray(x, dtype=float))
    if kind is BasisKind.CHEBYSHEV:
        out = np.cos(m * np.arccos(2 * x - 1))
    else:
        out = special.eval_sh_legendre(m, x)
    return out if out.ndim else float(out)


def eval_modal_basis(kind: BasisKind | str, m: int, M: int, xi):
    """Evaluate the ``m``'th of ``M`` boundary-interior (p-type) modes at ``xi``.

    Mode 0 is ``1 - xi``, mode ``M-1`` is ``xi`` and the interior modes are
    bubbles ``(xi - xi**2) p_{m-1}(xi)`` that vanish at both ends.
    """
    if not 0 <= m < M:
        raise IndexError(f"mode index {m} out of range for basis size {M}")
    xi = _check_unit(np.asarray(xi, dtype=float))
    if m == 0:
        out = 1 - xi
    elif m == M - 1:
        out = xi.copy()
    else:
        out = (xi - xi * xi) * eval_orthopoly(kind, m - 1, xi)
    return out if np.ndim(out) else float(out)


def modal_vandermonde(kind: BasisKind | str, M: int, xi) -> np.ndarray:
    """Dense basis matrix ``V[i, m] = phi_m(xi_i)`` of shape ``(len(xi), M)``."""
    kind = BasisKind.parse(kind)
    xi = _check_unit(np.atleast_1d(np.asarray(xi, dtype=float)))
    V = np.empty((xi.size, M))
    V[:, 0] = 1 - xi
    V[:, M - 1] = xi
    bubble = xi - xi * xi
    for m in range(1, M - 1):
        V[:, m] = bubble * eval_orthopoly(kind, m - 1, xi)
    return V


@lru_cache(maxsize=None)
def _clenshaw_curtis(M: int) -> tuple[np.ndarray, np.ndarray]:
    n = M - 1
    theta = np.pi * np.arange(M) / n
    x = np.cos(theta)  # decreasing on [-1, 1]
    w = np.zeros(M)
    v = np.ones(n - 1)
    interior = slice(1, n)
    if n % 2 == 0:
        w[0] = w[n] = 1.0 / (n * n - 1)
        for k in range(1, n // 2):
            v -= 2 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
        v -= np.cos(n * theta[interior]) / (n * n - 1)
    else:
        w[0] = w[n] = 1.0 / (n * n)
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
    w[interior] = 2 * v / n
    nodes = (1 - x) / 2  # increasing on [0, 1]
    return nodes, w / 2


@lru_cache(maxsize=None)
def _gauss_lobatto_legendre(M: int) -> tuple[np.ndarray, np.ndarray]:
    n = M - 1
    # Chebyshev-Lobatto initial guess, Newton on (1 - x^2) P_n'(x)
    x = -np.cos(np.pi * np.arange(M) / n)
    for _ in range(100):
        P = special.eval_legendre(n, x)
        Pm = special.eval_legendre(n - 1, x)
        # (1-x^2) P_n' = n (P_{n-1} - x P_n); its derivative is -n(n+1) P_n
        f = n * (Pm - x * P)
        df = -n * (n + 1) * P
        dx = np.zeros_like(x)
        dx[1:-1] = f[1:-1] / df[1:-1]
        x = x - dx
        if np.max(np.abs(dx)) < 1e-16:
            break
    x[0], x[-1] = -1.0, 1.0
    w = 2.0 / (n * (n + 1) * special.eval_legendre(n, x) ** 2)
    return (x + 1) / 2, w / 2


def quadrature_rule(kind: BasisKind | str, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Lobatto-type nodes and weights on [0, 1].

    Chebyshev bases use Clenshaw-Curtis (Chebyshev-Gauss-Lobatto points),
    Legendre bases use Gauss-Lobatto-Legendre. Weights sum to one.
    """
    if M < 3:
        raise ValueError(f"need at least 3 nodes, got {M}")
    kind = BasisKind.parse(kind)
    rule = _clenshaw_curtis if kind is BasisKind.CHEBYSHEV else _gauss_lobatto_legendre
    nodes, weights = rule(M)
    return nodes.copy(), weights.copy()


# ---------------------------------------------------------------------------
# Mesh and field containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemMesh:
    """Uniform periodic spectral-element mesh."""

    elements: tuple[int, ...]
    modes: int
    lengths: tuple[float, ...]
    kind: BasisKind = BasisKind.LEGENDRE

    def __post_init__(self):
        elements = tuple(int(n) for n in np.broadcast_to(self.elements, (len(self.lengths),)))
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "lengths", tuple(float(L) for L in self.lengths))
        object.__setattr__(self, "kind", BasisKind.parse(self.kind))
        if self.ndim not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {self.ndim}")
        if any(n < 1 for n in self.elements):
            raise ValueError("element counts must be positive")
        if self.modes < 3:
            raise ValueError("basis size must be at least 3")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("domain lengths must be positive")

    @classmethod
    def uniform(cls, ndim: int, elements: int, modes: int, length: float = 2 * np.pi,
                kind: BasisKind | str = BasisKind.LEGENDRE) -> "SemMesh":
        return cls((elements,) * ndim, modes, (length,) * ndim, BasisKind.parse(kind))

    @property
    def ndim(self) -> int:
        return len(self.lengths)

    @property
    def periodic(self) -> tuple[bool, ...]:
        return (True,) * self.ndim

    @property
    def cell_size(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.elements))

    @cached_property
    def _rule(self):
        return quadrature_rule(self.kind, self.modes)

    @property
    def nodes(self) -> np.ndarray:
        return self._rule[0]

    @property
    def weights(self) -> np.ndarray:
        return self._rule[1]

    def axis_coords(self, axis: int) -> np.ndarray:
        """Global coordinates ``h*Delta + xi_n*Delta`` with shape ``(N_a, M)``."""
        delta = self.cell_size[axis]
        h = np.arange(self.elements[axis])[:, None]
        return h * delta + self.nodes[None, :] * delta

    def coords(self) -> np.ndarray:
        """Global coordinates of every collocation point, ``[N.., M.., D]``."""
        D = self.ndim
        out = np.empty(self.elements + (self.modes,) * D + (D,))
        for a in range(D):
            c = self.axis_coords(a)
            shape = [1] * (2 * D)
            shape[a], shape[D + a] = self.elements[a], self.modes
            out[..., a] = c.reshape(shape)
        return out

    def value_shape(self, channels: int) -> tuple[int, ...]:
        return self.elements + (self.modes,) * self.ndim + (channels,)

    def with_modes(self, modes: int) -> "SemMesh":
        return replace(self, modes=modes)

    def with_elements(self, elements: Sequence[int] | int) -> "SemMesh":
        return replace(self, elements=tuple(np.broadcast_to(elements, (self.ndim,))))

    def tiled(self, factor: int) -> "SemMesh":
        """Mesh covering a domain ``factor`` times larger with the same cell size."""
        return SemMesh(tuple(n * factor for n in self.elements), self.modes,
                       tuple(L * factor for L in self.lengths), self.kind)

    @cached_property
    def vandermonde(self) -> np.ndarray:
        return modal_vandermonde(self.kind, self.modes, self.nodes)

    @cached_property
    def vandermonde_inv(self) -> np.ndarray:
        V = self.vandermonde
        if np.linalg.cond(V) > _MAX_CONDITION:
            raise np.linalg.LinAlgError("nodal-modal Vandermonde matrix is numerically singular")
        return np.linalg.inv(V)


@dataclass
class SemField:
    mesh: SemMesh
    values: np.ndarray
    representation: str = "nodal"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.representation not in ("nodal", "modal"):
            raise ValueError(f"unknown representation {self.representation!r}")
        expected = self.mesh.value_shape(self.values.shape[-1] if self.values.ndim else 0)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} does not match mesh {expected}")

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values: np.ndarray, representation: str | None = None) -> "SemField":
        return SemField(self.mesh, values, representation or self.representation)


@dataclass
class GridField:
    """Snapshot on a uniform periodic grid, values ``[n_1..n_D, C]``."""

    values: np.ndarray
    lengths: tuple[float, ...]
    time: float = 0.0
    channels: str = "velocity"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.lengths = tuple(float(L) for L in self.lengths)
        if self.values.ndim != len(self.lengths) + 1:
            raise ValueError("grid values must be [n_1..n_D, C]")
        if any(n < 4 for n in self.values.shape[:-1]):
            raise ValueError("grid resolution must be at least 4 per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def ndim(self) -> int:
        return len(self.lengths)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    def coords(self, axis: int) -> np.ndarray:
        return np.arange(self.shape[axis]) * self.spacing[axis]


# ---------------------------------------------------------------------------
# Per-axis linear operators on the [N.., M.., C] layout
# ---------------------------------------------------------------------------


def _apply_mode_matrix(values: np.ndarray, mats: Sequence[np.ndarray], ndim: int) -> np.ndarray:
    """Apply ``mats[a]`` (shape ``M_out x M_in``) along each mode axis."""
    out = values
    for a, A in enumerate(mats):
        ax = ndim + a
        out = np.moveaxis(np.tensordot(A, out, axes=([1], [ax])), 0, ax)
    return out


def nodal_modal_transform(f: SemField, direction: str) -> SemField:
    """Change between nodal values and modal coefficients, axis by axis."""
    if direction == "to_modal":
        if f.representation != "nodal":
            raise ValueError("field is not nodal")
        A = f.mesh.vandermonde_inv
    elif direction == "to_nodal":
        if f.representation != "modal":
            raise ValueError("field is not modal")
        A = f.mesh.vandermonde
    else:
        raise ValueError(f"unknown direction {direction!r}")
    D = f.mesh.ndim
    out = _apply_mode_matrix(f.values, [A] * D, D)
    return f.with_values(out, "modal" if direction == "to_modal" else "nodal")


def _as_modal(f: SemField) -> SemField:
    return f if f.representation == "modal" else nodal_modal_transform(f, "to_modal")


def _as_nodal(f: SemField) -> SemField:
    return f if f.representation == "nodal" else nodal_modal_transform(f, "to_nodal")


def enforce_continuity(f: SemField) -> SemField:
    """Average duplicated interface nodes so periodically adjacent copies agree exactly."""
    f = _as_nodal(f)
    D = f.mesh.ndim
    v = f.values.copy()
    for a in range(D):
        e_ax, m_ax = a, D + a
        right = np.take(v, [-1], axis=m_ax)
        left = np.roll(np.take(v, [0], axis=m_ax), -1, axis=e_ax)
        mean = 0.5 * (right + left)
        idx = [slice(None)] * v.ndim
        idx[m_ax] = slice(-1, None)
        v[tuple(idx)] = mean
        idx[m_ax] = slice(0, 1)
        v[tuple(idx)] = np.roll(mean, 1, axis=e_ax)
    return f.with_values(v)


def max_interface_jump(f: SemField) -> float:
    f = _as_nodal(f)
    D = f.mesh.ndim
    jump = 0.0
    for a in range(D):
        right = np.take(f.values, -1, axis=D + a)
        left = np.roll(np.take(f.values, 0, axis=D + a), -1, axis=a)
        jump = max(jump, float(np.max(np.abs(right - left))))
    return jump


# ---------------------------------------------------------------------------
# Grid <-> SEM
# ---------------------------------------------------------------------------


def trig_interp_matrix(n: int, length: float, x: np.ndarray) -> np.ndarray:
    """Matrix mapping ``n`` periodic samples to their trigonometric interpolant at ``x``.

    The Nyquist mode (even ``n``) is interpolated as a cosine so the result is real.
    """
    x = np.asarray(x, dtype=float)
    k = np.arange(n // 2 + 1)
    c = np.full(k.size, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0
    coef = np.fft.rfft(np.eye(n), axis=0)  # [k, j]
    phase = np.exp(2j * np.pi * np.outer(x, k) / length) * c / n
    return (phase @ coef).real


def _unique_axis_index(mesh: SemMesh, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Unique (non-duplicated) coordinates on an axis and the element-node gather index."""
    N, M = mesh.elements[axis], mesh.modes
    coords = mesh.axis_coords(axis)[:, :-1].reshape(-1)
    h = np.arange(N)[:, None]
    n = np.arange(M)[None, :]
    index = (h * (M - 1) + n) % (N * (M - 1))
    return coords, index


def _gather_nodes(unique_vals: np.ndarray, mesh: SemMesh) -> np.ndarray:
    """Scatter values on unique nodes ``[U_1..U_D, C]`` into the element layout."""
    D = mesh.ndim
    out = unique_vals
    for a in range(D):
        _, index = _unique_axis_index(mesh, a)
        # axis 2a holds the unique nodes of axis a; expand into (N_a, M)
        out = np.take(out, index, axis=2 * a)
    # layout is now [N_1, M_1, N_2, M_2, .., C]
    perm = [2 * a for a in range(D)] + [2 * a + 1 for a in range(D)] + [2 * D]
    return out.transpose(perm)


def grid_to_sem(g: GridField, mesh: SemMesh) -> SemField:
    """Trigonometric interpolation of a periodic grid at every collocation point."""
    if g.ndim != mesh.ndim or not np.allclose(g.lengths, mesh.lengths, rtol=1e-12, atol=0):
        raise ValueError(f"grid domain {g.lengths} does not match mesh domain {mesh.lengths}")
    vals = g.values
    for a in range(mesh.ndim):
        coords, _ = _unique_axis_index(mesh, a)
        T = trig_interp_matrix(g.shape[a], mesh.lengths[a], coords)
        vals = np.moveaxis(np.tensordot(T, vals, axes=([1], [a])), 0, a)
    return SemField(mesh, _gather_nodes(vals, mesh), "nodal")


def _locate(mesh: SemMesh, x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Element index and local coordinate of global positions along one axis."""
    delta = mesh.cell_size[axis]
    N = mesh.elements[axis]
    s = np.mod(np.asarray(x, dtype=float), mesh.lengths[axis]) / delta
    # positions that round onto the right end of the domain stay in the last element
    h = np.minimum(np.floor(s).astype(int), N - 1)
    return h, np.clip(s - h, 0.0, 1.0)


def _axis_eval_matrix(mesh: SemMesh, axis: int, x: np.ndarray, modes: int | None = None) -> np.ndarray:
    """``B[p, h, m]`` evaluating modal coefficients of axis ``axis`` at points ``x``."""
    M = modes or mesh.modes
    h, xi = _locate(mesh, x, axis)
    B = np.zeros((len(h), mesh.elements[axis], M))
    B[np.arange(len(h)), h, :] = modal_vandermonde(mesh.kind, M, xi)
    return B


def sem_eval(f: SemField, points) -> np.ndarray:
    """Evaluate the expansion at global coordinates ``points`` of shape ``[P, D]``."""
    mod = _as_modal(f)
    mesh, D = f.mesh, f.mesh.ndim
    points = np.atleast_2d(np.asarray(points, dtype=float))
    located = [_locate(mesh, points[:, a], a) for a in range(D)]
    basis = [modal_vandermonde(mesh.kind, mesh.modes, xi) for _, xi in located]
    elem = tuple(h for h, _ in located)
    coef = mod.values[elem]  # [P, M.., C]
    for a in range(D):
        # contract the leading mode axis with the per-point basis values
        coef = np.einsum("pm...,pm->p...", coef, basis[a])
    return coef


def sem_to_grid(f: SemField, resolution: Sequence[int] | int, time: float = 0.0,
                channels: str = "velocity") -> GridField:
    """Render the expansion on a uniform periodic grid."""
    mesh, D = f.mesh, f.mesh.ndim
    res = tuple(int(r) for r in np.broadcast_to(resolution, (D,)))
    if any(r < 2 for r in res):
        raise ValueError("grid resolution must be at least 2 per axis")
    arr = _as_modal(f).values
    for a in range(D):
        x = np.arange(res[a]) * mesh.lengths[a] / res[a]
        B = _axis_eval_matrix(mesh, a, x)
        arr = np.tensordot(arr, B, axes=([0, D - a], [1, 2]))
    arr = np.moveaxis(arr, 0, -1)
    return GridField(arr, mesh.lengths, time, channels)


# ---------------------------------------------------------------------------
# LES spectral cutoff
# ---------------------------------------------------------------------------


def truncation_indices(M: int, k_max: int) -> np.ndarray:
    """Modal indices kept by the cutoff: ``0..k_max-2`` and the right boundary mode."""
    if not 3 <= k_max < M:
        raise ValueError(f"k_max must satisfy 3 <= k_max < {M}, got {k_max}")
    return np.r_[np.arange(k_max - 1), M - 1]


def les_truncate(f: SemField, k_max: int) -> SemField:
    """Keep the two boundary modes and the first interior modes, ``k_max`` per axis."""
    keep = truncation_indices(f.mesh.modes, k_max)
    D = f.mesh.ndim
    coef = _as_modal(f).values
    for a in range(D):
        coef = np.take(coef, keep, axis=D + a)
    out = SemField(f.mesh.with_modes(k_max), coef, "modal")
    return out if f.representation == "modal" else _as_nodal(out)

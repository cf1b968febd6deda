"""Spectral elements from the ground up.

Walks through the pieces the transformer is built on:

1. Lobatto quadrature on one element and the exactness it buys.
2. Moving a periodic grid field onto an element mesh and back.
3. Keeping only the first few modes of every element (the coarse stream).
4. A windowed convolution evaluated directly on the element polynomials.

Run: python demos/01_spectral_elements.py
"""

import math

import numpy as np

from turbsem.basis import GridField, SemMesh, grid_to_sem, les_truncate, max_interface_jump, quadrature_rule, sem_to_grid
from turbsem.model import sem_conv


def quadrature():
    print("== quadrature on [0, 1] ==")
    for kind, exact_to in (("chebyshev", lambda M: M - 1), ("legendre", lambda M: 2 * M - 3)):
        x, w = quadrature_rule(kind, 8)
        d = exact_to(8)
        err_ok = abs(w @ x**d - 1 / (d + 1))
        err_next = abs(w @ x ** (d + 1) - 1 / (d + 2))
        print(f"{kind:9s} M=8: degree {d} error {err_ok:.1e}, degree {d + 1} error {err_next:.1e}")


def round_trip():
    print("\n== grid -> elements -> grid ==")
    n = 64
    x = np.arange(n) * 2 * math.pi / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = (np.sin(2 * X) * np.cos(3 * Y) + 0.3 * np.cos(7 * X + Y))[..., None]
    for M in (6, 10, 16):
        mesh = SemMesh.uniform(2, 8, M)
        back = sem_to_grid(grid_to_sem(GridField(u, mesh.lengths), mesh), n).values
        print(f"8x8 elements, {M:2d} nodes per axis: relative error {np.linalg.norm(back - u) / np.linalg.norm(u):.1e}")
    return u


def coarse_stream(u):
    print("\n== per-element mode truncation ==")
    mesh = SemMesh.uniform(2, 8, 12)
    f = grid_to_sem(GridField(u, mesh.lengths), mesh)
    n = u.shape[0]
    for k in (3, 4, 6, 9):
        g = sem_to_grid(les_truncate(f, k), n).values
        err = np.linalg.norm(g - u) / np.linalg.norm(u)
        print(f"k_max={k}: {k}x{k} nodes per element, relative distance to the full field {err:.3f}")
    print(f"largest jump across element interfaces after truncation: {max_interface_jump(les_truncate(f, 4)):.1e}")


def convolution():
    print("\n== windowed convolution ==")
    mesh = SemMesh.uniform(1, 8, 12)
    n = 128
    x = np.arange(n) * 2 * math.pi / n
    f = grid_to_sem(GridField(np.sin(3 * x)[:, None], mesh.lengths), mesh)
    s = math.pi / 2
    # a constant kernel averages over the window: output = s * sinc-weighted input
    kern = np.zeros((1, 1, 1, 1), complex)
    kern[0, 0, 0, 0] = 1.0
    out = sem_to_grid(sem_conv(f, kern, s), n).values[:, 0]
    exact = np.sin(3 * x) * 2 * np.sin(3 * s / 2) / 3
    print(f"box filter of width pi/2 applied to sin(3x): max error vs analytic {np.abs(out - exact).max():.1e}")


if __name__ == "__main__":
    quadrature()
    coarse_stream(round_trip())
    convolution()

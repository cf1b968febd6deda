import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbsem.basis import (
    BasisKind,
    GridField,
    SemField,
    SemMesh,
    enforce_continuity,
    eval_modal_basis,
    eval_orthopoly,
    grid_to_sem,
    les_truncate,
    max_interface_jump,
    modal_vandermonde,
    nodal_modal_transform,
    quadrature_rule,
    sem_eval,
    sem_to_grid,
)

KINDS = [BasisKind.CHEBYSHEV, BasisKind.LEGENDRE]


def shifted_legendre_mp(m, x):
    """Three-term recurrence at 50 digits, independent of scipy."""
    mpmath.mp.dps = 50
    t = 2 * mpmath.mpf(x) - 1
    p0, p1 = mpmath.mpf(1), t
    if m == 0:
        return p0
    for n in range(1, m):
        p0, p1 = p1, ((2 * n + 1) * t * p1 - n * p0) / (n + 1)
    return p1


def random_field(mesh, channels, rng, continuous=True):
    f = SemField(mesh, rng.normal(size=mesh.value_shape(channels)))
    return enforce_continuity(f) if continuous else f


# -- polynomials and bases ------------------------------------------------------


def test_orthopoly_examples():
    assert eval_orthopoly(BasisKind.CHEBYSHEV, 2, 0.5) == pytest.approx(-1.0, abs=1e-15)
    assert eval_orthopoly("legendre", 1, 1.0) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("m", [0, 1, 4, 9, 15])
def test_legendre_matches_recurrence(m):
    for x in (0.0, 0.37, 0.5, 0.91, 1.0):
        assert eval_orthopoly("legendre", m, x) == pytest.approx(float(shifted_legendre_mp(m, x)), abs=1e-12)


def test_orthopoly_domain_error():
    with pytest.raises(ValueError):
        eval_orthopoly("chebyshev", 3, 1.0 + 1e-9)
    eval_orthopoly("chebyshev", 3, 1.0 + 1e-13)


@given(st.integers(0, 30), st.floats(0, 1))
def test_chebyshev_bounded(m, x):
    assert abs(eval_orthopoly("chebyshev", m, x)) <= 1 + 1e-14


def test_modal_basis_examples():
    assert eval_modal_basis("legendre", 0, 13, 0.3) == pytest.approx(0.7)
    assert eval_modal_basis("chebyshev", 12, 13, 0.3) == pytest.approx(0.3)
    for m in range(1, 12):
        assert eval_modal_basis("chebyshev", m, 13, 0.0) == 0.0
        assert eval_modal_basis("legendre", m, 13, 1.0) == 0.0
    assert eval_modal_basis("chebyshev", 2, 13, 0.25) == pytest.approx(-0.09375, abs=1e-15)
    with pytest.raises(IndexError):
        eval_modal_basis("legendre", 13, 13, 0.5)


# -- quadrature -------------------------------------------------------------------


def test_gll_three_points():
    x, w = quadrature_rule("legendre", 3)
    np.testing.assert_allclose(x, [0, 0.5, 1], atol=1e-15)
    np.testing.assert_allclose(w, [1 / 6, 2 / 3, 1 / 6], atol=1e-15)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("M", range(3, 33))
def test_quadrature_exactness(kind, M):
    x, w = quadrature_rule(kind, M)
    assert x[0] == 0 and x[-1] == 1 and np.all(np.diff(x) > 0)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    degree = M - 1 if kind is BasisKind.CHEBYSHEV else 2 * M - 3
    for p in range(degree + 1):
        assert abs(w @ x**p - 1 / (p + 1)) <= 1e-12


def test_gll_degree_13():
    x, w = quadrature_rule("legendre", 8)
    assert abs(w @ x**13 - 1 / 14) < 1e-13


# -- transforms -------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_constant_field_modal(kind):
    mesh = SemMesh.uniform(2, 3, 7, kind=kind)
    f = SemField(mesh, np.ones(mesh.value_shape(1)))
    coef = nodal_modal_transform(f, "to_modal").values[..., 0]
    corners = np.zeros((7, 7), dtype=bool)
    corners[np.ix_([0, 6], [0, 6])] = True
    np.testing.assert_allclose(coef[..., corners], 1.0, atol=1e-13)
    np.testing.assert_allclose(coef[..., ~corners], 0.0, atol=1e-13)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("ndim", [1, 2, 3])
def test_nodal_modal_round_trip(kind, ndim):
    rng = np.random.default_rng(1)
    mesh = SemMesh.uniform(ndim, 3, 9, kind=kind)
    f = random_field(mesh, 2, rng, continuous=False)
    back = nodal_modal_transform(nodal_modal_transform(f, "to_modal"), "to_nodal")
    np.testing.assert_allclose(back.values, f.values, atol=1e-12)


def test_modal_matches_dense_solve():
    rng = np.random.default_rng(2)
    mesh = SemMesh.uniform(2, 2, 6, kind="chebyshev")
    f = random_field(mesh, 1, rng, continuous=False)
    coef = nodal_modal_transform(f, "to_modal").values
    V = modal_vandermonde(mesh.kind, 6, mesh.nodes)
    big = np.kron(V, V)  # dense tensor-product basis at the 2D nodes
    for h in np.ndindex(2, 2):
        ref, *_ = np.linalg.lstsq(big, f.values[h].reshape(-1), rcond=None)
        np.testing.assert_allclose(coef[h].reshape(-1), ref, atol=1e-12)


def test_wrong_direction_rejected():
    mesh = SemMesh.uniform(1, 2, 4)
    f = SemField(mesh, np.zeros(mesh.value_shape(1)))
    with pytest.raises(ValueError):
        nodal_modal_transform(f, "to_nodal")


def test_continuity_enforcement():
    rng = np.random.default_rng(3)
    mesh = SemMesh.uniform(3, 3, 5)
    f = SemField(mesh, rng.normal(size=mesh.value_shape(2)))
    assert max_interface_jump(f) > 0
    g = enforce_continuity(f)
    assert max_interface_jump(g) == 0.0


def test_mesh_coordinates():
    mesh = SemMesh.uniform(2, 4, 5, length=2.0)
    c = mesh.axis_coords(0)
    np.testing.assert_allclose(c[2], 2 * 0.5 + mesh.nodes * 0.5)
    assert mesh.coords().shape == (4, 4, 5, 5, 2)


# -- grid <-> SEM -------------------------------------------------------------------


def test_constant_grid():
    mesh = SemMesh.uniform(2, 4, 6)
    g = GridField(np.full((16, 16, 1), 2.5), mesh.lengths)
    f = grid_to_sem(g, mesh)
    np.testing.assert_allclose(f.values, 2.5, atol=1e-13)
    np.testing.assert_allclose(sem_to_grid(f, 9).values, 2.5, atol=1e-13)


def test_grid_domain_mismatch():
    mesh = SemMesh.uniform(1, 4, 6)
    with pytest.raises(ValueError):
        grid_to_sem(GridField(np.zeros((8, 1)), (1.0,)), mesh)


@pytest.mark.parametrize("kind", KINDS)
def test_sine_interpolation(kind):
    mesh = SemMesh.uniform(1, 8, 12, kind=kind)
    x = np.arange(64) * 2 * np.pi / 64
    f = grid_to_sem(GridField(np.sin(3 * x)[:, None], mesh.lengths), mesh)
    assert max_interface_jump(f) == 0.0
    exact = np.sin(3 * mesh.coords())[..., 0]
    err = np.linalg.norm(f.values[..., 0] - exact) / np.linalg.norm(exact)
    assert err < 1e-10
    # dense evaluation between nodes is polynomial-accurate
    xs = np.linspace(0, 2 * np.pi, 301)[:, None]
    assert np.max(np.abs(sem_eval(f, xs)[:, 0] - np.sin(3 * xs[:, 0]))) < 1e-8


@pytest.mark.parametrize("kind", KINDS)
def test_band_limited_round_trip(kind):
    mesh = SemMesh.uniform(2, 8, 20, kind=kind)
    n = 64
    x = np.arange(n) * 2 * np.pi / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = (np.sin(2 * X) + np.cos(5 * Y))[..., None]
    g2 = sem_to_grid(grid_to_sem(GridField(u, mesh.lengths), mesh), n)
    assert np.linalg.norm(g2.values - u) / np.linalg.norm(u) < 1e-8


def test_export_import_fixed_point():
    rng = np.random.default_rng(4)
    mesh = SemMesh.uniform(2, 4, 14)
    n = 48
    x = np.arange(n) * 2 * np.pi / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = sum(rng.normal() * np.cos(kx * X + ky * Y + rng.uniform(0, 2 * np.pi))
            for kx in range(-4, 5) for ky in range(-4, 5))
    f = grid_to_sem(GridField(u[..., None], mesh.lengths), mesh)
    f1 = grid_to_sem(sem_to_grid(f, 128), mesh)
    f2 = grid_to_sem(sem_to_grid(f1, 128), mesh)
    assert np.linalg.norm(f2.values - f1.values) / np.linalg.norm(f1.values) < 1e-8


def test_sem_eval_at_nodes_and_constant():
    rng = np.random.default_rng(5)
    mesh = SemMesh.uniform(2, 3, 6, length=3.0)
    f = random_field(mesh, 2, rng)
    pts = mesh.coords().reshape(-1, 2)
    vals = sem_eval(f, pts)
    np.testing.assert_allclose(vals, f.values.reshape(-1, 2), atol=1e-12)
    const = SemField(mesh, np.full(mesh.value_shape(1), -1.25))
    np.testing.assert_allclose(sem_eval(const, rng.uniform(0, 3, (50, 2))), -1.25, atol=1e-13)


@pytest.mark.parametrize("kind", KINDS)
def test_sem_eval_matches_direct_sum(kind):
    rng = np.random.default_rng(6)
    mesh = SemMesh((3, 2), 5, (2.0, 1.5), kind)
    coef = rng.normal(size=mesh.value_shape(1))
    f = SemField(mesh, coef, "modal")
    pts = rng.uniform(0, 1, (100, 2)) * np.array(mesh.lengths)
    got = sem_eval(f, pts)[:, 0]
    ref = np.zeros(100)
    for i, (x, y) in enumerate(pts):
        hx, hy = int(x // mesh.cell_size[0]), int(y // mesh.cell_size[1])
        xi, eta = x / mesh.cell_size[0] - hx, y / mesh.cell_size[1] - hy
        for p in range(5):
            for q in range(5):
                ref[i] += coef[hx, hy, p, q, 0] * eval_modal_basis(kind, p, 5, xi) * eval_modal_basis(kind, q, 5, eta)
    np.testing.assert_allclose(got, ref, atol=1e-12)


# -- LES truncation -----------------------------------------------------------------


def test_truncate_preserves_linear_ramps():
    mesh = SemMesh.uniform(1, 4, 9)
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 4))
    coef = np.zeros(mesh.value_shape(1))
    coef[:, 0, 0], coef[:, -1, 0] = a, b
    f = SemField(mesh, coef, "modal")
    for k in (3, 5, 8):
        t = les_truncate(f, k)
        xs = rng.uniform(0, 2 * np.pi, (40, 1))
        np.testing.assert_allclose(sem_eval(t, xs), sem_eval(f, xs), atol=1e-13)


@pytest.mark.parametrize("kind", KINDS)
def test_truncate_matches_coefficient_zeroing(kind):
    rng = np.random.default_rng(8)
    mesh = SemMesh.uniform(2, 2, 13, kind=kind)
    f = random_field(mesh, 2, rng)
    coef = nodal_modal_transform(f, "to_modal").values.copy()
    keep = np.r_[0:4, 12]
    drop = np.setdiff1d(np.arange(13), keep)
    coef[:, :, drop] = 0
    coef[:, :, :, drop] = 0
    oracle = SemField(mesh, coef, "modal")
    t = les_truncate(f, 5)
    assert t.mesh.modes == 5
    pts = rng.uniform(0, 2 * np.pi, (200, 2))
    np.testing.assert_allclose(sem_eval(t, pts), sem_eval(oracle, pts), atol=1e-12)


def test_truncate_idempotent_and_continuous():
    rng = np.random.default_rng(9)
    mesh = SemMesh.uniform(2, 3, 10)
    f = random_field(mesh, 1, rng)
    once = les_truncate(f, 4)
    assert max_interface_jump(once) < 1e-12
    lifted = SemField(mesh, np.zeros(mesh.value_shape(1)), "modal")
    c = lifted.values
    keep = np.r_[0:3, 9]
    c[np.ix_(range(3), range(3), keep, keep)] = nodal_modal_transform(once, "to_modal").values
    twice = nodal_modal_transform(les_truncate(lifted, 4), "to_nodal")
    np.testing.assert_allclose(twice.values, once.values, atol=1e-12)


def test_truncate_commutes_with_channel_maps():
    rng = np.random.default_rng(10)
    mesh = SemMesh.uniform(2, 2, 8)
    f = random_field(mesh, 3, rng)
    W = rng.normal(size=(3, 2))
    a = les_truncate(f.with_values(f.values @ W), 5).values
    b = les_truncate(f, 5).values @ W
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_truncate_range():
    mesh = SemMesh.uniform(1, 2, 6)
    f = SemField(mesh, np.zeros(mesh.value_shape(1)))
    for bad in (2, 6, 7):
        with pytest.raises(ValueError):
            les_truncate(f, bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(KINDS), st.integers(4, 9))
def test_operations_keep_continuity(seed, kind, M):
    rng = np.random.default_rng(seed)
    mesh = SemMesh.uniform(2, 3, M, kind=kind)
    f = random_field(mesh, 1, rng)
    assert max_interface_jump(nodal_modal_transform(nodal_modal_transform(f, "to_modal"), "to_nodal")) < 1e-11
    assert max_interface_jump(les_truncate(f, 3)) < 1e-11

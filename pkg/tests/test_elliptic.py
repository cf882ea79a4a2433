import numpy as np
import pytest

from heatflow.elliptic import (hodge_decompose, poisson_dirichlet,
                               psi_energy_density, solve_interior, wente_solve)
from heatflow.errors import UsageError
from heatflow.mesh import (CellVectorField, Field, gradient, interpolate,
                           norms, perp_gradient)

from conftest import stereographic


def test_poisson_zero_rhs(mesh3):
    sol = poisson_dirichlet(np.zeros(mesh3.n_triangles), mesh=mesh3)
    assert np.abs(sol.psi.values).max() <= 1e-14


def test_poisson_constant_rhs(mesh3):
    # Laplace(r^2 - 1) = 4 with zero trace: psi(0) -> -1 at O(h^2)
    sol = poisson_dirichlet(np.full(mesh3.n_triangles, 4.0), mesh=mesh3)
    center = int(np.argmin((mesh3.vertices ** 2).sum(axis=1)))
    assert abs(sol.psi.values[center] + 1.0) <= 3.0 * mesh3.h ** 2
    assert np.abs(sol.psi.values[mesh3.boundary_idx]).max() == 0.0


def test_poisson_manufactured_convergence(mesh_at):
    # psi* = (1 - r^2) x  =>  f = Laplace(psi*) = -8x
    errs = []
    for r in (2, 3, 4, 5):
        m = mesh_at(r)
        exact = interpolate(m, lambda x, y: (1 - x * x - y * y) * x)
        sol = poisson_dirichlet(interpolate(m, lambda x, y: -8.0 * x))
        errs.append(norms(Field(m, sol.psi.values - exact.values))["L2"])
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() >= 1.8


def test_poisson_maximum_principle(mesh3):
    rng = np.random.default_rng(21)
    for _ in range(5):
        f = rng.uniform(0.0, 2.0, mesh3.n_triangles)
        sol = poisson_dirichlet(f, mesh=mesh3)
        assert sol.psi.values.max() <= 1e-12


def test_poisson_residual_reported(mesh2):
    sol = poisson_dirichlet(np.ones(mesh2.n_triangles), mesh=mesh2)
    assert sol.diagnostics["residual_rel"] <= 1e-11


def test_iterative_matches_dense_direct(mesh_at):
    for r in (1, 2):
        m = mesh_at(r)
        rng = np.random.default_rng(r)
        load = rng.standard_normal(m.n_vertices)
        x_cg, _ = solve_interior(m, load, method="cg")
        x_dn, _ = solve_interior(m, load, method="dense")
        scale = max(np.abs(x_dn).max(), 1e-30)
        assert np.abs(x_cg - x_dn).max() <= 1e-10 * scale


def test_wente_degenerate(mesh2):
    a = interpolate(mesh2, lambda x, y: np.full_like(x, 2.0))
    b = interpolate(mesh2, lambda x, y: x)
    res = wente_solve(a, b)
    assert res.degenerate
    assert res.ratio == 0.0
    assert np.abs(res.w.values).max() == 0.0


def test_wente_closed_form(mesh3):
    # a=x, b=y: Laplace(w) = -1, w = (1-r^2)/4, w(0) = 1/4,
    # ratio = (1/4) / (sqrt(pi) sqrt(pi))
    a = interpolate(mesh3, lambda x, y: x)
    b = interpolate(mesh3, lambda x, y: y)
    res = wente_solve(a, b)
    center = int(np.argmin((mesh3.vertices ** 2).sum(axis=1)))
    assert abs(res.w.values[center] - 0.25) <= 3.0 * mesh3.h ** 2
    assert abs(res.ratio - 0.25 / np.pi) <= 2e-3


def test_wente_neumann_mean_zero(mesh3):
    a = interpolate(mesh3, lambda x, y: np.sin(2 * x) + y)
    b = interpolate(mesh3, lambda x, y: x * y + np.cos(y))
    res = wente_solve(a, b, bc="neumann-zero")
    mean = (mesh3.lumped_mass * res.w.values).sum()
    assert abs(mean) <= 1e-12 * max(1.0, np.abs(res.w.values).max())
    with pytest.raises(UsageError):
        wente_solve(a, b, bc="robin")


def _random_smooth_pair(mesh, rng):
    c = rng.standard_normal(6) * 0.5
    return interpolate(mesh, lambda x, y: c[0] * x + c[1] * y + c[2] * x * y
                       + c[3] * np.sin(2 * x) + c[4] * np.cos(2 * y)
                       + c[5] * x * x)


def test_wente_family_bounded_and_stable(mesh_at):
    rng = np.random.default_rng(17)
    ratios3 = []
    pairs = [( _random_smooth_pair(mesh_at(3), rng),
               _random_smooth_pair(mesh_at(3), rng)) for _ in range(20)]
    for a, b in pairs:
        ratios3.append(wente_solve(a, b).ratio)
    sup3 = max(ratios3)
    assert sup3 <= 0.2
    # same coefficient draws on the finer mesh
    rng = np.random.default_rng(17)
    ratios4 = []
    for _ in range(20):
        a = _random_smooth_pair(mesh_at(4), rng)
        b = _random_smooth_pair(mesh_at(4), rng)
        ratios4.append(wente_solve(a, b).ratio)
    sup4 = max(ratios4)
    assert abs(sup4 - sup3) <= 0.10 * max(sup3, sup4)


def test_hodge_zero(mesh2):
    F = CellVectorField(mesh2, np.zeros((mesh2.n_triangles, 2)))
    hp = hodge_decompose(F)
    assert np.abs(hp.eta.values).max() <= 1e-14
    assert np.abs(hp.zeta.values).max() <= 1e-14


def test_hodge_pure_gradient(mesh3):
    F = gradient(interpolate(mesh3, lambda x, y: x * x + y * y))
    hp = hodge_decompose(F)
    expected = interpolate(mesh3, lambda x, y: x * x + y * y - 1.0).values
    assert np.abs(hp.zeta.values - expected).max() <= 1e-9
    assert np.abs(hp.eta.values).max() <= 1e-9
    assert hp.residual_l2 <= 1e-10
    assert np.abs(hp.zeta.values[mesh3.boundary_idx]).max() == 0.0


def test_hodge_pure_rotation(mesh3):
    F = perp_gradient(interpolate(mesh3, lambda x, y: 0.5 * (x * x + y * y)))
    hp = hodge_decompose(F)
    expected = interpolate(mesh3, lambda x, y: 0.5 * (x * x + y * y)).values
    expected -= (mesh3.lumped_mass * expected).sum() / mesh3.lumped_mass.sum()
    assert np.abs(hp.eta.values - expected).max() <= 1e-9
    assert np.abs(hp.zeta.values).max() <= 1e-9
    mean = (mesh3.lumped_mass * hp.eta.values).sum()
    assert abs(mean) <= 1e-12


def test_hodge_residual_small_on_smooth_fields(mesh3):
    rng = np.random.default_rng(23)
    for _ in range(20):
        c = rng.standard_normal(8) * 0.7
        cx, cy = mesh3.centroids[:, 0], mesh3.centroids[:, 1]
        vals = np.stack([
            c[0] + c[1] * cx + c[2] * cy + c[3] * np.sin(2 * cx),
            c[4] + c[5] * cy + c[6] * cx * cy + c[7] * np.cos(2 * cy)], axis=1)
        F = CellVectorField(mesh3, vals)
        hp = hodge_decompose(F)
        assert hp.residual_l2 <= 10.0 * mesh3.h * norms(F)["L2"]


def test_psi_energy_density_constant_map(mesh2):
    u = interpolate(mesh2, lambda x, y: np.broadcast_to([0.0, 0.0, 1.0],
                                                        x.shape + (3,)))
    sol = psi_energy_density(u)
    assert np.abs(sol.psi.values).max() <= 1e-14


def test_psi_energy_density_radial_ode_oracle(mesh_at):
    # radial density f(r) = 1 + r^2: psi'(r) = (1/r) int_0^r f s ds,
    # psi(r) = -int_r^1 psi'(s) ds = (r^2-1)/4 + (r^4-1)/16
    def psi_exact(r):
        return (r ** 2 - 1.0) / 4.0 + (r ** 4 - 1.0) / 16.0

    errs = []
    for ref in (3, 4):
        m = mesh_at(ref)
        f = 1.0 + (m.centroids ** 2).sum(axis=1)
        sol = poisson_dirichlet(f, mesh=m)
        exact = psi_exact(np.linalg.norm(m.vertices, axis=1))
        errs.append(np.abs(sol.psi.values - exact).max())
    assert errs[0] <= 10.0 * mesh_at(3).h ** 2
    assert errs[1] <= 0.35 * errs[0]


def test_psi_energy_density_cap_family_stable(mesh_at):
    # scaled stereographic caps: ||psi||_inf <= C * energy with C stable
    def cap(lam):
        def f(x, y):
            return stereographic(lam * x, lam * y)
        return f

    cs = []
    for ref in (3, 4):
        m = mesh_at(ref)
        u = interpolate(m, cap(0.2))
        sol = psi_energy_density(u)
        e_raw = norms(gradient(u))["L2"] ** 2
        cs.append(sol.diagnostics["psi_linf"] / e_raw)
    assert abs(cs[1] - cs[0]) <= 0.2 * max(cs)

"""Local Hardy space machinery: bump profile, radial maximal function, h1 norm.

The maximal function is evaluated against mass-normalized mollifier stencils
on triangle centroids, over a geometric scale ladder refining each dyadic
octave of 1 - |x| (octave-only sampling undershoots the scale sup too much
to track a dense-scale reference). A degenerate smallest scale, the
area-weighted local average of |f|, keeps ||f||_L1 <= ||f||_h1 exact at the
quadrature level and covers boundary vertices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .elliptic import psi_energy_density
from .errors import UsageError
from .mesh import DiskMesh, Field, gradient, perp_gradient

PLATEAU_TARGET = 2.0
PLATEAU_RADIUS = 0.375          # phi equals the plateau on B_{3/8}
SUPPORT_LIMIT = 0.5             # support must stay inside B_{1/2}
EDGE_PAD = 0.01
GRAD_LIMIT = 100.0

# transition profile s(t) = 1 - 3t^2 + 2t^3: int_0^1 s = 1/2, int_0^1 t s = 3/20
_I1 = 0.5
_I2 = 0.15


@dataclass(frozen=True)
class BumpProfile:
    """Radial profile: plateau, monotone cubic transition, unit mass."""

    plateau: float
    r_plateau: float
    r_out: float
    adjusted: bool

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        w = self.r_out - self.r_plateau
        t = np.clip((r - self.r_plateau) / w, 0.0, 1.0)
        s = 1.0 - 3.0 * t * t + 2.0 * t ** 3
        return np.where(r <= self.r_out, self.plateau * s, 0.0)

    @property
    def grad_max(self):
        return 1.5 * self.plateau / (self.r_out - self.r_plateau)

    def mass(self):
        """Exact integral over the plane (closed form of the radial pieces)."""
        w = self.r_out - self.r_plateau
        return self.plateau * math.pi * self.r_plateau ** 2 \
            + 2.0 * math.pi * self.plateau * (self.r_plateau * w * _I1 + w * w * _I2)


def build_bump() -> BumpProfile:
    """Profile with value 2 on B_{3/8}, cubic decay inside B_{1/2}, unit mass.

    The transition width solving the mass constraint exists for plateau 2; if
    it ever collided with the support limit the plateau would be adjusted
    instead (flagged via `adjusted`).
    """
    c = PLATEAU_TARGET
    rp = PLATEAU_RADIUS
    target = (1.0 - c * math.pi * rp * rp) / (2.0 * math.pi * c)
    disc = (rp * _I1) ** 2 + 4.0 * _I2 * target
    w = (-rp * _I1 + math.sqrt(disc)) / (2.0 * _I2)
    adjusted = False
    w_max = SUPPORT_LIMIT - EDGE_PAD - rp
    if not (0.0 < w <= w_max):
        w = w_max
        c = 1.0 / (math.pi * rp * rp + 2.0 * math.pi * (rp * w * _I1 + w * w * _I2))
        adjusted = True
    prof = BumpProfile(c, rp, rp + w, adjusted)
    if prof.grad_max > GRAD_LIMIT:
        raise UsageError("bump gradient bound violated; widen the transition")
    return prof


class HardyEstimator:
    """Radial maximal function and local Hardy norm on a fixed mesh.

    Per-vertex convolution stencils (centroid indices and distances within the
    largest support) are cached after the first evaluation when the mesh is
    small enough; larger meshes stream the queries.
    """

    CACHE_LIMIT = 2 * 10 ** 7

    def __init__(self, mesh: DiskMesh, bump: BumpProfile | None = None,
                 scales_per_octave: int = 4, max_octaves: int = 20):
        self.mesh = mesh
        self.bump = bump if bump is not None else build_bump()
        self.scales_per_octave = int(scales_per_octave)
        self.max_octaves = int(max_octaves)
        self._tree = cKDTree(mesh.centroids)
        self._radii = 1.0 - np.linalg.norm(mesh.vertices, axis=1)
        self._stencils = None
        self._local_weights = self._build_local_average()

    def _build_local_average(self):
        mesh = self.mesh
        rows = []
        incident = [[] for _ in range(mesh.n_vertices)]
        for t, tri in enumerate(mesh.triangles):
            for v in tri:
                incident[v].append(t)
        areas = mesh.tri_areas
        for v in range(mesh.n_vertices):
            idx = np.asarray(incident[v], dtype=np.int64)
            w = areas[idx]
            rows.append((idx, w / w.sum()))
        return rows

    def _scales(self, t0):
        """Geometric ladder refining each dyadic octave of t0 down to ~h."""
        h = self.mesh.h
        if t0 <= h * 1e-9:
            return np.zeros(0)
        octaves = max(1, min(self.max_octaves,
                             math.ceil(math.log2(max(t0 / h, 2.0)))))
        S = self.scales_per_octave
        exponents = np.arange(octaves * S) / S
        return t0 * (2.0 ** -exponents)

    def _vertex_stencil(self, v):
        if self._stencils is not None and self._stencils[v] is not None:
            return self._stencils[v]
        x = self.mesh.vertices[v]
        t0 = self._radii[v]
        rad = self.bump.r_out * t0
        idx = np.asarray(self._tree.query_ball_point(x, rad + 1e-12),
                         dtype=np.int64)
        d = np.linalg.norm(self.mesh.centroids[idx] - x, axis=1)
        out = (idx, d)
        if self._stencils is not None:
            self._stencils[v] = out
        return out

    def _maybe_enable_cache(self):
        if self._stencils is None:
            est = 0.2 * self.mesh.n_vertices * self.mesh.n_triangles / 6.0
            if est < self.CACHE_LIMIT:
                self._stencils = [None] * self.mesh.n_vertices

    def maximal(self, f_cells) -> Field:
        """f*(x) at every vertex: max over the scale ladder of the normalized
        mollifications |phi_t * f|(x), floored by the local average of |f|."""
        f = np.asarray(f_cells, dtype=float)
        if f.shape != (self.mesh.n_triangles,):
            raise UsageError("maximal expects a per-triangle scalar array")
        self._maybe_enable_cache()
        areas = self.mesh.tri_areas
        out = np.empty(self.mesh.n_vertices)
        for v in range(self.mesh.n_vertices):
            lidx, lw = self._local_weights[v]
            best = abs(float((lw * np.abs(f[lidx])).sum()))
            t0 = self._radii[v]
            scales = self._scales(t0)
            if scales.size:
                idx, d = self._vertex_stencil(v)
                if idx.size:
                    W = self.bump(d[None, :] / scales[:, None])
                    denom = W @ areas[idx]
                    num = np.abs(W @ (f[idx] * areas[idx]))
                    valid = denom > 0.0
                    if np.any(valid):
                        best = max(best, float((num[valid] / denom[valid]).max()))
            out[v] = best
        return Field(self.mesh, out)

    def h1_norm(self, f_cells) -> float:
        """Local Hardy norm: L1 norm of the radial maximal function."""
        fstar = self.maximal(f_cells)
        return float((self.mesh.lumped_mass * fstar.values).sum())


def radial_maximal(est: HardyEstimator, f_cells) -> Field:
    return est.maximal(f_cells)


def h1_norm(est: HardyEstimator, f_cells) -> float:
    return est.h1_norm(f_cells)


def pointwise_lower_bound_check(u: Field, gauge_frame, hodge, probes=None,
                                density_floor: float = 1e-12) -> dict:
    """Check (perp_grad(eta) + grad(zeta)) . (P^T(x) grad u)(y) >= |grad u|^2(y)/4
    at triangle centroids y near frozen probe centers x."""
    mesh = u.mesh
    if probes is None:
        from .gauge import default_probes
        probes = default_probes()
    FH = perp_gradient(hodge.eta).values + gradient(hodge.zeta).values
    gu = gradient(u).values
    dens = (gu ** 2).reshape(mesh.n_triangles, -1).sum(axis=1)
    cent = mesh.centroids
    min_ratio = None
    checked = 0
    below_quarter = 0
    below_020 = 0
    skipped = 0
    for (x, r) in probes:
        x = np.asarray(x, dtype=float)
        if np.linalg.norm(x) + 2.0 * r > 1.0 + 1e-12:
            skipped += 1
            continue
        vx = int(np.argmin(((mesh.vertices - x) ** 2).sum(axis=1)))
        Px = gauge_frame.P.values[vx]
        sel = np.flatnonzero(
            (((cent - x) ** 2).sum(axis=1) <= r * r) & (dens > density_floor))
        if sel.size == 0:
            continue
        proj = np.einsum("ji,taj->tai", Px, gu[sel])
        lhs = (FH[sel] * proj).sum(axis=(1, 2))
        ratios = lhs / dens[sel]
        checked += sel.size
        below_quarter += int((ratios < 0.25).sum())
        below_020 += int((ratios < 0.20).sum())
        m = float(ratios.min())
        min_ratio = m if min_ratio is None else min(min_ratio, m)
    return {
        "min_ratio": min_ratio,
        "centroids_checked": checked,
        "below_quarter": below_quarter,
        "below_020": below_020,
        "probes_skipped": skipped,
    }


def h1_energy_check(traj, eps0: float, estimator: HardyEstimator | None = None,
                    max_snapshots: int = 8) -> dict:
    """Per-snapshot Hardy control of the energy density for t >= T0.

    Each row records ||grad u(t)|^2||_h1, its ratio to the raw energy, and
    the measured constant of the Dirichlet-problem estimate
    (||psi||_inf + ||grad psi||_2) / ||density||_h1.
    """
    from .elliptic import energy_density
    t0 = traj.detected_t0()
    if t0 is None:
        return {"skipped": "kinetic trigger T0 was not detected", "rows": []}
    snaps = [s for s in traj.snapshots if s.t >= t0 - 1e-12]
    if not snaps:
        return {"skipped": "no snapshots at or after T0", "rows": []}
    if len(snaps) > max_snapshots:
        pick = np.linspace(0, len(snaps) - 1, max_snapshots).round().astype(int)
        snaps = [snaps[i] for i in sorted(set(pick.tolist()))]
    est = estimator if estimator is not None else HardyEstimator(traj.mesh)
    rows = []
    for s in snaps:
        dens = energy_density(s.u)
        h1 = est.h1_norm(dens)
        e_raw = float((traj.mesh.tri_areas * dens).sum())
        sol = psi_energy_density(s.u)
        combo = sol.diagnostics["psi_linf_plus_grad_l2"]
        rows.append({
            "t": float(s.t),
            "h1_density": h1,
            "h1_over_energy": h1 / e_raw if e_raw > 1e-14 else 0.0,
            "cdsthm_C": combo / h1 if h1 > 1e-14 else 0.0,
        })
    return {"skipped": None, "rows": rows}

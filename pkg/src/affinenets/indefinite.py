"""Asymptotic nets with indefinite Berwald-Blaschke metric.

A non-degenerate asymptotic net is a vertex map q with planar crosses (the
four edges at each interior vertex span a plane) and positive face
determinant M = [q1, q2, q2(shifted)].  This module derives the full affine
structure of such a net:

* face metric  M and  omega = sqrt(M),
* the co-normal field nu (vertex-based) with its face parameter lam,
  propagated from a seed value and satisfying the Lelieuvre equations
      nu(u,v) x nu(u+1,v) =  q1(u+1/2,v)
      nu(u,v) x nu(u,v+1) = -q2(u,v+1/2),
* the affine normal xi = q12/omega on faces,
* cubic-form coefficients A, B on vertices,
* the affine mean curvature  H = lam12^2 - lam1^-2 - lam2^-2 + lam0^2,
* residuals of the Gauss equations (both families) and of the three
  compatibility equations, and reconstruction of a net from compatible
  (omega, lam, A, B) data, unique up to unimodular affine maps.

Sign conventions.  B is the triple product [q2(u,v+1/2), q2(u,v-1/2), .]
(descending v order); with this order the Gauss expansions of q22 and the
first compatibility equation hold with positive-B coefficients, mirroring
A = [q1(u-1/2,v), q1(u+1/2,v), .].  Orientation is fixed by M > 0; a net
with M < 0 everywhere can be repaired by swapping its axes
(:func:`normalize_orientation`).

Face-neighborhood subscripts around a vertex (u, v) follow the shift
notation used throughout: for a face quantity g,

    g0  -> face (u-1/2, v-1/2)   array index [u-1, v-1]
    g1  -> face (u+1/2, v-1/2)   array index [u,   v-1]
    g2  -> face (u-1/2, v+1/2)   array index [u-1, v]
    g12 -> face (u+1/2, v+1/2)   array index [u,   v]

and for a vertex quantity A: A0 = A(u,v), A1 = A(u+1,v), A2 = A(u,v+1),
Am1 = A(u-1,v), Am2 = A(u,v-1).
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import (DomainTooSmallError, GridDomain, MalformedInputError,
                   MeshError, Patch, triple_product)


class DegenerateNetError(MeshError):
    pass


class InconsistentNetError(MeshError):
    pass


class InvalidParameterError(MeshError):
    pass


class CompatibilityError(MeshError):
    pass


class NumericFailureError(MeshError):
    pass


class DegenerateSeedError(MeshError):
    pass


@dataclass(frozen=True)
class AsymptoticNet:
    """Vertex positions of a quad net intended to be an asymptotic net."""

    domain: GridDomain
    q: np.ndarray                      # (nu, nv, 3)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.shape != (self.domain.nu, self.domain.nv, 3):
            raise MalformedInputError(
                f"positions must have shape {(self.domain.nu, self.domain.nv, 3)}, "
                f"got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise MalformedInputError("positions contain non-finite values")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_positions(cls, q) -> "AsymptoticNet":
        q = np.asarray(q, dtype=float)
        return cls(GridDomain(q.shape[0], q.shape[1]), q)

    def edges_u(self) -> np.ndarray:
        return self.q[1:, :] - self.q[:-1, :]

    def edges_v(self) -> np.ndarray:
        return self.q[:, 1:] - self.q[:, :-1]

    def mixed(self) -> np.ndarray:
        q = self.q
        return q[1:, 1:] + q[:-1, :-1] - q[1:, :-1] - q[:-1, 1:]

    def scale(self) -> float:
        """Mean edge length, used to normalize absolute residuals."""
        e1, e2 = self.edges_u(), self.edges_v()
        return float(np.mean(np.concatenate([
            np.linalg.norm(e1, axis=-1).ravel(),
            np.linalg.norm(e2, axis=-1).ravel()])))


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    max_planarity_residual: float
    min_m: float
    planarity: Patch                   # normalized cross-planarity per interior vertex
    failures: tuple = ()


def _rel(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    den = np.asarray(den, dtype=float)
    num = np.asarray(num, dtype=float)
    out = np.zeros_like(num)
    mask = den > 0
    out[mask] = num[mask] / den[mask]
    return out


def validate_asymptotic(net: AsymptoticNet, tol: float = 1e-8) -> ValidationReport:
    """Check cross planarity at interior vertices and M > 0 at all faces.

    The planarity residual is the triple product normalized by the product
    of the three edge norms, so acceptance is scale invariant.
    """
    nu_, nv_ = net.domain.nu, net.domain.nv
    e1, e2 = net.edges_u(), net.edges_v()
    if nu_ >= 3 and nv_ >= 3:
        e1m = e1[:-1, 1:-1]            # q1(u-1/2, v) at interior (u, v)
        e1p = e1[1:, 1:-1]
        e2p = e2[1:-1, 1:]
        e2m = e2[1:-1, :-1]
        n1 = np.linalg.norm(e1m, axis=-1)
        n2 = np.linalg.norm(e1p, axis=-1)
        r_up = _rel(np.abs(triple_product(e1p, e1m, e2p)),
                    n1 * n2 * np.linalg.norm(e2p, axis=-1))
        r_dn = _rel(np.abs(triple_product(e1p, e1m, e2m)),
                    n1 * n2 * np.linalg.norm(e2m, axis=-1))
        planarity = np.maximum(r_up, r_dn)
        origin = (1, 1)
    else:
        planarity = np.zeros((0, 0))
        origin = (1, 1)
    m = face_determinant(net)
    max_planarity = float(planarity.max()) if planarity.size else 0.0
    failures = []
    if planarity.size:
        for k, l in zip(*np.nonzero(planarity > tol)):
            failures.append(("planarity", int(k + 1), int(l + 1)))
    for k, l in zip(*np.nonzero(m <= 0)):
        failures.append(("nondegeneracy", int(k), int(l)))
    passed = max_planarity <= tol and float(m.min()) > 0
    return ValidationReport(passed, max_planarity, float(m.min()),
                            Patch(planarity, origin), tuple(failures[:64]))


def normalize_orientation(net: AsymptoticNet) -> AsymptoticNet:
    """Return a net with M > 0, swapping the u/v axes if M < 0 everywhere."""
    m = face_determinant(net)
    if m.min() > 0:
        return net
    if m.max() < 0:
        warnings.warn("net has M < 0 everywhere; swapping u/v axes to fix orientation")
        return AsymptoticNet.from_positions(np.transpose(net.q, (1, 0, 2)))
    raise DegenerateNetError("face determinant M changes sign; net is degenerate")


def face_determinant(net: AsymptoticNet) -> np.ndarray:
    e1, e2 = net.edges_u(), net.edges_v()
    return triple_product(e1[:, :-1], e2[:-1, :], e2[1:, :])


def face_metric(net: AsymptoticNet) -> tuple[np.ndarray, np.ndarray]:
    """Face fields (M, omega) with omega = sqrt(M); raises if any M <= 0."""
    m = face_determinant(net)
    bad = np.argwhere(m <= 0)
    if len(bad):
        i, j = bad[0]
        raise DegenerateNetError(
            f"non-positive face determinant M={m[i, j]:g} at face ({i}+1/2, {j}+1/2)")
    return m, np.sqrt(m)


def _corner_vectors(e1, e2, i, j):
    """Cross products q1 x q2 at the four corners of face (i+1/2, j+1/2).

    Order: SW, SE, NW, NE.  Each is parallel to the co-normal at that corner.
    """
    return (np.cross(e1[i, j], e2[i, j]),
            np.cross(e1[i, j], e2[i + 1, j]),
            np.cross(e1[i, j + 1], e2[i, j]),
            np.cross(e1[i, j + 1], e2[i + 1, j]))


# per-corner coincidence exponents: nu = lam**s / omega * w
_CORNER_SIGN = (-1, +1, +1, -1)        # SW, SE, NW, NE
_CORNER_OFFSET = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class ConormalResult:
    nu: np.ndarray                     # (nu, nv, 3) vertex co-normals
    lam: np.ndarray                    # (nu-1, nv-1) positive face parameter
    lelieuvre_residual: float          # relative, across all edges
    path_residual: float               # relative mismatch across alternative paths


def conormal_field(net: AsymptoticNet, seed_lambda: float = 1.0,
                   seed_face: tuple[int, int] = (0, 0)) -> ConormalResult:
    """Propagate the co-normal field from a seed face parameter.

    Breadth-first over faces; each new face recovers its parameter from one
    already-assigned corner co-normal, then fills its remaining corners.
    Mismatches at corners reached along different quad paths are reported in
    ``path_residual`` (zero for exact asymptotic nets).
    """
    if seed_lambda <= 0 or not np.isfinite(seed_lambda):
        raise InvalidParameterError(f"seed lambda must be positive, got {seed_lambda}")
    m, omega = face_metric(net)
    e1, e2 = net.edges_u(), net.edges_v()
    fu, fv = net.domain.face_shape()
    si, sj = seed_face
    if not (0 <= si < fu and 0 <= sj < fv):
        raise InvalidParameterError(f"seed face {seed_face} outside face grid {fu}x{fv}")

    lam = np.full((fu, fv), np.nan)
    nu_field = np.full((net.domain.nu, net.domain.nv, 3), np.nan)
    assigned = np.zeros((net.domain.nu, net.domain.nv), dtype=bool)
    path_res = 0.0

    def fill_face(i, j, lam_val):
        nonlocal path_res
        if lam_val <= 0 or not np.isfinite(lam_val):
            raise InconsistentNetError(
                f"propagation produced lambda={lam_val:g} at face ({i}+1/2, {j}+1/2)")
        lam[i, j] = lam_val
        corners = _corner_vectors(e1, e2, i, j)
        for w, sgn, (di, dj) in zip(corners, _CORNER_SIGN, _CORNER_OFFSET):
            val = lam_val ** sgn / omega[i, j] * w
            vi, vj = i + di, j + dj
            if assigned[vi, vj]:
                ref = nu_field[vi, vj]
                path_res = max(path_res, float(
                    np.linalg.norm(val - ref) / max(np.linalg.norm(ref), 1e-300)))
            else:
                nu_field[vi, vj] = val
                assigned[vi, vj] = True

    def lam_from_corner(i, j, corner_idx):
        w = _corner_vectors(e1, e2, i, j)[corner_idx]
        di, dj = _CORNER_OFFSET[corner_idx]
        nu_known = nu_field[i + di, j + dj]
        ratio = float(np.dot(nu_known, w) / np.dot(w, w)) * omega[i, j]
        # nu = lam**sign / omega * w  =>  ratio = lam**sign
        sgn = _CORNER_SIGN[corner_idx]
        if ratio <= 0 or not np.isfinite(ratio):
            raise InconsistentNetError(
                f"propagation produced non-positive lambda at face ({i}+1/2, {j}+1/2)")
        return ratio if sgn > 0 else 1.0 / ratio

    fill_face(si, sj, float(seed_lambda))
    done = np.zeros((fu, fv), dtype=bool)
    done[si, sj] = True
    queue = deque([(si, sj)])
    while queue:
        i, j = queue.popleft()
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if not (0 <= ni < fu and 0 <= nj < fv) or done[ni, nj]:
                continue
            # any corner of the new face already assigned works as anchor
            anchor = None
            for idx, (di, dj) in enumerate(_CORNER_OFFSET):
                if assigned[ni + di, nj + dj]:
                    anchor = idx
                    break
            if anchor is None:
                continue
            fill_face(ni, nj, lam_from_corner(ni, nj, anchor))
            done[ni, nj] = True
            queue.append((ni, nj))
    if not done.all():
        raise InconsistentNetError("face graph not fully reachable from seed")

    scale = net.scale()
    r1 = np.linalg.norm(np.cross(nu_field[:-1, :], nu_field[1:, :]) - e1, axis=-1)
    r2 = np.linalg.norm(np.cross(nu_field[:, :-1], nu_field[:, 1:]) + e2, axis=-1)
    lres = float(max(r1.max(), r2.max()) / max(scale, 1e-300))
    return ConormalResult(nu_field, lam, lres, path_res)


def rho_rescale(nu_field: np.ndarray, rho: float) -> np.ndarray:
    """Gauge change nu -> rho^(+-1) nu by vertex parity (even i+j gets rho)."""
    if rho <= 0 or not np.isfinite(rho):
        raise InvalidParameterError(f"rho must be positive, got {rho}")
    nu_field = np.asarray(nu_field, dtype=float)
    ni, nj = nu_field.shape[:2]
    ii, jj = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    factor = np.where((ii + jj) % 2 == 0, rho, 1.0 / rho)
    return nu_field * factor[..., None]


def moutard_coefficient(nu_field: np.ndarray,
                        degenerate_tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Per-face least-squares multiplier hstar with hstar*(nu0+nu12) = nu1+nu2.

    Returns the face field and the maximum relative norm of the component of
    nu1+nu2 not parallel to nu0+nu12.  For a genuine co-normal field
    hstar equals lam^2.
    """
    nu_field = np.asarray(nu_field, dtype=float)
    diag = nu_field[:-1, :-1] + nu_field[1:, 1:]
    anti = nu_field[1:, :-1] + nu_field[:-1, 1:]
    dd = np.einsum("ijk,ijk->ij", diag, diag)
    if np.any(np.sqrt(dd) < degenerate_tol):
        i, j = np.argwhere(np.sqrt(dd) < degenerate_tol)[0]
        raise DegenerateNetError(
            f"diagonal co-normal sum vanishes at face ({i}+1/2, {j}+1/2)")
    hstar = np.einsum("ijk,ijk->ij", diag, anti) / dd
    rem = anti - hstar[..., None] * diag
    residual = float(_rel(np.linalg.norm(rem, axis=-1),
                          np.linalg.norm(anti, axis=-1)).max())
    return hstar, residual


def affine_normal(net: AsymptoticNet, omega: np.ndarray) -> np.ndarray:
    """Face field xi = q12 / omega."""
    return net.mixed() / np.asarray(omega)[..., None]


def _xi_lam_at_face(lam, xi, i, j, fu, fv, prefer):
    """lam^(+-1) xi at one face adjacent to a vertex, trying faces in order."""
    for which in prefer:
        if which == "NE" and i <= fu - 1 and j <= fv - 1 and i >= 0 and j >= 0:
            return lam[i, j] * xi[i, j]
        if which == "SE" and i <= fu - 1 and j - 1 >= 0 and i >= 0:
            return xi[i, j - 1] / lam[i, j - 1]
        if which == "NW" and i - 1 >= 0 and j <= fv - 1 and j >= 0:
            return xi[i - 1, j] / lam[i - 1, j]
        if which == "SW" and i - 1 >= 0 and j - 1 >= 0:
            return lam[i - 1, j - 1] * xi[i - 1, j - 1]
    raise DomainTooSmallError("no adjacent face for cubic coefficient stencil")


@dataclass(frozen=True)
class CubicCoefficients:
    a: Patch                           # origin (1, 0), shape (nu-2, nv)
    b: Patch                           # origin (0, 1), shape (nu, nv-2)
    consistency_residual: float        # spread among the four expressions


def cubic_coefficients(net: AsymptoticNet, xi: np.ndarray,
                       lam: np.ndarray) -> CubicCoefficients:
    """Cubic-form coefficients A (u-interior) and B (v-interior).

    A(u,v) = [q1(u-1/2,v), q1(u+1/2,v), lam*xi at an adjacent face] with the
    weight lam on the SW/NE faces and 1/lam on the SE/NW faces; the four
    choices agree on valid nets and their spread is reported.  B uses the
    v-edges in descending order, [q2(u,v+1/2), q2(u,v-1/2), .].
    """
    nu_, nv_ = net.domain.nu, net.domain.nv
    fu, fv = net.domain.face_shape()
    if nu_ < 3 or nv_ < 3:
        raise DomainTooSmallError("cubic coefficients need at least a 3x3 net")
    e1, e2 = net.edges_u(), net.edges_v()

    a = np.zeros((nu_ - 2, nv_))
    for u in range(1, nu_ - 1):
        for v in range(nv_):
            wxi = _xi_lam_at_face(lam, xi, u, v, fu, fv, ("NE", "SE", "NW", "SW"))
            a[u - 1, v] = triple_product(e1[u - 1, v], e1[u, v], wxi)
    b = np.zeros((nu_, nv_ - 2))
    for u in range(nu_):
        for v in range(1, nv_ - 1):
            wxi = _xi_lam_at_face(lam, xi, u, v, fu, fv, ("NE", "NW", "SE", "SW"))
            b[u, v - 1] = triple_product(e2[u, v], e2[u, v - 1], wxi)

    # four-expression agreement at fully interior vertices
    spread = 0.0
    scale = net.scale()
    for u in range(1, nu_ - 1):
        for v in range(1, nv_ - 1):
            factors = [lam[u, v] * xi[u, v], xi[u, v - 1] / lam[u, v - 1],
                       xi[u - 1, v] / lam[u - 1, v], lam[u - 1, v - 1] * xi[u - 1, v - 1]]
            va = [triple_product(e1[u - 1, v], e1[u, v], f) for f in factors]
            vb = [triple_product(e2[u, v], e2[u, v - 1], f) for f in factors]
            ref = max(abs(a[u - 1, v]), abs(b[u, v - 1]), scale ** 3)
            spread = max(spread, float(np.ptp(va)) / ref, float(np.ptp(vb)) / ref)
    return CubicCoefficients(Patch(a, (1, 0)), Patch(b, (0, 1)), spread)


def mean_curvature(lam: np.ndarray) -> Patch:
    """Affine mean curvature H = lam12^2 - lam1^-2 - lam2^-2 + lam0^2.

    Defined at vertices whose four surrounding faces exist.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise InvalidParameterError("lambda must be positive")
    h = (lam[1:, 1:] ** 2 - 1.0 / lam[1:, :-1] ** 2
         - 1.0 / lam[:-1, 1:] ** 2 + lam[:-1, :-1] ** 2)
    return Patch(h, origin=(1, 1))


@dataclass(frozen=True)
class GaussReport:
    family_max: dict
    per_vertex: Patch                  # worst normalized residual per interior vertex
    max_residual: float


def gauss_residuals(net: AsymptoticNet, omega: np.ndarray, lam: np.ndarray,
                    a: Patch, b: Patch, xi: np.ndarray) -> GaussReport:
    """Evaluate all Gauss equations: four q11 forms, four q22 forms, and the
    eight weighted-derivative expansions of xi.

    Residuals are normalized by the sum of the norms of every term in the
    equation, so they sit at rounding level on exact nets regardless of
    scale.  Nothing is raised; large residuals are reported.
    """
    nu_, nv_ = net.domain.nu, net.domain.nv
    q = net.q
    e1, e2 = net.edges_u(), net.edges_v()
    fam = {"q11": 0.0, "q22": 0.0, "d1xi": 0.0, "d2xi": 0.0}
    per_vertex = np.zeros((max(nu_ - 2, 0), max(nv_ - 2, 0)))

    def norm(x):
        return float(np.linalg.norm(x))

    def rel(lhs, rhs_terms):
        num = norm(lhs - sum(rhs_terms))
        den = norm(lhs) + sum(norm(t) for t in rhs_terms)
        return num / den if den > 0 else 0.0

    for u in range(1, nu_ - 1):
        for v in range(1, nv_ - 1):
            L0, L1, L2, L12 = lam[u - 1, v - 1], lam[u, v - 1], lam[u - 1, v], lam[u, v]
            O0, O1, O2, O12 = (omega[u - 1, v - 1], omega[u, v - 1],
                               omega[u - 1, v], omega[u, v])
            q11 = q[u + 1, v] - 2 * q[u, v] + q[u - 1, v]
            q22 = q[u, v + 1] - 2 * q[u, v] + q[u, v - 1]
            e1p, e1m = e1[u, v], e1[u - 1, v]
            e2p, e2m = e2[u, v], e2[u, v - 1]
            A0 = a.at(u, v)
            B0 = b.at(u, v)
            r11 = max(
                rel(q11, ((O12 - O2 / (L2 * L12)) / O12 * e1p, A0 / (L12 * O12) * e2p)),
                rel(q11, ((O1 - L0 * L1 * O0) / O1 * e1p, L1 * A0 / O1 * e2m)),
                rel(q11, ((L2 * L12 * O12 - O2) / O2 * e1m, L2 * A0 / O2 * e2p)),
                rel(q11, ((O1 / (L0 * L1) - O0) / O0 * e1m, A0 / (L0 * O0) * e2m)))
            r22 = max(
                rel(q22, (B0 / (L12 * O12) * e1p, (O12 - O1 / (L1 * L12)) / O12 * e2p)),
                rel(q22, (L1 * B0 / O1 * e1p, (L1 * L12 * O12 - O1) / O1 * e2m)),
                rel(q22, (L2 * B0 / O2 * e1m, (O2 - L0 * L2 * O0) / O2 * e2p)),
                rel(q22, (B0 / (L0 * O0) * e1m, (O2 / (L0 * L2) - O0) / O0 * e2m)))
            worst = max(r11, r22)
            fam["q11"] = max(fam["q11"], r11)
            fam["q22"] = max(fam["q22"], r22)

            # weighted derivatives of xi along u at edge (u, v+1/2)
            x0, x1, x2, x12 = xi[u - 1, v - 1], xi[u, v - 1], xi[u - 1, v], xi[u, v]
            if a.covers(u, v + 1):
                A2 = a.at(u, v + 1)
                d1m = L12 * x12 - x2 / L2
                d1p = x12 / L12 - L2 * x2
                r = max(
                    rel(d1m, ((1 / L2 ** 2 - L12 ** 2) / (O12 * L12) * e1[u, v],
                              (L12 * A2 - A0 / L12) / (O12 * O2 * L2) * e2[u, v])),
                    rel(d1m, ((1 / L2 ** 2 - L12 ** 2) * L2 / O2 * e1[u - 1, v],
                              (A2 / L2 - L2 * A0) * L12 / (O2 * O12) * e2[u, v])),
                    rel(d1p, ((1 / L12 ** 2 - L2 ** 2) * L12 / O12 * e1[u, v + 1],
                              (L12 * A2 - A0 / L12) * L2 / (O12 * O2) * e2[u, v])),
                    rel(d1p, ((1 / L12 ** 2 - L2 ** 2) / (O2 * L2) * e1[u - 1, v + 1],
                              (A2 / L2 - L2 * A0) / (O2 * O12 * L12) * e2[u, v])))
                fam["d1xi"] = max(fam["d1xi"], r)
                worst = max(worst, r)
            # weighted derivatives of xi along v at edge (u+1/2, v)
            if b.covers(u + 1, v):
                B1 = b.at(u + 1, v)
                d2m = L12 * x12 - x1 / L1
                d2p = x12 / L12 - L1 * x1
                r = max(
                    rel(d2m, ((L12 * B1 - B0 / L12) / (O12 * O1 * L1) * e1[u, v],
                              (1 / L1 ** 2 - L12 ** 2) / (O12 * L12) * e2[u, v])),
                    rel(d2m, ((B1 / L1 - L1 * B0) * L12 / (O1 * O12) * e1[u, v],
                              (1 / L1 ** 2 - L12 ** 2) * L1 / O1 * e2[u, v - 1])),
                    rel(d2p, ((L12 * B1 - B0 / L12) * L1 / (O12 * O1) * e1[u, v],
                              (1 / L12 ** 2 - L1 ** 2) * L12 / O12 * e2[u + 1, v])),
                    rel(d2p, ((B1 / L1 - L1 * B0) / (O1 * O12 * L12) * e1[u, v],
                              (1 / L12 ** 2 - L1 ** 2) / (O1 * L1) * e2[u + 1, v - 1])))
                fam["d2xi"] = max(fam["d2xi"], r)
                worst = max(worst, r)
            per_vertex[u - 1, v - 1] = worst
    return GaussReport(fam, Patch(per_vertex, (1, 1)),
                       max(fam.values()) if fam else 0.0)


@dataclass(frozen=True)
class SphereTest:
    is_sphere: bool
    max_residual: float
    bobenko_constant: float | None


def affine_sphere_test(lam: np.ndarray, a: Patch, b: Patch, omega: np.ndarray,
                       tol: float = 1e-9) -> SphereTest:
    """Affine-sphere criterion lam12*A2 = lam2*A0 and lam12*B1 = lam1*B0.

    Residuals are normalized by |lhs| + |rhs| + lam*omega at the face; the
    metric floor makes the check meaningful when A or B vanish identically
    (A and omega carry the same scaling dimension).  When (1/lam - lam)/omega
    is constant across faces within tol, the net is also a sphere in the
    stricter dual sense and that constant is returned.
    """
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    fu, fv = lam.shape
    nu_, nv_ = fu + 1, fv + 1
    worst = 0.0
    for u in range(1, nu_ - 1):
        for v in range(0, nv_ - 1):
            lhs = lam[u, v] * a.at(u, v + 1)
            rhs = lam[u - 1, v] * a.at(u, v)
            den = abs(lhs) + abs(rhs) + lam[u, v] * omega[u, v]
            worst = max(worst, abs(lhs - rhs) / den)
    for u in range(0, nu_ - 1):
        for v in range(1, nv_ - 1):
            lhs = lam[u, v] * b.at(u + 1, v)
            rhs = lam[u, v - 1] * b.at(u, v)
            den = abs(lhs) + abs(rhs) + lam[u, v] * omega[u, v]
            worst = max(worst, abs(lhs - rhs) / den)
    is_sphere = worst <= tol
    ratio = (1.0 / lam - lam) / omega
    center = float(np.mean(ratio))
    spread = float(np.max(np.abs(ratio - center))) if ratio.size else 0.0
    const = center if spread <= tol * max(abs(center), 1.0) else None
    return SphereTest(is_sphere, worst, const)


@dataclass(frozen=True)
class CompatibilityResiduals:
    comp1: Patch
    comp2: Patch
    comp3: Patch
    max_relative: float
    max_relative_per_eq: dict = field(default_factory=dict)


def compatibility_residuals(omega: np.ndarray, lam: np.ndarray,
                            a: Patch, b: Patch) -> CompatibilityResiduals:
    """Left minus right of the three compatibility equations.

    comp1 couples the metric, the face parameter, and the product A*B; comp2
    and comp3 come from equating the two expansions of the mixed second
    differences of xi (they carry basis-conversion cross terms in A*B).
    Raw residual fields are returned together with a summary normalized by
    the magnitude of each equation's terms.
    """
    omega = np.asarray(omega, dtype=float)
    lam = np.asarray(lam, dtype=float)
    fu, fv = lam.shape
    nu_, nv_ = fu + 1, fv + 1
    c1 = np.zeros((nu_ - 2, nv_ - 2))
    c2 = np.full((nu_ - 2, nv_ - 2), np.nan)
    c3 = np.full((nu_ - 2, nv_ - 2), np.nan)
    per_eq = {"comp1": 0.0, "comp2": 0.0, "comp3": 0.0}

    def upd(key, val, *terms):
        den = sum(abs(t) for t in terms)
        if den > 0:
            per_eq[key] = max(per_eq[key], abs(val) / den)
        return val

    for u in range(1, nu_ - 1):
        for v in range(1, nv_ - 1):
            L0, L1, L2, L12 = lam[u - 1, v - 1], lam[u, v - 1], lam[u - 1, v], lam[u, v]
            O0, O1, O2, O12 = (omega[u - 1, v - 1], omega[u, v - 1],
                               omega[u - 1, v], omega[u, v])
            A0, B0 = a.at(u, v), b.at(u, v)
            t1 = O2 / (L2 * L12 * O12)
            t2 = L0 * L1 * O0 / O1
            t3 = A0 * B0 * L1 / (L12 * O12 * O1)
            c1[u - 1, v - 1] = upd("comp1", t1 - t2 - t3, t1, t2, t3)
            if a.covers(u, v - 1) and a.covers(u, v + 1) and b.covers(u - 1, v) \
                    and b.covers(u + 1, v):
                A2, Am2 = a.at(u, v + 1), a.at(u, v - 1)
                B1, Bm1 = b.at(u + 1, v), b.at(u - 1, v)
                s1 = (1 / L2 ** 2 - L12 ** 2) / (O12 * L12)
                s2 = (L0 ** 2 - 1 / L1 ** 2) * L1 / O1
                s3 = L0 * B0 * (L1 * A0 - Am2 / L1) / (L12 * O1 * O0 * O12)
                s4 = (L12 * B1 - B0 / L12) / (O12 * O1 * L1)
                s5 = L0 * (L2 * B0 - Bm1 / L2) / (L2 * L12 * O0 * O12)
                c2[u - 1, v - 1] = upd("comp2", s1 + s2 + s3 - s4 + s5,
                                       s1, s2, s3, s4, s5)
                t1_ = (L12 * A2 - A0 / L12) / (O12 * O2 * L2)
                t2_ = L0 * (L1 * A0 - Am2 / L1) / (L1 * L12 * O0 * O12)
                t3_ = (1 / L1 ** 2 - L12 ** 2) / (O12 * L12)
                t4_ = L0 * A0 * (L2 * B0 - Bm1 / L2) / (L12 * O2 * O0 * O12)
                t5_ = (1 / L2 ** 2 - L0 ** 2) * L2 / O2
                c3[u - 1, v - 1] = upd("comp3", t1_ - t2_ - t3_ - t4_ + t5_,
                                       t1_, t2_, t3_, t4_, t5_)
    return CompatibilityResiduals(Patch(c1, (1, 1)), Patch(c2, (1, 1)),
                                  Patch(c3, (1, 1)), max(per_eq.values()),
                                  dict(per_eq))


def default_seed_quad(omega00: float) -> np.ndarray:
    """Canonical initial quad: volume equals omega^2 at the first face."""
    return np.array([[0.0, 0.0, 0.0],
                     [1.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0],
                     [1.0, 1.0, omega00 ** 2]])


def reconstruct(omega: np.ndarray, lam: np.ndarray, a: Patch, b: Patch,
                seed: np.ndarray | None = None, tol: float = 1e-8,
                check_compatibility: bool = True) -> AsymptoticNet:
    """Rebuild an asymptotic net from (omega, lam, A, B).

    The data must satisfy the three compatibility equations (checked first);
    the march extends the seed quad along the first row and column with the
    Gauss forms that only reference already-built points, then fills each
    remaining corner along both quad paths and asserts their agreement.
    """
    omega = np.asarray(omega, dtype=float)
    lam = np.asarray(lam, dtype=float)
    fu, fv = omega.shape
    nu_, nv_ = fu + 1, fv + 1
    if np.any(omega <= 0) or np.any(lam <= 0):
        raise InvalidParameterError("omega and lambda must be positive")
    if a.origin != (1, 0) or a.values.shape[:2] != (nu_ - 2, nv_):
        raise MalformedInputError("A must cover u-interior vertices, origin (1,0)")
    if b.origin != (0, 1) or b.values.shape[:2] != (nu_, nv_ - 2):
        raise MalformedInputError("B must cover v-interior vertices, origin (0,1)")
    if check_compatibility:
        comp = compatibility_residuals(omega, lam, a, b)
        if comp.max_relative > tol:
            raise CompatibilityError(
                f"compatibility residual {comp.max_relative:.3e} exceeds {tol:g}; "
                "refusing to integrate inconsistent structure data")

    q = np.zeros((nu_, nv_, 3))
    if seed is None:
        seed = default_seed_quad(omega[0, 0])
    seed = np.asarray(seed, dtype=float)
    if seed.shape != (4, 3):
        raise MalformedInputError("seed must be four points (q00, q10, q01, q11)")
    vol = triple_product(seed[1] - seed[0], seed[2] - seed[0], seed[3] - seed[0])
    if abs(vol - omega[0, 0] ** 2) > tol * max(omega[0, 0] ** 2, 1.0):
        raise DegenerateSeedError(
            f"seed quad volume {vol:g} does not match omega^2 = {omega[0, 0]**2:g}")
    q[0, 0], q[1, 0], q[0, 1], q[1, 1] = seed

    # first two rows, marching u with forms anchored on row-0/row-1 faces
    for u in range(1, nu_ - 1):
        L2, L12 = lam[u - 1, 0], lam[u, 0]
        O2, O12 = omega[u - 1, 0], omega[u, 0]
        e1m = q[u, 0] - q[u - 1, 0]
        e2p = q[u, 1] - q[u, 0]
        q11 = (L2 * L12 * O12 - O2) / O2 * e1m + L2 * a.at(u, 0) / O2 * e2p
        q[u + 1, 0] = q11 + 2 * q[u, 0] - q[u - 1, 0]
        L0, L1 = lam[u - 1, 0], lam[u, 0]
        O0, O1 = omega[u - 1, 0], omega[u, 0]
        e1m = q[u, 1] - q[u - 1, 1]
        e2m = q[u, 1] - q[u, 0]
        q11 = (O1 / (L0 * L1) - O0) / O0 * e1m + a.at(u, 1) / (L0 * O0) * e2m
        q[u + 1, 1] = q11 + 2 * q[u, 1] - q[u - 1, 1]
    # first two columns, marching v
    for v in range(1, nv_ - 1):
        L1, L12 = lam[0, v - 1], lam[0, v]
        O1, O12 = omega[0, v - 1], omega[0, v]
        e1p = q[1, v] - q[0, v]
        e2m = q[0, v] - q[0, v - 1]
        q22 = L1 * b.at(0, v) / O1 * e1p + (L1 * L12 * O12 - O1) / O1 * e2m
        q[0, v + 1] = q22 + 2 * q[0, v] - q[0, v - 1]
        L0, L2 = lam[0, v - 1], lam[0, v]
        O0, O2 = omega[0, v - 1], omega[0, v]
        e1m = q[1, v] - q[0, v]
        e2m = q[1, v] - q[1, v - 1]
        q22 = b.at(1, v) / (L0 * O0) * e1m + (O2 / (L0 * L2) - O0) / O0 * e2m
        q[1, v + 1] = q22 + 2 * q[1, v] - q[1, v - 1]

    # bulk: fill each remaining corner along the u-path and the v-path
    scale = max(float(np.linalg.norm(q[1, 0] - q[0, 0])), 1e-300)
    worst_gap = 0.0
    for v in range(1, nv_ - 1):
        for u in range(1, nu_ - 1):
            L0, L1 = lam[u - 1, v], lam[u, v]
            O0, O1 = omega[u - 1, v], omega[u, v]
            e1m = q[u, v + 1] - q[u - 1, v + 1]
            e2m = q[u, v + 1] - q[u, v]
            c = (O1 - L0 * L1 * O0) / O1
            d = L1 * a.at(u, v + 1) / O1
            e1p = (e1m + d * e2m) / (1.0 - c)
            cand_u = q[u, v + 1] + e1p
            L0b, L2b = lam[u, v - 1], lam[u, v]
            O0b, O2b = omega[u, v - 1], omega[u, v]
            e1mb = q[u + 1, v] - q[u, v]
            e2mb = q[u + 1, v] - q[u + 1, v - 1]
            cb = (O2b - L0b * L2b * O0b) / O2b
            db = L2b * b.at(u + 1, v) / O2b
            e2pb = (e2mb + db * e1mb) / (1.0 - cb)
            cand_v = q[u + 1, v] + e2pb
            gap = float(np.linalg.norm(cand_u - cand_v)) / scale
            worst_gap = max(worst_gap, gap)
            if gap > max(tol * 1e3, 1e-6):
                raise NumericFailureError(
                    f"two-path corner fill disagrees by {gap:.3e} at ({u+1},{v+1}); "
                    "structure data is not integrable")
            q[u + 1, v + 1] = cand_u
    if not np.all(np.isfinite(q)):
        raise NumericFailureError("reconstruction produced non-finite positions")
    return AsymptoticNet.from_positions(q)


@dataclass(frozen=True)
class Registration:
    linear: np.ndarray                 # 3x3
    translation: np.ndarray            # 3
    max_residual: float                # max vertex distance / diameter
    det: float


def affine_register(net_a, net_b) -> Registration:
    """Affine map L, t with L*qA + t ~ qB and the residual of the match.

    Solved exactly from the first quad when its edge vectors span 3-space
    (asymptotic nets); conjugate nets have planar quads, so the solve falls
    back to least squares over all vertices, which is still exact whenever
    the nets are genuinely affinely equivalent.
    """
    qa, qb = net_a.q, net_b.q
    if qa.shape != qb.shape:
        raise MalformedInputError("affine registration needs identical domains")
    ea = np.stack([qa[1, 0] - qa[0, 0], qa[0, 1] - qa[0, 0], qa[1, 1] - qa[0, 0]], axis=1)
    eb = np.stack([qb[1, 0] - qb[0, 0], qb[0, 1] - qb[0, 0], qb[1, 1] - qb[0, 0]], axis=1)
    scale = max(np.linalg.norm(ea, axis=0).max(), 1e-300)
    if abs(np.linalg.det(ea)) > 1e-10 * scale ** 3:
        linear = eb @ np.linalg.inv(ea)
        translation = qb[0, 0] - linear @ qa[0, 0]
    else:
        pts_a = qa.reshape(-1, 3)
        pts_b = qb.reshape(-1, 3)
        m = np.hstack([pts_a, np.ones((len(pts_a), 1))])
        sol, *_ = np.linalg.lstsq(m, pts_b, rcond=None)
        linear = sol[:3].T
        translation = sol[3]
    mapped = qa @ linear.T + translation
    diam = float(np.linalg.norm(qb.reshape(-1, 3).max(0) - qb.reshape(-1, 3).min(0)))
    res = float(np.linalg.norm(mapped - qb, axis=-1).max()) / max(diam, 1e-300)
    return Registration(linear, translation, res, float(np.linalg.det(linear)))


@dataclass(frozen=True)
class IndefiniteInvariants:
    """Everything the analysis pipeline extracts from one asymptotic net."""

    m: np.ndarray
    omega: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    xi: np.ndarray
    a: Patch
    b: Patch
    hstar: np.ndarray
    h: Patch
    residuals: dict = field(default_factory=dict)


def extract_structure(net: AsymptoticNet, tol: float = 1e-8,
                      seed_lambda: float = 1.0) -> IndefiniteInvariants:
    """Full invariant extraction; raises on invalid nets."""
    report = validate_asymptotic(net, tol)
    if not report.passed:
        raise DegenerateNetError(
            f"net failed validation: max planarity {report.max_planarity_residual:.3e}, "
            f"min M {report.min_m:.3e}")
    m, omega = face_metric(net)
    con = conormal_field(net, seed_lambda=seed_lambda)
    xi = affine_normal(net, omega)
    cubic = cubic_coefficients(net, xi, con.lam)
    hstar, moutard_res = moutard_coefficient(con.nu)
    h = mean_curvature(con.lam)
    gauss = gauss_residuals(net, omega, con.lam, cubic.a, cubic.b, xi)
    comp = compatibility_residuals(omega, con.lam, cubic.a, cubic.b)
    hstar_gap = float(np.max(np.abs(hstar - con.lam ** 2) / con.lam ** 2))
    nuxi = _nu_xi_cycle_residual(con.nu, xi, con.lam)
    residuals = {
        "planarity": report.max_planarity_residual,
        "lelieuvre": con.lelieuvre_residual,
        "path_independence": con.path_residual,
        "moutard_parallelism": moutard_res,
        "hstar_vs_lambda_sq": hstar_gap,
        "nu_xi_cycle": nuxi,
        "cubic_consistency": cubic.consistency_residual,
        "gauss_q11": gauss.family_max["q11"],
        "gauss_q22": gauss.family_max["q22"],
        "gauss_d1xi": gauss.family_max["d1xi"],
        "gauss_d2xi": gauss.family_max["d2xi"],
        "comp1": comp.max_relative_per_eq["comp1"],
        "comp2": comp.max_relative_per_eq["comp2"],
        "comp3": comp.max_relative_per_eq["comp3"],
    }
    return IndefiniteInvariants(m, omega, con.lam, con.nu, xi, cubic.a, cubic.b,
                                hstar, h, residuals)


def _nu_xi_cycle_residual(nu_field: np.ndarray, xi: np.ndarray,
                          lam: np.ndarray) -> float:
    p_sw = np.einsum("ijk,ijk->ij", nu_field[:-1, :-1], xi)
    p_se = np.einsum("ijk,ijk->ij", nu_field[1:, :-1], xi)
    p_nw = np.einsum("ijk,ijk->ij", nu_field[:-1, 1:], xi)
    p_ne = np.einsum("ijk,ijk->ij", nu_field[1:, 1:], xi)
    inv = 1.0 / lam
    worst = max(np.max(np.abs(p_sw - inv) / inv), np.max(np.abs(p_se - lam) / lam),
                np.max(np.abs(p_nw - lam) / lam), np.max(np.abs(p_ne - inv) / inv))
    return float(worst)

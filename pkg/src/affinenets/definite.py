"""Special conjugate nets with definite Berwald-Blaschke metric.

A discrete conjugate net has planar faces.  It is non-degenerate when the
four corner determinants Delta_1..Delta_4 share one sign at every interior
vertex, and *special* when Delta_1 Delta_3 = Delta_2 Delta_4, which is
exactly the condition for a face-based co-normal field nu to exist with

    q1(u+1/2, v) =  nu(u+1/2, v-1/2) x nu(u+1/2, v+1/2)
    q2(u, v+1/2) = -nu(u-1/2, v+1/2) x nu(u+1/2, v+1/2).

The co-normal is tied to the net by one positive parameter per vertex and
face corner (alpha, beta, gamma, delta for the NE/NW/SW/SE faces), with
lambda = (beta+delta)/2 = 2/(alpha+gamma).  This module extracts the whole
structure (metric omega, parameters, affine normal xi, weighted derivatives
with the E/F coefficients, diagonal curvatures and the mean curvature H),
verifies the Gauss and compatibility equations, and reconstructs a net from
(omega, lambda, alpha, beta) data.

Conventions fixed by numerical verification of the equation system (they
differ from a few misprints in the source derivation; see the repository
notes):

* coincidence relations carry the reciprocal factor,
  nu(u+1/2,v+1/2) = (alpha(u,v) omega(u,v))^(-1) q1(u+1/2,v) x q2(u,v+1/2),
  and the parameter chain reads  alpha beta omega^2 = Delta_1  (cyclically).
* H1* = 4 + H* - 2 lam12^-2 - 2 lam0^-2 and
  H2* = 4 + H* - 2 lam1^2 - 2 lam2^2  (vertex-shift subscripts around the
  face), so that H = (H1*+H2*) / (2 (beta1 omega1 + delta2 omega2)).
* the third compatibility equation is  H2* = delta2 omega2 d - beta1 omega1 c
  for the printed expansion coefficients c, d of the diagonal derivative.

Vertex-shift subscripts: for a vertex quantity g at (u, v),
g0 = g(u,v), g1 = g(u+1,v), g2 = g(u,v+1), g12 = g(u+1,v+1),
gm1 = g(u-1,v), gm2 = g(u,v-1).  Faces are addressed by their lower-left
vertex: face (u+1/2, v+1/2) -> index [u, v].
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import (DomainTooSmallError, GridDomain, MalformedInputError,
                   MeshError, Patch, triple_product)
from .indefinite import (CompatibilityError, DegenerateSeedError,
                         InconsistentNetError, InvalidParameterError,
                         NumericFailureError)


class NonConvexVertexError(MeshError):
    pass


class NoConormalError(MeshError):
    pass


@dataclass(frozen=True)
class ConjugateNet:
    """Vertex positions of a quad net intended to have planar faces."""

    domain: GridDomain
    q: np.ndarray

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
    def from_positions(cls, q) -> "ConjugateNet":
        q = np.asarray(q, dtype=float)
        return cls(GridDomain(q.shape[0], q.shape[1]), q)

    def edges_u(self) -> np.ndarray:
        return self.q[1:, :] - self.q[:-1, :]

    def edges_v(self) -> np.ndarray:
        return self.q[:, 1:] - self.q[:, :-1]

    def scale(self) -> float:
        e1, e2 = self.edges_u(), self.edges_v()
        return float(np.mean(np.concatenate([
            np.linalg.norm(e1, axis=-1).ravel(),
            np.linalg.norm(e2, axis=-1).ravel()])))

    def interior(self) -> "ConjugateNet":
        """The sub-net of interior vertices (used by round-trip checks)."""
        if self.domain.nu < 4 or self.domain.nv < 4:
            raise DomainTooSmallError("interior sub-net needs at least 4x4 vertices")
        return ConjugateNet.from_positions(self.q[1:-1, 1:-1])


@dataclass(frozen=True)
class ConjugateValidation:
    passed: bool
    max_planarity_residual: float
    planarity: np.ndarray              # per face, normalized
    failures: tuple = ()


def validate_conjugate(net: ConjugateNet, tol: float = 1e-8) -> ConjugateValidation:
    """Coplanarity of the four corners of every face, scale-normalized."""
    q = net.q
    a = q[1:, :-1] - q[:-1, :-1]
    b = q[:-1, 1:] - q[:-1, :-1]
    d = q[1:, 1:] - q[:-1, :-1]
    num = np.abs(triple_product(a, b, d))
    den = (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
           * np.linalg.norm(d, axis=-1))
    res = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    failures = tuple(("planarity", int(i), int(j))
                     for i, j in np.argwhere(res > tol)[:64])
    return ConjugateValidation(bool(res.max() <= tol) if res.size else True,
                               float(res.max()) if res.size else 0.0, res, failures)


def normalize_orientation(net: ConjugateNet) -> ConjugateNet:
    """Return a net with positive corner determinants, flipping v if needed."""
    d1, d2, d3, d4, _ = deltas(net, require_positive=False)
    stack = np.stack([d1.values, d2.values, d3.values, d4.values])
    if stack.min() > 0:
        return net
    if stack.max() < 0:
        warnings.warn("corner determinants all negative; flipping the v-axis")
        return ConjugateNet.from_positions(net.q[:, ::-1])
    raise NonConvexVertexError("corner determinants change sign; net is degenerate")


def deltas(net: ConjugateNet, require_positive: bool = True):
    """Corner determinants Delta_1..4 and the special-condition residual.

    All four live on interior vertices.  The special residual is
    |Delta_1 Delta_3 / (Delta_2 Delta_4) - 1|; a co-normal field exists iff
    it vanishes.
    """
    if net.domain.nu < 3 or net.domain.nv < 3:
        raise DomainTooSmallError("corner determinants need interior vertices")
    e1, e2 = net.edges_u(), net.edges_v()
    e1p, e1m = e1[1:, 1:-1], e1[:-1, 1:-1]
    e2p, e2m = e2[1:-1, 1:], e2[1:-1, :-1]
    d1 = triple_product(e1p, e1m, e2p)
    d2 = triple_product(e1m, e2m, e2p)
    d3 = triple_product(e1p, e1m, e2m)
    d4 = triple_product(e1p, e2m, e2p)
    stack = np.stack([d1, d2, d3, d4])
    if require_positive:
        signs = np.sign(stack)
        bad = np.argwhere(~np.all(signs == signs[0:1], axis=0))
        if len(bad):
            i, j = bad[0]
            raise NonConvexVertexError(
                f"corner determinants have mixed signs at vertex ({i+1}, {j+1})")
        if stack.min() <= 0:
            raise NonConvexVertexError(
                "corner determinants are non-positive; "
                "use normalize_orientation first")
    special = np.abs(d1 * d3 / (d2 * d4) - 1.0)
    return (Patch(d1, (1, 1)), Patch(d2, (1, 1)), Patch(d3, (1, 1)),
            Patch(d4, (1, 1)), Patch(special, (1, 1)))


def vertex_metric(net: ConjugateNet) -> Patch:
    """Definite metric omega on interior vertices, from
    2 omega^2 = avg(q1 x q2) . (q11 + q22)."""
    if net.domain.nu < 3 or net.domain.nv < 3:
        raise DomainTooSmallError("the vertex metric needs interior vertices")
    q = net.q
    e1, e2 = net.edges_u(), net.edges_v()
    e1p, e1m = e1[1:, 1:-1], e1[:-1, 1:-1]
    e2p, e2m = e2[1:-1, 1:], e2[1:-1, :-1]
    avg = 0.25 * (np.cross(e1p, e2p) + np.cross(e1m, e2p)
                  + np.cross(e1m, e2m) + np.cross(e1p, e2m))
    lap = (q[2:, 1:-1] - 2 * q[1:-1, 1:-1] + q[:-2, 1:-1]
           + q[1:-1, 2:] - 2 * q[1:-1, 1:-1] + q[1:-1, :-2])
    oo = 0.5 * np.einsum("ijk,ijk->ij", avg, lap)
    bad = np.argwhere(oo <= 0)
    if len(bad):
        i, j = bad[0]
        raise NonConvexVertexError(
            f"non-positive metric 2*omega^2 = {2*oo[i, j]:g} at vertex ({i+1}, {j+1})")
    return Patch(np.sqrt(oo), (1, 1))


def _face_corner_vectors(e1, e2, u, v):
    """q1 x q2 cross products for the four faces around interior vertex (u,v).

    Order NE, NW, SW, SE; each is parallel to the co-normal on that face and
    the proportionality factors are 1/(alpha omega), 1/(beta omega),
    1/(gamma omega), 1/(delta omega) respectively.
    """
    return (np.cross(e1[u, v], e2[u, v]),
            np.cross(e1[u - 1, v], e2[u, v]),
            np.cross(e1[u - 1, v], e2[u, v - 1]),
            np.cross(e1[u, v], e2[u, v - 1]))


_FACE_OFFSET = ((0, 0), (-1, 0), (-1, -1), (0, -1))   # NE, NW, SW, SE in face idx


@dataclass(frozen=True)
class DefiniteConormal:
    nu: np.ndarray                     # (nu-1, nv-1, 3) face co-normals
    alpha: Patch
    beta: Patch
    gamma: Patch
    delta: Patch
    lam: Patch
    omega: Patch
    lelieuvre_residual: float
    path_residual: float
    special_residual: float


def conormal_field_definite(net: ConjugateNet, seed_alpha: float = 1.0,
                            tol: float = 1e-8) -> DefiniteConormal:
    """Propagate the face co-normal field from a seed alpha at one vertex.

    The special condition is the exact existence criterion: the parameter
    chain alpha beta omega^2 = Delta_1, beta gamma omega^2 = Delta_2,
    gamma delta omega^2 = Delta_3 closes onto delta alpha omega^2 = Delta_4
    iff Delta_1 Delta_3 = Delta_2 Delta_4; any violation beyond tol raises
    :class:`NoConormalError`.
    """
    if seed_alpha <= 0 or not np.isfinite(seed_alpha):
        raise InvalidParameterError(f"seed alpha must be positive, got {seed_alpha}")
    d1, d2, d3, d4, special = deltas(net)
    sp_max = float(special.values.max())
    if sp_max > tol:
        raise NoConormalError(
            f"special-condition residual {sp_max:.3e} exceeds {tol:g}; "
            "no co-normal field exists for this conjugate net")
    omega = vertex_metric(net)
    e1, e2 = net.edges_u(), net.edges_v()
    nuu, nvv = net.domain.nu, net.domain.nv

    nu_faces = np.full((nuu - 1, nvv - 1, 3), np.nan)
    filled = np.zeros((nuu - 1, nvv - 1), dtype=bool)
    alpha = np.full((nuu - 2, nvv - 2), np.nan)
    beta = np.full_like(alpha, np.nan)
    gamma = np.full_like(alpha, np.nan)
    delta = np.full_like(alpha, np.nan)
    path_res = 0.0

    def chain(u, v, a_val):
        o2 = omega.at(u, v) ** 2
        b_val = d1.at(u, v) / (a_val * o2)
        g_val = d2.at(u, v) / (b_val * o2)
        dl_val = d3.at(u, v) / (g_val * o2)
        vals = (a_val, b_val, g_val, dl_val)
        if not all(np.isfinite(x) and x > 0 for x in vals):
            raise InconsistentNetError(
                f"parameter chain left the positive cone at vertex ({u}, {v})")
        return vals

    def fill_vertex(u, v, a_val):
        nonlocal path_res
        a_val, b_val, g_val, dl_val = chain(u, v, a_val)
        alpha[u - 1, v - 1] = a_val
        beta[u - 1, v - 1] = b_val
        gamma[u - 1, v - 1] = g_val
        delta[u - 1, v - 1] = dl_val
        o = omega.at(u, v)
        for w, p, (di, dj) in zip(_face_corner_vectors(e1, e2, u, v),
                                  (a_val, b_val, g_val, dl_val), _FACE_OFFSET):
            val = w / (p * o)
            fi, fj = u + di, v + dj
            if filled[fi, fj]:
                ref = nu_faces[fi, fj]
                path_res = max(path_res, float(
                    np.linalg.norm(val - ref) / max(np.linalg.norm(ref), 1e-300)))
            else:
                nu_faces[fi, fj] = val
                filled[fi, fj] = True

    def alpha_from_faces(u, v):
        corners = _face_corner_vectors(e1, e2, u, v)
        o = omega.at(u, v)
        o2 = o * o
        for idx, (di, dj) in enumerate(_FACE_OFFSET):
            fi, fj = u + di, v + dj
            if not filled[fi, fj]:
                continue
            w = corners[idx]
            ref = nu_faces[fi, fj]
            p = float(np.dot(w, ref) / np.dot(ref, ref)) / o   # nu = w/(p omega)
            if not np.isfinite(p) or p <= 0:
                raise InconsistentNetError(
                    f"propagation produced a non-positive parameter at ({u}, {v})")
            if idx == 0:
                return p
            if idx == 1:
                return d1.at(u, v) / (p * o2)
            if idx == 2:
                b = d2.at(u, v) / (p * o2)
                return d1.at(u, v) / (b * o2)
            return p * o2 / d4.at(u, v) * 1.0 if False else d4.at(u, v) / (p * o2)
        return None

    su, sv = 1, 1
    fill_vertex(su, sv, float(seed_alpha))
    done = np.zeros((nuu, nvv), dtype=bool)
    done[su, sv] = True
    queue = deque([(su, sv)])
    while queue:
        u, v = queue.popleft()
        for nu_, nv_ in ((u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)):
            if not (1 <= nu_ <= nuu - 2 and 1 <= nv_ <= nvv - 2) or done[nu_, nv_]:
                continue
            a_val = alpha_from_faces(nu_, nv_)
            if a_val is None:
                continue
            fill_vertex(nu_, nv_, a_val)
            done[nu_, nv_] = True
            queue.append((nu_, nv_))

    scale = net.scale()
    r = 0.0
    for i in range(nuu - 1):
        for j in range(1, nvv - 1):
            r = max(r, float(np.linalg.norm(
                np.cross(nu_faces[i, j - 1], nu_faces[i, j]) - e1[i, j])))
    for i in range(1, nuu - 1):
        for j in range(nvv - 1):
            r = max(r, float(np.linalg.norm(
                np.cross(nu_faces[i - 1, j], nu_faces[i, j]) + e2[i, j])))
    lam = 0.5 * (beta + delta)
    return DefiniteConormal(nu_faces, Patch(alpha, (1, 1)), Patch(beta, (1, 1)),
                            Patch(gamma, (1, 1)), Patch(delta, (1, 1)),
                            Patch(lam, (1, 1)), omega,
                            r / max(scale, 1e-300), path_res, sp_max)


@dataclass(frozen=True)
class ConormalParameters:
    omega: Patch
    alpha: Patch
    beta: Patch
    gamma: Patch
    delta: Patch
    lam: Patch
    closure_residual: float
    product_residual: float            # |(alpha+gamma)(beta+delta) - 4|
    sign_flipped: bool


def parameters_from_conormal(nu_faces: np.ndarray) -> ConormalParameters:
    """Recover (omega, alpha..delta, lambda) from a face co-normal field alone.

    omega comes from the double-determinant identity for 4 omega^2; the
    parameters are triple products of the four co-normals around each
    vertex.  The field's global sign is normalized so the parameters are
    positive (both signs satisfy the Lelieuvre equations).
    """
    nu_faces = np.asarray(nu_faces, dtype=float)
    if nu_faces.ndim != 3 or nu_faces.shape[2] != 3 or min(nu_faces.shape[:2]) < 2:
        raise MalformedInputError("need a (>=2)x(>=2) face grid of 3-vectors")
    f0 = nu_faces[:-1, :-1]
    f1 = nu_faces[1:, :-1]
    f2 = nu_faces[:-1, 1:]
    f12 = nu_faces[1:, 1:]
    oo4 = triple_product(f12 - f0, f2, f1) * triple_product(f12, f2 - f1, f0)
    bad = np.argwhere(oo4 <= 0)
    if len(bad):
        i, j = bad[0]
        raise NonConvexVertexError(
            f"4*omega^2 = {oo4[i, j]:g} non-positive at vertex ({i+1}, {j+1})")
    omega = 0.5 * np.sqrt(oo4)
    alpha = triple_product(f1, f12, f2) / omega
    flipped = False
    if np.mean(alpha) < 0:
        # global sign is a gauge freedom; normalize to positive parameters
        nu_faces = -nu_faces
        f0, f1, f2, f12 = -f0, -f1, -f2, -f12
        alpha = -alpha
        flipped = True
    beta = triple_product(f12, f2, f0) / omega
    gamma = triple_product(f2, f0, f1) / omega
    delta = triple_product(f0, f1, f12) / omega
    lam = 0.5 * (beta + delta)
    closure = (beta[..., None] * f1 + delta[..., None] * f2
               - alpha[..., None] * f0 - gamma[..., None] * f12)
    nrm = np.linalg.norm(f0, axis=-1) + np.linalg.norm(f12, axis=-1)
    closure_res = float((np.linalg.norm(closure, axis=-1) / nrm).max())
    product_res = float(np.abs((alpha + gamma) * (beta + delta) - 4.0).max())
    return ConormalParameters(Patch(omega, (1, 1)), Patch(alpha, (1, 1)),
                              Patch(beta, (1, 1)), Patch(gamma, (1, 1)),
                              Patch(delta, (1, 1)), Patch(lam, (1, 1)),
                              closure_res, product_res, flipped)


def moutard_coefficient_definite(nu_faces: np.ndarray,
                                 degenerate_tol: float = 1e-12):
    """Least-squares hstar with nu11 + nu22 = hstar nu on interior faces."""
    nu_faces = np.asarray(nu_faces, dtype=float)
    if min(nu_faces.shape[:2]) < 3:
        raise DomainTooSmallError("the five-point stencil needs interior faces")
    lap = (nu_faces[2:, 1:-1] + nu_faces[:-2, 1:-1] + nu_faces[1:-1, 2:]
           + nu_faces[1:-1, :-2] - 4 * nu_faces[1:-1, 1:-1])
    center = nu_faces[1:-1, 1:-1]
    cc = np.einsum("ijk,ijk->ij", center, center)
    if np.any(np.sqrt(cc) < degenerate_tol):
        raise InconsistentNetError("co-normal magnitude vanishes on a face")
    hstar = np.einsum("ijk,ijk->ij", lap, center) / cc
    rem = lap - hstar[..., None] * center
    residual = float((np.linalg.norm(rem, axis=-1) / np.sqrt(cc)).max())
    return Patch(hstar, (1, 1)), residual


def affine_normal_definite(net: ConjugateNet, omega: Patch) -> Patch:
    """xi = (q11 + q22) / (2 omega) on interior vertices."""
    q = net.q
    lap = (q[2:, 1:-1] - 2 * q[1:-1, 1:-1] + q[:-2, 1:-1]
           + q[1:-1, 2:] - 2 * q[1:-1, 1:-1] + q[1:-1, :-2])
    return Patch(lap / (2 * omega.values[..., None]), (1, 1))


def nu_xi_products_residual(nu_faces: np.ndarray, xi: Patch, lam: Patch) -> float:
    """The four products nu.xi around each vertex equal lam, 1/lam, lam, 1/lam
    for the NE, NW, SW, SE faces respectively."""
    worst = 0.0
    kmax, lmax = lam.values.shape
    for k in range(kmax):
        for l in range(lmax):
            u, v = k + 1, l + 1
            x = xi.at(u, v)
            lv = lam.at(u, v)
            pairs = ((nu_faces[u, v], lv), (nu_faces[u - 1, v], 1 / lv),
                     (nu_faces[u - 1, v - 1], lv), (nu_faces[u, v - 1], 1 / lv))
            for nu_f, target in pairs:
                worst = max(worst, abs(float(np.dot(nu_f, x)) - target) / abs(target))
    return worst


def dual_lelieuvre_residuals(nu_faces: np.ndarray, lam: Patch, net: ConjugateNet,
                             xi: Patch) -> dict:
    """The four dual Lelieuvre identities relating co-normal differences to
    edge x normal cross products; max normalized residual per identity."""
    e1, e2 = net.edges_u(), net.edges_v()
    nuu, nvv = net.domain.nu, net.domain.nv
    out = {"v_edge_base": 0.0, "v_edge_shift": 0.0,
           "u_edge_base": 0.0, "u_edge_shift": 0.0}

    def rel(lhs_terms, rhs):
        num = float(np.linalg.norm(sum(lhs_terms) - rhs))
        den = sum(float(np.linalg.norm(t)) for t in lhs_terms) + float(np.linalg.norm(rhs))
        return num / den if den > 0 else 0.0

    for u in range(1, nuu - 1):
        for v in range(1, nvv - 1):
            l0 = lam.at(u, v)
            out["v_edge_base"] = max(out["v_edge_base"], rel(
                (nu_faces[u, v] / l0, -l0 * nu_faces[u - 1, v]),
                -np.cross(e2[u, v], xi.at(u, v))))
            out["u_edge_base"] = max(out["u_edge_base"], rel(
                (nu_faces[u, v] / l0, -l0 * nu_faces[u, v - 1]),
                np.cross(e1[u, v], xi.at(u, v))))
            if xi.covers(u, v + 1):
                l2 = lam.at(u, v + 1)
                out["v_edge_shift"] = max(out["v_edge_shift"], rel(
                    (l2 * nu_faces[u, v], -nu_faces[u - 1, v] / l2),
                    -np.cross(e2[u, v], xi.at(u, v + 1))))
            if xi.covers(u + 1, v):
                l1 = lam.at(u + 1, v)
                out["u_edge_shift"] = max(out["u_edge_shift"], rel(
                    (l1 * nu_faces[u, v], -nu_faces[u, v - 1] / l1),
                    np.cross(e1[u, v], xi.at(u + 1, v))))
    return out


@dataclass(frozen=True)
class WeightedDerivatives:
    e: Patch                           # E on vertices, origin (1, 2)
    f: Patch                           # F on vertices, origin (2, 1)
    expansion_residual: float          # lemma expansions vs direct D fields
    orthogonality_residual: float      # D-derivatives vs designated co-normals


def weighted_normal_derivatives(net: ConjugateNet, xi: Patch, lam: Patch,
                                omega: Patch, alpha: Patch, beta: Patch,
                                gamma: Patch, delta: Patch,
                                nu_faces: np.ndarray) -> WeightedDerivatives:
    """E and F from their closed forms, checked against the direct weighted
    derivatives of xi.

    D1+-xi live on u-edges between interior vertices, D2+-xi on v-edges.
    E(u,v) is the q1-coefficient of D1-xi(u+1/2,v); F(u,v) the
    q2-coefficient of D2+xi(u,v+1/2).  The expansion residual compares all
    four lemma expansions (built from the closed-form E, F) with the direct
    differences; orthogonality checks the four D fields against the
    co-normals they must annihilate.
    """
    nuu, nvv = net.domain.nu, net.domain.nv
    e1, e2 = net.edges_u(), net.edges_v()

    def pv(p, u, v):
        return p.at(u, v)

    e_vals = np.full((max(nuu - 4, 0), max(nvv - 4, 0)), np.nan)
    f_vals = np.full((max(nuu - 4, 0), max(nvv - 4, 0)), np.nan)
    # E on u in [1, nuu-3], v in [2, nvv-3]; F on u in [2, nuu-3], v in [1, nvv-3]
    e_vals = np.full((max(nuu - 3, 0), max(nvv - 4, 0)), np.nan)
    f_vals = np.full((max(nuu - 4, 0), max(nvv - 3, 0)), np.nan)
    for u in range(1, nuu - 2):
        for v in range(2, nvv - 2):
            a0, d0 = pv(alpha, u, v), pv(delta, u, v)
            l0, o0 = pv(lam, u, v), pv(omega, u, v)
            g1, b1 = pv(gamma, u + 1, v), pv(beta, u + 1, v)
            l1, o1 = pv(lam, u + 1, v), pv(omega, u + 1, v)
            d2, o2 = pv(delta, u, v + 1), pv(omega, u, v + 1)
            am2, om2 = pv(alpha, u, v - 1), pv(omega, u, v - 1)
            e_vals[u - 1, v - 2] = (
                (d2 * o2 - a0 * o0) / (a0 * o0 * b1 * o1)
                + (am2 * om2 - d0 * o0) / (d0 * o0 * g1 * o1) / l1 ** 2
                + (2 * l0 - d0 - a0 * l0 ** 2) / (a0 * d0 * o0)
                + (2 / l1 - g1 - b1 / l1 ** 2) / (g1 * b1 * o1))
    for u in range(2, nuu - 2):
        for v in range(1, nvv - 2):
            a0, b0 = pv(alpha, u, v), pv(beta, u, v)
            l0, o0 = pv(lam, u, v), pv(omega, u, v)
            g2, d2 = pv(gamma, u, v + 1), pv(delta, u, v + 1)
            l2, o2 = pv(lam, u, v + 1), pv(omega, u, v + 1)
            b1, o1 = pv(beta, u + 1, v), pv(omega, u + 1, v)
            am1, om1 = pv(alpha, u - 1, v), pv(omega, u - 1, v)
            f_vals[u - 2, v - 1] = (
                (am1 * om1 - b0 * o0) / (b0 * o0 * g2 * o2)
                + l2 ** 2 * (b1 * o1 - a0 * o0) / (a0 * o0 * d2 * o2)
                + (2 / l0 - a0 - b0 / l0 ** 2) / (a0 * b0 * o0)
                + (2 * l2 - d2 - g2 * l2 ** 2) / (g2 * d2 * o2))
    e_patch = Patch(e_vals, (1, 2))
    f_patch = Patch(f_vals, (2, 1))

    exp_res = 0.0
    orth_res = 0.0

    def rel(lhs, rhs_terms):
        num = float(np.linalg.norm(lhs - sum(rhs_terms)))
        den = float(np.linalg.norm(lhs)) + sum(float(np.linalg.norm(t))
                                               for t in rhs_terms)
        return num / den if den > 0 else 0.0

    for u in range(1, nuu - 2):
        for v in range(1, nvv - 2):
            l0, l1 = pv(lam, u, v), pv(lam, u + 1, v)
            d1p = l1 * xi.at(u + 1, v) - xi.at(u, v) / l0
            d1m = xi.at(u + 1, v) / l1 - l0 * xi.at(u, v)
            nrm = float(np.linalg.norm(d1p)) + float(np.linalg.norm(d1m))
            if nrm > 0:
                orth_res = max(
                    orth_res,
                    abs(float(np.dot(d1p, nu_faces[u, v]))) /
                    (nrm * float(np.linalg.norm(nu_faces[u, v]))),
                    abs(float(np.dot(d1m, nu_faces[u, v - 1]))) /
                    (nrm * float(np.linalg.norm(nu_faces[u, v - 1]))))
            if e_patch.covers(u, v):
                e0 = e_patch.at(u, v)
                a0, b0, d0 = pv(alpha, u, v), pv(beta, u, v), pv(delta, u, v)
                o0 = pv(omega, u, v)
                exp_res = max(exp_res, rel(d1p, (
                    (l1 ** 2 * e0 + (l1 ** 2 - 1 / l0 ** 2) * (a0 * l0 ** 2 - b0)
                     / (a0 * o0 * d0)) * e1[u, v],
                    (l1 ** 2 - 1 / l0 ** 2) / (a0 * o0) * e2[u, v])))
                exp_res = max(exp_res, rel(d1m, (
                    e0 * e1[u, v],
                    (l0 ** 2 - 1 / l1 ** 2) / (d0 * o0) * e2[u, v - 1])))
    for u in range(1, nuu - 2):
        for v in range(1, nvv - 2):
            l0, l2 = pv(lam, u, v), pv(lam, u, v + 1)
            d2p = l2 * xi.at(u, v + 1) - xi.at(u, v) / l0
            d2m = xi.at(u, v + 1) / l2 - l0 * xi.at(u, v)
            nrm = float(np.linalg.norm(d2p)) + float(np.linalg.norm(d2m))
            if nrm > 0:
                orth_res = max(
                    orth_res,
                    abs(float(np.dot(d2p, nu_faces[u, v]))) /
                    (nrm * float(np.linalg.norm(nu_faces[u, v]))),
                    abs(float(np.dot(d2m, nu_faces[u - 1, v]))) /
                    (nrm * float(np.linalg.norm(nu_faces[u - 1, v]))))
            if f_patch.covers(u, v):
                f0 = f_patch.at(u, v)
                a0, b0, d0 = pv(alpha, u, v), pv(beta, u, v), pv(delta, u, v)
                o0 = pv(omega, u, v)
                exp_res = max(exp_res, rel(d2p, (
                    (l2 ** 2 - 1 / l0 ** 2) / (a0 * o0) * e1[u, v],
                    f0 * e2[u, v])))
                # the D2- coefficient carries 1/l2^2 on the whole bracket
                exp_res = max(exp_res, rel(d2m, (
                    (l0 ** 2 - 1 / l2 ** 2) / (b0 * o0) * e1[u - 1, v],
                    (f0 + (l2 ** 2 - 1 / l0 ** 2) * (d0 - a0 * l0 ** 2)
                     / (a0 * o0 * b0)) / l2 ** 2 * e2[u, v])))
    return WeightedDerivatives(e_patch, f_patch, exp_res, orth_res)


@dataclass(frozen=True)
class DiagonalCurvature:
    h1star: Patch                      # faces, origin (1, 1)
    h2star: Patch
    h: Patch                           # mean curvature per face
    diagonal_residual: float


def diagonal_curvature(nu_faces: np.ndarray, lam: Patch, hstar: Patch,
                       net: ConjugateNet, xi: Patch) -> DiagonalCurvature:
    """Diagonal curvature coefficients and the affine mean curvature.

    H1* = 4 + H* - 2 lam12^-2 - 2 lam0^-2 and H2* = 4 + H* - 2 lam1^2
    - 2 lam2^2 per face; they satisfy H2* nu = d1 x D_{d2} xi and
    H1* nu = -d2 x D_{d1} xi for the diagonal weighted derivatives, and
    H = (H* + 4 - lam0^-2 - lam12^-2 - lam1^2 - lam2^2) / (beta1 omega1 +
    delta2 omega2).
    """
    q = net.q
    nuu, nvv = net.domain.nu, net.domain.nv
    shape = (max(nuu - 3, 0), max(nvv - 3, 0))
    h1 = np.full(shape, np.nan)
    h2 = np.full(shape, np.nan)
    diag_res = 0.0
    for fu in range(1, nuu - 2):
        for fv in range(1, nvv - 2):
            l0, l1 = lam.at(fu, fv), lam.at(fu + 1, fv)
            l2, l12 = lam.at(fu, fv + 1), lam.at(fu + 1, fv + 1)
            hs = hstar.at(fu, fv)
            h1v = 4 + hs - 2 / l12 ** 2 - 2 / l0 ** 2
            h2v = 4 + hs - 2 * l1 ** 2 - 2 * l2 ** 2
            h1[fu - 1, fv - 1] = h1v
            h2[fu - 1, fv - 1] = h2v
            d1 = q[fu + 1, fv + 1] - q[fu, fv]
            d2 = q[fu, fv + 1] - q[fu + 1, fv]
            dd2 = l2 * xi.at(fu, fv + 1) - l1 * xi.at(fu + 1, fv)
            dd1 = xi.at(fu + 1, fv + 1) / l12 - xi.at(fu, fv) / l0
            nu_f = nu_faces[fu, fv]
            r1 = np.linalg.norm(h2v * nu_f - np.cross(d1, dd2))
            r2 = np.linalg.norm(h1v * nu_f + np.cross(d2, dd1))
            den1 = abs(h2v) * np.linalg.norm(nu_f) + np.linalg.norm(d1) * np.linalg.norm(dd2)
            den2 = abs(h1v) * np.linalg.norm(nu_f) + np.linalg.norm(d2) * np.linalg.norm(dd1)
            if den1 > 0:
                diag_res = max(diag_res, float(r1 / den1))
            if den2 > 0:
                diag_res = max(diag_res, float(r2 / den2))
    return DiagonalCurvature(Patch(h1, (1, 1)), Patch(h2, (1, 1)),
                             Patch(np.full(shape, np.nan), (1, 1)),
                             diag_res)


def mean_curvature_definite(hstar: Patch, lam: Patch, omega: Patch,
                            beta: Patch, delta: Patch) -> Patch:
    """H per face from the trace-of-shape-operator formula."""
    kmax, lmax = hstar.values.shape
    h = np.full((kmax, lmax), np.nan)
    for k in range(kmax):
        for l in range(lmax):
            fu, fv = k + hstar.origin[0], l + hstar.origin[1]
            l0, l1 = lam.at(fu, fv), lam.at(fu + 1, fv)
            l2, l12 = lam.at(fu, fv + 1), lam.at(fu + 1, fv + 1)
            den = (beta.at(fu + 1, fv) * omega.at(fu + 1, fv)
                   + delta.at(fu, fv + 1) * omega.at(fu, fv + 1))
            if den == 0:
                raise NumericFailureError(
                    f"degenerate denominator in H at face ({fu}+1/2, {fv}+1/2)")
            h[k, l] = (hstar.at(fu, fv) + 4 - 1 / l0 ** 2 - 1 / l12 ** 2
                       - l1 ** 2 - l2 ** 2) / den
    return Patch(h, hstar.origin)


@dataclass(frozen=True)
class DefiniteCompatibility:
    comp1: Patch                       # faces
    comp2: Patch
    comp3: Patch
    abcd: dict                         # per-face expansion coefficients a,b,c,d
    max_relative: float
    max_relative_per_eq: dict = field(default_factory=dict)


def _abcd(lam, omega, alpha, beta, gamma, delta, e, f, u, v):
    """Expansion coefficients of the diagonal derivatives in the edge basis."""
    l0, l1, l2, l12 = lam.at(u, v), lam.at(u + 1, v), lam.at(u, v + 1), lam.at(u + 1, v + 1)
    a0, b0, d0, o0 = alpha.at(u, v), beta.at(u, v), delta.at(u, v), omega.at(u, v)
    a1, b1, dd1, o1 = alpha.at(u + 1, v), beta.at(u + 1, v), delta.at(u + 1, v), omega.at(u + 1, v)
    d2, o2 = delta.at(u, v + 1), omega.at(u, v + 1)
    e0 = e.at(u, v)
    f0, f1 = f.at(u, v), f.at(u + 1, v)
    big_a1 = l1 ** 2 * e0 + (l1 ** 2 - 1 / l0 ** 2) * (a0 * l0 ** 2 - b0) / (a0 * o0 * d0)
    acoef = (big_a1 + (l1 ** 2 - 1 / l12 ** 2) / (b1 * o1)
             + (a0 * o0 - d2 * o2) / (b1 * o1) * ((l1 ** 2 - 1 / l0 ** 2) / (a0 * o0)))
    bcoef = ((f1 + (l12 ** 2 - 1 / l1 ** 2) * (dd1 - a1 * l1 ** 2) / (a1 * o1 * b1))
             / l12 ** 2
             + a0 * o0 / (b1 * o1) * ((l1 ** 2 - 1 / l0 ** 2) / (a0 * o0)))
    ccoef = (l2 ** 2 - 1 / l0 ** 2) / (a0 * o0) - big_a1
    dcoef = f0 - (l1 ** 2 - 1 / l0 ** 2) / (a0 * o0)
    return acoef, bcoef, ccoef, dcoef


def compatibility_residuals_definite(omega: Patch, lam: Patch, alpha: Patch,
                                     beta: Patch, gamma: Patch, delta: Patch,
                                     e: Patch, f: Patch, h1star: Patch,
                                     h2star: Patch) -> DefiniteCompatibility:
    """The three compatibility equations on faces.

    comp1: alpha0 omega0 + gamma12 omega12 = beta1 omega1 + delta2 omega2.
    comp2: H1* = alpha0 omega0 a + gamma12 omega12 b.
    comp3: H2* = delta2 omega2 d - beta1 omega1 c.
    The a, b, c, d coefficients are exposed per face for inspection.
    """
    k0, l0_ = alpha.origin
    kmax, lmax = alpha.values.shape
    umin, umax = k0, k0 + kmax - 1
    vmin, vmax = l0_, l0_ + lmax - 1
    c1 = np.full((max(umax - umin, 0), max(vmax - vmin, 0)), np.nan)
    c2 = np.full_like(c1, np.nan)
    c3 = np.full_like(c1, np.nan)
    abcd = {}
    per_eq = {"comp1": 0.0, "comp2": 0.0, "comp3": 0.0}
    for u in range(umin, umax):
        for v in range(vmin, vmax):
            t1 = alpha.at(u, v) * omega.at(u, v)
            t2 = gamma.at(u + 1, v + 1) * omega.at(u + 1, v + 1)
            t3 = beta.at(u + 1, v) * omega.at(u + 1, v)
            t4 = delta.at(u, v + 1) * omega.at(u, v + 1)
            val = t1 + t2 - t3 - t4
            c1[u - umin, v - vmin] = val
            per_eq["comp1"] = max(per_eq["comp1"],
                                  abs(val) / (abs(t1) + abs(t2) + abs(t3) + abs(t4)))
            ok = (e.covers(u, v) and f.covers(u, v) and f.covers(u + 1, v)
                  and h1star.covers(u, v))
            if not ok:
                continue
            acoef, bcoef, ccoef, dcoef = _abcd(lam, omega, alpha, beta, gamma,
                                               delta, e, f, u, v)
            abcd[(u, v)] = (acoef, bcoef, ccoef, dcoef)
            h1v, h2v = h1star.at(u, v), h2star.at(u, v)
            s1, s2 = t1 * acoef, t2 * bcoef
            val2 = h1v - s1 - s2
            c2[u - umin, v - vmin] = val2
            den2 = abs(h1v) + abs(s1) + abs(s2)
            if den2 > 0:
                per_eq["comp2"] = max(per_eq["comp2"], abs(val2) / den2)
            s3, s4 = t4 * dcoef, t3 * ccoef
            val3 = h2v - s3 + s4
            c3[u - umin, v - vmin] = val3
            den3 = abs(h2v) + abs(s3) + abs(s4)
            if den3 > 0:
                per_eq["comp3"] = max(per_eq["comp3"], abs(val3) / den3)
    return DefiniteCompatibility(Patch(c1, (umin, vmin)), Patch(c2, (umin, vmin)),
                                 Patch(c3, (umin, vmin)), abcd,
                                 max(per_eq.values()), per_eq)

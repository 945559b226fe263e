"""Rectangular quad-grid index space, typed fields, and difference operators.

Vertices live at integer pairs (i, j) with 0 <= i < nu, 0 <= j < nv; the i
index runs along the u-direction.  Faces sit at half-integer centers
(i+1/2, j+1/2) and are addressed by the integer pair of their lower-left
vertex, so a face array has shape (nu-1, nv-1).  Edges follow the same
convention: a u-edge (i+1/2, j) is stored at [i, j] in an (nu-1, nv) array,
a v-edge (i, j+1/2) at [i, j] in an (nu, nv-1) array.

The discrete derivatives are plain forward differences,

    f1(i+1/2, j) = f(i+1, j) - f(i, j)
    f2(i, j+1/2) = f(i, j+1) - f(i, j)

with second differences on interior vertices and the mixed difference

    f12(i+1/2, j+1/2) = f(i+1, j+1) + f(i, j) - f(i+1, j) - f(i, j+1)

attached to faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Base class for all geometry errors raised by this package."""


class DomainTooSmallError(MeshError):
    pass


class MalformedInputError(MeshError):
    pass


@dataclass(frozen=True)
class GridDomain:
    """A dense rectangle of nu x nv vertices."""

    nu: int
    nv: int

    def __post_init__(self):
        if self.nu < 2 or self.nv < 2:
            raise DomainTooSmallError(
                f"grid needs at least 2 vertices per axis, got {self.nu} x {self.nv}")

    @property
    def vertex_count(self) -> int:
        return self.nu * self.nv

    @property
    def face_count(self) -> int:
        return (self.nu - 1) * (self.nv - 1)

    @property
    def edge_count_u(self) -> int:
        return (self.nu - 1) * self.nv

    @property
    def edge_count_v(self) -> int:
        return self.nu * (self.nv - 1)

    def vertex_shape(self) -> tuple[int, int]:
        return (self.nu, self.nv)

    def face_shape(self) -> tuple[int, int]:
        return (self.nu - 1, self.nv - 1)


def _freeze(values: np.ndarray) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(a)):
        raise MalformedInputError("field contains non-finite values")
    a = a.copy()
    a.setflags(write=False)
    return a


def _check_shape(values: np.ndarray, lead: tuple[int, int], what: str) -> None:
    if values.shape[:2] != lead or values.ndim not in (2, 3) or (
            values.ndim == 3 and values.shape[2] != 3):
        raise MalformedInputError(
            f"{what} expects shape {lead} or {lead}+(3,), got {values.shape}")


@dataclass(frozen=True)
class VertexField:
    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        _check_shape(self.values, self.domain.vertex_shape(), "vertex field")


@dataclass(frozen=True)
class FaceField:
    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        _check_shape(self.values, self.domain.face_shape(), "face field")


@dataclass(frozen=True)
class EdgeFieldU:
    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        _check_shape(self.values, (self.domain.nu - 1, self.domain.nv), "u-edge field")


@dataclass(frozen=True)
class EdgeFieldV:
    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        _check_shape(self.values, (self.domain.nu, self.domain.nv - 1), "v-edge field")


@dataclass(frozen=True)
class Patch:
    """A field supported on a sub-rectangle of the lattice.

    ``values[k, l]`` belongs to lattice point ``(origin[0]+k, origin[1]+l)``.
    Used for quantities whose stencil only fits away from the boundary
    (cubic coefficients, curvatures, residuals); the origin and shape make
    the defined region explicit instead of padding with sentinels.
    """

    values: np.ndarray
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        a = np.asarray(self.values, dtype=float)
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    def at(self, i: int, j: int):
        k, l = i - self.origin[0], j - self.origin[1]
        if k < 0 or l < 0 or k >= self.values.shape[0] or l >= self.values.shape[1]:
            raise KeyError(f"({i}, {j}) outside patch "
                           f"origin={self.origin} shape={self.values.shape[:2]}")
        return self.values[k, l]

    def covers(self, i: int, j: int) -> bool:
        k, l = i - self.origin[0], j - self.origin[1]
        return 0 <= k < self.values.shape[0] and 0 <= l < self.values.shape[1]


def first_difference(f: VertexField, axis: str) -> EdgeFieldU | EdgeFieldV:
    """Forward difference along ``axis`` ("u" or "v"), one value per edge."""
    v = f.values
    if axis == "u":
        if f.domain.nu < 2:
            raise DomainTooSmallError("need >= 2 vertices along u")
        return EdgeFieldU(f.domain, v[1:, :] - v[:-1, :])
    if axis == "v":
        if f.domain.nv < 2:
            raise DomainTooSmallError("need >= 2 vertices along v")
        return EdgeFieldV(f.domain, v[:, 1:] - v[:, :-1])
    raise ValueError(f"axis must be 'u' or 'v', got {axis!r}")


def second_difference(f: VertexField, axis: str) -> Patch:
    """Three-point second difference, defined on axis-interior vertices."""
    v = f.values
    if axis == "u":
        if f.domain.nu < 3:
            raise DomainTooSmallError("need >= 3 vertices along u")
        return Patch(v[2:, :] - 2 * v[1:-1, :] + v[:-2, :], origin=(1, 0))
    if axis == "v":
        if f.domain.nv < 3:
            raise DomainTooSmallError("need >= 3 vertices along v")
        return Patch(v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2], origin=(0, 1))
    raise ValueError(f"axis must be 'u' or 'v', got {axis!r}")


def mixed_difference(f: VertexField) -> FaceField:
    """Four-corner mixed difference, one value per face."""
    v = f.values
    return FaceField(f.domain, v[1:, 1:] + v[:-1, :-1] - v[1:, :-1] - v[:-1, 1:])


def triple_product(v1, v2, v3):
    """Scalar triple product [v1, v2, v3] = (v1 x v2) . v3.

    Accepts single 3-vectors or broadcastable arrays of them.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    v3 = np.asarray(v3, dtype=float)
    return np.einsum("...k,...k->...", np.cross(v1, v2), v3)

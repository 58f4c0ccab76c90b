"""Uniform Cartesian grids with d-linear interpolation of nodal data.

Nodes are stored in C order (last dimension varies fastest), so a node's
flat index is ``sum(idx[k] * strides[k])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BOUNDARY_POLICIES = ("clamp", "error")


class OutOfDomainError(ValueError):
    """A point lies outside the grid box under the ``error`` policy."""


@dataclass(frozen=True)
class Grid:
    lower: np.ndarray
    upper: np.ndarray
    spacing: np.ndarray
    counts: tuple[int, ...]
    coords: tuple[np.ndarray, ...] = field(repr=False, compare=False)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def num_nodes(self) -> int:
        return math.prod(self.counts)

    @property
    def strides(self) -> np.ndarray:
        s = np.ones(self.dim, dtype=np.int64)
        for k in range(self.dim - 2, -1, -1):
            s[k] = s[k + 1] * self.counts[k + 1]
        return s

    @property
    def dx(self) -> float:
        """Cell diameter (Euclidean diagonal of one cell)."""
        return float(np.sqrt(np.sum(self.spacing**2)))

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(num_nodes, dim)``."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def multi_index(self, flat: int | np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(flat, self.counts), axis=-1)

    def flat_index(self, idx: Sequence[int] | np.ndarray) -> int | np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(idx), -1, 0)), self.counts)

    def contains(self, p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        slack = tol * np.maximum(1.0, np.abs(self.upper - self.lower))
        return np.all((p >= self.lower - slack) & (p <= self.upper + slack), axis=-1)

    def node_mask(self, lower, upper, tol: float = 1e-9) -> np.ndarray:
        """Boolean mask of nodes lying inside the box ``[lower, upper]``."""
        x = self.nodes()
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        return np.all((x >= lower - tol) & (x <= upper + tol), axis=-1)


def make_grid(lower, upper, counts) -> Grid:
    """Grid with an explicit node count per dimension."""
    lower = np.atleast_1d(np.array(lower, dtype=float))
    upper = np.atleast_1d(np.array(upper, dtype=float))
    counts = tuple(int(c) for c in np.atleast_1d(counts))
    if not (lower.shape == upper.shape and len(counts) == lower.size):
        raise ValueError("lower, upper and counts must have matching dimension")
    if np.any(~np.isfinite(lower)) or np.any(~np.isfinite(upper)):
        raise ValueError("box bounds must be finite")
    if np.any(upper <= lower):
        raise ValueError(f"degenerate box: lower={lower}, upper={upper}")
    if any(c < 2 for c in counts):
        raise ValueError("every dimension needs at least 2 nodes")
    spacing = (upper - lower) / (np.asarray(counts) - 1)
    coords = []
    for k, c in enumerate(counts):
        ck = lower[k] + spacing[k] * np.arange(c)
        ck[-1] = upper[k]
        ck.setflags(write=False)
        coords.append(ck)
    for a in (lower, upper, spacing):
        a.setflags(write=False)
    return Grid(lower, upper, spacing, counts, tuple(coords))


def build_grid(lower, upper, target_spacing: float) -> Grid:
    """Cover the box exactly with a uniform grid whose step is <= ``target_spacing``.

    The cell count per dimension is the ceiling of ``extent / target_spacing``;
    ratios within 1e-9 of an integer are rounded so that e.g. 2/0.1 gives 20.
    """
    if not (target_spacing > 0 and math.isfinite(target_spacing)):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if np.any(upper <= lower):
        raise ValueError(f"degenerate box: lower={lower}, upper={upper}")
    counts = []
    for extent in upper - lower:
        ratio = extent / target_spacing
        cells = round(ratio) if abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio) else math.ceil(ratio)
        counts.append(max(int(cells), 1) + 1)
    return make_grid(lower, upper, counts)


def locate(grid: Grid, p) -> tuple[np.ndarray, np.ndarray]:
    """Cell multi-index and local coordinates in [0, 1]^d.

    Cells are left-closed and right-open except the last one per dimension,
    which is closed, so a node gets offset 0 in the cell it starts. The
    guess from the uniform spacing is moved by one cell when rounding puts
    it on the wrong side of a node. Points outside the box are projected
    onto it.
    """
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)):
        raise ValueError("point has NaN coordinates")
    if p.shape[-1] != grid.dim:
        raise ValueError(f"expected points of dimension {grid.dim}, got {p.shape[-1]}")
    cell = np.empty(p.shape, dtype=np.int64)
    frac = np.empty(p.shape, dtype=float)
    inv = 1.0 / grid.spacing
    for k in range(grid.dim):
        ck = grid.coords[k]
        pk = np.clip(p[..., k], grid.lower[k], grid.upper[k])
        top = grid.counts[k] - 2
        c = np.minimum(np.floor((pk - grid.lower[k]) * inv[k]), top).astype(np.int64)
        c = np.where((c < top) & (pk >= ck[np.minimum(c + 1, top)]), c + 1, c)
        c = np.where((c > 0) & (pk < ck[c]), c - 1, c)
        cell[..., k] = c
        frac[..., k] = np.clip((pk - ck[c]) / (ck[c + 1] - ck[c]), 0.0, 1.0)
    return cell, frac


def _project(grid: Grid, p: np.ndarray, policy: str) -> np.ndarray:
    if policy == "clamp":
        return np.clip(p, grid.lower, grid.upper)
    if policy == "error":
        if not np.all(grid.contains(p)):
            raise OutOfDomainError("point outside the grid box under the 'error' boundary policy")
        return np.clip(p, grid.lower, grid.upper)
    raise ValueError(f"unknown boundary policy {policy!r}; expected one of {BOUNDARY_POLICIES}")


def interpolate_values(grid: Grid, values: np.ndarray, p, policy: str = "clamp") -> np.ndarray:
    """d-linear interpolant of nodal ``values`` evaluated at points ``p`` (shape ``(..., d)``)."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != grid.num_nodes:
        raise ValueError(f"expected {grid.num_nodes} nodal values, got {values.size}")
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)):
        raise ValueError("point has NaN coordinates")
    p = _project(grid, p, policy)
    cell, frac = locate(grid, p)
    strides = grid.strides
    base = np.tensordot(cell, strides, axes=([-1], [0]))
    d = grid.dim
    # corner bit (d - 1 - k) selects the upper node along axis k; reduce the
    # last axis first with a lerp that is exact for constants and at nodes
    corners = []
    for corner in range(1 << d):
        off = base.copy()
        for k in range(d):
            if corner >> (d - 1 - k) & 1:
                off = off + strides[k]
        corners.append(values[off])
    for k in range(d - 1, -1, -1):
        t = frac[..., k]
        corners = [_lerp(corners[2 * m], corners[2 * m + 1], t) for m in range(len(corners) // 2)]
    return corners[0]


def _lerp(a, b, t):
    return np.where(t <= 0.5, a + t * (b - a), b - (1.0 - t) * (b - a))


@dataclass(frozen=True)
class NodalField:
    """Nodal values on a grid; the induced function is continuous and piecewise d-linear."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.num_nodes:
            raise ValueError(f"expected {self.grid.num_nodes} nodal values, got {v.size}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, p, policy: str = "clamp"):
        return interpolate(self, p, policy)


def interpolate(field: NodalField, p, policy: str = "clamp"):
    """Evaluate the d-linear interpolant of ``field`` at ``p``.

    A single point returns a float, a batch of shape ``(..., d)`` an array.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1)
    out = interpolate_values(field.grid, field.values, p, policy)
    return float(out) if out.ndim == 0 else out

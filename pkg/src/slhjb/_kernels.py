"""Compiled inner loops of the semi-Lagrangian update.

The interpolation arithmetic mirrors :func:`slhjb.grid.interpolate_values`
operation for operation (cell from the uniform spacing, weights clamped to
[0, 1], nested linear interpolation from the last axis to the first), so
all paths agree to the last bit. Checks are accumulated as counts rather than branches; callers
raise on nonzero counts.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_OPTS = dict(cache=True, error_model="numpy")


@njit(**_OPTS)
def lerp(a, b, t):
    # anchored at the nearer end: exact for constants and at t = 0, 1
    if t <= 0.5:
        return a + t * (b - a)
    return b - (1.0 - t) * (b - a)


@njit(**_OPTS)
def sl_sweep(values, coords, counts, strides, lower, inv, nodes, vel, run, dt, disc, clamp,
             best, arg, j):
    """Relax ``best``/``arg`` with control index ``j`` (any dimension).

    For every node i the candidate is
    ``dt * run[i] + disc * I1[values](nodes[i] + dt * vel[i])``; the minimum
    is replaced only on strict improvement, so ties keep the smaller index.
    Returns the number of foot points outside the box; without ``clamp``
    those nodes are skipped.
    """
    n, d = nodes.shape
    cell = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    buf = np.empty(1 << d)
    outside = 0
    for i in range(n):
        bad = False
        for k in range(d):
            lo = coords[k, 0]
            hi = coords[k, counts[k] - 1]
            p = nodes[i, k] + dt * vel[i, k]
            if p < lo or p > hi:
                if not clamp:
                    tol = 1e-12 * max(1.0, hi - lo)
                    if p < lo - tol or p > hi + tol:
                        bad = True
                p = min(hi, max(lo, p))
            c = min(np.int64((p - lower[k]) * inv[k]), counts[k] - 2)
            cell[k] = c
            frac[k] = min(1.0, max(0.0, (p - coords[k, c]) / (coords[k, c + 1] - coords[k, c])))
        if bad:
            outside += 1
            continue
        base = 0
        for k in range(d):
            base += cell[k] * strides[k]
        # corner bit (d - 1 - k) selects the upper node along axis k
        for corner in range(1 << d):
            off = base
            for k in range(d):
                if (corner >> (d - 1 - k)) & 1:
                    off += strides[k]
            buf[corner] = values[off]
        width = 1 << d
        for k in range(d - 1, -1, -1):
            width >>= 1
            for m in range(width):
                buf[m] = lerp(buf[2 * m], buf[2 * m + 1], frac[k])
        acc = buf[0]
        cand = dt * run[i] + disc * acc
        if cand < best[i]:
            best[i] = cand
            arg[i] = j
    return outside


def padded_coords(grid) -> np.ndarray:
    """Per-dimension node coordinates packed into one rectangular array."""
    width = max(grid.counts)
    out = np.zeros((grid.dim, width))
    for k, ck in enumerate(grid.coords):
        out[k, : ck.size] = ck
    return out


@njit(**_OPTS)
def _slack(lo, hi, clamp):
    # feet beyond these limits count as outside; with clamp nothing does
    if clamp:
        return -np.inf, np.inf
    tol = 1e-12 * max(1.0, hi - lo)
    return lo - tol, hi + tol


@njit(**_OPTS)
def fused_sweep_1d(f, g, values, c0, inv, U, t, dt, disc, clamp, wlo, whi, rlo, rhi, out, arg):
    """One backward level with the control loop innermost (d = 1).

    Nodes ``wlo[0]..whi[0]`` are written; every stencil must lie inside the
    read range ``rlo[0]..rhi[0]`` of ``values``. Returns the counts of
    non-finite feet, feet outside the box and stencils outside the read
    range, in that order.
    """
    n0 = c0.size
    a0, b0 = c0[0], c0[n0 - 1]
    e0, h0 = _slack(a0, b0, clamp)
    x = np.empty(1)
    vel = np.empty(1)
    bad = 0
    outside = 0
    stale = 0
    for i in range(wlo[0], whi[0] + 1):
        x[0] = c0[i]
        best = np.inf
        bj = 0
        for j in range(U.shape[0]):
            u = U[j]
            f(x, t, u, vel)
            pr = x[0] + dt * vel[0]
            bad += pr - pr != 0.0
            outside += (pr < e0) | (pr > h0)
            p = min(b0, max(a0, pr))
            k0 = min(np.int64((p - a0) * inv[0]), n0 - 2)
            stale += (k0 < rlo[0]) | (k0 >= rhi[0])
            w0 = min(1.0, max(0.0, (p - c0[k0]) / (c0[k0 + 1] - c0[k0])))
            acc = lerp(values[k0], values[k0 + 1], w0)
            cand = dt * g(x, t, u) + disc * acc
            if cand < best:
                best = cand
                bj = j
        out[i] = best
        arg[i] = bj
    return bad, outside, stale


@njit(**_OPTS)
def fused_sweep_2d(f, g, values, c0, c1, inv, U, t, dt, disc, clamp, wlo, whi, rlo, rhi, out, arg):
    """Two-dimensional counterpart of :func:`fused_sweep_1d` (C-ordered nodes).

    The cell and weight of each foot coordinate are reused while that
    coordinate repeats across consecutive controls.
    """
    n0, n1 = c0.size, c1.size
    a0, b0, a1, b1 = c0[0], c0[n0 - 1], c1[0], c1[n1 - 1]
    e0, h0 = _slack(a0, b0, clamp)
    e1, h1 = _slack(a1, b1, clamp)
    x = np.empty(2)
    vel = np.empty(2)
    bad = 0
    outside = 0
    stale = 0
    for i0 in range(wlo[0], whi[0] + 1):
        x[0] = c0[i0]
        for i1 in range(wlo[1], whi[1] + 1):
            x[1] = c1[i1]
            best = np.inf
            bj = 0
            pm = np.nan
            qm = np.nan
            k0 = 0
            k1 = 0
            w0 = 0.0
            w1 = 0.0
            for j in range(U.shape[0]):
                u = U[j]
                f(x, t, u, vel)
                pr = x[0] + dt * vel[0]
                qr = x[1] + dt * vel[1]
                bad += (pr - pr != 0.0) | (qr - qr != 0.0)
                outside += (pr < e0) | (pr > h0) | (qr < e1) | (qr > h1)
                p = min(b0, max(a0, pr))
                q = min(b1, max(a1, qr))
                if p != pm:
                    pm = p
                    k0 = min(np.int64((p - a0) * inv[0]), n0 - 2)
                    w0 = min(1.0, max(0.0, (p - c0[k0]) / (c0[k0 + 1] - c0[k0])))
                if q != qm:
                    qm = q
                    k1 = min(np.int64((q - a1) * inv[1]), n1 - 2)
                    w1 = min(1.0, max(0.0, (q - c1[k1]) / (c1[k1 + 1] - c1[k1])))
                stale += (k0 < rlo[0]) | (k0 >= rhi[0]) | (k1 < rlo[1]) | (k1 >= rhi[1])
                base = k0 * n1 + k1
                r0 = lerp(values[base], values[base + 1], w1)
                r1 = lerp(values[base + n1], values[base + n1 + 1], w1)
                acc = lerp(r0, r1, w0)
                cand = dt * g(x, t, u) + disc * acc
                if cand < best:
                    best = cand
                    bj = j
            out[i0 * n1 + i1] = best
            arg[i0 * n1 + i1] = bj
    return bad, outside, stale

"""Alternating minimization of the decoupled energy over a rectangle.

With ``u`` the regularized flow and ``v`` the auxiliary flow, the solver
minimizes::

    J(u, v) = (lam / beta) * J_D,lin(v) + J_R(u) + 1/(2 theta) * |u - v|^2

by alternating a closed-form data step (thresholding for L1, a weighted
median for CSAD) with primal-dual iterations on the regularizer (coupled TV
or non-local TV). The warped frame is linearized around the flow at the
start of every warp. Regions are solved with Neumann conditions on their
borders; pixels outside the region are not touched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .energy import CSAD, L1, NLTV, TV, EnergyConfig, Problem, Rect
from .flowio import EMPTY, FIXED, FlowField
from .imgproc import bicubic_sample

ZERO_GRAD2 = 1e-10


# ---------------------------------------------------------------- kernels

@njit(cache=True)
def warp_kernel(i0, i1, i1x, i1y, u0, y0, x0, data_kind, half):
    h, w = u0.shape[:2]
    H, W = i0.shape
    nk = (2 * half + 1) ** 2 - 1 if data_kind == CSAD else 1
    i1w = np.empty((h, w))
    gx = np.empty((h, w))
    gy = np.empty((h, w))
    cvals = np.zeros((h, w, nk))
    ncnt = np.zeros((h, w), np.int64)
    for ly in range(h):
        y = ly + y0
        for lx in range(w):
            x = lx + x0
            px = x + u0[ly, lx, 0]
            py = y + u0[ly, lx, 1]
            c = bicubic_sample(i1, px, py)
            i1w[ly, lx] = c
            if 0.0 <= px <= W - 1 and 0.0 <= py <= H - 1:
                gx[ly, lx] = bicubic_sample(i1x, px, py)
                gy[ly, lx] = bicubic_sample(i1y, px, py)
            else:
                # target outside the image: no data force, the regularizer decides
                gx[ly, lx] = 0.0
                gy[ly, lx] = 0.0
            if data_kind == CSAD:
                n = 0
                for yy in range(max(y - half, 0), min(y + half + 1, H)):
                    for xx in range(max(x - half, 0), min(x + half + 1, W)):
                        if yy == y and xx == x:
                            continue
                        cvals[ly, lx, n] = (i0[y, x] - i0[yy, xx] - c
                                            + bicubic_sample(i1, xx + u0[ly, lx, 0], yy + u0[ly, lx, 1]))
                        n += 1
                ncnt[ly, lx] = n
    return i1w, gx, gy, cvals, ncnt


@njit(cache=True)
def l1_kernel(u, u0, i0loc, i1w, gx, gy, lt, v):
    h, w = i1w.shape
    for y in range(h):
        for x in range(w):
            g1 = gx[y, x]
            g2 = gy[y, x]
            g2n = g1 * g1 + g2 * g2
            if g2n < ZERO_GRAD2:
                v[y, x, 0] = u[y, x, 0]
                v[y, x, 1] = u[y, x, 1]
                continue
            rho = (i1w[y, x] + g1 * (u[y, x, 0] - u0[y, x, 0])
                   + g2 * (u[y, x, 1] - u0[y, x, 1]) - i0loc[y, x])
            if rho < -lt * g2n:
                v[y, x, 0] = u[y, x, 0] + lt * g1
                v[y, x, 1] = u[y, x, 1] + lt * g2
            elif rho > lt * g2n:
                v[y, x, 0] = u[y, x, 0] - lt * g1
                v[y, x, 1] = u[y, x, 1] - lt * g2
            else:
                f = rho / g2n
                v[y, x, 0] = u[y, x, 0] - f * g1
                v[y, x, 1] = u[y, x, 1] - f * g2


@njit(cache=True)
def median_delta(b, n, c, tau):
    """Minimizer of ``delta^2 / (2 tau) + c * sum_i |delta - b_i|``.

    It is the median of the ``n`` kinks ``b_i`` together with the ``n + 1``
    values ``tau * c * (n - 2 j)``, ``j = 0..n``.
    """
    vals = np.empty(2 * n + 1)
    for i in range(n):
        vals[i] = b[i]
    for j in range(n + 1):
        vals[n + j] = tau * c * (n - 2 * j)
    vals.sort()
    return vals[n]


@njit(cache=True)
def csad_kernel(u, u0, gx, gy, cvals, ncnt, lam, theta, v):
    h, w = gx.shape
    buf = np.empty(cvals.shape[2])
    for y in range(h):
        for x in range(w):
            g1 = gx[y, x]
            g2 = gy[y, x]
            g2n = g1 * g1 + g2 * g2
            n = ncnt[y, x]
            if g2n < ZERO_GRAD2 or n == 0:
                v[y, x, 0] = u[y, x, 0]
                v[y, x, 1] = u[y, x, 1]
                continue
            gn = math.sqrt(g2n)
            shift = g1 * (u[y, x, 0] - u0[y, x, 0]) + g2 * (u[y, x, 1] - u0[y, x, 1])
            for k in range(n):
                buf[k] = (cvals[y, x, k] - shift) / gn
            d = median_delta(buf, n, lam * gn, theta)
            v[y, x, 0] = u[y, x, 0] + d * g1 / gn
            v[y, x, 1] = u[y, x, 1] + d * g2 / gn


@njit(cache=True)
def tv_kernel(u, ubar, v, xi, theta, tau, sigma):
    """One primal-dual iteration for coupled TV; returns max |u_new - u|."""
    h, w = u.shape[:2]
    for y in range(h):
        for x in range(w):
            s = 0.0
            for c in range(2):
                dx = ubar[y, x + 1, c] - ubar[y, x, c] if x + 1 < w else 0.0
                dy = ubar[y + 1, x, c] - ubar[y, x, c] if y + 1 < h else 0.0
                xi[y, x, c, 0] += tau * dx
                xi[y, x, c, 1] += tau * dy
                s += xi[y, x, c, 0] ** 2 + xi[y, x, c, 1] ** 2
            nrm = math.sqrt(s)
            if nrm > 1.0:
                for c in range(2):
                    xi[y, x, c, 0] /= nrm
                    xi[y, x, c, 1] /= nrm
    err = 0.0
    for y in range(h):
        for x in range(w):
            for c in range(2):
                if w == 1:
                    divx = 0.0
                elif x == 0:
                    divx = xi[y, x, c, 0]
                elif x == w - 1:
                    divx = -xi[y, x - 1, c, 0]
                else:
                    divx = xi[y, x, c, 0] - xi[y, x - 1, c, 0]
                if h == 1:
                    divy = 0.0
                elif y == 0:
                    divy = xi[y, x, c, 1]
                elif y == h - 1:
                    divy = -xi[y - 1, x, c, 1]
                else:
                    divy = xi[y, x, c, 1] - xi[y - 1, x, c, 1]
                old = u[y, x, c]
                new = old - sigma * ((old - v[y, x, c]) / theta - (divx + divy))
                u[y, x, c] = new
                ubar[y, x, c] = 2.0 * new - old
                d = abs(new - old)
                if d > err:
                    err = d
    return err


@njit(cache=True)
def nltv_kernel(u, ubar, v, p, wts, offsets, theta, tau, sigma):
    """One primal-dual iteration for non-local TV; returns max |u_new - u|.

    ``wts[y, x, k]`` is the coefficient of ``|u(x) - u(x + offsets[k])|``.
    """
    h, w = u.shape[:2]
    nk = offsets.shape[0]
    for y in range(h):
        for x in range(w):
            for k in range(nk):
                yy = y + offsets[k, 0]
                xx = x + offsets[k, 1]
                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                    continue
                wk = wts[y, x, k]
                for c in range(2):
                    a = (ubar[y, x, c] - ubar[yy, xx, c]) * wk
                    p[y, x, k, c] = (p[y, x, k, c] + tau * a) / (1.0 + tau * abs(a))
    err = 0.0
    for y in range(h):
        for x in range(w):
            for c in range(2):
                div = 0.0
                for k in range(nk):
                    yy = y + offsets[k, 0]
                    xx = x + offsets[k, 1]
                    if 0 <= yy < h and 0 <= xx < w:
                        div -= wts[y, x, k] * p[y, x, k, c]
                    ys = y - offsets[k, 0]
                    xs = x - offsets[k, 1]
                    if 0 <= ys < h and 0 <= xs < w:
                        div += wts[ys, xs, k] * p[ys, xs, k, c]
                old = u[y, x, c]
                new = old - sigma * ((old - v[y, x, c]) / theta - div)
                u[y, x, c] = new
                ubar[y, x, c] = 2.0 * new - old
                d = abs(new - old)
                if d > err:
                    err = d
    return err


@njit(cache=True)
def refine_kernel(i0, i1, i1x, i1y, weights, offsets, u_init, y0, x0, data_kind, reg_kind,
                  half, lam, theta, tau, sigma, n_warps, max_iters, tol):
    h, w = u_init.shape[:2]
    u = u_init.copy()
    ubar = u.copy()
    v = np.zeros_like(u)
    if reg_kind == TV:
        xi = np.zeros((h, w, 2, 2))
        p = np.zeros((1, 1, 1, 2))
        wts = np.zeros((1, 1, 1))
    else:
        xi = np.zeros((1, 1, 2, 2))
        p = np.zeros((h, w, offsets.shape[0], 2))
        wts = np.ascontiguousarray(weights[y0:y0 + h, x0:x0 + w, :])
    i0loc = np.ascontiguousarray(i0[y0:y0 + h, x0:x0 + w])
    lt = lam * theta
    for _ in range(n_warps):
        u0 = u.copy()
        i1w, gx, gy, cvals, ncnt = warp_kernel(i0, i1, i1x, i1y, u0, y0, x0, data_kind, half)
        for _ in range(max_iters):
            if data_kind == L1:
                l1_kernel(u, u0, i0loc, i1w, gx, gy, lt, v)
            else:
                csad_kernel(u, u0, gx, gy, cvals, ncnt, lam, theta, v)
            if reg_kind == TV:
                err = tv_kernel(u, ubar, v, xi, theta, tau, sigma)
            else:
                err = nltv_kernel(u, ubar, v, p, wts, offsets, theta, tau, sigma)
            if err <= tol:
                break
    return u


@njit(cache=True)
def linear_data_energy(u, u0, i0loc, i1w, gx, gy, cvals, ncnt, data_kind):
    h, w = i1w.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            shift = gx[y, x] * (u[y, x, 0] - u0[y, x, 0]) + gy[y, x] * (u[y, x, 1] - u0[y, x, 1])
            if data_kind == L1:
                total += abs(i1w[y, x] + shift - i0loc[y, x])
            else:
                for k in range(ncnt[y, x]):
                    total += abs(cvals[y, x, k] - shift)
    return total


# ---------------------------------------------------------------- python API

@dataclass
class WarpContext:
    """Linearization of the second frame around ``u0`` on a region."""

    region: Rect
    u0: np.ndarray
    i0: np.ndarray
    i1w: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    cvals: np.ndarray
    ncnt: np.ndarray


@dataclass
class DualStateTV:
    xi: np.ndarray
    ubar: np.ndarray | None = None

    @classmethod
    def zeros(cls, height: int, width: int) -> "DualStateTV":
        return cls(np.zeros((height, width, 2, 2)))


@dataclass
class DualStateNLTV:
    p: np.ndarray
    ubar: np.ndarray | None = None

    @classmethod
    def zeros(cls, height: int, width: int, n_offsets: int) -> "DualStateNLTV":
        return cls(np.zeros((height, width, n_offsets, 2)))


def _flow_array(u) -> np.ndarray:
    return np.ascontiguousarray(getattr(u, "u", u), dtype=np.float64)


def build_warp_context(problem: Problem, u, region: Rect | None = None) -> WarpContext:
    region = region or Rect.full(*problem.shape)
    sy, sx = region.slices
    u0 = np.ascontiguousarray(_flow_array(u)[sy, sx])
    cfg = problem.cfg
    i1w, gx, gy, cvals, ncnt = warp_kernel(problem.i0, problem.i1, problem.i1x, problem.i1y, u0,
                                           region.y0, region.x0, cfg.data_code, cfg.csad_window // 2)
    return WarpContext(region, u0, np.ascontiguousarray(problem.i0[sy, sx]), i1w, gx, gy, cvals, ncnt)


def l1_data_step(ctx: WarpContext, u, cfg: EnergyConfig) -> np.ndarray:
    """Closed-form minimizer of ``lam_d |rho(v)| + |u - v|^2 / (2 theta)``."""
    u = _flow_array(u)
    v = np.empty_like(u)
    l1_kernel(u, ctx.u0, ctx.i0, ctx.i1w, ctx.gx, ctx.gy, cfg.data_weight * cfg.theta, v)
    return v


def csad_data_step(ctx: WarpContext, u, cfg: EnergyConfig) -> np.ndarray:
    """Closed-form minimizer of the linearized CSAD term plus the coupling.

    The minimizer moves ``u`` along the warped gradient direction by the
    weighted median of the per-neighbor kinks.
    """
    u = _flow_array(u)
    v = np.empty_like(u)
    csad_kernel(u, ctx.u0, ctx.gx, ctx.gy, ctx.cvals, ctx.ncnt, cfg.data_weight, cfg.theta, v)
    return v


def tv_reg_step(v, u, dual: DualStateTV, cfg: EnergyConfig):
    u = _flow_array(u).copy()
    ubar = u.copy() if dual.ubar is None else dual.ubar.copy()
    xi = dual.xi.copy()
    tv_kernel(u, ubar, _flow_array(v), xi, cfg.theta, cfg.tau, cfg.sigma)
    return u, DualStateTV(xi, ubar)


def nltv_reg_step(v, u, dual: DualStateNLTV, weights: np.ndarray, offsets: np.ndarray, cfg: EnergyConfig):
    """One iteration of the non-local TV scheme.

    ``weights`` has shape ``(H, W, K)`` over the region; neighbors that fall
    outside the region are ignored.
    """
    u = _flow_array(u).copy()
    ubar = u.copy() if dual.ubar is None else dual.ubar.copy()
    p = dual.p.copy()
    nltv_kernel(u, ubar, _flow_array(v), p, np.ascontiguousarray(weights, dtype=np.float64),
                np.ascontiguousarray(offsets, dtype=np.int64), cfg.theta, cfg.tau, cfg.sigma)
    return u, DualStateNLTV(p, ubar)


def refine_flow(problem: Problem, u_init: FlowField, region: Rect | None = None,
                n_warps: int = 4, iters_per_warp: int | None = None) -> FlowField:
    """Warping loop of alternating data / regularizer steps on ``region``.

    Each warp re-linearizes the second frame at the current flow, then
    alternates one data step and one regularizer iteration until the
    max-norm change of ``u`` is within ``inner_tol`` or ``iters_per_warp``
    (default ``max_inner_iters``) is reached. Returns a copy of ``u_init``
    with the region replaced.
    """
    cfg = problem.cfg
    region = region or Rect.full(*problem.shape)
    if n_warps < 1:
        raise ValueError("n_warps must be at least 1")
    sy, sx = region.slices
    if np.any(u_init.state[sy, sx] == EMPTY):
        raise ValueError("initial flow has empty cells inside the region")
    iters = cfg.max_inner_iters if iters_per_warp is None else iters_per_warp
    local = refine_kernel(problem.i0, problem.i1, problem.i1x, problem.i1y, problem.weights,
                          problem.offsets, np.ascontiguousarray(u_init.u[sy, sx]),
                          region.y0, region.x0, cfg.data_code, cfg.reg_code, cfg.csad_window // 2,
                          cfg.data_weight, cfg.theta, cfg.tau, cfg.sigma, int(n_warps), int(iters),
                          cfg.inner_tol)
    out = u_init.copy()
    out.u[sy, sx] = local
    return out


def regularizer_energy(u: np.ndarray, cfg: EnergyConfig, weights=None, offsets=None) -> float:
    """Unweighted regularizer of a local flow array, Neumann at its borders."""
    from .energy import reg_density

    u = _flow_array(u)
    h, w = u.shape[:2]
    valid = np.ones((h, w), np.bool_)
    if cfg.reg_code == TV:
        weights, offsets = np.zeros((h, w, 1)), np.zeros((1, 2), np.int64)
    return float(reg_density(u, valid, np.ascontiguousarray(weights), np.ascontiguousarray(offsets),
                             0, h, 0, w, cfg.reg_code).sum())


def decoupled_energy(ctx: WarpContext, u, v, cfg: EnergyConfig, weights=None, offsets=None) -> float:
    """``J(u, v)`` with the linearized data term of ``ctx``."""
    u = _flow_array(u)
    v = _flow_array(v)
    data = linear_data_energy(v, ctx.u0, ctx.i0, ctx.i1w, ctx.gx, ctx.gy, ctx.cvals, ctx.ncnt, cfg.data_code)
    reg = regularizer_energy(u, cfg, weights, offsets)
    return cfg.data_weight * data + reg + float(np.sum((u - v) ** 2)) / (2.0 * cfg.theta)


def alternation_energies(problem: Problem, u_init: FlowField, rounds: int, reg_tol: float = 1e-6,
                         max_reg_iters: int = 20000, region: Rect | None = None) -> list[float]:
    """``J(u, v)`` after each of ``rounds`` exact alternation rounds within one warp.

    The data step is solved in closed form and the regularizer subproblem is
    iterated until its max-norm change drops below ``reg_tol``. Meant for
    checking that the alternation never increases ``J``.
    """
    cfg = problem.cfg
    region = region or Rect.full(*problem.shape)
    sy, sx = region.slices
    ctx = build_warp_context(problem, u_init, region)
    u = np.ascontiguousarray(u_init.u[sy, sx]).copy()
    h, w = u.shape[:2]
    wts = np.ascontiguousarray(problem.weights[sy, sx])
    if cfg.regularizer == "tv":
        xi = np.zeros((h, w, 2, 2))
    else:
        p = np.zeros((h, w, problem.offsets.shape[0], 2))
    energies = []
    for _ in range(rounds):
        v = l1_data_step(ctx, u, cfg) if cfg.data_term == "l1" else csad_data_step(ctx, u, cfg)
        ubar = u.copy()
        for _ in range(max_reg_iters):
            if cfg.regularizer == "tv":
                err = tv_kernel(u, ubar, v, xi, cfg.theta, cfg.tau, cfg.sigma)
            else:
                err = nltv_kernel(u, ubar, v, p, wts, problem.offsets, cfg.theta, cfg.tau, cfg.sigma)
            if err < reg_tol:
                break
        energies.append(decoupled_energy(ctx, u, v, cfg, wts, problem.offsets))
    return energies


def as_dense(u: np.ndarray) -> FlowField:
    return FlowField(np.asarray(u, dtype=np.float64), np.full(u.shape[:2], FIXED, np.int8))

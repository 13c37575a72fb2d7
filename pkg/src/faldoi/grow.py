"""Seed growing: a priority-queue driven sweep of local patch minimizations.

Every pop of the lowest-energy candidate fixes one pixel, initializes the
surrounding patch (Laplace or bilateral fill-in), refines the patch with a
single-warp local solve and pushes the still-unfixed 4-neighbors with the
patch energy as their priority. Refined patch values live in an auxiliary
field whose cells count as filled, i.e. as known data for later fill-ins;
only popped pixels become fixed.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .energy import Problem, Rect, energy_density
from .flowio import EMPTY, FILLED, FIXED, FlowField
from .solver import refine_kernel

LAPLACE, BILATERAL = 0, 1
_FILL_MODES = {"laplace": LAPLACE, "bilateral": BILATERAL}

# stop on max change; keeps the 4-neighbor Laplacian residual below 1e-4
LAPLACE_TOL = 1e-5
LAPLACE_MAX_SWEEPS = 2000
BILATERAL_ITERS = 5
LOCAL_ITERS = 10


class Candidate(NamedTuple):
    energy: float
    seq: int
    x: int
    y: int
    flow: tuple[float, float]


class CandidateQueue:
    """Min-priority queue of flow candidates; ties pop in insertion order."""

    def __init__(self):
        self._heap: list[tuple[float, int, int, int, float, float]] = []
        self._seq = 0

    def push(self, energy: float, x: int, y: int, flow) -> None:
        heapq.heappush(self._heap, (float(energy), self._seq, int(x), int(y), float(flow[0]), float(flow[1])))
        self._seq += 1

    def pop(self) -> Candidate:
        e, s, x, y, f1, f2 = heapq.heappop(self._heap)
        return Candidate(e, s, x, y, (f1, f2))

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)

    def drain(self, width: int):
        """Remove everything, returning arrays in pop order for the sweep kernel."""
        items = sorted(self._heap)
        self._heap = []
        energies = np.array([it[0] for it in items], dtype=np.float64)
        pix = np.array([it[3] * width + it[2] for it in items], dtype=np.int64)
        flows = np.array([(it[4], it[5]) for it in items], dtype=np.float64).reshape(-1, 2)
        return energies, pix, flows

    @property
    def next_seq(self) -> int:
        return self._seq

    def advance(self, seq: int) -> None:
        self._seq = max(self._seq, seq)


# ---------------------------------------------------------------- fill-in kernels

@njit(cache=True)
def laplace_kernel(vals, known, tol, max_sweeps):
    """Gauss-Seidel on the 4-neighbor Laplace equation, Neumann on the borders."""
    h, w = known.shape
    mean0 = 0.0
    mean1 = 0.0
    nk = 0
    for y in range(h):
        for x in range(w):
            if known[y, x]:
                mean0 += vals[y, x, 0]
                mean1 += vals[y, x, 1]
                nk += 1
    if nk == 0:
        return -1
    if nk == h * w:
        return 0
    for y in range(h):
        for x in range(w):
            if not known[y, x]:
                vals[y, x, 0] = mean0 / nk
                vals[y, x, 1] = mean1 / nk
    for sweep in range(max_sweeps):
        change = 0.0
        for y in range(h):
            for x in range(w):
                if known[y, x]:
                    continue
                for c in range(2):
                    s = 0.0
                    n = 0
                    if x > 0:
                        s += vals[y, x - 1, c]
                        n += 1
                    if x + 1 < w:
                        s += vals[y, x + 1, c]
                        n += 1
                    if y > 0:
                        s += vals[y - 1, x, c]
                        n += 1
                    if y + 1 < h:
                        s += vals[y + 1, x, c]
                        n += 1
                    if n == 0:
                        continue
                    new = s / n
                    d = abs(new - vals[y, x, c])
                    if d > change:
                        change = d
                    vals[y, x, c] = new
        if change < tol:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def bilateral_kernel(vals, known, guide, sigma_c, sigma_s, iters):
    """Iterated bilateral averaging of unknown cells from known ones.

    The first pass averages trusted cells only; later passes also use the
    cells filled so far. Trusted cells keep their values.
    """
    h, w = known.shape
    nch = guide.shape[2]
    usable = known.copy()
    for it in range(iters):
        new = vals.copy()
        filled = usable.copy()
        for y in range(h):
            for x in range(w):
                if known[y, x]:
                    continue
                sw = 0.0
                s0 = 0.0
                s1 = 0.0
                for yy in range(h):
                    for xx in range(w):
                        if not usable[yy, xx] or (yy == y and xx == x):
                            continue
                        dc = 0.0
                        for c in range(nch):
                            t = guide[y, x, c] - guide[yy, xx, c]
                            dc += t * t
                        ds = math.sqrt((yy - y) ** 2 + (xx - x) ** 2)
                        wt = math.exp(-math.sqrt(dc) / sigma_c - ds / sigma_s)
                        sw += wt
                        s0 += wt * vals[yy, xx, 0]
                        s1 += wt * vals[yy, xx, 1]
                if sw > 0.0:
                    new[y, x, 0] = s0 / sw
                    new[y, x, 1] = s1 / sw
                    filled[y, x] = True
        vals[:, :, :] = new
        usable = filled
    n_missing = 0
    for y in range(h):
        for x in range(w):
            if not usable[y, x]:
                n_missing += 1
    return n_missing


# ---------------------------------------------------------------- sweep kernel

@njit(cache=True)
def sweep_kernel(i0, i1, i1x, i1y, weights, offsets, guide,
                 init_e, init_pix, init_flow, seq0,
                 u, fixed, aux, aux_valid,
                 fill_mode, psize, bil_iters, sigma_c, sigma_s,
                 data_kind, reg_kind, half, lam_eff, lam, beta, theta, tau, sigma,
                 local_iters, tol):
    H, W = fixed.shape
    r = psize // 2
    heap = [(0.0, np.int64(0), np.int64(0), 0.0, 0.0)]
    heap.pop()
    for i in range(init_e.shape[0]):
        heap.append((init_e[i], np.int64(seq0 + i), init_pix[i], init_flow[i, 0], init_flow[i, 1]))
    heapq.heapify(heap)
    seq = seq0 + init_e.shape[0]
    ev_pop = np.empty(H * W, np.int64)
    ev_pix = np.empty(H * W, np.int64)
    ev_e = np.empty(H * W)
    n_ev = 0
    n_pop = 0
    while len(heap) > 0:
        e, _, pix, f1, f2 = heapq.heappop(heap)
        n_pop += 1
        py = pix // W
        px = pix - py * W
        if fixed[py, px]:
            continue
        fixed[py, px] = True
        u[py, px, 0] = f1
        u[py, px, 1] = f2
        ev_pop[n_ev] = n_pop - 1
        ev_pix[n_ev] = pix
        ev_e[n_ev] = e
        n_ev += 1

        y0 = max(py - r, 0)
        y1 = min(py + r + 1, H)
        x0 = max(px - r, 0)
        x1 = min(px + r + 1, W)
        ph = y1 - y0
        pw = x1 - x0
        vals = np.zeros((ph, pw, 2))
        known = np.zeros((ph, pw), np.bool_)
        for ly in range(ph):
            for lx in range(pw):
                y = ly + y0
                x = lx + x0
                if aux_valid[y, x]:
                    known[ly, lx] = True
                    vals[ly, lx, 0] = aux[y, x, 0]
                    vals[ly, lx, 1] = aux[y, x, 1]
                elif fixed[y, x]:
                    known[ly, lx] = True
                    vals[ly, lx, 0] = u[y, x, 0]
                    vals[ly, lx, 1] = u[y, x, 1]
        if fill_mode == 0:
            laplace_kernel(vals, known, LAPLACE_TOL, LAPLACE_MAX_SWEEPS)
        else:
            gpatch = np.ascontiguousarray(guide[y0:y1, x0:x1, :])
            missing = bilateral_kernel(vals, known, gpatch, sigma_c, sigma_s, bil_iters)
            if missing > 0:
                laplace_kernel(vals, known, LAPLACE_TOL, LAPLACE_MAX_SWEEPS)

        ref = refine_kernel(i0, i1, i1x, i1y, weights, offsets, vals, y0, x0, data_kind, reg_kind,
                            half, lam_eff, theta, tau, sigma, 1, local_iters, tol)
        for ly in range(ph):
            for lx in range(pw):
                aux[ly + y0, lx + x0, 0] = ref[ly, lx, 0]
                aux[ly + y0, lx + x0, 1] = ref[ly, lx, 1]
                aux_valid[ly + y0, lx + x0] = True
        dens = energy_density(i0, i1, aux, aux_valid, weights, offsets, y0, y1, x0, x1,
                              data_kind, reg_kind, half, lam, beta)
        pe = dens.sum()

        for k in range(4):
            if k == 0:
                ny, nx = py, px - 1
            elif k == 1:
                ny, nx = py, px + 1
            elif k == 2:
                ny, nx = py - 1, px
            else:
                ny, nx = py + 1, px
            if ny < 0 or ny >= H or nx < 0 or nx >= W or fixed[ny, nx]:
                continue
            heapq.heappush(heap, (pe, np.int64(seq), np.int64(ny * W + nx), aux[ny, nx, 0], aux[ny, nx, 1]))
            seq += 1
    return ev_pop[:n_ev], ev_pix[:n_ev], ev_e[:n_ev], seq


# ---------------------------------------------------------------- python API

def _known_mask(u: FlowField, patch: Rect):
    sy, sx = patch.slices
    return np.ascontiguousarray(u.state[sy, sx] != EMPTY)


def laplace_interpolate(u: FlowField, patch: Rect | None = None) -> FlowField:
    """Harmonic fill-in of the empty cells of ``patch``.

    Known cells are Dirichlet data, the patch border is a Neumann wall.
    Filled cells are marked ``FILLED``.
    """
    patch = patch or Rect.full(*u.shape)
    known = _known_mask(u, patch)
    if not known.any():
        raise ValueError("patch has no known flow values to interpolate from")
    sy, sx = patch.slices
    vals = np.ascontiguousarray(u.u[sy, sx]).copy()
    laplace_kernel(vals, known, LAPLACE_TOL, LAPLACE_MAX_SWEEPS)
    out = u.copy()
    out.u[sy, sx] = vals
    out.state[sy, sx][~known] = FILLED
    return out


def bilateral_fillin(u: FlowField, guide: np.ndarray, patch: Rect | None = None,
                     iters: int = BILATERAL_ITERS, trusted: np.ndarray | None = None,
                     sigma_c: float = 2.0, sigma_s: float = 2.0) -> FlowField:
    """Replace untrusted cells of ``patch`` by guide-weighted averages.

    ``trusted`` defaults to the non-empty cells. Weights follow the
    non-local kernel: ``exp(-|g(x) - g(y)| / sigma_c) * exp(-|x - y| / sigma_s)``.
    """
    patch = patch or Rect.full(*u.shape)
    sy, sx = patch.slices
    known = _known_mask(u, patch) if trusted is None else np.ascontiguousarray(trusted[sy, sx], dtype=np.bool_)
    if not known.any():
        raise ValueError("patch has no trusted cells to fill from")
    g = np.asarray(guide, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    vals = np.ascontiguousarray(u.u[sy, sx]).copy()
    bilateral_kernel(vals, known, np.ascontiguousarray(g[sy, sx]), sigma_c, sigma_s, iters)
    out = u.copy()
    out.u[sy, sx] = vals
    out.state[sy, sx][~known] = FILLED
    return out


@dataclass
class SweepResult:
    flow: FlowField
    aux: np.ndarray
    aux_valid: np.ndarray
    events: np.ndarray  # (n, 4): pop index, x, y, priority


def grow_sweep(problem: Problem, queue: CandidateQueue, u: FlowField | None = None,
               patch_size: int = 11, fill_mode: str = "laplace", aux: np.ndarray | None = None,
               aux_valid: np.ndarray | None = None, local_iters: int = LOCAL_ITERS,
               bilateral_iters: int = BILATERAL_ITERS) -> SweepResult:
    """Run one full sweep and return the fixed field plus the auxiliary field."""
    cfg = problem.cfg
    H, W = problem.shape
    if not queue:
        raise ValueError("growing needs at least one seed in the queue")
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError("patch size must be a positive odd number")
    if fill_mode not in _FILL_MODES:
        raise ValueError(f"unknown fill mode {fill_mode!r}")
    u = FlowField.empty(H, W) if u is None else u
    fixed = np.ascontiguousarray(u.state != EMPTY)
    uf = u.u.copy()
    aux = uf.copy() if aux is None else np.ascontiguousarray(aux, dtype=np.float64).copy()
    aux_valid = fixed.copy() if aux_valid is None else np.ascontiguousarray(aux_valid, dtype=np.bool_).copy()
    seq0 = queue.next_seq
    energies, pix, flows = queue.drain(W)
    ev_pop, ev_pix, ev_e, seq = sweep_kernel(
        problem.i0, problem.i1, problem.i1x, problem.i1y, problem.weights, problem.offsets,
        problem.guide, energies, pix, flows, seq0, uf, fixed, aux, aux_valid,
        _FILL_MODES[fill_mode], patch_size, bilateral_iters, cfg.sigma_c, cfg.sigma_s,
        cfg.data_code, cfg.reg_code, cfg.csad_window // 2, cfg.data_weight, cfg.lam, cfg.beta,
        cfg.theta, cfg.tau, cfg.sigma, local_iters, cfg.inner_tol)
    queue.advance(seq)
    state = np.where(fixed, FIXED, EMPTY).astype(np.int8)
    events = np.column_stack([ev_pop, ev_pix % W, ev_pix // W, ev_e]) if len(ev_pop) else np.zeros((0, 4))
    return SweepResult(FlowField(uf, state), aux, aux_valid, events)


def basic_faldoi_growing(problem: Problem, u: FlowField, queue: CandidateQueue,
                         patch_size: int = 11, fill_mode: str = "laplace",
                         log: list | None = None) -> FlowField:
    """Densify ``u`` from the candidates in ``queue``.

    Cells already known in ``u`` count as fixed. On return the queue is
    empty and, since the domain is connected, every cell is fixed. Fixing
    events ``(pop index, x, y, priority)`` are appended to ``log``.
    """
    res = grow_sweep(problem, queue, u, patch_size, fill_mode)
    if log is not None:
        log.extend((int(p), int(x), int(y), float(e)) for p, x, y, e in res.events)
    return res.flow


def write_event_log(events, path) -> None:
    with open(path, "w") as fh:
        for p, x, y, e in events:
            fh.write(f"{int(p)} {int(x)} {int(y)} {float(e):.10g}\n")

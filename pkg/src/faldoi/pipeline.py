"""End-to-end pipelines: single sweep + global refinement, and the iterated
variant with saliency pruning, forward-backward pruning and re-seeding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .energy import EnergyConfig, Problem, prepare, density
from .flowio import EMPTY, FlowField, MatchSet
from .grow import BILATERAL_ITERS, LAPLACE_MAX_SWEEPS, LAPLACE_TOL, CandidateQueue, grow_sweep, laplace_kernel
from .imgproc import centered_gradient, to_grayscale
from .solver import refine_flow

log = logging.getLogger(__name__)


class NoSeedsError(ValueError):
    """Raised when a match set is empty after one of the pruning stages."""


@dataclass(frozen=True)
class PipelineConfig:
    energy: EnergyConfig = field(default_factory=EnergyConfig.tvl1)
    patch_size: int = 11
    max_it: int = 3
    epsilon_fb: float = 2.0
    saliency_threshold: float = 0.045
    saliency_window: int = 7
    global_warps: int = 4
    use_saliency: bool = True

    def __post_init__(self):
        if self.max_it < 1:
            raise ValueError("max_it must be at least 1")
        if self.epsilon_fb <= 0:
            raise ValueError("epsilon_fb must be positive")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd number")
        if self.saliency_window < 1 or self.saliency_window % 2 == 0:
            raise ValueError("saliency_window must be a positive odd number")
        if self.global_warps < 1:
            raise ValueError("global_warps must be at least 1")


# ---------------------------------------------------------------- pruning

def min_eigenvalue_map(img: np.ndarray, window: int) -> np.ndarray:
    """Smallest eigenvalue of the unnormalized local structure tensor."""
    from scipy.ndimage import uniform_filter

    gx, gy = centered_gradient(to_grayscale(img))
    n = window * window

    def box(a):
        # zero outside the image, i.e. the window is clipped at the borders
        return uniform_filter(a, size=window, mode="constant", cval=0.0) * n

    a, b, c = box(gx * gx), box(gx * gy), box(gy * gy)
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def _seed_pixels(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.rint(points[:, 0]).astype(np.int64), np.rint(points[:, 1]).astype(np.int64)


def saliency_prune(img: np.ndarray, m: MatchSet, cfg: PipelineConfig) -> MatchSet:
    """Drop matches whose source lies in a flat area of ``img``."""
    if len(m) == 0:
        return m
    lam_min = min_eigenvalue_map(img, cfg.saliency_window)
    xs, ys = _seed_pixels(m.points)
    keep = lam_min[ys, xs] >= cfg.saliency_threshold
    return m.subset(keep)


def _bilinear(u: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = u.shape[:2]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    return ((1 - fy) * ((1 - fx) * u[y0, x0] + fx * u[y0, x1])
            + fy * ((1 - fx) * u[y1, x0] + fx * u[y1, x1]))


def _consistent(ua: np.ndarray, ub: np.ndarray, eps: float) -> np.ndarray:
    h, w = ua.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    tx = xx + ua[..., 0]
    ty = yy + ua[..., 1]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    back = _bilinear(ub, np.clip(tx, 0, w - 1), np.clip(ty, 0, h - 1))
    res = np.hypot(ua[..., 0] + back[..., 0], ua[..., 1] + back[..., 1])
    return inside & (res < eps)


def fb_prune(uF: FlowField, uB: FlowField, epsilon: float = 2.0) -> tuple[FlowField, FlowField]:
    """Empty the cells of each field that the opposite field does not invert.

    A cell passes when ``|uF(x) + uB(x + uF(x))| < epsilon``, with ``uB``
    sampled bilinearly; landings outside the image fail. The rule is applied
    symmetrically to ``uB``.
    """
    if uF.shape != uB.shape:
        raise ValueError("forward and backward fields differ in size")
    if not (uF.is_dense() and uB.is_dense()):
        raise ValueError("fb_prune needs two dense fields")
    okF = _consistent(uF.u, uB.u, epsilon)
    okB = _consistent(uB.u, uF.u, epsilon)
    outF, outB = uF.copy(), uB.copy()
    outF.state[~okF] = EMPTY
    outB.state[~okB] = EMPTY
    return outF, outB


# ---------------------------------------------------------------- re-seeding

@njit(cache=True)
def _bilateral_global(vals, known, guide, sigma_c, sigma_s, iters, radius):
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
                for yy in range(max(y - radius, 0), min(y + radius + 1, h)):
                    for xx in range(max(x - radius, 0), min(x + radius + 1, w)):
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
    return usable


def fill_pruned(problem: Problem, pruned: FlowField, patch_size: int) -> np.ndarray:
    """Dense field from a pruned one: bilateral fill over local windows,
    Laplace fill for whatever the windows could not reach."""
    vals = pruned.u.copy()
    known = np.ascontiguousarray(pruned.known)
    cfg = problem.cfg
    usable = _bilateral_global(vals, known, problem.guide, cfg.sigma_c, cfg.sigma_s,
                               BILATERAL_ITERS, patch_size // 2)
    if not usable.all():
        laplace_kernel(vals, usable, LAPLACE_TOL, LAPLACE_MAX_SWEEPS)
    return vals


def patch_energies(problem: Problem, u: np.ndarray, patch_size: int) -> np.ndarray:
    """Energy of the clipped ``patch_size`` window centered on every pixel."""
    dens = density(problem, u, np.ones(problem.shape, np.bool_))
    h, w = dens.shape
    r = patch_size // 2
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = dens.cumsum(0).cumsum(1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.maximum(ys - r, 0)[:, None]
    y1 = np.minimum(ys + r + 1, h)[:, None]
    x0 = np.maximum(xs - r, 0)[None, :]
    x1 = np.minimum(xs + r + 1, w)[None, :]
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


# ---------------------------------------------------------------- pipelines

def _prune_seeds(img, m: MatchSet, cfg: PipelineConfig, label: str) -> MatchSet:
    if len(m) == 0:
        raise NoSeedsError(f"no seeds after pruning: {label} match set is empty")
    if cfg.use_saliency:
        m = saliency_prune(img, m, cfg)
        if len(m) == 0:
            raise NoSeedsError(f"no seeds after pruning: saliency stage removed every {label} match")
    return m


def _seed_queue(m: MatchSet) -> CandidateQueue:
    q = CandidateQueue()
    xs, ys = _seed_pixels(m.points)
    for x, y, f in zip(xs, ys, m.flows):
        q.push(0.0, x, y, f)
    return q


def _record(log_list, tag, events):
    if log_list is None:
        return
    for p, x, y, e in events:
        log_list.append(tag + (int(p), int(x), int(y), float(e)))


def run_faldoi(A: np.ndarray, B: np.ndarray, m: MatchSet, cfg: PipelineConfig | None = None,
               events: list | None = None) -> FlowField:
    """One growing sweep with Laplace fill-in, then a global refinement."""
    cfg = cfg or PipelineConfig()
    problem = prepare(cfg.energy, A, B)
    m = _prune_seeds(A, m, cfg, "forward")
    log.info("growing from %d seeds", len(m))
    res = grow_sweep(problem, _seed_queue(m), None, cfg.patch_size, "laplace")
    _record(events, (), res.events)
    return refine_flow(problem, res.flow, n_warps=cfg.global_warps)


def run_iterated_faldoi(A: np.ndarray, B: np.ndarray, mF: MatchSet, mB: MatchSet,
                        cfg: PipelineConfig | None = None, events: list | None = None) -> FlowField:
    """Repeated forward/backward sweeps with consistency pruning, then a
    global refinement of the last forward field.

    ``events`` receives ``(sweep, direction, pop, x, y, priority)`` tuples.
    """
    cfg = cfg or PipelineConfig()
    pf = prepare(cfg.energy, A, B)
    pb = prepare(cfg.energy, B, A)
    seeds = {"F": _prune_seeds(A, mF, cfg, "forward"), "B": _prune_seeds(B, mB, cfg, "backward")}
    problems = {"F": pf, "B": pb}
    queues = {d: _seed_queue(seeds[d]) for d in "FB"}
    aux = {"F": None, "B": None}
    dense = {}
    for sweep in range(cfg.max_it):
        for d in "FB":
            fill = "laplace" if sweep == 0 else "bilateral"
            a, av = aux[d] if aux[d] is not None else (None, None)
            res = grow_sweep(problems[d], queues[d], None, cfg.patch_size, fill, a, av)
            _record(events, (sweep, d), res.events)
            dense[d] = res.flow
        log.info("sweep %d done", sweep + 1)
        if sweep == cfg.max_it - 1:
            break
        pruned = dict(zip("FB", fb_prune(dense["F"], dense["B"], cfg.epsilon_fb)))
        for d in "FB":
            p = pruned[d]
            if not p.known.any():
                raise NoSeedsError(f"every {'forward' if d == 'F' else 'backward'} cell was pruned in sweep {sweep + 1}")
            log.info("sweep %d: %s keeps %d cells", sweep + 1, d, int(p.known.sum()))
            energies = patch_energies(problems[d], fill_pruned(problems[d], p, cfg.patch_size), cfg.patch_size)
            q = CandidateQueue()
            m = seeds[d]
            xs, ys = _seed_pixels(m.points)
            is_seed = np.zeros(p.shape, bool)
            for x, y, f in zip(xs, ys, m.flows):
                if p.known[y, x]:
                    q.push(0.0, x, y, f)
                    is_seed[y, x] = True
            cy, cx = np.nonzero(p.known & ~is_seed)
            for y, x in zip(cy, cx):
                q.push(energies[y, x], x, y, p.u[y, x])
            queues[d] = q
            aux[d] = (p.u.copy(), p.known.copy())
    return refine_flow(pf, dense["F"], n_warps=cfg.global_warps)


def final_energy(cfg: EnergyConfig, A, B, u: FlowField) -> float:
    problem = prepare(cfg, A, B)
    return float(density(problem, u.u, u.known).sum())

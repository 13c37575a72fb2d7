"""Energy configuration and evaluation of ``E(u) = E_D(u) + beta * E_R(u)``.

Two data terms (point-wise L1 on brightness, CSAD over a ``P x P`` window)
and two regularizers (coupled TV, non-local TV with color/space weights)
can be combined freely. Energies are sums of a per-pixel density, so the
energy of a rectangle is the sum of the densities of its pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from numba import njit

from .flowio import EMPTY, FlowField
from .imgproc import bicubic_sample, centered_gradient, gray_to_rgb, to_grayscale, to_lab

L1, CSAD = 0, 1
TV, NLTV = 0, 1

_DATA_NAMES = {"l1": L1, "csad": CSAD}
_REG_NAMES = {"tv": TV, "nltv": NLTV}


class Rect(NamedTuple):
    """Half-open pixel rectangle ``[y0, y1) x [x0, x1)``."""

    y0: int
    y1: int
    x0: int
    x1: int

    @classmethod
    def full(cls, height: int, width: int) -> "Rect":
        return cls(0, height, 0, width)

    @classmethod
    def patch(cls, x: int, y: int, size: int, shape) -> "Rect":
        """``size x size`` window centered on ``(x, y)``, clipped to the image."""
        r = size // 2
        h, w = shape
        return cls(max(y - r, 0), min(y + r + 1, h), max(x - r, 0), min(x + r + 1, w))

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass(frozen=True)
class EnergyConfig:
    """Energy selection and numeric parameters.

    ``tau`` is the dual ascent step and ``sigma`` the primal step of the
    primal-dual regularizer schemes. ``lam`` multiplies the data term;
    in the decoupled problem the data term is weighted by ``lam / beta``
    against a unit-weight regularizer.
    """

    data_term: str = "l1"
    regularizer: str = "tv"
    beta: float | None = None
    theta: float = 0.3
    lam: float = 1.0
    csad_window: int = 7
    nltv_window: int = 5
    sigma_c: float = 2.0
    sigma_s: float = 2.0
    tau: float = 0.125
    sigma: float = 0.125
    inner_tol: float = 0.01
    max_inner_iters: int = 300

    def __post_init__(self):
        if self.data_term not in _DATA_NAMES:
            raise ValueError(f"unknown data term {self.data_term!r}")
        if self.regularizer not in _REG_NAMES:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.beta is None:
            if self.data_term == "csad":
                object.__setattr__(self, "beta", (self.csad_window ** 2 - 1) / 80.0)
            else:
                object.__setattr__(self, "beta", 1.0 / 40.0)
        if self.beta <= 0 or self.theta <= 0 or self.lam <= 0:
            raise ValueError("beta, theta and lam must be positive")
        if self.csad_window % 2 == 0 or self.nltv_window % 2 == 0:
            raise ValueError("window sizes must be odd")
        if self.regularizer == "tv" and self.tau * self.sigma > 1.0 / 8.0:
            raise ValueError("tau * sigma must not exceed 1/8 for coupled TV")

    @classmethod
    def tvl1(cls, **kw) -> "EnergyConfig":
        return cls(data_term="l1", regularizer="tv", **kw)

    @classmethod
    def nltv_csad(cls, **kw) -> "EnergyConfig":
        return cls(data_term="csad", regularizer="nltv", **kw)

    @classmethod
    def tv_csad(cls, **kw) -> "EnergyConfig":
        return cls(data_term="csad", regularizer="tv", **kw)

    @classmethod
    def from_name(cls, name: str, **kw) -> "EnergyConfig":
        makers = {"tvl1": cls.tvl1, "nltv-csad": cls.nltv_csad, "tv-csad": cls.tv_csad}
        try:
            return makers[name](**kw)
        except KeyError:
            raise ValueError(f"unknown energy {name!r}; choose from {sorted(makers)}") from None

    @property
    def data_code(self) -> int:
        return _DATA_NAMES[self.data_term]

    @property
    def reg_code(self) -> int:
        return _REG_NAMES[self.regularizer]

    @property
    def data_weight(self) -> float:
        """Weight of the data term in the decoupled (unit regularizer) form."""
        return self.lam / self.beta

    def with_(self, **kw) -> "EnergyConfig":
        return replace(self, **kw)


@dataclass
class WeightStencil:
    center: tuple[int, int]
    offsets: np.ndarray  # (K, 2) as (dy, dx)
    weights: np.ndarray  # (K,)


def window_offsets(size: int) -> np.ndarray:
    """``(dy, dx)`` offsets of a ``size x size`` window without its center."""
    r = size // 2
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    return np.array(offs, dtype=np.int64)


def nltv_weights(lab: np.ndarray, x: int, y: int, cfg: EnergyConfig) -> WeightStencil:
    """Normalized non-local weights around pixel ``(x, y)``.

    Neighbors falling outside the image are left out before normalizing.
    """
    h, w = lab.shape[:2]
    offsets = window_offsets(cfg.nltv_window)
    kept, weights = [], []
    for dy, dx in offsets:
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w:
            dc = math.sqrt(float(np.sum((lab[y, x] - lab[yy, xx]) ** 2)))
            ds = math.hypot(dx, dy)
            kept.append((dy, dx))
            weights.append(math.exp(-dc / cfg.sigma_c) * math.exp(-ds / cfg.sigma_s))
    weights = np.array(weights)
    return WeightStencil((x, y), np.array(kept, dtype=np.int64).reshape(-1, 2), weights / weights.sum())


def nltv_weight_field(lab: np.ndarray, cfg: EnergyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Weights for every pixel at once: ``offsets (K, 2)`` and ``weights (H, W, K)``.

    A neighbor outside the image has weight 0.
    """
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    offsets = window_offsets(cfg.nltv_window)
    r = cfg.nltv_window // 2
    pad = np.pad(lab, ((r, r), (r, r), (0, 0)), mode="edge")
    raw = np.zeros((h, w, len(offsets)))
    for k, (dy, dx) in enumerate(offsets):
        shifted = pad[r + dy:r + dy + h, r + dx:r + dx + w]
        dc = np.sqrt(np.sum((lab - shifted) ** 2, axis=2))
        raw[:, :, k] = np.exp(-dc / cfg.sigma_c) * math.exp(-math.hypot(dx, dy) / cfg.sigma_s)
        ys = np.arange(h)[:, None] + dy
        xs = np.arange(w)[None, :] + dx
        outside = (ys < 0) | (ys >= h) | (xs < 0) | (xs >= w)
        raw[:, :, k][outside] = 0.0
    return offsets, raw / raw.sum(axis=2, keepdims=True)


@dataclass
class Problem:
    """A frame pair prepared for one energy: gradients and NLTV weights cached."""

    cfg: EnergyConfig
    i0: np.ndarray
    i1: np.ndarray
    i1x: np.ndarray
    i1y: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray
    guide: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.i0.shape


def prepare(cfg: EnergyConfig, frame0, frame1, color0=None, weights=None) -> Problem:
    """Build a :class:`Problem` from two frames.

    Frames may be gray or RGB; the data terms always see gray versions.
    ``color0`` (default: ``frame0``) is the frame the NLTV weights and the
    bilateral fill-in guide are computed from, in Lab space.
    """
    i0 = np.ascontiguousarray(to_grayscale(frame0))
    i1 = np.ascontiguousarray(to_grayscale(frame1))
    if i0.shape != i1.shape:
        raise ValueError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
    i1x, i1y = centered_gradient(i1)
    color = frame0 if color0 is None else color0
    guide = np.ascontiguousarray(to_lab(gray_to_rgb(color)))
    if weights is not None:
        offsets, wts = weights
    elif cfg.regularizer == "nltv":
        offsets, wts = nltv_weight_field(guide, cfg)
    else:
        offsets, wts = np.zeros((1, 2), np.int64), np.zeros(i0.shape + (1,))
    return Problem(cfg, i0, i1, np.ascontiguousarray(i1x), np.ascontiguousarray(i1y),
                   np.ascontiguousarray(offsets, dtype=np.int64), np.ascontiguousarray(wts), guide)


@njit(cache=True)
def data_density(i0, i1, u, valid, y0, y1, x0, x1, data_kind, half):
    h, w = i0.shape
    out = np.zeros((y1 - y0, x1 - x0))
    for y in range(y0, y1):
        for x in range(x0, x1):
            if not valid[y, x]:
                continue
            ux = u[y, x, 0]
            uy = u[y, x, 1]
            c = bicubic_sample(i1, x + ux, y + uy)
            if data_kind == L1:
                out[y - y0, x - x0] = abs(c - i0[y, x])
            else:
                acc = 0.0
                for yy in range(max(y - half, 0), min(y + half + 1, h)):
                    for xx in range(max(x - half, 0), min(x + half + 1, w)):
                        if yy == y and xx == x:
                            continue
                        acc += abs(i0[y, x] - i0[yy, xx] - c + bicubic_sample(i1, xx + ux, yy + uy))
                out[y - y0, x - x0] = acc
    return out


@njit(cache=True)
def reg_density(u, valid, weights, offsets, y0, y1, x0, x1, reg_kind):
    h, w = valid.shape
    out = np.zeros((y1 - y0, x1 - x0))
    for y in range(y0, y1):
        for x in range(x0, x1):
            if not valid[y, x]:
                continue
            if reg_kind == TV:
                s = 0.0
                if x + 1 < w and valid[y, x + 1]:
                    for c in range(2):
                        d = u[y, x + 1, c] - u[y, x, c]
                        s += d * d
                if y + 1 < h and valid[y + 1, x]:
                    for c in range(2):
                        d = u[y + 1, x, c] - u[y, x, c]
                        s += d * d
                out[y - y0, x - x0] = math.sqrt(s)
            else:
                s = 0.0
                for k in range(offsets.shape[0]):
                    yy = y + offsets[k, 0]
                    xx = x + offsets[k, 1]
                    if 0 <= yy < h and 0 <= xx < w and valid[yy, xx]:
                        s += weights[y, x, k] * (abs(u[y, x, 0] - u[yy, xx, 0])
                                                 + abs(u[y, x, 1] - u[yy, xx, 1]))
                out[y - y0, x - x0] = s
    return out


@njit(cache=True)
def energy_density(i0, i1, u, valid, weights, offsets, y0, y1, x0, x1,
                   data_kind, reg_kind, half, lam, beta):
    """``lam * data(x) + beta * reg(x)`` for every pixel of a rectangle.

    Differences reaching a valid cell outside the rectangle use its value;
    differences toward invalid cells or off the image are dropped.
    """
    d = data_density(i0, i1, u, valid, y0, y1, x0, x1, data_kind, half)
    r = reg_density(u, valid, weights, offsets, y0, y1, x0, x1, reg_kind)
    return lam * d + beta * r


def density(problem: Problem, u: np.ndarray, valid: np.ndarray, region: Rect | None = None) -> np.ndarray:
    cfg = problem.cfg
    region = region or Rect.full(*problem.shape)
    return energy_density(problem.i0, problem.i1, np.ascontiguousarray(u, dtype=np.float64),
                          np.ascontiguousarray(valid, dtype=np.bool_), problem.weights,
                          problem.offsets, region.y0, region.y1, region.x0, region.x1,
                          cfg.data_code, cfg.reg_code, cfg.csad_window // 2, cfg.lam, cfg.beta)


def eval_energy(cfg: EnergyConfig, i0, i1, u: FlowField, region: Rect | None = None,
                lab=None, problem: Problem | None = None) -> float:
    """Energy of ``u`` restricted to ``region`` (default: whole image).

    The warped frame is sampled bicubically, without linearization. For
    NLTV the weights come from ``lab`` (a Lab image) or, failing that, from
    the Lab version of ``i0``. Cells of ``u`` outside ``region`` only act as
    context for the regularizer.
    """
    if problem is None:
        if cfg.regularizer == "nltv" and lab is not None:
            weights = nltv_weight_field(lab, cfg)
        else:
            weights = None
        problem = prepare(cfg, i0, i1, weights=weights)
    region = region or Rect.full(*problem.shape)
    sy, sx = region.slices
    if np.any(u.state[sy, sx] == EMPTY):
        raise ValueError("flow has empty cells inside the evaluated region")
    return float(density(problem, u.u, u.state != EMPTY, region).sum())

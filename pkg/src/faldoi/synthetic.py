"""Synthetic frame pairs with known flow: textured sprites translating over a
(possibly deformed) moving background, plus outlier injection for seeds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, map_coordinates

from .flowio import FIXED, FlowField, MatchSet

TEXTURE_CELL = 4.0


@dataclass(frozen=True)
class Sprite:
    """Axis-aligned textured rectangle at ``(x, y)`` in A, moved by ``(dx, dy)``."""

    x: int
    y: int
    width: int
    height: int
    dx: float
    dy: float


@dataclass(frozen=True)
class SyntheticSpec:
    width: int
    height: int
    bg_motion: tuple[float, float] = (0.0, 0.0)
    bg_deform: float = 0.0  # amplitude in pixels of the quadratic background warp
    sprites: tuple[Sprite, ...] = ()
    texture_cell: float = TEXTURE_CELL

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("canvas must be at least 3x3")
        for s in self.sprites:
            for ox, oy, where in ((0.0, 0.0, "frame A"), (s.dx, s.dy, "frame B")):
                if (s.x + ox < 0 or s.y + oy < 0 or s.x + ox + s.width > self.width
                        or s.y + oy + s.height > self.height):
                    raise ValueError(f"sprite at ({s.x}, {s.y}) leaves the canvas in {where}")
            if s.width < 1 or s.height < 1:
                raise ValueError("sprite must be at least 1x1")


@dataclass
class SyntheticPair:
    A: np.ndarray
    B: np.ndarray
    gt: FlowField
    occlusion: np.ndarray  # bool, True where the A pixel has no visible target
    labels: np.ndarray  # 0 for background, k for sprite k (1-based)


class _Texture:
    """Smooth random texture: cubic spline through a coarse random grid."""

    def __init__(self, rng, width: float, height: float, cell: float, margin: float):
        self.cell = cell
        self.margin = margin
        gw = int(np.ceil((width + 2 * margin) / cell)) + 4
        gh = int(np.ceil((height + 2 * margin) / cell)) + 4
        self.grid = rng.uniform(0.1, 0.9, size=(gh, gw))

    def __call__(self, x, y):
        cx = (np.asarray(x, dtype=np.float64) + self.margin) / self.cell + 1.0
        cy = (np.asarray(y, dtype=np.float64) + self.margin) / self.cell + 1.0
        v = map_coordinates(self.grid, [cy.ravel(), cx.ravel()], order=3, mode="nearest")
        return np.clip(v.reshape(cx.shape), 0.0, 1.0)


def background_motion(spec: SyntheticSpec, x, y):
    """Constant motion plus a quadratic term in normalized coordinates."""
    s = np.asarray(x, dtype=np.float64) / spec.width - 0.5
    t = np.asarray(y, dtype=np.float64) / spec.height - 0.5
    a = spec.bg_deform
    return spec.bg_motion[0] + a * (s * s + s * t), spec.bg_motion[1] + a * (t * t - s * t)


def _inside(s: Sprite, x, y, ox=0.0, oy=0.0):
    return (x >= s.x + ox) & (x < s.x + ox + s.width) & (y >= s.y + oy) & (y < s.y + oy + s.height)


def generate_synthetic(spec: SyntheticSpec, rng_seed: int = 0) -> SyntheticPair:
    """Render frames A and B, the true flow of A and its occlusion mask.

    Later sprites are drawn above earlier ones, all above the background.
    """
    rng = np.random.default_rng(rng_seed)
    W, H = spec.width, spec.height
    reach = abs(spec.bg_motion[0]) + abs(spec.bg_motion[1]) + abs(spec.bg_deform) + 2.0
    bg_tex = _Texture(rng, W, H, spec.texture_cell, reach)
    sp_tex = [_Texture(rng, s.width, s.height, spec.texture_cell, 1.0) for s in spec.sprites]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    A = bg_tex(xx, yy)
    labels = np.zeros((H, W), np.int64)
    gx, gy = background_motion(spec, xx, yy)
    gt = np.stack([gx, gy], axis=2)
    for k, (s, tex) in enumerate(zip(spec.sprites, sp_tex), start=1):
        m = _inside(s, xx, yy)
        A[m] = tex(xx[m] - s.x, yy[m] - s.y)
        labels[m] = k
        gt[m] = (s.dx, s.dy)

    # background of B: invert p + m(p) = q by fixed-point iteration
    px, py = xx.copy(), yy.copy()
    for _ in range(100):
        mx, my = background_motion(spec, px, py)
        nx, ny = xx - mx, yy - my
        done = max(np.abs(nx - px).max(), np.abs(ny - py).max()) < 1e-13
        px, py = nx, ny
        if done:
            break
    B = bg_tex(px, py)
    b_labels = np.zeros((H, W), np.int64)
    for k, (s, tex) in enumerate(zip(spec.sprites, sp_tex), start=1):
        m = _inside(s, xx, yy, s.dx, s.dy)
        B[m] = tex(xx[m] - s.dx - s.x, yy[m] - s.dy - s.y)
        b_labels[m] = k

    # occlusion: target leaves the canvas or shows another surface in B
    tx = xx + gt[..., 0]
    ty = yy + gt[..., 1]
    occ = (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)
    surface = np.zeros((H, W), np.int64)
    for k, s in enumerate(spec.sprites, start=1):
        surface[_inside(s, tx, ty, s.dx, s.dy)] = k
    occ |= surface != labels
    return SyntheticPair(A, B, FlowField(gt, np.full((H, W), FIXED, np.int8)), occ, labels)


def region_seeds(pair: SyntheticPair, window: int = 7) -> MatchSet:
    """One correct match per region, placed the way a user would pick one.

    Among the visible pixels at least half the maximal depth inside the
    region, the most textured one (largest structure-tensor eigenvalue) wins.
    """
    from .pipeline import min_eigenvalue_map

    saliency = min_eigenvalue_map(pair.A, window)
    rows = []
    for k in np.unique(pair.labels):
        mask = (pair.labels == k) & ~pair.occlusion
        if not mask.any():
            continue
        padded = np.pad(mask, 1, constant_values=False)
        dist = distance_transform_edt(padded)[1:-1, 1:-1]
        score = np.where(dist >= 0.5 * dist.max(), saliency, -np.inf)
        y, x = np.unravel_index(int(np.argmax(score)), score.shape)
        fx, fy = pair.gt.u[y, x]
        rows.append((float(x), float(y), x + fx, y + fy))
    return MatchSet(np.array(rows).reshape(-1, 4))


def backward_matches(m: MatchSet) -> MatchSet:
    """Swap source and target of every match."""
    return MatchSet(m.points[:, [2, 3, 0, 1]].copy(), m.dropped)


def inject_outliers(m: MatchSet, count: int, shape_a, shape_b, rng_seed: int = 0) -> MatchSet:
    """Append ``count`` matches with uniform random source and target points.

    ``shape_a`` and ``shape_b`` are ``(height, width)`` of the two frames.
    """
    if count < 0:
        raise ValueError("outlier count must be non-negative")
    rng = np.random.default_rng(rng_seed)
    ha, wa = shape_a
    hb, wb = shape_b
    extra = np.column_stack([
        rng.uniform(0, wa - 1, count), rng.uniform(0, ha - 1, count),
        rng.uniform(0, wb - 1, count), rng.uniform(0, hb - 1, count),
    ])
    return MatchSet(np.vstack([m.points, extra]), m.dropped)


def parse_spec(text: str) -> tuple[SyntheticSpec, dict]:
    """Read a ``key=value`` scene description.

    Keys: ``width``, ``height``, ``bg_motion=dx,dy``, ``bg_deform``,
    ``texture_cell``, ``sprite=x,y,w,h,dx,dy`` (repeatable), ``seed``,
    ``outliers``, ``backward=yes|no``. Unknown keys are an error.
    """
    opts = {"seed": 0, "outliers": 0, "backward": False}
    kw: dict = {}
    sprites = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        try:
            if key in ("width", "height"):
                kw[key] = int(val)
            elif key == "bg_motion":
                dx, dy = (float(t) for t in val.split(","))
                kw["bg_motion"] = (dx, dy)
            elif key in ("bg_deform", "texture_cell"):
                kw[key] = float(val)
            elif key == "sprite":
                x, y, w, h, dx, dy = (t.strip() for t in val.split(","))
                sprites.append(Sprite(int(x), int(y), int(w), int(h), float(dx), float(dy)))
            elif key in ("seed", "outliers"):
                opts[key] = int(val)
            elif key == "backward":
                opts[key] = val.lower() in ("1", "yes", "true", "on")
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if "width" not in kw or "height" not in kw:
        raise ValueError("scene description needs width and height")
    return SyntheticSpec(sprites=tuple(sprites), **kw), opts

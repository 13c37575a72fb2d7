"""Flow fields, match sets, their file formats and the Middlebury color coding."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

EMPTY = 0
FIXED = 1
FILLED = 2

FLO_TAG = b"PIEH"
FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e10
UNKNOWN_FLOW_THRESH = 1e9


@dataclass
class FlowField:
    """Per-pixel displacement ``u[y, x] = (u1, u2)`` with a tri-state mask.

    ``state`` holds ``EMPTY``, ``FIXED`` or ``FILLED`` per pixel; ``u`` is
    meaningless where the state is ``EMPTY``.
    """

    u: np.ndarray
    state: np.ndarray

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.state = np.ascontiguousarray(self.state, dtype=np.int8)
        if self.u.ndim != 3 or self.u.shape[2] != 2:
            raise ValueError(f"flow array must be (H, W, 2), got {self.u.shape}")
        if self.state.shape != self.u.shape[:2]:
            raise ValueError("state mask does not match flow shape")

    @classmethod
    def empty(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.zeros((height, width), np.int8))

    @classmethod
    def from_array(cls, u, state: int = FIXED) -> "FlowField":
        u = np.asarray(u, dtype=np.float64)
        return cls(u.copy(), np.full(u.shape[:2], state, np.int8))

    @classmethod
    def constant(cls, height: int, width: int, flow) -> "FlowField":
        u = np.empty((height, width, 2))
        u[...] = flow
        return cls.from_array(u)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[:2]

    @property
    def known(self) -> np.ndarray:
        return self.state != EMPTY

    def is_dense(self) -> bool:
        return bool(np.all(self.state != EMPTY))

    def copy(self) -> "FlowField":
        return FlowField(self.u.copy(), self.state.copy())


@dataclass
class MatchSet:
    """Sparse correspondences, one row ``(x1, y1, x2, y2)`` per match.

    ``dropped`` counts the lines rejected by the domain check when read.
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def source(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def target(self) -> np.ndarray:
        return self.points[:, 2:]

    @property
    def flows(self) -> np.ndarray:
        """Seed displacements ``y_i - x_i``."""
        return self.points[:, 2:] - self.points[:, :2]

    def subset(self, keep) -> "MatchSet":
        return MatchSet(self.points[np.asarray(keep)], self.dropped)


class FloFormatError(ValueError):
    pass


class MatchFileError(ValueError):
    pass


def write_flo(flow: FlowField, path) -> None:
    """Write a Middlebury ``.flo`` file; empty cells get the unknown sentinel."""
    h, w = flow.shape
    data = flow.u.astype("<f4")
    data[flow.state == EMPTY] = UNKNOWN_FLOW
    with open(path, "wb") as fh:
        fh.write(FLO_TAG)
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise FloFormatError(f"{path}: truncated header")
        if header[:4] != FLO_TAG:
            raise FloFormatError(f"{path}: bad magic {header[:4]!r}")
        w, h = np.frombuffer(header[4:], dtype="<i4")
        if w <= 0 or h <= 0:
            raise FloFormatError(f"{path}: invalid size {w}x{h}")
        body = fh.read()
    expected = int(w) * int(h) * 2 * 4
    if len(body) < expected:
        raise FloFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    u = np.frombuffer(body[:expected], dtype="<f4").reshape(h, w, 2).astype(np.float64)
    unknown = (np.abs(u) > UNKNOWN_FLOW_THRESH).any(axis=2) | ~np.isfinite(u).all(axis=2)
    state = np.where(unknown, EMPTY, FIXED).astype(np.int8)
    u[unknown] = 0.0
    return FlowField(u, state)


def _in_domain(x, y, shape) -> bool:
    h, w = shape
    return 0.0 <= x <= w - 1 and 0.0 <= y <= h - 1


def read_matches(path, shape_a=None, shape_b=None) -> MatchSet:
    """Parse an ASCII match file with lines ``x1 y1 x2 y2 [extra...]``.

    Matches whose source falls outside ``shape_a`` or whose target falls
    outside ``shape_b`` (both ``(height, width)``) are dropped and counted.
    """
    rows = []
    dropped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 4:
                raise MatchFileError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                x1, y1, x2, y2 = (float(p) for p in parts[:4])
            except ValueError as exc:
                raise MatchFileError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite((x1, y1, x2, y2))):
                raise MatchFileError(f"{path}:{lineno}: non-finite coordinate")
            if shape_a is not None and not _in_domain(x1, y1, shape_a):
                dropped += 1
                continue
            if shape_b is not None and not _in_domain(x2, y2, shape_b):
                dropped += 1
                continue
            rows.append((x1, y1, x2, y2))
    return MatchSet(np.array(rows, dtype=np.float64).reshape(-1, 4), dropped)


def write_matches(matches: MatchSet, path) -> None:
    with open(path, "w") as fh:
        for x1, y1, x2, y2 in matches.points:
            fh.write(" ".join(repr(float(v)) for v in (x1, y1, x2, y2)) + "\n")


def make_colorwheel() -> np.ndarray:
    """Middlebury color wheel, 55 RGB entries in ``[0, 255]``."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_color(flow, max_radius: float | None = None) -> np.ndarray:
    """Color-code a flow field as an RGB image in ``[0, 1]``.

    Hue follows direction and saturation follows magnitude relative to
    ``max_radius`` (default: 99th percentile of the known magnitudes).
    Empty cells are black.
    """
    if isinstance(flow, FlowField):
        u, known = flow.u, flow.known
    else:
        u = np.asarray(flow, dtype=np.float64)
        known = np.ones(u.shape[:2], bool)
    fx = np.where(known, u[..., 0], 0.0)
    fy = np.where(known, u[..., 1], 0.0)
    mag = np.hypot(fx, fy)
    if max_radius is None:
        max_radius = float(np.percentile(mag[known], 99)) if known.any() else 0.0
    if max_radius <= 0.0:
        max_radius = 1.0
    wheel = make_colorwheel() / 255.0
    ncols = wheel.shape[0]
    rad = mag / max_radius
    angle = np.arctan2(-fy, -fx) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1.0 - frac) * wheel[k0] + frac * wheel[k1]
    inside = (rad <= 1.0)[..., None]
    col = np.where(inside, 1.0 - rad[..., None] * (1.0 - col), col * 0.75)
    col[~known] = 0.0
    return col


def save_flow_png(flow, path, max_radius: float | None = None) -> None:
    from .imgproc import save_png

    save_png(flow_to_color(flow, max_radius), os.fspath(path))

"""Image loading, color conversion, differentiation and bicubic warping.

Images are plain ``float64`` NumPy arrays, shape ``(H, W)`` for gray frames
and ``(H, W, 3)`` for color frames, with samples in ``[0, 1]``. Indexing is
``img[y, x]``; flow component 0 is horizontal (x), component 1 vertical (y).
"""
from __future__ import annotations

import os

import cv2
import numpy as np
from numba import njit

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# D65 reference white for the XYZ -> Lab step
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


def load_image(path) -> np.ndarray:
    """Read a PNG or PGM/PPM file and scale it to ``[0, 1]``.

    8-bit files are divided by 255, 16-bit files by 65535. Color files come
    back as ``(H, W, 3)`` RGB, gray files as ``(H, W)``.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageFormatError(f"cannot read image {path!r}: no such file")
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".png", ".pgm", ".ppm", ".pnm"):
        raise ImageFormatError(f"unsupported image format {ext!r} for {path!r}")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"cannot decode image {path!r}")
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise ImageFormatError(f"unsupported sample type {raw.dtype} in {path!r}")
    if data.ndim == 3:
        if data.shape[2] == 4:
            data = data[:, :, :3]
        data = np.ascontiguousarray(data[:, :, ::-1])  # BGR -> RGB
    return data


def save_png(img: np.ndarray, path) -> None:
    """Write a ``[0, 1]`` image (gray or RGB) as an 8-bit PNG."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.rint(data * 255.0).astype(np.uint8)
    if data.ndim == 3:
        data = np.ascontiguousarray(data[:, :, ::-1])
    if not cv2.imwrite(os.fspath(path), data):
        raise OSError(f"could not write {path!r}")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Reduce an RGB image with fixed luma weights; gray input is returned as is."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    return img @ LUMA_WEIGHTS


def to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image in ``[0, 1]`` to CIELAB (D65)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("to_lab needs a 3-channel color image")
    img = np.clip(img, 0.0, 1.0)
    lin = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    xyz = (lin @ _SRGB_TO_XYZ.T) / _WHITE_D65
    eps = 216.0 / 24389.0
    kappa = 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(img)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def gray_to_rgb(img: np.ndarray) -> np.ndarray:
    """Replicate a gray image into three channels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img
    return np.repeat(img[:, :, None], 3, axis=2)


def centered_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered differences ``(f(x+1) - f(x-1)) / 2``, one-sided at the borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError("centered_gradient needs a gray image of at least 3x3")
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gx[:, 0] = img[:, 1] - img[:, 0]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    gy[0, :] = img[1, :] - img[0, :]
    gy[-1, :] = img[-1, :] - img[-2, :]
    return gx, gy


@njit(cache=True, inline="always")
def _keys(t):
    # Keys cubic convolution kernel, a = -0.5 (exact on quadratics)
    t = abs(t)
    if t <= 1.0:
        return (1.5 * t - 2.5) * t * t + 1.0
    if t < 2.0:
        return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return 0.0


@njit(cache=True)
def bicubic_sample(img, x, y):
    """Bicubic sample of a 2-D array at ``(x, y)``, clamped border extension."""
    h, w = img.shape
    # clamping the query keeps far-outside samples on the border value
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    ix = int(np.floor(x))
    iy = int(np.floor(y))
    fx = x - ix
    fy = y - iy
    if fx == 0.0 and fy == 0.0:
        return img[iy, ix]
    acc = 0.0
    for j in range(-1, 3):
        yy = min(max(iy + j, 0), h - 1)
        wy = _keys(fy - j)
        if wy == 0.0:
            continue
        row = 0.0
        for i in range(-1, 3):
            xx = min(max(ix + i, 0), w - 1)
            row += _keys(fx - i) * img[yy, xx]
        acc += wy * row
    return acc


@njit(cache=True)
def _warp(img, u):
    h, w = img.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = bicubic_sample(img, x + u[y, x, 0], y + u[y, x, 1])
    return out


def bicubic_warp(img: np.ndarray, flow) -> np.ndarray:
    """Sample ``img`` at ``x + flow(x)`` for every pixel.

    ``flow`` is a :class:`~faldoi.flowio.FlowField` or an ``(H, W, 2)`` array.
    A field with empty cells is rejected.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("bicubic_warp expects a gray image")
    u = getattr(flow, "u", flow)
    state = getattr(flow, "state", None)
    if state is not None and not np.all(state != 0):
        raise ValueError("cannot warp with a flow field that has empty cells")
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.shape != img.shape + (2,):
        raise ValueError(f"flow shape {u.shape} does not match image {img.shape}")
    return _warp(img, u)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faldoi.energy import EnergyConfig, Rect, eval_energy, nltv_weights
from faldoi.flowio import EMPTY, FlowField

CONFIGS = [EnergyConfig.tvl1(), EnergyConfig.nltv_csad(), EnergyConfig.tv_csad(),
           EnergyConfig(data_term="l1", regularizer="nltv")]


# ---------------------------------------------------------------- loop oracle

def _cubic(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t ** 3 - 2.5 * t ** 2 + 1
    if t < 2:
        return -0.5 * t ** 3 + 2.5 * t ** 2 - 4 * t + 2
    return 0.0


def _sample(img, x, y):
    h, w = len(img), len(img[0])
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    ix, iy = math.floor(x), math.floor(y)
    total = 0.0
    for j in range(-1, 3):
        for i in range(-1, 3):
            yy = min(max(iy + j, 0), h - 1)
            xx = min(max(ix + i, 0), w - 1)
            total += _cubic(x - ix - i) * _cubic(y - iy - j) * img[yy][xx]
    return total


def _oracle(cfg, i0, i1, u, lab, region):
    h, w = len(i0), len(i0[0])
    y0, y1, x0, x1 = region
    half = cfg.csad_window // 2
    r = cfg.nltv_window // 2
    total = 0.0
    for y in range(y0, y1):
        for x in range(x0, x1):
            u1, u2 = u[y][x]
            warped = _sample(i1, x + u1, y + u2)
            if cfg.data_term == "l1":
                data = abs(warped - i0[y][x])
            else:
                data = 0.0
                for yy in range(y - half, y + half + 1):
                    for xx in range(x - half, x + half + 1):
                        if (yy, xx) == (y, x) or not (0 <= yy < h and 0 <= xx < w):
                            continue
                        data += abs(i0[y][x] - i0[yy][xx] - warped + _sample(i1, xx + u1, yy + u2))
            if cfg.regularizer == "tv":
                s = 0.0
                for c in range(2):
                    if x + 1 < w:
                        s += (u[y][x + 1][c] - u[y][x][c]) ** 2
                    if y + 1 < h:
                        s += (u[y + 1][x][c] - u[y][x][c]) ** 2
                reg = math.sqrt(s)
            else:
                raw = {}
                for yy in range(y - r, y + r + 1):
                    for xx in range(x - r, x + r + 1):
                        if (yy, xx) == (y, x) or not (0 <= yy < h and 0 <= xx < w):
                            continue
                        dc = math.sqrt(sum((lab[y][x][k] - lab[yy][xx][k]) ** 2 for k in range(3)))
                        ds = math.hypot(yy - y, xx - x)
                        raw[yy, xx] = math.exp(-dc / cfg.sigma_c) * math.exp(-ds / cfg.sigma_s)
                norm = sum(raw.values())
                reg = sum(wt / norm * (abs(u[y][x][0] - u[yy][xx][0]) + abs(u[y][x][1] - u[yy][xx][1]))
                          for (yy, xx), wt in raw.items())
            total += cfg.lam * data + cfg.beta * reg
    return total


def test_energy_matches_loop_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(100):
        h, w = rng.integers(6, 11, size=2)
        base = EnergyConfig.from_name(("tvl1", "nltv-csad", "tv-csad")[case % 3])
        cfg = base.with_(beta=float(rng.uniform(0.01, 1)), lam=float(rng.uniform(0.5, 2)),
                         csad_window=int(rng.choice([3, 5])))
        i0 = rng.random((h, w))
        i1 = rng.random((h, w))
        lab = rng.random((h, w, 3)) * [100, 60, 60]
        u = rng.normal(scale=1.5, size=(h, w, 2))
        ry, rx = rng.integers(0, h - 2), rng.integers(0, w - 2)
        region = Rect(int(ry), int(ry) + 3, int(rx), int(rx) + 3)
        got = eval_energy(cfg, i0, i1, FlowField.from_array(u), region, lab=lab)
        want = _oracle(cfg, i0.tolist(), i1.tolist(), u.tolist(), lab.tolist(), region)
        worst = max(worst, abs(got - want))
    assert worst < 1e-10


# ---------------------------------------------------------------- examples

@pytest.mark.parametrize("cfg", CONFIGS)
def test_identical_frames_zero_flow(cfg):
    img = np.random.default_rng(0).random((12, 12))
    assert eval_energy(cfg, img, img, FlowField.constant(12, 12, (0, 0))) == 0.0


@pytest.mark.parametrize("cfg", CONFIGS)
def test_constant_flow_on_shifted_frames(cfg):
    big = np.random.default_rng(1).random((20, 24))
    i0 = big[:, :20]
    i1 = np.empty_like(i0)  # i1(x + 3) = i0(x)
    i1[:, 3:] = i0[:, :-3]
    i1[:, :3] = big[:, 20:23]
    u = FlowField.constant(20, 20, (3, 0))
    region = Rect(5, 15, 5, 14)
    assert eval_energy(cfg, i0, i1, u, region) == pytest.approx(0.0, abs=1e-12)


def test_empty_cell_in_region_fails():
    u = FlowField.constant(8, 8, (0, 0))
    u.state[2, 2] = EMPTY
    img = np.zeros((8, 8))
    with pytest.raises(ValueError, match="empty"):
        eval_energy(EnergyConfig.tvl1(), img, img, u, Rect(0, 4, 0, 4))
    eval_energy(EnergyConfig.tvl1(), img, img, u, Rect(4, 8, 4, 8))


def test_weights_constant_color():
    lab = np.full((9, 9, 3), 30.0)
    st_ = nltv_weights(lab, 4, 4, EnergyConfig.nltv_csad())
    assert len(st_.weights) == 24
    assert st_.weights.sum() == pytest.approx(1.0, abs=1e-12)
    by_dist = {}
    for (dy, dx), wt in zip(st_.offsets, st_.weights):
        by_dist.setdefault(round(math.hypot(dy, dx), 9), []).append(wt)
    for ws in by_dist.values():
        assert max(ws) - min(ws) < 1e-15


def test_weights_color_ratio():
    cfg = EnergyConfig.nltv_csad()
    lab = np.zeros((5, 5, 3))
    lab[2, 3] = (cfg.sigma_c, 0, 0)  # right neighbor differs by sigma_c, left one is equal
    st_ = nltv_weights(lab, 2, 2, cfg)
    offs = [tuple(o) for o in st_.offsets]
    right = st_.weights[offs.index((0, 1))]
    left = st_.weights[offs.index((0, -1))]
    assert right / left == pytest.approx(math.exp(-1), rel=1e-12)


def test_weights_at_corner_exclude_outside():
    lab = np.random.default_rng(3).random((6, 6, 3))
    st_ = nltv_weights(lab, 0, 0, EnergyConfig.nltv_csad())
    assert len(st_.weights) == 8
    assert np.all(st_.weights >= 0) and st_.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_config_defaults_and_validation():
    assert EnergyConfig.tvl1().beta == pytest.approx(1 / 40)
    assert EnergyConfig.nltv_csad().beta == pytest.approx(48 / 80)
    c = EnergyConfig()
    assert (c.tau, c.sigma, c.theta, c.inner_tol, c.csad_window, c.sigma_c, c.sigma_s) == \
        (0.125, 0.125, 0.3, 0.01, 7, 2.0, 2.0)
    with pytest.raises(ValueError):
        EnergyConfig(beta=-1)
    with pytest.raises(ValueError):
        EnergyConfig(csad_window=4)
    with pytest.raises(ValueError):
        EnergyConfig(tau=0.5, sigma=0.5)
    with pytest.raises(ValueError):
        EnergyConfig.from_name("tv-l2")


# ---------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.sampled_from(range(4)), c=st.floats(-0.5, 0.5),
       c2=st.floats(-0.5, 0.5))
def test_energy_invariants(seed, k, c, c2):
    cfg = CONFIGS[k]
    rng = np.random.default_rng(seed)
    i0, i1 = rng.random((10, 10)), rng.random((10, 10))
    u = FlowField.from_array(rng.normal(size=(10, 10, 2)))
    region = Rect(2, 8, 1, 9)
    lab = rng.random((10, 10, 3)) * 50  # weights held fixed across the shifted frames
    e = eval_energy(cfg, i0, i1, u, region, lab=lab)
    assert e >= 0
    shifted = eval_energy(cfg, i0 + c, i1 + c, u, region, lab=lab)
    assert shifted == pytest.approx(e, abs=1e-9)
    if cfg.data_term == "csad":
        assert eval_energy(cfg, i0 + c, i1 + c2, u, region, lab=lab) == pytest.approx(e, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.sampled_from(range(4)),
       f1=st.floats(-5, 5), f2=st.floats(-5, 5))
def test_regularizer_of_constant_flow_is_zero(seed, k, f1, f2):
    cfg = CONFIGS[k].with_(lam=1e-300)  # data term negligible, regularizer only
    img = np.random.default_rng(seed).random((8, 8))
    assert eval_energy(cfg, img, img, FlowField.constant(8, 8, (f1, f2))) < 1e-250

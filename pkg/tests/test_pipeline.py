import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import faldoi.pipeline as pl
from faldoi.energy import EnergyConfig, Rect, density, prepare
from faldoi.flowio import EMPTY, FIXED, FlowField, MatchSet
from faldoi.pipeline import (NoSeedsError, PipelineConfig, fb_prune, fill_pruned, min_eigenvalue_map,
                             patch_energies, run_faldoi, run_iterated_faldoi, saliency_prune)

from conftest import smooth_texture


def _const(h, w, f):
    return FlowField.constant(h, w, f)


# ---------------------------------------------------------------- fb_prune

def test_fb_exact_inverse():
    pF, pB = fb_prune(_const(8, 9, (0, 0)), _const(8, 9, (0, 0)))
    assert pF.is_dense() and pB.is_dense()
    pF, pB = fb_prune(_const(8, 9, (1, 0)), _const(8, 9, (-1, 0)))
    # only landings off the image fail
    assert np.array_equal(~pF.known, np.pad(np.ones((8, 1), bool), ((0, 0), (8, 0))))
    assert np.array_equal(~pB.known, np.pad(np.ones((8, 1), bool), ((0, 0), (0, 8))))


def test_fb_all_pruned():
    pF, pB = fb_prune(_const(6, 6, (5, 0)), _const(6, 6, (0, 0)), epsilon=2.0)
    assert not pF.known.any()
    assert not pB.known.any()


def test_fb_block():
    h, w = 10, 12
    uF = _const(h, w, (1, 0))
    uB = _const(h, w, (-1, 0))
    uB.u[3:6, 4:7] = (3, 0)
    pF, _ = fb_prune(uF, uB, 2.0)
    want = np.zeros((h, w), bool)
    want[3:6, 3:6] = True  # x + 1 lands in columns 4..6
    want[:, -1] = True  # lands off the image
    assert np.array_equal(~pF.known, want)
    assert np.array_equal(pF.u, uF.u)


def test_fb_errors():
    with pytest.raises(ValueError):
        fb_prune(_const(4, 4, (0, 0)), _const(4, 5, (0, 0)))
    f = _const(4, 4, (0, 0))
    f.state[0, 0] = EMPTY
    with pytest.raises(ValueError):
        fb_prune(f, _const(4, 4, (0, 0)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), eps=st.floats(0.1, 4))
def test_fb_symmetry(seed, eps):
    rng = np.random.default_rng(seed)
    uF = FlowField.from_array(rng.normal(scale=2, size=(7, 8, 2)))
    uB = FlowField.from_array(-uF.u + rng.normal(scale=1, size=(7, 8, 2)))
    aF, aB = fb_prune(uF, uB, eps)
    bB, bF = fb_prune(uB, uF, eps)
    assert np.array_equal(aF.state, bF.state) and np.array_equal(aB.state, bB.state)


# ---------------------------------------------------------------- saliency

def test_min_eigenvalue_matches_direct_sum():
    img = smooth_texture(15, 15, 3)
    lam = min_eigenvalue_map(img, 7)
    gx, gy = np.gradient(img)[1], np.gradient(img)[0]
    for y, x in [(7, 7), (0, 0), (3, 12), (14, 5)]:
        sl = slice(max(y - 3, 0), y + 4), slice(max(x - 3, 0), x + 4)
        a, b, c = (gx[sl] ** 2).sum(), (gx[sl] * gy[sl]).sum(), (gy[sl] ** 2).sum()
        assert lam[y, x] == pytest.approx(np.linalg.eigvalsh([[a, b], [b, c]])[0], abs=1e-12)


def test_saliency_flat_checker_empty():
    cfg = PipelineConfig()
    img = np.zeros((20, 20))
    img[:10, :10] = img[10:, 10:] = 1.0  # checkerboard crossing at (10, 10), flat far corners
    m = MatchSet(np.array([[10.0, 10.0, 11.0, 10.0], [2.0, 2.0, 3.0, 2.0]]))
    kept = saliency_prune(img, m, cfg)
    assert len(kept) == 1 and np.array_equal(kept.points[0], m.points[0])
    assert min_eigenvalue_map(img, 7)[10, 10] > 0.045
    assert len(saliency_prune(img, MatchSet(np.zeros((0, 4))), cfg)) == 0


def test_config_validation():
    for bad in (dict(max_it=0), dict(epsilon_fb=0), dict(patch_size=10), dict(saliency_window=4),
                dict(global_warps=0)):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)
    c = PipelineConfig()
    assert (c.patch_size, c.max_it, c.epsilon_fb, c.saliency_threshold, c.global_warps) == (11, 3, 2.0, 0.045, 4)


# ---------------------------------------------------------------- re-seed helpers

def test_patch_energies_match_direct_sums():
    A = smooth_texture(16, 18, 1)
    B = np.roll(A, 1, axis=1)
    p = prepare(EnergyConfig.tvl1(), A, B)
    u = np.random.default_rng(0).normal(size=(16, 18, 2))
    pe = patch_energies(p, u, 5)
    valid = np.ones((16, 18), bool)
    for y, x in [(0, 0), (8, 9), (15, 17), (2, 16)]:
        want = density(p, u, valid, Rect.patch(x, y, 5, (16, 18))).sum()
        assert pe[y, x] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_fill_pruned_keeps_known_and_fills_all():
    A = smooth_texture(16, 16, 2)
    p = prepare(EnergyConfig.tvl1(), A, A)
    f = _const(16, 16, (2.0, -1.0))
    f.state[4:12, 4:12] = EMPTY
    out = fill_pruned(p, f, 5)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, np.broadcast_to((2.0, -1.0), out.shape), atol=1e-9)


# ---------------------------------------------------------------- pipelines

def test_run_faldoi_identical_frames():
    img = smooth_texture(32, 32, 4)
    m = MatchSet(np.array([[16.0, 16.0, 16.0, 16.0]]))
    ev = []
    out = run_faldoi(img, img, m, events=ev)
    assert out.is_dense() and np.abs(out.u).max() < 1e-3
    assert ev[0] == (16, 16, 0.0) or ev[0][1:3] == (16, 16)
    assert ev[0][-1] == 0.0 and len(ev) == 32 * 32


def test_run_faldoi_translation_and_determinism():
    A = smooth_texture(48, 48, 5)
    B = np.roll(A, (1, 2), axis=(0, 1))
    m = MatchSet(np.array([[20.0, 22.0, 22.0, 23.0]]))
    a = run_faldoi(A, B, m)
    b = run_faldoi(A, B, m)
    assert np.array_equal(a.u, b.u)
    epe = np.hypot(a.u[..., 0] - 2, a.u[..., 1] - 1)[5:-5, 5:-5]
    assert np.mean(epe < 0.1) >= 0.99


def test_run_faldoi_seed_errors():
    img = smooth_texture(20, 20, 0)
    with pytest.raises(NoSeedsError, match="no seeds after pruning"):
        run_faldoi(img, img, MatchSet(np.zeros((0, 4))))
    flat = np.full((20, 20), 0.5)
    with pytest.raises(NoSeedsError, match="saliency"):
        run_faldoi(flat, flat, MatchSet(np.array([[5.0, 5.0, 5.0, 5.0]])))
    out = run_faldoi(flat, flat, MatchSet(np.array([[5.0, 5.0, 5.0, 5.0]])), PipelineConfig(use_saliency=False))
    assert out.is_dense()


def test_iterated_consistent_pair(monkeypatch):
    img = smooth_texture(32, 32, 6)
    m = MatchSet(np.array([[10.0, 10.0, 10.0, 10.0], [22.0, 20.0, 22.0, 20.0]]))
    pruned = []
    real = pl.fb_prune

    def spy(uF, uB, eps):
        out = real(uF, uB, eps)
        pruned.append(((~out[0].known).sum(), (~out[1].known).sum()))
        return out

    monkeypatch.setattr(pl, "fb_prune", spy)
    ev = []
    out = run_iterated_faldoi(img, img, m, m, events=ev)
    assert np.abs(out.u).max() < 1e-3
    assert pruned == [(0, 0), (0, 0)]  # two prunes for MAX_IT = 3, nothing removed
    # re-seeded original seeds pop first with priority 0
    second = [e for e in ev if e[0] == 1 and e[1] == "F"]
    assert [e[2:5] for e in second[:2]] == [(0, 10, 10), (1, 22, 20)]
    assert second[0][5] == 0.0 and second[1][5] == 0.0
    assert all(e[5] >= 0 for e in second[2:])
    assert {e[0] for e in ev} == {0, 1, 2} and len(ev) == 3 * 2 * 32 * 32


def test_iterated_errors():
    img = smooth_texture(20, 20, 1)
    m = MatchSet(np.array([[10.0, 10.0, 10.0, 10.0]]))
    with pytest.raises(NoSeedsError, match="backward"):
        run_iterated_faldoi(img, img, m, MatchSet(np.zeros((0, 4))), PipelineConfig(max_it=1))


def test_iterated_every_cell_pruned(monkeypatch):
    img = smooth_texture(24, 24, 2)
    m = MatchSet(np.array([[12.0, 12.0, 12.0, 12.0]]))

    def wipe(uF, uB, eps):
        a, b = uF.copy(), uB.copy()
        a.state[:] = EMPTY
        return a, b

    monkeypatch.setattr(pl, "fb_prune", wipe)
    with pytest.raises(NoSeedsError, match="every forward cell was pruned"):
        run_iterated_faldoi(img, img, m, m, PipelineConfig(max_it=2))

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from nfisac.array import IsacWaveform, PolarPoint, UlaConfig, near_field_steering, sensing_channel
from nfisac.crb import crb, fim, steering_derivatives
from nfisac.music import (CartesianGrid, EchoBatch, FewSnapshotsWarning, PolarGrid,
                          SubspaceTieWarning, complex_gaussian, music, sample_covariance,
                          simulate_echoes, spectrum, subspace_split)

from conftest import random_psd


def test_sample_covariance_single_snapshot():
    y = np.arange(4) + 1j
    with pytest.warns(FewSnapshotsWarning):
        batch = EchoBatch(y[:, None])
    R = sample_covariance(batch)
    assert np.allclose(R, np.outer(y, y.conj()))
    assert np.linalg.matrix_rank(R) == 1


def test_sample_covariance_noiseless_rank(desk):
    rng = np.random.default_rng(0)
    G = sensing_channel(desk, PolarPoint(10.0, 1.0), 0.5).G
    X = rng.standard_normal((17, 200)) + 0j
    R = sample_covariance(EchoBatch(G @ X))
    lam = np.linalg.eigvalsh(R)
    assert np.sum(lam > 1e-10 * lam[-1]) <= np.linalg.matrix_rank(G @ X)
    assert np.allclose(R, R.conj().T) and lam[0] > -1e-12 * lam[-1]


def test_sample_covariance_noise_only():
    rng = np.random.default_rng(1)
    T, s2 = 20000, 0.3
    R = sample_covariance(EchoBatch(complex_gaussian(rng, (6, T), s2)))
    assert np.max(np.abs(R - s2 * np.eye(6))) < 5 * s2 / math.sqrt(T)


def test_subspace_split_rank_one_plus_noise():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    a /= np.linalg.norm(a)
    Es, En = subspace_split(np.outer(a, a.conj()) + 1e-3 * np.eye(8), 1)
    assert abs(abs(np.vdot(Es[:, 0], a)) - 1) < 1e-12
    U = np.hstack([Es, En])
    assert np.allclose(U.conj().T @ U, np.eye(8), atol=1e-12)
    assert np.max(np.abs(Es.conj().T @ En)) < 1e-10


def test_subspace_split_identity_tie_is_deterministic():
    with pytest.warns(SubspaceTieWarning):
        Es, En = subspace_split(np.eye(5), 1)
    with pytest.warns(SubspaceTieWarning):
        Es2, En2 = subspace_split(np.eye(5), 1)
    U = np.hstack([Es, En])
    assert np.allclose(U.conj().T @ U, np.eye(5), atol=1e-12)
    assert np.array_equal(Es, Es2)


def test_subspace_split_rejects_bad_count():
    with pytest.raises(ValueError):
        subspace_split(np.eye(3), 3)


def test_spectrum_noiseless_on_grid(desk):
    target = PolarPoint(12.0, math.radians(60.0))
    a = near_field_steering(desk, target)
    _, En = subspace_split(np.outer(a, a.conj()), 1)
    grid = PolarGrid(np.linspace(10, 14, 41), np.radians(np.linspace(55, 65, 41)))
    sp = spectrum(En, desk, grid)
    assert sp.p[20, 20] < 1e-10
    assert sp.estimate == pytest.approx((12.0, math.radians(60.0)), abs=1e-12)
    assert np.all(sp.p >= 0)
    assert sp.normalized.max() == 1.0


@given(seed=st.integers(0, 2**31))
def test_spectrum_invariant_to_noise_basis_rotation(seed):
    rng = np.random.default_rng(seed)
    cfg = UlaConfig.from_aperture(9, 0.3, 28e9)
    R = random_psd(rng, 9)
    _, En = subspace_split(R, 1)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8)))
    grid = PolarGrid(np.linspace(1, 10, 7), np.linspace(0.3, 2.8, 7))
    p1 = spectrum(En, cfg, grid).p
    p2 = spectrum(En @ Q, cfg, grid).p
    assert np.allclose(p1, p2, rtol=1e-10, atol=1e-12)


def test_spectrum_contract_violations(desk):
    grid = PolarGrid(np.array([5.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        spectrum(np.zeros((17, 16)), desk, grid)
    with pytest.raises(ValueError):
        spectrum(np.eye(17)[:, 1:], desk, grid, dictionary="planar")


def test_cartesian_grid_dimensions():
    g = CartesianGrid.uniform(40.0, 0.08)
    assert g.shape == (501, 501)
    assert g.x[-1] == pytest.approx(40.0)


def test_spectrum_origin_is_finite(desk):
    a = near_field_steering(desk, PolarPoint(5.0, 1.0))
    _, En = subspace_split(np.outer(a, a.conj()) + 1e-3 * np.eye(17), 1)
    sp = spectrum(En, desk, CartesianGrid.uniform(1.0, 0.5))
    assert np.all(np.isfinite(sp.p))


def test_orthogonality_as_noise_vanishes(desk):
    target = PolarPoint(8.0, 1.3)
    G = sensing_channel(desk, target, 1.0).G
    wf = IsacWaveform(np.zeros((17, 0)), np.eye(17) / 17)
    grid = PolarGrid(np.array([target.r]), np.array([target.theta]))
    vals = []
    for s2 in (1e-2, 1e-5, 1e-8):
        batch = simulate_echoes(G, wf, 256, s2, np.random.default_rng(0))
        vals.append(music(batch, desk, grid).p[0, 0])
    # p at the truth shrinks in proportion to the noise power
    assert vals[1] / vals[0] == pytest.approx(1e-3, rel=0.05)
    assert vals[2] / vals[1] == pytest.approx(1e-3, rel=0.05)


def test_music_rejects_multiple_targets(desk):
    batch = EchoBatch(np.ones((17, 20), complex))
    with pytest.raises(NotImplementedError):
        music(batch, desk, PolarGrid(np.array([1.0]), np.array([1.0])), num_targets=2)


def test_simulate_echoes_combiner_and_meta(desk):
    G = sensing_channel(desk, PolarPoint(8.0, 1.3), 1.0).G
    wf = IsacWaveform(np.ones((17, 1)), np.eye(17))
    W = np.exp(1j * np.random.default_rng(0).uniform(0, 6, (5, 17)))
    b = simulate_echoes(G, wf, 64, 0.1, np.random.default_rng(3), combiner=W, seed_info={"trial": 4})
    assert b.Y.shape == (5, 64)
    assert b.meta["trial"] == 4 and b.meta["noise_power"] == 0.1
    b2 = simulate_echoes(G, wf, 64, 0.1, np.random.default_rng(3), combiner=W)
    assert np.array_equal(b.Y, b2.Y)


def _local_grid(target, bound, half=8.0, points=81):
    sr, st_ = bound.root()
    return PolarGrid(target.r + np.linspace(-half, half, points) * sr,
                     target.theta + np.linspace(-half, half, points) * st_)


@pytest.mark.slow
def test_music_accuracy_at_high_snr():
    """At 20 dB and T = 64 the estimate lands within one grid step in 95% of trials.

    The grid step is three RCRBs per axis.
    """
    cfg = UlaConfig.from_aperture(17, 0.5, 28e9)
    target = PolarPoint(6.0, math.radians(70.0))
    wf = IsacWaveform(np.zeros((17, 0)), np.eye(17) / 17)
    a = near_field_steering(cfg, target)
    noise = 1.0
    gain = math.sqrt(100.0 * noise / np.real(a @ wf.covariance @ a.conj()))
    G = sensing_channel(cfg, target, gain).G
    bound = crb(fim(steering_derivatives(cfg, target), wf.covariance, gain, 64, noise))
    grid = _local_grid(target, bound, half=30.0, points=21)
    step_r, step_t = grid.r[1] - grid.r[0], grid.theta[1] - grid.theta[0]
    hits = 0
    for t in range(100):
        est = music(simulate_echoes(G, wf, 64, noise, np.random.default_rng(t)), cfg, grid).estimate
        hits += abs(est[0] - target.r) <= step_r + 1e-12 and abs(est[1] - target.theta) <= step_t + 1e-12
    assert hits >= 95


@pytest.mark.slow
def test_music_mse_above_crb_small_array():
    """N = 9 Monte Carlo: MUSIC MSE does not beat the CRB (one-sided chi-square test)."""
    cfg = UlaConfig.from_aperture(9, 0.3, 28e9)
    target = PolarPoint(4.0, 1.2)
    wf = IsacWaveform(np.zeros((9, 0)), np.eye(9) / 9)
    T, noise, n = 256, 1.0, 500
    a = near_field_steering(cfg, target)
    gain = math.sqrt(100.0 * noise / np.real(a @ wf.covariance @ a.conj()))
    bound = crb(fim(steering_derivatives(cfg, target), wf.covariance, gain, T, noise))
    grid = _local_grid(target, bound)
    G = sensing_channel(cfg, target, gain).G
    est = np.array([music(simulate_echoes(G, wf, T, noise, np.random.default_rng(1000 + t)), cfg,
                          grid).estimate for t in range(n)])
    floor = stats.chi2.ppf(1e-3, n) / n
    assert np.mean((est[:, 0] - target.r) ** 2) >= floor * bound.distance
    assert np.mean((est[:, 1] - target.theta) ** 2) >= floor * bound.angle

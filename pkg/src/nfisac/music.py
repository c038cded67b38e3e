"""Echo simulation and 2-D MUSIC over distance and angle."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .array import (IsacWaveform, UlaConfig, far_field_steering,
                    near_field_steering_grid)


class SubspaceTieWarning(UserWarning):
    pass


class FewSnapshotsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EchoBatch:
    """``N x T`` received echo snapshots plus how they were generated."""

    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("echo snapshots contain non-finite entries")
        n, t = self.Y.shape
        if t < n:
            warnings.warn(f"only {t} snapshots for {n} antennas", FewSnapshotsWarning, stacklevel=2)

    @property
    def snapshots(self) -> int:
        return self.Y.shape[1]


def complex_gaussian(rng: np.random.Generator, shape, power: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples of the given power."""
    return math.sqrt(power / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def qpsk_symbols(rng: np.random.Generator, shape) -> np.ndarray:
    return np.exp(1j * (math.pi / 4 + math.pi / 2 * rng.integers(0, 4, size=shape)))


def psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Factor ``L`` with ``L L^H = R`` (negative eigenvalues clipped)."""
    lam, V = np.linalg.eigh(0.5 * (R + R.conj().T))
    return V * np.sqrt(np.clip(lam, 0.0, None))


def transmit_block(waveform: IsacWaveform, snapshots: int, rng: np.random.Generator) -> np.ndarray:
    """``X = sum_k f_k c_k + s``: QPSK data plus Gaussian sensing with covariance ``R_s``."""
    F = waveform.beamformers
    n = waveform.sensing_cov.shape[0]
    X = F @ qpsk_symbols(rng, (F.shape[1], snapshots))
    X = X + psd_sqrt(waveform.sensing_cov) @ complex_gaussian(rng, (n, snapshots))
    return X


def simulate_echoes(G: np.ndarray, waveform: IsacWaveform, snapshots: int, noise_power: float,
                    rng: np.random.Generator, combiner: Optional[np.ndarray] = None,
                    seed_info: Optional[dict] = None) -> EchoBatch:
    """Received echoes ``Y = G X + Z`` (or ``W (G X + Z)`` with a combiner)."""
    X = transmit_block(waveform, snapshots, rng)
    Y = G @ X + complex_gaussian(rng, (G.shape[0], snapshots), noise_power)
    if combiner is not None:
        Y = combiner @ Y
    meta = {"snapshots": snapshots, "noise_power": noise_power}
    if seed_info:
        meta.update(seed_info)
    return EchoBatch(Y, meta)


def sample_covariance(batch: EchoBatch) -> np.ndarray:
    Y = batch.Y
    R = Y @ Y.conj().T / Y.shape[1]
    return 0.5 * (R + R.conj().T)


def _fix_phase(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Rotate each column so its first non-negligible entry is real positive."""
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        idx = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1e-300))
        if idx.size:
            ph = col[idx[0]] / abs(col[idx[0]])
            V[:, j] = col / ph
    return V


def subspace_split(R: np.ndarray, num_targets: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Signal and noise eigenvector bases of a Hermitian covariance.

    Returns ``(E_s, E_n)`` with eigenvalues in descending order.
    """
    n = R.shape[0]
    if not 0 < num_targets < n:
        raise ValueError("need 0 < num_targets < N")
    lam, V = np.linalg.eigh(0.5 * (R + R.conj().T))
    lam, V = lam[::-1], _fix_phase(V[:, ::-1])
    M = num_targets
    scale = max(abs(lam[0]), 1.0)
    if abs(lam[M - 1] - lam[M]) <= 1e-12 * scale:
        warnings.warn("eigenvalue tie at the signal/noise boundary", SubspaceTieWarning, stacklevel=2)
        tied = np.flatnonzero(np.abs(lam - lam[M]) <= 1e-12 * scale)
        keys = [tuple(np.round(np.concatenate([V[:, j].real, V[:, j].imag]), 12)) for j in tied]
        order = [tied[i] for i in sorted(range(len(tied)), key=lambda i: keys[i], reverse=True)]
        V[:, tied] = V[:, order]
    return V[:, :M], V[:, M:]


@dataclass(frozen=True)
class CartesianGrid:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def uniform(cls, stop: float = 40.0, step: float = 0.08, start: float = 0.0) -> "CartesianGrid":
        n = int(round((stop - start) / step)) + 1
        axis = start + step * np.arange(n)
        return cls(axis, axis.copy())

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.hypot(X, Y), np.arctan2(Y, X)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.x), len(self.y)


@dataclass(frozen=True)
class PolarGrid:
    r: np.ndarray
    theta: np.ndarray

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.r, self.theta, indexing="ij")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.r), len(self.theta)


Grid = Union[CartesianGrid, PolarGrid]


@dataclass(frozen=True)
class MusicSpectrum:
    """Null-spectrum ``p`` on a grid, its normalised reciprocal and the argmin."""

    grid: Grid
    p: np.ndarray
    estimate: tuple[float, float]
    estimate_index: tuple[int, int]
    num_targets: int = 1
    dictionary: str = "near"

    @property
    def normalized(self) -> np.ndarray:
        """``1/p`` scaled so the peak is 1."""
        p = np.maximum(self.p, np.finfo(float).tiny)
        return p.min() / p


def spectrum(E_n: np.ndarray, cfg: UlaConfig, grid: Grid, dictionary: str = "near",
             combiner: Optional[np.ndarray] = None, chunk: int = 8192) -> MusicSpectrum:
    """Evaluate ``p(r, theta) = ||E_n^H a(r, theta)||^2`` over a grid.

    With a combiner ``W`` the dictionary becomes ``W a``.
    """
    if not np.any(E_n):
        raise ValueError("noise subspace is empty or zero")
    if dictionary not in ("near", "far"):
        raise ValueError("dictionary must be 'near' or 'far'")
    R, TH = grid.polar()
    r_flat, th_flat = R.ravel(), TH.ravel()
    En_h = E_n.conj().T
    if combiner is not None:
        En_h = En_h @ combiner
    p = np.empty(r_flat.size)
    for lo in range(0, r_flat.size, chunk):
        sl = slice(lo, lo + chunk)
        if dictionary == "near":
            A = near_field_steering_grid(cfg, r_flat[sl], th_flat[sl])
        else:
            A = far_field_steering(cfg, th_flat[sl])
        proj = A @ En_h.T
        p[sl] = np.einsum("ij,ij->i", proj, proj.conj()).real
    p = p.reshape(R.shape)
    idx = np.unravel_index(int(np.argmin(p)), p.shape)
    est = (float(R[idx]), float(TH[idx]))
    return MusicSpectrum(grid, p, est, (int(idx[0]), int(idx[1])), E_n.shape[0] - E_n.shape[1], dictionary)


def music(batch: EchoBatch, cfg: UlaConfig, grid: Grid, num_targets: int = 1,
          dictionary: str = "near", combiner: Optional[np.ndarray] = None) -> MusicSpectrum:
    if num_targets != 1:
        raise NotImplementedError("only a single target is supported")
    _, E_n = subspace_split(sample_covariance(batch), num_targets)
    return spectrum(E_n, cfg, grid, dictionary, combiner)

"""Uniform linear array geometry and spherical-wave channel models.

The array is centred at the origin with elements at ``(n d, 0)`` for
``n = -(N-1)/2, ..., (N-1)/2``.  A point in the plane is given in polar form
``(r, theta)`` measured from the array centre, with ``theta`` in ``(0, pi)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class FresnelRegionWarning(UserWarning):
    """Emitted when a point lies closer than the constant-gain Fresnel bound."""


class InfeasibleWaveformError(ValueError):
    """The interference-plus-noise term of a rate evaluation went negative."""


@dataclass(frozen=True)
class UlaConfig:
    """ULA geometry and carrier.

    Args:
        num_antennas: odd number of elements ``N = 2*Nh + 1``.
        spacing: element spacing ``d`` in meters.
        wavelength: carrier wavelength in meters.
    """

    num_antennas: int
    spacing: float
    wavelength: float

    def __post_init__(self):
        if self.num_antennas < 3 or self.num_antennas % 2 == 0:
            raise ValueError(f"num_antennas must be odd and >= 3, got {self.num_antennas}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")

    @classmethod
    def from_aperture(cls, num_antennas: int, aperture: float, freq_hz: float,
                      wavelength: Optional[float] = None) -> "UlaConfig":
        """Build a config from total aperture ``D`` and carrier frequency.

        Args:
            num_antennas: odd element count.
            aperture: ``D`` in meters.
            freq_hz: carrier frequency.
            wavelength: rounded carrier wavelength to use instead of ``c / f``;
                must agree with it to 1%.

        Returns:
            The array configuration.
        """
        lam = SPEED_OF_LIGHT / freq_hz
        if wavelength is not None:
            if abs(wavelength - lam) > 0.01 * lam:
                raise ValueError(f"wavelength {wavelength} m is inconsistent with {freq_hz:.4g} Hz")
            lam = wavelength
        return cls(num_antennas, aperture / (num_antennas - 1), lam)

    @property
    def half_size(self) -> int:
        return (self.num_antennas - 1) // 2

    @property
    def aperture(self) -> float:
        return (self.num_antennas - 1) * self.spacing

    @property
    def rayleigh_distance(self) -> float:
        return 2.0 * self.aperture**2 / self.wavelength

    @property
    def fresnel_bound(self) -> float:
        """Lower edge ``1.2 D`` of the constant-gain Fresnel region."""
        return 1.2 * self.aperture

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.half_size, self.half_size + 1)

    @property
    def positions(self) -> np.ndarray:
        return self.indices * self.spacing


@dataclass(frozen=True)
class PolarPoint:
    """Location ``(r, theta)`` relative to the array centre (meters, radians)."""

    r: float
    theta: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not 0.0 < self.theta < math.pi:
            raise ValueError(f"theta must lie in (0, pi), got {self.theta}")

    @classmethod
    def from_degrees(cls, r: float, theta_deg: float) -> "PolarPoint":
        return cls(r, math.radians(theta_deg))

    @property
    def xy(self) -> tuple[float, float]:
        return self.r * math.cos(self.theta), self.r * math.sin(self.theta)


def _distance_offsets(cfg: UlaConfig, r, theta) -> np.ndarray:
    """``r_n - r`` for every element, broadcast over arrays of ``r``/``theta``.

    Uses ``(n^2 d^2 - 2 r n d cos) / (r_n + r)`` so the far-field limit keeps
    full relative precision.  The element axis is the last axis.
    """
    r = np.asarray(r, dtype=float)[..., None]
    theta = np.asarray(theta, dtype=float)[..., None]
    s = cfg.positions
    num = s**2 - 2.0 * r * s * np.cos(theta)
    den = np.sqrt(r**2 + num) + r
    # only r = 0 at the centre element gives 0/0; its offset is 0
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def element_distance(cfg: UlaConfig, p: PolarPoint, n: int) -> float:
    """Distance from element ``n`` to the point ``p``."""
    if not -cfg.half_size <= n <= cfg.half_size:
        raise IndexError(f"element index {n} outside [-{cfg.half_size}, {cfg.half_size}]")
    nd = n * cfg.spacing
    return math.sqrt(p.r**2 + nd**2 - 2.0 * p.r * nd * math.cos(p.theta))


def near_field_steering(cfg: UlaConfig, p: PolarPoint) -> np.ndarray:
    return np.exp(-1j * cfg.wavenumber * _distance_offsets(cfg, p.r, p.theta))


def near_field_steering_grid(cfg: UlaConfig, r, theta) -> np.ndarray:
    """Vectorised near-field steering; shape ``r.shape + (N,)``.

    No domain checks, so grid points on the array axis can be evaluated.
    """
    return np.exp(-1j * cfg.wavenumber * _distance_offsets(cfg, r, theta))


def far_field_steering(cfg: UlaConfig, theta) -> np.ndarray:
    """Planar-wave steering ``exp(+j k n d cos(theta))``; broadcasts over ``theta``."""
    theta = np.asarray(theta, dtype=float)[..., None]
    return np.exp(1j * cfg.wavenumber * cfg.positions * np.cos(theta))


def pathloss_gain(cfg: UlaConfig, p: PolarPoint, convention: str = "unsquared") -> complex:
    """Complex gain of the centre link, ``sqrt(rho0)/r * exp(-j k r)``.

    ``convention="unsquared"`` uses ``rho0 = lambda / (4 pi)``; ``"free_space"``
    uses the squared Friis form ``(lambda / (4 pi))**2``.
    """
    if convention == "unsquared":
        rho0 = cfg.wavelength / (4.0 * math.pi)
    elif convention == "free_space":
        rho0 = (cfg.wavelength / (4.0 * math.pi)) ** 2
    else:
        raise ValueError(f"unknown pathloss convention {convention!r}")
    if p.r < cfg.fresnel_bound:
        warnings.warn(
            f"r = {p.r:.4g} m is below the Fresnel bound 1.2D = {cfg.fresnel_bound:.4g} m",
            FresnelRegionWarning,
            stacklevel=2,
        )
    phase = -cfg.wavenumber * p.r
    return math.sqrt(rho0) / p.r * complex(math.cos(phase), math.sin(phase))


def comm_channel(cfg: UlaConfig, p: PolarPoint, gain: Optional[complex] = None,
                 convention: str = "unsquared") -> np.ndarray:
    """User channel ``h = beta * a(r, theta)``; ``gain`` defaults to the pathloss."""
    beta = pathloss_gain(cfg, p, convention) if gain is None else gain
    return beta * near_field_steering(cfg, p)


@dataclass(frozen=True)
class SensingChannel:
    """Round-trip channel ``G = beta_s a a^T`` of a single point target."""

    G: np.ndarray
    gain: complex
    target: PolarPoint


def sensing_channel(cfg: UlaConfig, target: PolarPoint, gain: complex) -> SensingChannel:
    a = near_field_steering(cfg, target)
    G = gain * np.outer(a, a)
    # mirror so G == G.T holds bitwise
    G = np.triu(G) + np.triu(G, 1).T
    return SensingChannel(G, complex(gain), target)


def _min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.conj().T))[0])


@dataclass(frozen=True)
class IsacWaveform:
    """Communication beamformers (columns) and the dedicated sensing covariance."""

    beamformers: np.ndarray
    sensing_cov: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.beamformers, dtype=complex)
        if F.ndim == 1:
            F = F[:, None]
        Rs = np.asarray(self.sensing_cov, dtype=complex)
        if F.shape[0] != Rs.shape[0]:
            raise ValueError("beamformers must be N x K with N matching the sensing covariance")
        object.__setattr__(self, "beamformers", F)
        object.__setattr__(self, "sensing_cov", Rs)
        if not np.allclose(Rs, Rs.conj().T, atol=1e-10 * max(1.0, np.abs(Rs).max())):
            raise ValueError("sensing covariance is not Hermitian")
        scale = max(1.0, float(np.real(np.trace(self.covariance))))
        if _min_eig(Rs) < -1e-8 * scale:
            raise ValueError(f"sensing covariance is not PSD (min eig {_min_eig(Rs):.3e})")

    @property
    def num_users(self) -> int:
        return self.beamformers.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        F = self.beamformers
        return F @ F.conj().T + self.sensing_cov

    @property
    def power(self) -> float:
        return float(np.real(np.trace(self.covariance)))


def _check_unit_modulus(M: np.ndarray, name: str) -> None:
    if M.size and np.max(np.abs(np.abs(M) - 1.0)) > 1e-12:
        raise ValueError(f"{name} entries must have unit modulus")


@dataclass(frozen=True)
class HybridFrontEnd:
    """Phase-shifter precoder/combiner plus the digital baseband waveform.

    ``analog_precoder`` is ``N x N_RF``, ``analog_combiner`` is ``N_RF x N``;
    ``digital_beamformers`` has one column per user.
    """

    analog_precoder: np.ndarray
    analog_combiner: np.ndarray
    digital_beamformers: np.ndarray = field(default=None)
    digital_sensing_cov: np.ndarray = field(default=None)

    def __post_init__(self):
        _check_unit_modulus(self.analog_precoder, "analog precoder")
        _check_unit_modulus(self.analog_combiner, "analog combiner")
        n, n_rf = self.analog_precoder.shape
        if self.analog_combiner.shape != (n_rf, n):
            raise ValueError("combiner must be N_RF x N matching the precoder")
        if self.digital_beamformers is None:
            object.__setattr__(self, "digital_beamformers", np.zeros((n_rf, 0), complex))
        if self.digital_sensing_cov is None:
            object.__setattr__(self, "digital_sensing_cov", np.zeros((n_rf, n_rf), complex))
        if self.num_rf < self.digital_beamformers.shape[1] + 1:
            raise ValueError("need N_RF >= K + 1")

    @property
    def num_rf(self) -> int:
        return self.analog_precoder.shape[1]

    def with_digital(self, beamformers: np.ndarray, sensing_cov: np.ndarray) -> "HybridFrontEnd":
        return HybridFrontEnd(self.analog_precoder, self.analog_combiner, beamformers, sensing_cov)

    @property
    def baseband_covariance(self) -> np.ndarray:
        B = self.digital_beamformers
        return B @ B.conj().T + self.digital_sensing_cov

    @property
    def transmit_covariance(self) -> np.ndarray:
        F = self.analog_precoder
        return F @ self.baseband_covariance @ F.conj().T

    def waveform(self) -> IsacWaveform:
        """Equivalent full-dimension waveform ``(F_RF f_BB,k, F_RF R_BB,s F_RF^H)``."""
        F = self.analog_precoder
        return IsacWaveform(F @ self.digital_beamformers, F @ self.digital_sensing_cov @ F.conj().T)


def analog_precoder(cfg: UlaConfig, users: Sequence[PolarPoint], target: PolarPoint,
                    num_rf: int) -> np.ndarray:
    """Columns ``a*(user_l)`` for the users, then ``a*(target)`` for the rest."""
    if num_rf < len(users) + 1:
        raise ValueError("need N_RF >= K + 1")
    cols = [near_field_steering(cfg, u).conj() for u in users]
    cols += [near_field_steering(cfg, target).conj()] * (num_rf - len(users))
    return np.stack(cols, axis=1)


def random_combiner(num_rf: int, num_antennas: int, rng: np.random.Generator) -> np.ndarray:
    """Analog combiner with i.i.d. phases uniform on the unit circle."""
    return np.exp(1j * rng.uniform(0.0, 2.0 * math.pi, size=(num_rf, num_antennas)))


def achievable_rate(h: np.ndarray, f: np.ndarray, R_x: np.ndarray, noise: float) -> float:
    """Rate in bits/s/Hz of the user with channel ``h`` served by ``f``.

    ``R_x`` is the total transmit covariance, which must dominate ``f f^H``.
    """
    signal = abs(h @ f) ** 2
    total = float(np.real(h @ R_x @ h.conj()))
    interference = total - signal
    if interference < -1e-9 * (abs(total) + noise):
        raise InfeasibleWaveformError(
            f"interference term {interference:.3e} is negative; R_x does not dominate f f^H"
        )
    return math.log2(1.0 + signal / (max(interference, 0.0) + noise))

"""Fisher information and Cramer-Rao bound for joint distance/angle sensing.

The unknowns are ``xi = [r_s, theta_s, Re beta_s, Im beta_s]`` of the
round-trip channel ``G = beta_s a a^T`` observed through
``Y = G X + Z`` with ``Z`` circularly-symmetric Gaussian of power ``sigma^2``.
All FIM entries are linear in the sample covariance ``R_x = X X^H / T``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .array import PolarPoint, UlaConfig, _distance_offsets, far_field_steering


class SingularFimError(np.linalg.LinAlgError):
    """The Fisher information is singular, e.g. the target is not illuminated."""

    def __init__(self, message: str, min_eig: float):
        super().__init__(f"{message} (min eigenvalue {min_eig:.3e})")
        self.min_eig = min_eig


class IllConditionedFimWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SteeringDerivatives:
    """Steering vector, its parameter derivatives and the ``a a^T`` products."""

    a: np.ndarray
    da_dr: np.ndarray
    da_dtheta: np.ndarray

    @property
    def G(self) -> np.ndarray:
        return np.outer(self.a, self.a)

    @property
    def G_r(self) -> np.ndarray:
        P = np.outer(self.da_dr, self.a)
        return P + P.T

    @property
    def G_theta(self) -> np.ndarray:
        P = np.outer(self.da_dtheta, self.a)
        return P + P.T

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.G, self.G_r, self.G_theta


def steering_derivatives(cfg: UlaConfig, target: PolarPoint) -> SteeringDerivatives:
    r, th = target.r, target.theta
    s = cfg.positions
    offset = _distance_offsets(cfg, r, th)
    rn = r + offset
    a = np.exp(-1j * cfg.wavenumber * offset)
    # d r_n/d r - 1 = -(r_n - r + s cos) / r_n, written without cancellation
    ddr = -(s**2 + s * math.cos(th) * offset) / ((rn + r) * rn)
    ddth = r * s * math.sin(th) / rn
    k = -1j * cfg.wavenumber
    return SteeringDerivatives(a, a * k * ddr, a * k * ddth)


@dataclass(frozen=True)
class FimBlocks:
    """Blocks of the 4x4 FIM ordered as ``[r, theta, Re beta, Im beta]``."""

    J11: np.ndarray
    J12: np.ndarray
    J22: np.ndarray
    snapshots: int
    noise_power: float
    gain: complex

    def full(self) -> np.ndarray:
        return np.block([[self.J11, self.J12], [self.J12.T, self.J22]])

    def scaled(self, c: float) -> "FimBlocks":
        return FimBlocks(c * self.J11, c * self.J12, c * self.J22,
                         self.snapshots, self.noise_power, self.gain)


@dataclass(frozen=True)
class CrbMatrix:
    matrix: np.ndarray

    @property
    def distance(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def angle(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def root(self) -> tuple[float, float]:
        """RCRB ``(sqrt(CRB_rr), sqrt(CRB_thth))``."""
        return math.sqrt(self.distance), math.sqrt(self.angle)


def _check_covariance(R: np.ndarray) -> None:
    scale = max(float(np.abs(R).max(initial=0.0)), 1e-300)
    if not np.allclose(R, R.conj().T, atol=1e-10 * scale):
        raise ValueError("transmit covariance is not Hermitian")
    lam = np.linalg.eigvalsh(0.5 * (R + R.conj().T))
    if lam.size and lam[0] < -1e-9 * max(abs(lam[-1]), 1e-300):
        raise ValueError(f"transmit covariance is not PSD (min eig {lam[0]:.3e})")


def _tr(A: np.ndarray, R: np.ndarray, B: np.ndarray) -> complex:
    """``tr(A R B^H)``."""
    return complex(np.sum((A @ R) * B.conj()))


def fim_entries(G: np.ndarray, G_r: np.ndarray, G_theta: np.ndarray, R_x: np.ndarray,
                gain: complex, snapshots: int, noise_power: float) -> np.ndarray:
    """Full 4x4 FIM as a linear function of ``R_x`` (no validity checks)."""
    c = 2.0 * snapshots / noise_power
    derivs = (G_r, G_theta)
    J = np.zeros((4, 4))
    for i, Gl in enumerate(derivs):
        for j, Gp in enumerate(derivs):
            J[i, j] = c * abs(gain) ** 2 * _tr(Gp, R_x, Gl).real
        t = np.conj(gain) * _tr(G, R_x, Gl)
        J[i, 2] = J[2, i] = c * t.real
        J[i, 3] = J[3, i] = c * (1j * t).real
    J[0:2, 0:2] = 0.5 * (J[0:2, 0:2] + J[0:2, 0:2].T)
    J[2, 2] = J[3, 3] = c * _tr(G, R_x, G).real
    return J


def fim_from_matrices(G: np.ndarray, G_r: np.ndarray, G_theta: np.ndarray, R_x: np.ndarray,
                      gain: complex, snapshots: int, noise_power: float) -> FimBlocks:
    """FIM for effective round-trip matrices (possibly left-multiplied by a combiner)."""
    if snapshots < 1:
        raise ValueError("need at least one snapshot")
    if not noise_power > 0:
        raise ValueError("noise power must be positive")
    _check_covariance(R_x)
    J = fim_entries(G, G_r, G_theta, R_x, gain, snapshots, noise_power)
    return FimBlocks(J[:2, :2].copy(), J[:2, 2:].copy(), J[2:, 2:].copy(),
                     snapshots, noise_power, complex(gain))


def fim(deriv: SteeringDerivatives, R_x: np.ndarray, gain: complex, snapshots: int,
        noise_power: float) -> FimBlocks:
    return fim_from_matrices(*deriv.matrices(), R_x, gain, snapshots, noise_power)


def _inv_spd(M: np.ndarray, what: str) -> np.ndarray:
    M = 0.5 * (M + M.T)
    lam = np.linalg.eigvalsh(M)
    if lam[-1] <= 0 or lam[0] <= 1e-14 * lam[-1]:
        raise SingularFimError(f"{what} is singular", float(lam[0]))
    cond = lam[-1] / lam[0]
    if cond > 1e12:
        warnings.warn(f"{what} condition number {cond:.2e}", IllConditionedFimWarning, stacklevel=3)
    try:
        cf = linalg.cho_factor(M)
    except linalg.LinAlgError as exc:
        raise SingularFimError(f"{what} is not positive definite", float(lam[0])) from exc
    inv = linalg.cho_solve(cf, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def schur_information(blocks: FimBlocks) -> np.ndarray:
    """``J11 - J12 J22^{-1} J12^T``: information on the location after the gain."""
    d = np.diag(blocks.J22)
    scale = max(float(np.abs(blocks.J11).max()), 1e-300)
    if np.any(d <= 1e-14 * scale) or not np.all(np.isfinite(d)):
        raise SingularFimError("gain block J22 is singular", float(d.min()))
    return blocks.J11 - (blocks.J12 / d) @ blocks.J12.T


def crb(blocks: FimBlocks) -> CrbMatrix:
    return CrbMatrix(_inv_spd(schur_information(blocks), "Schur complement of the FIM"))


def crb_hybrid(deriv: SteeringDerivatives, R_hb: np.ndarray, combiner: np.ndarray,
               gain: complex, snapshots: int, noise_power: float) -> CrbMatrix:
    """CRB seen through an analog combiner ``W`` (``N_RF x N``).

    The combined noise ``W z`` is modelled as white with power ``N sigma^2``.
    """
    W = np.asarray(combiner)
    n = W.shape[1]
    mats = [W @ M for M in deriv.matrices()]
    return crb(fim_from_matrices(*mats, R_hb, gain, snapshots, n * noise_power))


def far_field_crb(cfg: UlaConfig, theta: float, R_x: np.ndarray, gain: complex,
                  snapshots: int, noise_power: float,
                  combiner: Optional[np.ndarray] = None) -> float:
    """Angle CRB under the planar-wave model, nuisance gain included."""
    a = far_field_steering(cfg, theta)
    da = a * (-1j * cfg.wavenumber * cfg.positions * math.sin(theta))
    G = np.outer(a, a)
    P = np.outer(da, a)
    G_th = P + P.T
    noise = noise_power
    if combiner is not None:
        G, G_th = combiner @ G, combiner @ G_th
        noise = noise_power * cfg.num_antennas
    _check_covariance(R_x)
    c = 2.0 * snapshots / noise
    j_tt = c * abs(gain) ** 2 * _tr(G_th, R_x, G_th).real
    t = np.conj(gain) * _tr(G, R_x, G_th)
    j_tb = np.array([c * t.real, c * (1j * t).real])
    j_bb = c * _tr(G, R_x, G).real
    if j_bb <= 1e-14 * max(abs(j_tt), 1e-300):
        raise SingularFimError("gain block J22 is singular", j_bb)
    info = j_tt - j_tb @ j_tb / j_bb
    if info <= 1e-14 * abs(j_tt):
        raise SingularFimError("angle information vanishes", info)
    return 1.0 / info

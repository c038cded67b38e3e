"""CRB-minimising ISAC waveform design under per-user rate constraints.

The fully digital design solves the semidefinite relaxation

    min  tr(U^{-1})
    s.t. [[J11(R) - U, J12(R)], [J12(R)^T, J22(R)]] >= 0
         gamma_k h_k^T F_k h_k^* >= h_k^T R h_k^* + sigma_k^2
         R >= sum_k F_k,  F_k >= 0,  tr(R) <= P_max

with ``tr(U^{-1})`` replaced by ``tr(V)`` and ``[[V, I], [I, U]] >= 0``, then
extracts rank-one beamformers that keep the relaxed optimum.

Every constraint sees ``R`` only through quadratic forms in the conjugated
channels and the conjugated steering vector and its two derivatives, so the
program is posed on that subspace (at most ``K + 3`` complex dimensions).
Projecting any feasible point onto it keeps all constraints and the objective
and does not increase the power, so nothing is lost.  The hybrid design uses
the column space of the analog precoder instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .array import (HybridFrontEnd, IsacWaveform, PolarPoint, UlaConfig, achievable_rate,
                    analog_precoder, comm_channel, pathloss_gain, random_combiner)
from .conic import ConeProgram, ConeSolution, SolverOptions, Status, solve
from .crb import CrbMatrix, crb, fim, fim_entries, fim_from_matrices, steering_derivatives


class DesignError(RuntimeError):
    pass


class DesignInfeasibleError(DesignError):
    """The rate and power constraints cannot be met together."""

    def __init__(self, message: str, binding: Sequence[str] = ()):
        detail = f"; binding: {', '.join(binding)}" if binding else ""
        super().__init__(message + detail)
        self.binding = list(binding)


class SolverFailureError(DesignError):
    def __init__(self, message: str, solution: Optional[ConeSolution] = None):
        super().__init__(message)
        self.solution = solution


class RecoveryError(DesignError):
    """A rate-constrained user received no power in the relaxed solution."""


@dataclass(frozen=True)
class DesignScenario:
    """Everything needed to design one waveform.

    ``num_rf=None`` selects the fully digital array; an integer selects the
    hybrid array with that many RF chains.
    """

    array: UlaConfig
    users: tuple
    user_gains: tuple
    target: PolarPoint
    target_gain: complex
    user_noise: tuple
    sensing_noise: float
    snapshots: int
    r_min: tuple
    p_max: float
    num_rf: Optional[int] = None

    def __post_init__(self):
        k = len(self.users)
        if not (len(self.user_gains) == len(self.user_noise) == len(self.r_min) == k):
            raise ValueError("per-user fields must all have length K")
        if not self.p_max > 0:
            raise ValueError("P_max must be positive")
        if any(r < 0 for r in self.r_min):
            raise ValueError("minimum rates must be nonnegative")
        if self.snapshots < 1 or not self.sensing_noise > 0:
            raise ValueError("need T >= 1 and positive sensing noise")
        if self.num_rf is not None and not k + 1 <= self.num_rf <= self.array.num_antennas:
            raise ValueError("hybrid mode needs K + 1 <= N_RF <= N")

    @classmethod
    def create(cls, array: UlaConfig, users: Sequence[PolarPoint], target: PolarPoint, *,
               p_max: float, noise: float, r_min, snapshots: int = 1024,
               sensing_noise: Optional[float] = None, target_gain: Optional[complex] = None,
               num_rf: Optional[int] = None, convention: str = "unsquared") -> "DesignScenario":
        """Scenario with pathloss gains and one noise power for every receiver."""
        users = tuple(users)
        gains = tuple(pathloss_gain(array, u, convention) for u in users)
        if np.isscalar(r_min):
            r_min = (float(r_min),) * len(users)
        if target_gain is None:
            target_gain = pathloss_gain(array, target, convention)
        return cls(array, users, gains, target, complex(target_gain), (noise,) * len(users),
                   noise if sensing_noise is None else sensing_noise, snapshots,
                   tuple(float(r) for r in r_min), p_max, num_rf)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def hybrid(self) -> bool:
        return self.num_rf is not None

    def channels(self) -> np.ndarray:
        """User channels as rows, ``K x N``."""
        n = self.array.num_antennas
        rows = [comm_channel(self.array, u, g) for u, g in zip(self.users, self.user_gains)]
        return np.array(rows).reshape(len(rows), n)

    def with_r_min(self, r_min) -> "DesignScenario":
        if np.isscalar(r_min):
            r_min = (float(r_min),) * self.num_users
        return _replace(self, r_min=tuple(r_min))

    def with_p_max(self, p_max: float) -> "DesignScenario":
        return _replace(self, p_max=p_max)

    def with_target(self, target: PolarPoint, gain: Optional[complex] = None) -> "DesignScenario":
        return _replace(self, target=target, target_gain=self.target_gain if gain is None else gain)

    def fully_digital(self) -> "DesignScenario":
        return _replace(self, num_rf=None)


def _replace(s: DesignScenario, **kw) -> DesignScenario:
    import dataclasses
    return dataclasses.replace(s, **kw)


def sinr_threshold(r_min: float) -> float:
    """``gamma = 1 + 1/(2^R - 1)``; the SINR row reads ``gamma |h^T f|^2 >= h^T R h^* + sigma^2``."""
    if r_min <= 0:
        raise ValueError("threshold undefined for a zero rate requirement")
    return 1.0 + 1.0 / math.expm1(r_min * math.log(2.0))


def _orth(vectors: Sequence[np.ndarray], rtol: float = 1e-10) -> np.ndarray:
    A = np.stack([v / np.linalg.norm(v) for v in vectors if np.linalg.norm(v) > 0], axis=1)
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    return U[:, s > rtol * s[0]]


@dataclass
class _Stage:
    """Digital problem on a transmit subspace ``R = Q R' Q^H``."""

    basis: np.ndarray          # N x m, orthonormal columns
    channels: np.ndarray       # K x N
    sensing: tuple             # effective (G, G_r, G_theta), each rows x N
    gain: complex
    snapshots: int
    noise: float               # effective sensing noise power
    user_noise: np.ndarray
    r_min: np.ndarray
    p_max: float


class SdrProgram(ConeProgram):
    """The relaxed program plus what is needed to map its solution back."""

    def __init__(self, stage: _Stage):
        super().__init__()
        self.stage = stage
        self.active = [k for k, r in enumerate(stage.r_min) if r > 0]
        self.gammas = [sinr_threshold(stage.r_min[k]) for k in self.active]
        self.fim_scale = np.ones(4)
        self.objective_scale = 1.0

    def covariance(self, sol: ConeSolution) -> np.ndarray:
        Q = self.stage.basis
        R = self.stage.p_max * Q @ sol.values["R_x"] @ Q.conj().T
        return 0.5 * (R + R.conj().T)

    def user_matrices(self, sol: ConeSolution) -> List[Optional[np.ndarray]]:
        Q = self.stage.basis
        out: List[Optional[np.ndarray]] = [None] * len(self.stage.r_min)
        for k in self.active:
            F = self.stage.p_max * Q @ sol.values[f"F_{k + 1}"] @ Q.conj().T
            out[k] = 0.5 * (F + F.conj().T)
        return out

    def relaxed_objective(self, sol: ConeSolution) -> float:
        return self.objective_scale * sol.objective


def _build(stage: _Stage) -> SdrProgram:
    prog = SdrProgram(stage)
    Q = stage.basis
    m = Q.shape[1]
    P = stage.p_max
    mats = [M @ Q for M in stage.sensing]

    def fim_of(Rn):
        return fim_entries(*mats, P * Rn, stage.gain, stage.snapshots, stage.noise)

    ref = np.diag(fim_of(np.eye(m) / m))
    if np.any(ref <= 0):
        raise DesignError("the transmit subspace carries no information about the target")
    d = 1.0 / np.sqrt(ref)
    prog.fim_scale = d
    weights = d[:2] ** 2
    prog.objective_scale = float(weights.max())
    w = weights / prog.objective_scale
    D = np.diag(d)

    for k in prog.active:
        prog.add_variable(f"F_{k + 1}", m, hermitian=True, psd=True)
    prog.add_variable("R_x", m, hermitian=True)
    prog.add_variable("U", 2)
    prog.add_variable("V", 2)
    names = [f"F_{k + 1}" for k in prog.active]

    prog.minimize(lambda v: w[0] * v["V"][0, 0] + w[1] * v["V"][1, 1])
    prog.add_lmi("R_x >= sum F_k", lambda v: v["R_x"] - sum((v[n] for n in names), np.zeros((m, m))))

    def fim_lmi(v):
        J = D @ fim_of(v["R_x"]) @ D
        J[:2, :2] -= v["U"]
        return J

    prog.add_lmi("CRB epigraph", fim_lmi)
    I2 = np.eye(2)
    prog.add_lmi("Schur [V I; I U]", lambda v: np.block([[v["V"], I2], [I2, v["U"]]]))

    for k, gamma, name in zip(prog.active, prog.gammas, names):
        g = Q.T @ stage.channels[k]
        noise = stage.user_noise[k] / P

        # in noise units a residual maps to the same relative SINR error
        def sinr_row(v, g=g, gamma=gamma, name=name, noise=noise):
            sig = (g @ v[name] @ g.conj()).real
            tot = (g @ v["R_x"] @ g.conj()).real
            return (gamma * sig - tot) / noise - 1.0

        prog.add_inequality(f"rate user {k + 1}", sinr_row)
    prog.add_inequality("power", lambda v: 1.0 - np.trace(v["R_x"]).real)
    return prog


def _fd_stage(s: DesignScenario) -> _Stage:
    deriv = steering_derivatives(s.array, s.target)
    H = s.channels()
    vecs = [deriv.a.conj(), deriv.da_dr.conj(), deriv.da_dtheta.conj()]
    vecs += [h.conj() for h in H]
    return _Stage(_orth(vecs), H, deriv.matrices(), s.target_gain, s.snapshots, s.sensing_noise,
                  np.array(s.user_noise, float), np.array(s.r_min, float), s.p_max)


def build_sdr_program(s: DesignScenario) -> SdrProgram:
    """Relaxed program for the fully digital array of scenario ``s``."""
    return _build(_fd_stage(s))


def recover_rank_one(F: Sequence[Optional[np.ndarray]], R_x: np.ndarray,
                     channels: np.ndarray) -> IsacWaveform:
    """Rank-one beamformers ``f_k = F_k h_k^* / sqrt(h_k^T F_k h_k^*)``.

    ``F[k] is None`` marks a user without a rate requirement; its beamformer
    is zero.  The covariance is kept, so the sensing part is
    ``R_x - sum_k f_k f_k^H``.
    """
    n = R_x.shape[0]
    cols = []
    for Fk, h in zip(F, channels):
        if Fk is None:
            cols.append(np.zeros(n, complex))
            continue
        q = float((h @ Fk @ h.conj()).real)
        if not q > 1e-14 * max(float(np.trace(Fk).real), 1e-300) * float(np.vdot(h, h).real):
            raise RecoveryError(f"h^T F h = {q:.3e} vanishes; the relaxed solution is degenerate")
        cols.append(Fk @ h.conj() / math.sqrt(q))
    B = np.array(cols).T.reshape(n, len(cols))
    Rs = R_x - B @ B.conj().T
    return IsacWaveform(B, 0.5 * (Rs + Rs.conj().T))


@dataclass
class DesignResult:
    waveform: IsacWaveform
    crb: CrbMatrix
    rates: np.ndarray
    relaxed_objective: float
    solution: ConeSolution
    front_end: Optional[HybridFrontEnd] = None
    combiner_seed: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        """``tr(CRB)`` recomputed from the recovered waveform."""
        return self.crb.trace

    @property
    def power(self) -> float:
        return self.waveform.power

    def violations(self, s: DesignScenario, rate_tol: float = 1e-6, power_tol: float = 1e-6,
                   psd_tol: float = 1e-8) -> List[str]:
        out = []
        for k, (rate, req) in enumerate(zip(self.rates, s.r_min)):
            if rate < req - rate_tol:
                out.append(f"user {k + 1} rate {rate:.9f} < {req}")
        if self.power > s.p_max + power_tol:
            out.append(f"power {self.power:.9g} > {s.p_max}")
        lam = np.linalg.eigvalsh(self.waveform.sensing_cov)[0]
        if lam < -psd_tol:
            out.append(f"sensing covariance min eigenvalue {lam:.3e}")
        return out


def _binding(prog: SdrProgram, sol: ConeSolution, rel: float = 1e-3) -> List[str]:
    """Rate/power rows that contribute to the infeasibility certificate.

    Weight of a row is ``|<F0, X>|``, its share of the certificate's
    diverging dual objective.
    """
    w = {}
    for b in prog.compile().blocks:
        if (b.name.startswith("rate") or b.name == "power") and b.name in sol.duals:
            w[b.name] = abs(float(np.sum(b.F0 * sol.duals[b.name])))
    if not w:
        return []
    top = max(w.values())
    return [n for n, v in w.items() if v > rel * top]


def _solve_stage(stage: _Stage, options: Optional[SolverOptions]):
    prog = _build(stage)
    sol = solve(prog, options)
    if sol.status is Status.INFEASIBLE:
        raise DesignInfeasibleError("rate requirements cannot be met within P_max",
                                    _binding(prog, sol))
    if sol.status is not Status.OPTIMAL and not sol.reduced_accuracy:
        raise SolverFailureError(f"SDP solver stopped: {sol.status.value} ({sol.message})", sol)
    R = prog.covariance(sol)
    wf = recover_rank_one(prog.user_matrices(sol), R, stage.channels)
    return prog, sol, wf


def _rates(channels: np.ndarray, wf: IsacWaveform, noise: Sequence[float]) -> np.ndarray:
    R = wf.covariance
    return np.array([achievable_rate(h, wf.beamformers[:, k], R, noise[k])
                     for k, h in enumerate(channels)])


def design_fully_digital(s: DesignScenario, options: Optional[SolverOptions] = None) -> DesignResult:
    stage = _fd_stage(s)
    prog, sol, wf = _solve_stage(stage, options)
    deriv = steering_derivatives(s.array, s.target)
    bound = crb(fim(deriv, wf.covariance, s.target_gain, s.snapshots, s.sensing_noise))
    return DesignResult(wf, bound, _rates(stage.channels, wf, s.user_noise),
                        prog.relaxed_objective(sol), sol,
                        diagnostics={"subspace_dim": stage.basis.shape[1],
                                     "reduced_accuracy": sol.reduced_accuracy})


def solve_digital_stage(s: DesignScenario, precoder: np.ndarray, combiner: np.ndarray,
                        sensing_noise: float, options: Optional[SolverOptions] = None):
    """Optimise the baseband waveform behind fixed analog matrices.

    Works for any precoder/combiner (unit modulus or not).  Returns
    ``(digital beamformers, digital sensing covariance, full waveform,
    CRB, relaxed objective, solution)``; ``sensing_noise`` is the effective
    noise power after combining.
    """
    deriv = steering_derivatives(s.array, s.target)
    U, sv, _ = np.linalg.svd(precoder, full_matrices=False)
    basis = U[:, sv > 1e-10 * sv[0]]
    sensing = tuple(combiner @ M for M in deriv.matrices())
    H = s.channels()
    stage = _Stage(basis, H, sensing, s.target_gain, s.snapshots, sensing_noise,
                   np.array(s.user_noise, float), np.array(s.r_min, float), s.p_max)
    prog, sol, wf = _solve_stage(stage, options)
    pinv = np.linalg.pinv(precoder, rcond=1e-10)
    B = pinv @ wf.beamformers
    R_bb = pinv @ wf.covariance @ pinv.conj().T
    R_bbs = R_bb - B @ B.conj().T
    R_bbs = 0.5 * (R_bbs + R_bbs.conj().T)
    bound = crb(fim_from_matrices(*sensing, wf.covariance, s.target_gain, s.snapshots,
                                  sensing_noise))
    return B, R_bbs, wf, bound, prog.relaxed_objective(sol), sol


def design_hybrid(s: DesignScenario, rng: Optional[np.random.Generator] = None,
                  combiner: Optional[np.ndarray] = None,
                  options: Optional[SolverOptions] = None) -> DesignResult:
    """Two-stage hybrid design.

    Stage 1 points the analog precoder at the users and the target and draws
    a random-phase combiner (unless one is given).  Stage 2 optimises the
    baseband waveform with the combined noise modelled as ``N sigma^2``.
    """
    if not s.hybrid:
        raise ValueError("scenario is not in hybrid mode")
    cfg = s.array
    F_rf = analog_precoder(cfg, s.users, s.target, s.num_rf)
    seed = None
    if combiner is None:
        if rng is None:
            seed = 0
            rng = np.random.default_rng(seed)
        combiner = random_combiner(s.num_rf, cfg.num_antennas, rng)
    B, R_bbs, wf, bound, relaxed, sol = solve_digital_stage(
        s, F_rf, combiner, cfg.num_antennas * s.sensing_noise, options)
    front = HybridFrontEnd(F_rf, combiner, B, R_bbs)
    gram = combiner @ combiner.conj().T / cfg.num_antennas
    mismatch = float(np.linalg.norm(gram - np.eye(s.num_rf), 2))
    return DesignResult(wf, bound, _rates(s.channels(), wf, s.user_noise), relaxed, sol, front,
                        seed, {"combiner_gram_deviation": mismatch,
                               "reduced_accuracy": sol.reduced_accuracy})

"""Small dense semidefinite programs.

A :class:`ConeProgram` holds real-symmetric or complex-Hermitian matrix
variables and affine constraints built from plain Python callables.  Each
constraint is compiled once by evaluating its callable on the variable
basis, giving the standard inequality form

    minimize    c^T y
    subject to  F_b(y) = F_b0 + sum_i y_i F_bi  >= 0   (PSD, every block b)
                E y = f

Complex Hermitian blocks are embedded as real symmetric ``[[Re, -Im], [Im, Re]]``
blocks before solving.  :func:`solve` runs an infeasible-start primal-dual
path-following method (Nesterov-Todd scaling, Mehrotra predictor-corrector) on this
form; ``backend="cvxpy"`` hands the same compiled data to cvxpy instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, TextIO

import numpy as np
from scipy import linalg

SQRT_HALF = math.sqrt(0.5)
# contract of an Optimal status: gap <= OPTIMAL_GAP (1 + |obj|), violation <= OPTIMAL_VIOLATION
OPTIMAL_GAP = 1e-6
OPTIMAL_VIOLATION = 1e-6


def embed_complex(H: np.ndarray) -> np.ndarray:
    """Real symmetric ``2n x 2n`` embedding ``[[Re H, -Im H], [Im H, Re H]]``."""
    H = np.asarray(H)
    scale = max(float(np.abs(H).max(initial=0.0)), 1.0)
    if np.max(np.abs(H - H.conj().T), initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not Hermitian")
    A, B = H.real, H.imag
    return np.block([[A, -B], [B, A]])


def unembed_complex(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`embed_complex` (averages the redundant copies)."""
    n = S.shape[0] // 2
    A = 0.5 * (S[:n, :n] + S[n:, n:])
    B = 0.5 * (S[n:, :n] - S[:n, n:])
    return A + 1j * B


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class Variable:
    """Matrix variable; its coordinates form an orthonormal basis of the space."""

    name: str
    dim: int
    hermitian: bool
    offset: int

    @property
    def size(self) -> int:
        n = self.dim
        return n * n if self.hermitian else n * (n + 1) // 2

    def basis(self) -> Iterable[np.ndarray]:
        n = self.dim
        dtype = complex if self.hermitian else float
        for i in range(n):
            E = np.zeros((n, n), dtype)
            E[i, i] = 1.0
            yield E
        for i in range(n):
            for j in range(i + 1, n):
                E = np.zeros((n, n), dtype)
                E[i, j] = E[j, i] = SQRT_HALF
                yield E
        if self.hermitian:
            for i in range(n):
                for j in range(i + 1, n):
                    E = np.zeros((n, n), complex)
                    E[i, j] = 1j * SQRT_HALF
                    E[j, i] = -1j * SQRT_HALF
                    yield E

    def matrix(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords)
        n = self.dim
        M = np.zeros((n, n), complex if self.hermitian else float)
        M[np.diag_indices(n)] = coords[:n]
        iu = np.triu_indices(n, 1)
        m = len(iu[0])
        off = coords[n:n + m] * SQRT_HALF
        if self.hermitian:
            off = off + 1j * coords[n + m:n + 2 * m] * SQRT_HALF
        M[iu] = off
        M[(iu[1], iu[0])] = np.conj(off)
        return M

    def coords(self, M: np.ndarray) -> np.ndarray:
        n = self.dim
        iu = np.triu_indices(n, 1)
        parts = [np.real(np.diag(M)), np.real(M[iu]) / SQRT_HALF]
        if self.hermitian:
            parts.append(np.imag(M[iu]) / SQRT_HALF)
        return np.concatenate(parts)


@dataclass
class Block:
    """Compiled LMI block ``F0 + sum_i y_i F_i`` with only the active ``i`` stored."""

    name: str
    F0: np.ndarray
    Fi: np.ndarray
    active: np.ndarray

    @property
    def dim(self) -> int:
        return self.F0.shape[0]


@dataclass
class CompiledProgram:
    c: np.ndarray
    c0: float
    blocks: List[Block]
    E: np.ndarray
    f: np.ndarray

    @property
    def num_vars(self) -> int:
        return self.c.size


Values = Dict[str, np.ndarray]
AffineFn = Callable[[Values], object]


class ConeProgram:
    """Builder for a linear objective under affine LMI and scalar constraints.

    Constraint callables receive a dict mapping variable names to matrix
    values and must be affine in them.
    """

    def __init__(self):
        self.variables: List[Variable] = []
        self._objective: Optional[AffineFn] = None
        self._lmis: List[tuple[str, AffineFn]] = []
        self._ineqs: List[tuple[str, AffineFn]] = []
        self._eqs: List[tuple[str, AffineFn]] = []
        self._compiled: Optional[CompiledProgram] = None

    @property
    def num_scalars(self) -> int:
        return sum(v.size for v in self.variables)

    def add_variable(self, name: str, dim: int, hermitian: bool = False, psd: bool = False) -> Variable:
        if any(v.name == name for v in self.variables):
            raise ValueError(f"duplicate variable {name!r}")
        var = Variable(name, dim, hermitian, self.num_scalars)
        self.variables.append(var)
        if psd:
            self.add_lmi(f"{name} >= 0", lambda v, _n=name: v[_n])
        self._compiled = None
        return var

    def minimize(self, fn: AffineFn) -> None:
        self._objective = fn
        self._compiled = None

    def add_lmi(self, name: str, fn: AffineFn) -> None:
        """Require ``fn(values)`` (symmetric or Hermitian) to be PSD."""
        self._lmis.append((name, fn))
        self._compiled = None

    def add_inequality(self, name: str, fn: AffineFn) -> None:
        """Require the real scalar ``fn(values) >= 0``."""
        self._ineqs.append((name, fn))
        self._compiled = None

    def add_equality(self, name: str, fn: AffineFn) -> None:
        self._eqs.append((name, fn))
        self._compiled = None

    def values(self, y: np.ndarray) -> Values:
        return {v.name: v.matrix(y[v.offset:v.offset + v.size]) for v in self.variables}

    def _zero_values(self) -> Values:
        return {v.name: np.zeros((v.dim, v.dim), complex if v.hermitian else float)
                for v in self.variables}

    def _linearize(self, fn: AffineFn):
        """Constant term and coefficient of every scalar coordinate."""
        zero = self._zero_values()
        const = np.asarray(fn(zero))
        coeffs = []
        for var in self.variables:
            vals = dict(zero)
            for E in var.basis():
                vals[var.name] = E
                coeffs.append(np.asarray(fn(vals)) - const)
        return const, coeffs

    def compile(self) -> CompiledProgram:
        if self._compiled is not None:
            return self._compiled
        if self._objective is None:
            raise ValueError("no objective set")
        m = self.num_scalars
        c0, cc = self._linearize(self._objective)
        c = np.array([float(np.real(x)) for x in cc]) if m else np.zeros(0)

        blocks = []
        for name, fn in self._lmis:
            F0, Fi = self._linearize(fn)
            if np.iscomplexobj(F0) or any(np.iscomplexobj(M) for M in Fi):
                F0 = embed_complex(F0.astype(complex))
                Fi = [embed_complex(M.astype(complex)) for M in Fi]
            else:
                F0 = 0.5 * (F0 + F0.T)
                Fi = [0.5 * (M + M.T) for M in Fi]
            blocks.append(_make_block(name, F0, Fi))
        for name, fn in self._ineqs:
            F0, Fi = self._linearize(fn)
            blocks.append(_make_block(name, np.real(F0).reshape(1, 1),
                                      [np.real(M).reshape(1, 1) for M in Fi]))
        E_rows, f = [], []
        for name, fn in self._eqs:
            g0, gi = self._linearize(fn)
            E_rows.append(np.real(np.array(gi, dtype=complex)).ravel())
            f.append(-float(np.real(g0)))
        E = np.array(E_rows).reshape(len(E_rows), m)
        self._compiled = CompiledProgram(c, float(np.real(c0)), blocks, E, np.array(f))
        return self._compiled

    def dump(self, fh: TextIO) -> None:
        """Write the compiled program in SDPA sparse format.

        SDPA minimises ``c^T x`` subject to ``sum_i x_i F_i - F_0 >= 0``, so the
        constant blocks are written negated.  Equality constraints are not
        representable and are listed as comments.
        """
        prog = self.compile()
        fh.write(f"* {len(prog.blocks)} blocks, {prog.num_vars} scalar variables\n")
        for k, (name, _) in enumerate(self._eqs):
            fh.write(f"* equality {name}: " + " ".join(f"{v:.17g}" for v in prog.E[k]) +
                     f" = {prog.f[k]:.17g}\n")
        fh.write(f"{prog.num_vars}\n{len(prog.blocks)}\n")
        fh.write(" ".join(str(b.dim) for b in prog.blocks) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in prog.c) + "\n")
        for bno, b in enumerate(prog.blocks, start=1):
            entries = [(0, -b.F0)] + [(int(i) + 1, M) for i, M in zip(b.active, b.Fi)]
            for mat_no, M in entries:
                iu = np.argwhere(np.triu(M != 0))
                for i, j in iu:
                    fh.write(f"{mat_no} {bno} {i + 1} {j + 1} {M[i, j]:.17g}\n")


def _make_block(name: str, F0: np.ndarray, Fi: List[np.ndarray]) -> Block:
    nz = [i for i, M in enumerate(Fi) if np.any(M)]
    p = F0.shape[0]
    arr = np.array([Fi[i] for i in nz]).reshape(len(nz), p, p)
    return Block(name, np.asarray(F0, float), arr, np.array(nz, dtype=int))


@dataclass
class SolverOptions:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-9
    max_iter: int = 200
    infeas_tol: float = 1e-8
    step_fraction: float = 0.98
    # accepted when the strict targets stall (roundoff in the Schur system)
    loose_tol: float = 1e-6
    loose_gap_tol: float = 1e-4
    stall_iter: int = 6


@dataclass
class ConeSolution:
    status: Status
    y: np.ndarray
    objective: float
    dual_objective: float
    gap: float
    max_violation: float
    iterations: int
    values: Values = field(default_factory=dict)
    message: str = ""
    block_slack: Dict[str, float] = field(default_factory=dict)
    # dual matrix per constraint block (a certificate ray when infeasible)
    duals: Dict[str, np.ndarray] = field(default_factory=dict)
    # MaxIter, but the best iterate meets the loose tolerances of SolverOptions
    reduced_accuracy: bool = False

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class _Dense:
    """Program with equalities eliminated: ``y = y0 + Z z``."""

    def __init__(self, prog: CompiledProgram):
        self.prog = prog
        m = prog.num_vars
        if prog.E.shape[0]:
            y0, *_ = np.linalg.lstsq(prog.E, prog.f, rcond=None)
            resid = np.linalg.norm(prog.E @ y0 - prog.f)
            self.consistent = resid <= 1e-9 * (1.0 + np.linalg.norm(prog.f))
            Z = linalg.null_space(prog.E)
        else:
            y0 = np.zeros(m)
            self.consistent = True
            Z = None
        self.y0, self.Z = y0, Z
        self.c = prog.c if Z is None else Z.T @ prog.c
        self.const = prog.c0 + prog.c @ y0
        self.F0, self.Fi, self.active = [], [], []
        for b in prog.blocks:
            F0 = b.F0 + np.tensordot(y0[b.active], b.Fi, axes=1) if b.active.size else b.F0.copy()
            if Z is None:
                Fi, act = b.Fi, b.active
            else:
                Fi = np.tensordot(Z[b.active].T, b.Fi, axes=1) if b.active.size else \
                    np.zeros((Z.shape[1],) + b.F0.shape)
                act = np.arange(Z.shape[1])
            self.F0.append(F0)
            self.Fi.append(Fi)
            self.active.append(act)
        self.n = self.c.size
        self.Fnorm = [np.sqrt(np.sum(Fi.reshape(len(act), -1) ** 2, axis=1)) if act.size
                      else np.zeros(0) for Fi, act in zip(self.Fi, self.active)]

    def adjoint_scale(self, Xs: List[np.ndarray]) -> np.ndarray:
        """Bound ``sum_b ||F_i|| ||X_b||`` on the terms summed by :meth:`adjoint`."""
        out = np.zeros(self.n)
        for X, Fn, act in zip(Xs, self.Fnorm, self.active):
            if act.size:
                out[act] += Fn * np.linalg.norm(X)
        return out

    def full_y(self, z: np.ndarray) -> np.ndarray:
        return self.y0 + (z if self.Z is None else self.Z @ z)

    def F(self, z: np.ndarray) -> List[np.ndarray]:
        return [F0 + np.tensordot(z[act], Fi, axes=1) if act.size else F0.copy()
                for F0, Fi, act in zip(self.F0, self.Fi, self.active)]

    def adjoint(self, Xs: List[np.ndarray]) -> np.ndarray:
        """``(<F_i, X>)_i``."""
        out = np.zeros(self.n)
        for X, Fi, act in zip(Xs, self.Fi, self.active):
            if act.size:
                out[act] += Fi.reshape(len(act), -1) @ X.ravel()
        return out

    def apply(self, dz: np.ndarray) -> List[np.ndarray]:
        return [np.tensordot(dz[act], Fi, axes=1) if act.size else np.zeros_like(F0)
                for F0, Fi, act in zip(self.F0, self.Fi, self.active)]

    def schur(self, Gs: List[np.ndarray]) -> np.ndarray:
        """Gram matrix ``M_ij = sum_b <G^T F_i G, G^T F_j G>`` of the scaled data."""
        M = np.zeros((self.n, self.n))
        for G, Fi, act in zip(Gs, self.Fi, self.active):
            if not act.size:
                continue
            k, p = len(act), G.shape[0]
            if p == 1:
                v = Fi.reshape(k) * G[0, 0] ** 2
                M[np.ix_(act, act)] += np.outer(v, v)
                continue
            Fh = G.T @ Fi @ G
            Fh = Fh.reshape(k, -1)
            M[np.ix_(act, act)] += Fh @ Fh.T
        return 0.5 * (M + M.T)


def _nt_scaling(X: np.ndarray, S: np.ndarray):
    """``G`` with ``G^{-1} X G^{-T} = G^T S G = diag(lam)``."""
    L = np.linalg.cholesky(X)
    R = np.linalg.cholesky(S)
    U, lam, _ = np.linalg.svd(L.T @ R)
    G = (L @ U) / np.sqrt(lam)
    return G, lam


def _step_scaled(lam: np.ndarray, dH: np.ndarray) -> float:
    """Largest ``a`` with ``diag(lam) + a dH >= 0``."""
    r = 1.0 / np.sqrt(lam)
    mn = np.linalg.eigvalsh(r[:, None] * dH * r[None, :])[0]
    return math.inf if mn >= 0 else -1.0 / mn


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


class _SchurSolver:
    """Cholesky of the diagonally scaled Schur matrix, lstsq if that fails."""

    def __init__(self, M: np.ndarray):
        self.d = np.sqrt(np.maximum(np.diag(M), 1e-300))
        self.Ms = M / self.d[:, None] / self.d[None, :]
        try:
            self.cf = linalg.cho_factor(self.Ms + 1e-15 * np.eye(len(self.d)))
        except linalg.LinAlgError:
            self.cf = None

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        r = rhs / self.d
        if self.cf is None:
            x, *_ = np.linalg.lstsq(self.Ms, r, rcond=1e-15)
            return x / self.d
        x = linalg.cho_solve(self.cf, r)
        x = x + linalg.cho_solve(self.cf, r - self.Ms @ x)
        return x / self.d


def _loose_ok(pinf: float, dinf_bw: float, relgap: float, opts: SolverOptions) -> bool:
    return pinf <= opts.loose_tol and dinf_bw <= opts.loose_tol and relgap <= opts.loose_gap_tol


def _ipm(D: _Dense, opts: SolverOptions):
    nb = len(D.F0)
    dims = [F0.shape[0] for F0 in D.F0]
    ntot = sum(dims)
    c = D.c
    normF0 = math.sqrt(sum(np.sum(F0**2) for F0 in D.F0))
    normc = np.linalg.norm(c)
    X, S = [], []
    for F0, Fi, act, p in zip(D.F0, D.Fi, D.active, dims):
        nF = np.array([np.linalg.norm(M) for M in Fi]) if act.size else np.zeros(1)
        ratio = np.max((1.0 + np.abs(c[act])) / (1.0 + nF)) if act.size else 1.0
        xi = max(10.0, math.sqrt(p), p * ratio)
        eta = max(10.0, math.sqrt(p), np.linalg.norm(F0), nF.max())
        X.append(xi * np.eye(p))
        S.append(eta * np.eye(p))
    z = np.zeros(D.n)
    history = []
    status, msg = Status.MAX_ITER, "iteration limit reached"
    it = 0
    best, best_merit, since_best = None, math.inf, 0
    for it in range(1, opts.max_iter + 1):
        Fz = D.F(z)
        Rd = [Fb - Sb for Fb, Sb in zip(Fz, S)]
        AX = D.adjoint(X)
        Rp = AX - c
        mu = sum(np.sum(Xb * Sb) for Xb, Sb in zip(X, S)) / ntot
        pobj = D.const + c @ z
        dual_raw = -sum(np.sum(F0 * Xb) for F0, Xb in zip(D.F0, X))
        dobj = D.const + dual_raw
        pinf = math.sqrt(sum(np.sum(R**2) for R in Rd)) / (1.0 + normF0)
        dinf = np.linalg.norm(Rp) / (1.0 + normc)
        # backward error: residual relative to the size of the summed terms
        dinf_bw = np.linalg.norm(Rp) / (1.0 + normc + np.linalg.norm(D.adjoint_scale(X)))
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        history.append((pobj, dobj, pinf, dinf, relgap, dinf_bw))
        if pinf <= opts.feas_tol and dinf <= opts.feas_tol and relgap <= opts.gap_tol:
            status, msg, best = Status.OPTIMAL, "converged", None
            break
        merit = max(pinf / opts.feas_tol, dinf_bw / opts.feas_tol, relgap / opts.gap_tol)
        if merit < best_merit:
            best_merit, since_best = merit, 0
            best = (z.copy(), [x.copy() for x in X], [x.copy() for x in S], it, pinf, dinf_bw, relgap)
        else:
            since_best += 1
            loose = best is not None and _loose_ok(best[4], best[5], best[6], opts)
            if loose and since_best >= opts.stall_iter:
                msg = "no progress"
                break
        # infeasibility certificates
        if dual_raw > 0 and np.linalg.norm(AX) / dual_raw < opts.infeas_tol:
            status, msg = Status.INFEASIBLE, "dual objective diverges (primal infeasibility certificate)"
            break
        lin = c @ z
        if lin < 0:
            Az = D.apply(z)
            worst = min(np.linalg.eigvalsh(A)[0] for A in Az)
            if max(-worst, 0.0) / -lin < opts.infeas_tol and -lin > 1e8 * (1 + abs(dual_raw)):
                status, msg = Status.UNBOUNDED, "objective decreases without bound"
                break
        try:
            scal = [_nt_scaling(X[b], S[b]) for b in range(nb)]
        except np.linalg.LinAlgError:
            msg = "lost positive definiteness"
            break
        Gs = [g for g, _ in scal]
        lams = [l for _, l in scal]
        Ws = [g @ g.T for g in Gs]
        schur = _SchurSolver(D.schur(Gs))
        WRdW = [Ws[b] @ Rd[b] @ Ws[b] for b in range(nb)]

        def direction(Rhat):
            # Rhat + diag(lam) carries only the centring/corrector terms; using
            # it with -c avoids cancelling the large A(X) against Rp
            small = [Gs[b] @ (Rhat[b] + np.diag(lams[b])) @ Gs[b].T - WRdW[b] for b in range(nb)]
            dz = schur(-c + D.adjoint(small))
            for sweep in range(3):
                Adz = D.apply(dz)
                dS = [Rd[b] + Adz[b] for b in range(nb)]
                dSh = [_sym(Gs[b].T @ dS[b] @ Gs[b]) for b in range(nb)]
                dXh = [Rhat[b] - dSh[b] for b in range(nb)]
                dX = [_sym(Gs[b] @ dXh[b] @ Gs[b].T) for b in range(nb)]
                # refine against the residual of the formed direction
                r = Rp + D.adjoint(dX)
                if sweep == 2 or np.linalg.norm(r) <= 1e-3 * np.linalg.norm(Rp) + 1e-15 * (1.0 + normc):
                    break
                dz = dz + schur(r)
            return dz, dX, dS, dXh, dSh

        def steps(dXh, dSh, frac):
            ap = min(_step_scaled(lams[b], dXh[b]) for b in range(nb))
            ad = min(_step_scaled(lams[b], dSh[b]) for b in range(nb))
            return min(1.0, frac * ap), min(1.0, frac * ad)

        Rhat = [-np.diag(lams[b]) for b in range(nb)]
        dz, dX, dS, dXh, dSh = direction(Rhat)
        ap, ad = steps(dXh, dSh, 1.0)
        mu_aff = sum(np.sum((X[b] + ap * dX[b]) * (S[b] + ad * dS[b])) for b in range(nb)) / ntot
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3) if mu > 0 else 0.0
        Rhat = []
        for b in range(nb):
            lam = lams[b]
            corr = _sym(dXh[b] @ dSh[b]) * 2.0 / (lam[:, None] + lam[None, :])
            Rhat.append(np.diag(sigma * mu / lam - lam) - corr)
        dz, dX, dS, dXh, dSh = direction(Rhat)
        pre_ap, pre_ad = steps(dXh, dSh, 1.0)
        gamma = max(0.9, min(opts.step_fraction, 0.9 + 0.09 * min(pre_ap, pre_ad)))
        ap, ad = min(1.0, gamma * pre_ap), min(1.0, gamma * pre_ad)
        if ap < 1e-12 and ad < 1e-12:
            msg = "step length collapsed"
            break
        history[-1] = history[-1] + (ap, ad, sigma)
        X = [_sym(X[b] + ap * dX[b]) for b in range(nb)]
        S = [_sym(S[b] + ad * dS[b]) for b in range(nb)]
        z = z + ad * dz
    if best is not None and status is Status.MAX_ITER:
        z, X, S, _, pinf, dinf, relgap = best
        if _loose_ok(pinf, dinf, relgap, opts):
            # _finalize keeps this only if the Optimal contract holds
            status = Status.OPTIMAL
            msg = f"stalled at best iterate (pinf {pinf:.1e}, dinf {dinf:.1e}, gap {relgap:.1e})"
    return status, msg, z, X, S, it, history


def _finalize(prog: ConeProgram, D: _Dense, status: Status, msg: str, z, X, it,
              opts: SolverOptions) -> ConeSolution:
    y = D.full_y(z)
    cp = prog.compile()
    obj = cp.c0 + cp.c @ y
    dobj = D.const - sum(np.sum(F0 * Xb) for F0, Xb in zip(D.F0, X))
    viol = 0.0
    slack = {}
    for b in cp.blocks:
        Fb = b.F0 + (np.tensordot(y[b.active], b.Fi, axes=1) if b.active.size else 0.0)
        lam = float(np.linalg.eigvalsh(_sym(Fb))[0])
        slack[b.name] = lam
        viol = max(viol, -lam / (1.0 + np.linalg.norm(Fb)))
    if cp.E.shape[0]:
        viol = max(viol, float(np.max(np.abs(cp.E @ y - cp.f))))
    gap = obj - dobj
    relgap = abs(gap) / (1.0 + abs(obj) + abs(dobj))
    if status is Status.OPTIMAL and not (abs(gap) <= OPTIMAL_GAP * (1.0 + abs(obj))
                                         and viol <= OPTIMAL_VIOLATION):
        status, msg = Status.MAX_ITER, f"reduced accuracy (gap {gap:.2e}, violation {viol:.2e})"
        reduced = relgap <= opts.loose_gap_tol and viol <= opts.loose_tol
    else:
        reduced = False
    duals = {b.name: Xb for b, Xb in zip(cp.blocks, X)}
    return ConeSolution(status, y, float(obj), float(dobj), float(gap), float(viol), it,
                        prog.values(y), msg, slack, duals, reduced)


def solve(prog: ConeProgram, options: Optional[SolverOptions] = None,
          backend: str = "ipm") -> ConeSolution:
    """Solve a :class:`ConeProgram`.

    Args:
        prog: the program.
        options: tolerances and iteration cap.
        backend: ``"ipm"`` for the built-in interior-point method or
            ``"cvxpy"`` to delegate to cvxpy (CLARABEL).
    """
    opts = options or SolverOptions()
    cp = prog.compile()
    if backend == "cvxpy":
        return _solve_cvxpy(prog, cp)
    if backend != "ipm":
        raise ValueError(f"unknown backend {backend!r}")
    D = _Dense(cp)
    if not D.consistent:
        return ConeSolution(Status.INFEASIBLE, D.y0, math.nan, math.nan, math.nan, math.inf, 0,
                            prog.values(D.y0), "equality constraints are inconsistent")
    if not D.F0:
        # no conic constraints: bounded only if c vanishes on the free space
        if np.linalg.norm(D.c) > 1e-12:
            return ConeSolution(Status.UNBOUNDED, D.y0, -math.inf, -math.inf, math.nan, 0.0, 0,
                                prog.values(D.y0), "no constraints bound the objective")
        return _finalize(prog, D, Status.OPTIMAL, "trivial", np.zeros(D.n), [], 0, opts)
    status, msg, z, X, S, it, _ = _ipm(D, opts)
    sol = _finalize(prog, D, status, msg, z, X, it, opts)
    if sol.status is Status.MAX_ITER and not sol.reduced_accuracy:
        margin, ok, duals = _phase_one_solve(cp, opts)
        if ok and margin < -10 * opts.feas_tol:
            sol.status = Status.INFEASIBLE
            sol.duals = duals
            sol.message = f"phase-1 margin {margin:.3e} < 0 ({sol.message})"
        else:
            sol.message += f"; phase-1 margin {margin:.3e}"
    return sol


def _phase_one(cp: CompiledProgram) -> CompiledProgram:
    """``max t  s.t.  F_b(y) >= t I  for every block,  t <= 1``."""
    m = cp.num_vars
    blocks = []
    for b in cp.blocks:
        p = b.dim
        Fi = np.concatenate([b.Fi.reshape(len(b.active), p, p), -np.eye(p)[None]], axis=0)
        blocks.append(Block(b.name, b.F0, Fi, np.append(b.active, m).astype(int)))
    blocks.append(Block("phase-1 cap", np.ones((1, 1)), -np.ones((1, 1, 1)), np.array([m])))
    c = np.zeros(m + 1)
    c[m] = -1.0
    E = np.hstack([cp.E, np.zeros((cp.E.shape[0], 1))])
    return CompiledProgram(c, 0.0, blocks, E, cp.f)


def feasibility_margin(cp: CompiledProgram, options: Optional[SolverOptions] = None
                       ) -> tuple[float, bool]:
    """Largest ``t`` with every block ``>= t I``; negative means infeasible.

    The phase-1 program is strictly feasible and bounded, so it is far easier
    for the interior-point method than certifying infeasibility of the
    original program.  Returns ``(t, converged)``.
    """
    t, ok, _ = _phase_one_solve(cp, options or SolverOptions())
    return t, ok


def _phase_one_solve(cp: CompiledProgram, opts: SolverOptions):
    D = _Dense(_phase_one(cp))
    status, _, z, X, _, _, _ = _ipm(D, opts)
    y = D.full_y(z)
    duals = {b.name: Xb for b, Xb in zip(cp.blocks, X)}
    return float(y[-1]), status is Status.OPTIMAL, duals


def _solve_cvxpy(prog: ConeProgram, cp: CompiledProgram, solver: Optional[str] = "CLARABEL") -> ConeSolution:
    import cvxpy

    m = cp.num_vars
    y = cvxpy.Variable(m)
    cons = []
    for b in cp.blocks:
        expr = b.F0
        if b.active.size:
            Fi = b.Fi.reshape(len(b.active), -1)
            expr = b.F0 + cvxpy.reshape(Fi.T @ y[b.active], b.F0.shape, order="C")
        if b.dim == 1:
            cons.append(expr >= 0)
        else:
            cons.append(0.5 * (expr + expr.T) >> 0)
    if cp.E.shape[0]:
        cons.append(cp.E @ y == cp.f)
    problem = cvxpy.Problem(cvxpy.Minimize(cp.c @ y + cp.c0), cons)
    problem.solve(solver=solver)
    if problem.status in ("infeasible", "infeasible_inaccurate"):
        return ConeSolution(Status.INFEASIBLE, np.zeros(m), math.nan, math.nan, math.nan, math.inf,
                            0, {}, problem.status)
    if problem.status in ("unbounded", "unbounded_inaccurate"):
        return ConeSolution(Status.UNBOUNDED, np.zeros(m), -math.inf, -math.inf, math.nan, 0.0,
                            0, {}, problem.status)
    yv = np.asarray(y.value)
    status = Status.OPTIMAL if problem.status == "optimal" else Status.MAX_ITER
    obj = float(problem.value)
    viol = 0.0
    for b in cp.blocks:
        Fb = b.F0 + (np.tensordot(yv[b.active], b.Fi, axes=1) if b.active.size else 0.0)
        viol = max(viol, -float(np.linalg.eigvalsh(_sym(Fb))[0]) / (1.0 + np.linalg.norm(Fb)))
    return ConeSolution(status, yv, obj, obj, 0.0, viol, problem.solver_stats.num_iters or 0,
                        prog.values(yv), f"cvxpy: {problem.status}")

import warnings

import numpy as np
import pytest

from nfisac.array import PolarPoint
from nfisac.conic import Status
from nfisac.crb import crb, crb_hybrid, fim, steering_derivatives
from nfisac.optimizer import (DesignInfeasibleError, RecoveryError, build_sdr_program,
                              design_fully_digital, design_hybrid, recover_rank_one, sinr_threshold,
                              solve_digital_stage)

from conftest import desk_scenario, random_psd


def test_sinr_threshold():
    assert sinr_threshold(1.0) == 2.0
    assert sinr_threshold(5.0) == pytest.approx(1 + 1 / 31, rel=1e-15)
    with pytest.raises(ValueError):
        sinr_threshold(0.0)


def test_program_structure():
    s = desk_scenario(0, k=3, r_min=(2.0, 0.0, 1.0))
    prog = build_sdr_program(s)
    names = [v.name for v in prog.variables]
    assert names == ["F_1", "F_3", "R_x", "U", "V"]
    assert prog.gammas == [sinr_threshold(2.0), 2.0]
    cp = prog.compile()
    blocks = [b.name for b in cp.blocks]
    assert blocks == ["F_1 >= 0", "F_3 >= 0", "R_x >= sum F_k", "CRB epigraph", "Schur [V I; I U]",
                      "rate user 1", "rate user 3", "power"]
    m = prog.variables[0].dim
    dims = {b.name: b.dim for b in cp.blocks}
    assert dims["F_1 >= 0"] == dims["R_x >= sum F_k"] == 2 * m
    assert dims["CRB epigraph"] == dims["Schur [V I; I U]"] == 4
    # transmit subspace: target, its two derivatives, and the user channels
    assert m == 3 + 3


def test_recover_rank_one_exact_for_rank_one():
    rng = np.random.default_rng(0)
    f = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    h = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    R = np.outer(f, f.conj()) + np.eye(6)
    wf = recover_rank_one([np.outer(f, f.conj())], R, h[None])
    g = wf.beamformers[:, 0]
    phase = np.vdot(f, g) / abs(np.vdot(f, g))
    assert np.allclose(g, f * phase, atol=1e-12)
    assert np.allclose(wf.covariance, R)
    val = h @ g
    assert abs(val.imag) < 1e-12 and val.real > 0


@pytest.mark.parametrize("seed", range(4))
def test_recover_rank_one_preserves_sinr(seed):
    rng = np.random.default_rng(seed)
    n, k = 7, 3
    H = rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))
    F = [random_psd(rng, n, rank=int(rng.integers(1, 4))) for _ in range(k)]
    R = sum(F) + random_psd(rng, n)
    wf = recover_rank_one(F, R, H)
    noise = 0.1
    for j in range(k):
        h = H[j]
        q = (h @ F[j] @ h.conj()).real
        assert abs(h @ wf.beamformers[:, j]) ** 2 == pytest.approx(q, rel=1e-8)
        sinr_relaxed = q / ((h @ R @ h.conj()).real - q + noise)
        f = wf.beamformers[:, j]
        sinr = abs(h @ f) ** 2 / ((h @ wf.covariance @ h.conj()).real - abs(h @ f) ** 2 + noise)
        assert sinr == pytest.approx(sinr_relaxed, rel=1e-8)
    assert np.linalg.eigvalsh(wf.sensing_cov)[0] >= -1e-8


def test_recover_rank_one_degenerate():
    h = np.array([[1.0, 0.0]])
    with pytest.raises(RecoveryError):
        recover_rank_one([np.diag([0.0, 1.0])], np.eye(2), h)
    wf = recover_rank_one([None], np.eye(2), h)
    assert not np.any(wf.beamformers)


def check_result(s, res):
    assert res.violations(s) == []
    deriv = steering_derivatives(s.array, s.target)
    if s.hybrid:
        fresh = crb_hybrid(deriv, res.waveform.covariance, res.front_end.analog_combiner,
                           s.target_gain, s.snapshots, s.sensing_noise)
    else:
        fresh = crb(fim(deriv, res.waveform.covariance, s.target_gain, s.snapshots, s.sensing_noise))
    assert res.objective == pytest.approx(fresh.trace, rel=1e-12)
    assert res.objective == pytest.approx(res.relaxed_objective, rel=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_fully_digital_design(seed):
    s = desk_scenario(seed, k=3, r_min=4.0)
    res = design_fully_digital(s)
    check_result(s, res)
    assert np.all(res.rates >= 4.0 - 1e-6)


def test_sensing_only_uses_full_power():
    s = desk_scenario(0, k=0, r_min=())
    res = design_fully_digital(s)
    assert res.power == pytest.approx(s.p_max, rel=1e-6)
    # zero rate requirement drops the users entirely
    s2 = desk_scenario(0, k=3, r_min=0.0)
    assert design_fully_digital(s2).objective == pytest.approx(res.objective, rel=1e-6)


def sensing_only_oracle(s):
    """``min tr(CRB)`` over ``R >= 0, tr R <= P`` posed directly in cvxpy.

    Uses the complex covariance over all N antennas (no subspace reduction)
    and ``matrix_frac`` for the inverse; the FIM is scaled by its value at
    the isotropic waveform for conditioning.
    """
    cp = pytest.importorskip("cvxpy")
    n = s.array.num_antennas
    d = steering_derivatives(s.array, s.target)
    G, Gr, Gt = d.matrices()
    b, P = s.target_gain, s.p_max
    c = 2 * s.snapshots / s.sensing_noise * P
    R = cp.Variable((n, n), hermitian=True)

    def tr(A, B):
        return cp.trace(B.conj().T @ A @ R)

    ders = [Gr, Gt]
    J = [[0.0] * 4 for _ in range(4)]
    for i in range(2):
        for j in range(2):
            J[i][j] = c * abs(b) ** 2 * cp.real(tr(ders[j], ders[i]))
        t = np.conj(b) * tr(G, ders[i])
        J[i][2] = J[2][i] = c * cp.real(t)
        J[i][3] = J[3][i] = c * cp.real(1j * t)
    J[2][2] = J[3][3] = c * cp.real(tr(G, G))
    ref = np.diag(fim(d, P * np.eye(n) / n, b, s.snapshots, s.sensing_noise).full())
    D = 1 / np.sqrt(ref)
    Js = cp.bmat([[J[i][j] * D[i] * D[j] for j in range(4)] for i in range(4)])
    U = cp.Variable((2, 2), symmetric=True)
    Z = np.zeros((2, 2))
    M = Js - cp.bmat([[U, Z], [Z, Z]])
    prob = cp.Problem(cp.Minimize(cp.matrix_frac(np.diag(D[:2]), U)),
                      [R >> 0, cp.real(cp.trace(R)) <= 1, (M + M.T) / 2 >> 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12,
                   max_iter=500)
    Rv = P * (R.value + R.value.conj().T) / 2
    return prob.value, Rv


def factored_sensing_oracle(s, restarts=3, seed=0):
    """``min tr(CRB)`` by BFGS over a full-rank factor ``R = P Q L L^H Q^H / tr(L L^H)``.

    ``Q`` spans the conjugated steering vector and its two derivatives, the
    only directions the FIM sees. With a full-rank factor every local minimum
    of the convex problem is global, so no conic solver is involved.
    """
    from scipy.optimize import minimize

    d = steering_derivatives(s.array, s.target)
    Q, _ = np.linalg.qr(np.stack([d.a.conj(), d.da_dr.conj(), d.da_dtheta.conj()], 1))
    m = Q.shape[1]
    il = np.tril_indices(m)
    k = len(il[0])

    def cov(x):
        L = np.zeros((m, m), complex)
        L[il] = x[:k] + 1j * x[k:]
        Z = L @ L.conj().T
        return s.p_max * Q @ (Z / np.trace(Z).real) @ Q.conj().T

    def objective(x):
        try:
            return crb(fim(d, cov(x), s.target_gain, s.snapshots, s.sensing_noise)).trace
        except Exception:
            return np.inf

    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        x0 = rng.standard_normal(2 * k)
        scale = objective(x0)
        res = minimize(lambda x: objective(x) / scale, x0, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 5000})
        best = min(best, objective(res.x))
    return best


TARGETS = [(20.0, 45.0), (6.0, 120.0), (35.0, 80.0), (3.0, 30.0)]


@pytest.mark.parametrize("target", TARGETS)
def test_sensing_only_matches_factored_oracle(target):
    s = desk_scenario(0, k=0, r_min=()).with_target(PolarPoint.from_degrees(*target))
    ours = design_fully_digital(s).objective
    assert factored_sensing_oracle(s) == pytest.approx(ours, rel=1e-6)


@pytest.mark.parametrize("target", TARGETS[:3])
def test_sensing_only_no_worse_than_external_solver(target):
    # CLARABEL on the full complex problem stops short on some targets, so
    # only the one-sided comparison is asserted: its waveform, scored by our
    # bound, must not beat ours; its reported value is loosely consistent.
    s = desk_scenario(0, k=0, r_min=()).with_target(PolarPoint.from_degrees(*target))
    ours = design_fully_digital(s).objective
    value, Rv = sensing_only_oracle(s)
    deriv = steering_derivatives(s.array, s.target)
    ext = crb(fim(deriv, Rv, s.target_gain, s.snapshots, s.sensing_noise)).trace
    assert ext >= ours * (1 - 1e-6)
    assert value == pytest.approx(ours, rel=1e-3)


def test_identity_hybrid_stage_reproduces_digital():
    s = desk_scenario(2, k=3, r_min=5.0)
    fd = design_fully_digital(s)
    n = s.array.num_antennas
    _, _, wf, bound, relaxed, sol = solve_digital_stage(s, np.eye(n), np.eye(n), s.sensing_noise)
    assert bound.trace == pytest.approx(fd.objective, rel=1e-6)


def test_hybrid_design():
    s = desk_scenario(1, k=4, r_min=5.0, num_rf=5)
    res = design_hybrid(s, np.random.default_rng(7))
    check_result(s, res)
    fe = res.front_end
    assert np.max(np.abs(np.abs(fe.analog_precoder) - 1)) <= 1e-12
    assert np.max(np.abs(np.abs(fe.analog_combiner) - 1)) <= 1e-12
    assert np.allclose(fe.transmit_covariance, res.waveform.covariance, atol=1e-12)
    assert res.objective >= design_fully_digital(s.fully_digital()).objective
    # the combiner draw is reproducible from the generator
    again = design_hybrid(s, np.random.default_rng(7))
    assert np.array_equal(again.front_end.analog_combiner, fe.analog_combiner)


def test_hybrid_minimum_rf_chains():
    s = desk_scenario(4, k=2, r_min=3.0, num_rf=3)
    check_result(s, design_hybrid(s, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        design_hybrid(s.fully_digital())
    with pytest.raises(ValueError):
        desk_scenario(4, k=3, r_min=3.0, num_rf=3)


def test_monotone_in_rate_and_power():
    s = desk_scenario(3, k=3, r_min=1.0)
    objs = [design_fully_digital(s.with_r_min(r)).objective for r in (1.0, 4.0, 7.0)]
    assert objs[0] <= objs[1] <= objs[2]
    base = design_fully_digital(s.with_r_min(4.0))
    more = design_fully_digital(s.with_r_min(4.0).with_p_max(2 * s.p_max))
    assert more.objective <= base.objective
    one = design_fully_digital(s.with_r_min((7.0, 1.0, 1.0)))
    assert one.objective >= objs[0] * (1 - 1e-9)


def test_infeasible_reports_binding_rows():
    s = desk_scenario(0, k=4, r_min=(20.0, 1.0, 1.0, 1.0))
    with pytest.raises(DesignInfeasibleError) as exc:
        design_fully_digital(s)
    assert "rate user 1" in exc.value.binding
    assert "power" in exc.value.binding
    assert exc.value.binding[0] != "rate user 2" or len(exc.value.binding) > 2


def test_infeasible_hybrid():
    s = desk_scenario(0, k=4, r_min=20.0, num_rf=5)
    with pytest.raises(DesignInfeasibleError):
        design_hybrid(s, np.random.default_rng(0))


def test_paper_scale_design_is_tight():
    s = desk_scenario(0, k=4, r_min=5.0, n=65, p_max=0.1)
    res = design_fully_digital(s)
    check_result(s, res)
    assert res.solution.status is Status.OPTIMAL

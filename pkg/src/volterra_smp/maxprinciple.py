"""Hamiltonian checks: duality residuals, cost-expansion representation and
the variational inequality of the necessary optimality condition.

Duality residuals come in two flavours.  The *exact* residual implements the
discrete product-rule expansion of <p_T, Y_T> against the solved backward
recursions; it vanishes pathwise (machine precision) whenever solver and
forward recursions are consistent, and is the quantity held to the 1e-8
deterministic tolerances.  The *display* residual keeps only the terms of
the expectation-level identity (conditionally centered terms dropped,
dW^2 -> dt), so it is a mean-zero Monte Carlo statistic whose standard error
shrinks like 1/sqrt(paths).

Backward integrands are evaluated left-point through the discounted fields
p~_m = E_m[e^{-theta dt} p_{m+1}] (and the pair analogue), which is the exact
object produced by the discrete product rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsee import AdjointSolution
from .coefficients import CoefficientSet, ControlPath
from .grids import TimeGrid
from .kernels import step_decay_weight
from .simulate import BrownianEnsemble
from .stats import fit_loglog, mc_mean_se
from .variation import SpikeSpec, simulate_variation_bundle


def hamiltonian(coeffs: CoefficientSet, t: float, u, x, p, q) -> np.ndarray:
    """<p, b> + <q, sigma> - f, vectorized over paths."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.broadcast_to(np.asarray(p, dtype=float), x.shape)
    q = np.broadcast_to(np.asarray(q, dtype=float), x.shape)
    return (np.sum(p * coeffs.b(t, u, x), axis=1)
            + np.sum(q * coeffs.sigma(t, u, x), axis=1)
            - coeffs.f(t, u, x))


def hfunction(coeffs: CoefficientSet, adjoints: AdjointSolution, t: float, v,
              x_hat: np.ndarray, u_hat_t) -> np.ndarray:
    """Risk-adjusted Hamiltonian at a grid time.

    H(t, v, X, mu[Mb^T p], mu[Ms^T q])
      + 1/2 < R (sigma(u_hat) - sigma(v)), sigma(u_hat) - sigma(v) >,
    with R the pair-field contraction; reduces to the plain Hamiltonian when
    sigma is control-free.
    """
    m = adjoints.grid.index_of(t)
    Ab, Aq = adjoints.first_contractions_at(m)
    R = adjoints.risk_matrix_at(m)
    x = np.atleast_2d(np.asarray(x_hat, dtype=float))
    base = hamiltonian(coeffs, t, v, x, Ab, Aq)
    gap_sigma = coeffs.sigma(t, u_hat_t, x) - coeffs.sigma(t, v, x)
    quad = 0.5 * np.einsum("pa,ab,pb->p", gap_sigma, R, gap_sigma)
    return base + quad


@dataclass
class _FirstDualityAccumulator:
    """Streams the discrete product-rule expansion of the mu-aggregated
    first-order pairing <p, Y^{12}> along a variational co-simulation."""

    adj: AdjointSolution
    ens: BrownianEnsemble
    rhs_exact: np.ndarray = None
    rhs_display: np.ndarray = None
    spike_adjoint: np.ndarray = None  # spike integral of the representation
    lhs: np.ndarray = None

    def __post_init__(self):
        paths = self.ens.n_paths
        self.rhs_exact = np.zeros(paths)
        self.rhs_display = np.zeros(paths)
        self.spike_adjoint = np.zeros(paths)
        k = self.adj.kernel
        dt = self.ens.grid.dt
        self._w = k.weights
        self._mb = k.mb[:, 0, 0]
        self._ms = k.msigma[:, 0, 0]
        self._dec = np.exp(-k.nodes * dt)
        self._om = step_decay_weight(k.nodes, dt)
        self._P0 = self.adj.first.P0[:, :, 0]
        self._P1 = None if self.adj.first.P1 is None else self.adj.first.P1[:, :, 0]
        self._Q0 = self.adj.first.Q0[:, :, 0]
        self._G0 = self.adj.first.G0[:, :, 0]
        self._Z = None if self.adj.first.Z is None else self.adj.first.Z.values

    def __call__(self, m: int, frame: dict):
        N = self.ens.grid.n_steps
        if m >= N:
            return
        dt = self.ens.grid.dt
        w, mb, ms, dec, om = self._w, self._mb, self._ms, self._dec, self._om
        Y12 = frame["Y1"] + frame["Y2"]
        Fb = frame["Fb1"] + frame["Fb2"]
        Fs = frame["Fs1"] + frame["Fs2"]
        dW = self.ens.dW[:, m]

        g_m = self._G0[m]                    # (K,), theta-resolved generator
        q_m = self._Q0[m]                    # (K,)
        pt0 = dec * self._P0[m + 1]          # discounted deterministic part
        gen_term = -Y12 @ (w * om * g_m)
        qY = Y12 @ (w * q_m)
        ab0 = float(np.sum(w * mb * pt0))
        as0 = float(np.sum(w * ms * pt0))
        qb = float(np.sum(w * mb * q_m))
        qs = float(np.sum(w * ms * q_m))
        if self._P1 is not None:
            pt1 = dec * self._P1[m + 1]
            Zm = self._Z[:, m]
            ab = ab0 + float(np.sum(w * mb * pt1)) * Zm
            as_ = as0 + float(np.sum(w * ms * pt1)) * Zm
        else:
            ab, as_ = ab0, as0

        display = gen_term + dt * (ab * Fb + qs * Fs)
        exact = (gen_term + qY * dW + dt * ab * Fb + as_ * Fs * dW
                 + qb * Fb * dt * dW + qs * Fs * dW * dW)
        self.rhs_display += display
        self.rhs_exact += exact

        if frame["in_spike"]:
            db, ds, df = frame["db"], frame["ds"], frame["df"]
            R = _pair_disc_contraction(self.adj, m)
            self.spike_adjoint += dt * (ab * db + qs * ds - df + 0.5 * R * ds * ds)


def _pair_disc_contraction(adj: AdjointSolution, m: int) -> float:
    """mu x mu [Ms^T P~_m Ms] with P~_m the discounted pair field."""
    if adj.second is None:
        return 0.0
    k = adj.kernel
    dt = adj.grid.dt
    varpi = adj.tgrid.varpi2()
    Pt = np.exp(-varpi * dt) * adj.second.P[m + 1, :, :, 0, 0]
    wms = k.weights * k.msigma[:, 0, 0]
    return float(wms @ Pt @ wms)


def duality_residual_first(coeffs: CoefficientSet, spike: SpikeSpec,
                           adjoints: AdjointSolution, ens: BrownianEnsemble,
                           x_hat: np.ndarray, xi=0.0) -> dict:
    """First-order duality: -E[h_x X^{12}_T] against its drift/spike expansion.

    Returns the exact discrete residual (pathwise, machine zero for a
    consistent solve) and the display-level residual with its standard error.
    """
    acc = _FirstDualityAccumulator(adj=adjoints, ens=ens)
    bundle = simulate_variation_bundle(coeffs, adjoints.kernel, adjoints.u_hat,
                                       spike, xi, ens, x_hat=x_hat, observer=acc)
    hx = coeffs.h_x(x_hat[:, -1])[:, 0]
    lhs = -hx * bundle.terminal["X12_T"]
    res_exact = lhs - acc.rhs_exact
    res_disp = lhs - acc.rhs_display
    mean_d, se_d = mc_mean_se(res_disp)
    scale = max(1.0, float(np.max(np.abs(lhs))))
    return {
        "exact_max": float(np.max(np.abs(res_exact))) / scale,
        "exact_mean": float(np.mean(res_exact)) / scale,
        "display_mean": mean_d,
        "display_se": se_d,
        "lhs": float(np.mean(lhs)),
        "bundle": bundle,
    }


@dataclass
class _SecondDualityAccumulator:
    adj: AdjointSolution
    ens: BrownianEnsemble
    rhs_exact: np.ndarray = None
    rhs_display: np.ndarray = None

    def __post_init__(self):
        paths = self.ens.n_paths
        self.rhs_exact = np.zeros(paths)
        self.rhs_display = np.zeros(paths)
        k = self.adj.kernel
        dt = self.ens.grid.dt
        varpi = self.adj.tgrid.varpi2()
        self._dec2 = np.exp(-varpi * dt)
        self._om2 = step_decay_weight(varpi.reshape(-1), dt).reshape(varpi.shape)
        self._w = k.weights
        self._mb = k.mb[:, 0, 0]
        self._ms = k.msigma[:, 0, 0]
        self._P = self.adj.second.P[:, :, :, 0, 0]
        self._G = self.adj.second.G[:, :, :, 0, 0]

    def __call__(self, m: int, frame: dict):
        N = self.ens.grid.n_steps
        if m >= N:
            return
        dt = self.ens.grid.dt
        w, mb, ms = self._w, self._mb, self._ms
        Y1 = frame["Y1"]
        Fb, Fs = frame["Fb1"], frame["Fs1"]
        dW = self.ens.dW[:, m]

        WPt = (w[:, None] * w[None, :]) * (self._dec2 * self._P[m + 1])
        WG = (w[:, None] * w[None, :]) * (self._om2 * self._G[m])
        U = Y1 @ WPt                       # (paths, K) one-sided contraction
        quad_YY_G = np.einsum("pi,ij,pj->p", Y1, WG, Y1)
        PY_b = U @ mb                      # <P~ Y, Mb> rows
        PY_s = U @ ms
        Pbb = float(mb @ WPt @ mb)
        Pbs = float(mb @ WPt @ ms)
        Pss = float(ms @ WPt @ ms)

        cross_b = 2.0 * PY_b * Fb          # symmetric field: both sides equal
        cross_s = 2.0 * PY_s * Fs
        display = -quad_YY_G + dt * (cross_b + Pss * Fs * Fs)
        exact = (-quad_YY_G + dt * cross_b + cross_s * dW
                 + Pbb * Fb * Fb * dt * dt + 2.0 * Pbs * Fb * Fs * dt * dW
                 + Pss * Fs * Fs * dW * dW)
        self.rhs_display += display
        self.rhs_exact += exact


def duality_residual_second(coeffs: CoefficientSet, spike: SpikeSpec,
                            adjoints: AdjointSolution, ens: BrownianEnsemble,
                            x_hat: np.ndarray, xi=0.0) -> dict:
    """Pair-field duality: -E[<h_xx Y1_T, Y1_T>]_{mu x mu} vs its expansion."""
    if adjoints.second is None:
        raise ValueError("second-order field not solved")
    acc = _SecondDualityAccumulator(adj=adjoints, ens=ens)
    bundle = simulate_variation_bundle(coeffs, adjoints.kernel, adjoints.u_hat,
                                       spike, xi, ens, x_hat=x_hat, observer=acc)
    hxx = coeffs.h_xx(x_hat[:, -1])[:, 0, 0]
    X1T = bundle.terminal["X1_T"]
    lhs = -hxx * X1T * X1T
    res_exact = lhs - acc.rhs_exact
    res_disp = lhs - acc.rhs_display
    mean_d, se_d = mc_mean_se(res_disp)
    scale = max(1.0, float(np.max(np.abs(lhs))))
    return {
        "exact_max": float(np.max(np.abs(res_exact))) / scale,
        "display_mean": mean_d,
        "display_se": se_d,
        "lhs": float(np.mean(lhs)),
    }


def j12_adjoint_representation(coeffs: CoefficientSet, spike: SpikeSpec,
                               adjoints: AdjointSolution, ens: BrownianEnsemble,
                               x_hat: np.ndarray, xi=0.0) -> dict:
    """Spike-integral representation of the quadratic cost expansion.

    j12_direct comes from the forward expansion processes; j12_adjoint from
    minus the spike integral of the Hamiltonian/risk terms built on the
    adjoint contractions.  Their gap collects the spike-local interaction
    terms, of higher order than eps.
    """
    acc = _FirstDualityAccumulator(adj=adjoints, ens=ens)
    bundle = simulate_variation_bundle(coeffs, adjoints.kernel, adjoints.u_hat,
                                       spike, xi, ens, x_hat=x_hat, observer=acc)
    j12_direct, j12_se = bundle.j12()
    j12_adj, j12_adj_se = mc_mean_se(-acc.spike_adjoint)
    return {
        "j12_direct": j12_direct, "j12_direct_se": j12_se,
        "j12_adjoint": j12_adj, "j12_adjoint_se": j12_adj_se,
        "gap": j12_direct - j12_adj,
        "bundle": bundle,
    }


def j12_gap_sweep(coeffs, adjoints, ens, x_hat, tau: float, eps_list, v: ControlPath,
                  xi=0.0) -> dict:
    """|gap| against eps across a sweep, with the fitted log-log slope."""
    rows = []
    for eps in eps_list:
        spike = SpikeSpec(tau=tau, eps=float(eps), v=v)
        r = j12_adjoint_representation(coeffs, spike, adjoints, ens, x_hat, xi=xi)
        rows.append({"eps": float(eps), "j12_direct": r["j12_direct"],
                     "j12_adjoint": r["j12_adjoint"], "gap": r["gap"]})
    gaps = np.array([abs(r["gap"]) for r in rows])
    eps_arr = np.array([r["eps"] for r in rows])
    fit = fit_loglog(eps_arr, gaps) if np.all(gaps > 0) else None
    return {"rows": rows, "fit": fit}


# ---------------------------------------------------------------------------
# variational inequality
# ---------------------------------------------------------------------------

@dataclass
class MPReport:
    rows: list                 # (t, v, gap_mean, gap_se, passed)
    min_gap: float
    min_location: tuple        # (t, v)
    passed: bool
    deterministic: bool
    tol_margin: float
    alpha: float
    alpha_hypothesis: bool     # True when the kernel singularity index is 1/3
    max_quadratic_term: float = 0.0
    notes: str = ""


def check_variational_inequality(coeffs: CoefficientSet, u_hat: ControlPath,
                                 adjoints: AdjointSolution, u_grid: np.ndarray,
                                 ens: BrownianEnsemble, x_hat: np.ndarray,
                                 tol_margin: float = 1e-8,
                                 se_margin: float = 3.0) -> MPReport:
    """Minimum over (t, v) of H-hat(u_hat_t) - H-hat(v).

    Deterministic case (path spread below 1e-12): PASS iff min >= -tol_margin;
    stochastic case: PASS iff min >= -se_margin * SE at the minimizing cell.
    Grid times exclude t = T.
    """
    grid = ens.grid
    N = grid.n_steps
    u_pts = np.atleast_2d(np.asarray(u_grid, dtype=float))
    if u_pts.shape[0] == 1 and u_pts.shape[1] > 1:
        u_pts = u_pts.T
    rows = []
    min_gap = np.inf
    min_loc = (0.0, None)
    min_se = 0.0
    spread = 0.0
    max_quad = 0.0
    for m in range(N):
        t = m * grid.dt
        x_m = x_hat[:, m]
        Ab, Aq = adjoints.first_contractions_at(m)
        R = adjoints.risk_matrix_at(m)
        u_h = u_hat.at(m)
        h_hat = hamiltonian(coeffs, t, u_h, x_m, Ab, Aq)
        sig_hat = coeffs.sigma(t, u_h, x_m)
        for v in u_pts:
            h_v = hamiltonian(coeffs, t, v, x_m, Ab, Aq)
            gap_sigma = sig_hat - coeffs.sigma(t, v, x_m)
            quad = 0.5 * np.einsum("pa,ab,pb->p", gap_sigma, R, gap_sigma)
            gaps = h_hat - h_v - quad
            max_quad = max(max_quad, float(np.max(np.abs(quad))))
            gmean, gse = mc_mean_se(gaps)
            spread = max(spread, float(np.max(gaps) - np.min(gaps)))
            rows.append((t, float(v[0]), gmean, gse, True))
            if gmean < min_gap:
                min_gap, min_loc, min_se = gmean, (t, float(v[0])), gse
    deterministic = spread < 1e-12
    margin = tol_margin if deterministic else se_margin * min_se
    passed = min_gap >= -margin
    rows = [(t, v, g, s, g >= -(tol_margin if deterministic else se_margin * max(s, 0.0)))
            for (t, v, g, s, _) in rows]
    alpha = adjoints.kernel.alpha
    return MPReport(rows=rows, min_gap=float(min_gap), min_location=min_loc,
                    passed=bool(passed), deterministic=deterministic,
                    tol_margin=margin, alpha=alpha,
                    alpha_hypothesis=bool(abs(alpha - 1.0 / 3.0) < 1e-12),
                    max_quadratic_term=max_quad,
                    notes="" if abs(alpha - 1.0 / 3.0) < 1e-12 else
                    "kernel singularity index differs from 1/3: inequality "
                    "checked outside the theorem hypothesis (flag only)")


def construct_argmax_control(coeffs: CoefficientSet, adjoints: AdjointSolution,
                             grid: TimeGrid) -> ControlPath:
    """Pointwise maximizer of the risk-adjusted Hamiltonian over the control grid.

    Valid when the control-dependent part of the Hamiltonian is state-free
    (the bundled linear-cost problem), so the maximizer is deterministic.
    """
    u_pts = coeffs.control_domain.points
    N = grid.n_steps
    vals = np.empty((N + 1, coeffs.du))
    x0 = np.zeros((1, coeffs.dim))
    for m in range(N + 1):
        t = m * grid.dt
        Ab, Aq = adjoints.first_contractions_at(min(m, N - 1))
        best, best_val = None, -np.inf
        for v in u_pts:
            hv = float(hamiltonian(coeffs, t, v, x0, Ab, Aq)[0])
            if hv > best_val:
                best, best_val = v, hv
        vals[m] = best
    return ControlPath(vals, deterministic=True)


def perturb_control(u: ControlPath, grid: TimeGrid, t_lo: float, t_hi: float,
                    value) -> ControlPath:
    """Replace a deterministic control by a fixed value on [t_lo, t_hi)."""
    j0, j1 = grid.index_of(t_lo), grid.index_of(t_hi)
    vals = u.values.copy()
    vals[j0:j1] = value
    return ControlPath(vals, deterministic=True)


# ---------------------------------------------------------------------------
# classical (single-atom) reference checker
# ---------------------------------------------------------------------------

def classical_adjoint_gaps(coeffs: CoefficientSet, u_hat: ControlPath,
                        u_grid: np.ndarray, grid: TimeGrid,
                        x_hat: np.ndarray) -> dict:
    """Directly-solved classical adjoints and inequality gaps (scalar state).

    Solves the two backward equations with the same implicit left-point
    convention as the field solver at decay rate zero, without any grid
    machinery: a per-step scalar solve.  Deterministic data only.
    """
    if coeffs.dim != 1:
        raise NotImplementedError("classical reference checker is scalar-state")
    N, dt = grid.n_steps, grid.dt
    x0 = np.zeros((1, 1))
    bx = np.empty(N + 1)
    sx = np.empty(N + 1)
    fx = np.empty(N + 1)
    fxx = np.empty(N + 1)
    for m in range(N + 1):
        t = m * grid.dt
        u = u_hat.at(m)
        bx[m] = coeffs.b_x(t, u, x0)[0, 0, 0]
        sx[m] = coeffs.sigma_x(t, u, x0)[0, 0, 0]
        fx[m] = coeffs.f_x(t, u, x0)[0, 0]
        fxx[m] = coeffs.f_xx(t, u, x0)[0, 0, 0]
    p = np.empty(N + 1)
    P = np.empty(N + 1)
    p[N] = -coeffs.h_x(x0)[0, 0]
    P[N] = -coeffs.h_xx(x0)[0, 0, 0]
    for m in range(N - 1, -1, -1):
        p[m] = (p[m + 1] - dt * fx[m]) / (1.0 - dt * bx[m])
        P[m] = (P[m + 1] - dt * fxx[m]) / (1.0 - dt * (2.0 * bx[m] + sx[m] ** 2))

    u_pts = np.atleast_2d(np.asarray(u_grid, dtype=float))
    if u_pts.shape[0] == 1 and u_pts.shape[1] > 1:
        u_pts = u_pts.T
    gaps = {}
    for m in range(N):
        t = m * dt
        x_m = x_hat[:, m]
        u_h = u_hat.at(m)
        h_hat = hamiltonian(coeffs, t, u_h, x_m, p[m], 0.0)
        sig_hat = coeffs.sigma(t, u_h, x_m)
        for v in u_pts:
            h_v = hamiltonian(coeffs, t, v, x_m, p[m], 0.0)
            dsig = sig_hat - coeffs.sigma(t, v, x_m)
            gaps[(t, float(v[0]))] = float(np.mean(h_hat - h_v - 0.5 * P[m] * dsig[:, 0] ** 2))
    return {"p": p, "P": P, "gaps": gaps}

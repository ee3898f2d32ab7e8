"""Spike variations of a control and the associated expansion processes.

For a reference control u_hat, a spike (tau, eps, v) replaces the control by
v on [tau, tau + eps).  The module co-simulates, on shared increments,

  * the spiked state X^eps,
  * the first-order expansion process X1 (linear equation with frozen
    derivatives at (u_hat, X_hat), forced by the coefficient jumps on the
    spike window),
  * the second-order expansion process X2 (same linear operator, forced by
    Hessian terms in X1 and by derivative jumps acting on X1),

and accumulates the C^p norms of the differences dX = X^eps - X_hat,
dX1 = dX - X1, dX12 = dX - X1 - X2 together with the quadratic cost
expansion J12 and the actual cost increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, ControlPath
from .grids import TimeGrid
from .kernels import DiscreteLaplaceKernel, knorm_eps
from .simulate import BrownianEnsemble, simulate_sve
from .stats import fit_loglog, mc_mean_se

NORM_KEYS = ("dX", "X1", "dX1", "X2", "dX12")
EXPECTED_POWER = {"dX": 1, "X1": 1, "dX1": 2, "X2": 2, "dX12": 3}


@dataclass(frozen=True)
class SpikeSpec:
    """Spike window [tau, tau + eps) snapped to whole grid steps."""

    tau: float
    eps: float
    v: ControlPath

    def window(self, grid: TimeGrid) -> tuple[int, int]:
        j0 = int(round(self.tau / grid.dt))
        n_eps = max(1, int(round(self.eps / grid.dt)))
        j1 = j0 + n_eps
        if j0 < 0 or j1 > grid.n_steps:
            raise ValueError("spike window [tau, tau+eps] must sit inside [0, T]")
        return j0, j1


def apply_spike(u_hat: ControlPath, spike: SpikeSpec, grid: TimeGrid) -> ControlPath:
    """Pointwise replacement of u_hat by v on the spike window."""
    j0, j1 = spike.window(grid)
    if u_hat.n_steps != grid.n_steps or spike.v.n_steps != grid.n_steps:
        raise ValueError("control tables must live on the simulation grid")
    if u_hat.deterministic and spike.v.deterministic:
        vals = u_hat.values.copy()
        vals[j0:j1] = spike.v.values[j0:j1]
        return ControlPath(vals, deterministic=True)
    paths = max(
        1 if u_hat.deterministic else u_hat.values.shape[0],
        1 if spike.v.deterministic else spike.v.values.shape[0],
    )
    base = u_hat.values if not u_hat.deterministic else np.broadcast_to(
        u_hat.values, (paths,) + u_hat.values.shape)
    rep = spike.v.values if not spike.v.deterministic else np.broadcast_to(
        spike.v.values, (paths,) + spike.v.values.shape)
    vals = np.array(base, dtype=float)
    vals[:, j0:j1] = rep[:, j0:j1]
    return ControlPath(vals, deterministic=False)


@dataclass
class VariationBundle:
    """Accumulated output of one spike co-simulation."""

    spike: SpikeSpec
    eps_snapped: float
    p_norm: float
    norms: dict                 # key -> C^p norm estimate
    j12_terms: np.ndarray       # per-path J12 sample
    cost_increment: np.ndarray  # per-path J(u^eps) - J(u_hat) sample
    delta_f_integral: np.ndarray
    terminal: dict = field(default_factory=dict)  # per-path terminal values
    tables: dict = field(default_factory=dict)    # full paths when stored

    def j12(self) -> tuple[float, float]:
        return mc_mean_se(self.j12_terms)

    def delta_j12(self) -> tuple[float, float]:
        return mc_mean_se(self.cost_increment - self.j12_terms)


def _coeff_eval(coeffs, m, grid, u, x):
    t = m * grid.dt
    return {
        "b": coeffs.b(t, u, x), "s": coeffs.sigma(t, u, x),
        "bx": coeffs.b_x(t, u, x), "sx": coeffs.sigma_x(t, u, x),
        "bxx": coeffs.b_xx(t, u, x), "sxx": coeffs.sigma_xx(t, u, x),
        "f": coeffs.f(t, u, x), "fx": coeffs.f_x(t, u, x), "fxx": coeffs.f_xx(t, u, x),
    }


def simulate_variation_bundle(
    coeffs: CoefficientSet,
    kernel: DiscreteLaplaceKernel,
    u_hat: ControlPath,
    spike: SpikeSpec,
    xi,
    ens: BrownianEnsemble,
    x_hat: np.ndarray | None = None,
    p_norm: float = 2.0,
    store: bool = False,
    observer=None,
) -> VariationBundle:
    """Co-simulate (X^eps, X1, X2) on shared increments and accumulate stats.

    ``observer(m, frame)`` is called once per step with the pre-step lift
    fields and forcings (and once at the final index with forcings None);
    ``frame`` is a dict with keys Y1, Y2 (paths, K), X1, X2 (paths,),
    Fb1, Fs1, Fb2, Fs2, db, ds, in_spike.
    """
    if coeffs.dim != 1 or kernel.dim != 1:
        raise NotImplementedError("the fused variational loop is scalar-state")
    grid = ens.grid
    N, dt = grid.n_steps, grid.dt
    paths = ens.n_paths
    j0, j1 = spike.window(grid)
    eps_snapped = (j1 - j0) * dt

    if x_hat is None:
        x_hat = simulate_sve(coeffs, u_hat, kernel, xi, ens, mode="lift")
    Xh = x_hat[:, :, 0]  # (paths, N+1)

    xi_tab = np.broadcast_to(np.atleast_1d(np.asarray(xi, dtype=float)), (N + 1,)) \
        if np.asarray(xi).ndim <= 1 and np.asarray(xi).size == 1 else np.asarray(xi, dtype=float).reshape(-1)
    u_spiked = apply_spike(u_hat, spike, grid)

    theta, w = kernel.nodes, kernel.weights
    decay = np.exp(-theta * dt)
    mb1 = kernel.mb[:, 0, 0]
    ms1 = kernel.msigma[:, 0, 0]

    Ye = np.zeros((paths, theta.size))
    Y1 = np.zeros((paths, theta.size))
    Y2 = np.zeros((paths, theta.size))

    sup_mom = {k: 0.0 for k in NORM_KEYS}
    j12_run = np.zeros(paths)   # running f-expansion integral
    dcost_f = np.zeros(paths)   # running f(u^eps, X^eps) - f(u_hat, X_hat)
    delta_f = np.zeros(paths)   # running spike integral of delta f
    tables = {k: np.zeros((paths, N + 1)) for k in NORM_KEYS} if store else {}

    Xe = Xh[:, 0].copy()
    X1 = np.zeros(paths)
    X2 = np.zeros(paths)

    def record(m, Xe_m, X1_m, X2_m):
        dX = Xe_m - Xh[:, m]
        vals = {"dX": dX, "X1": X1_m, "dX1": dX - X1_m, "X2": X2_m,
                "dX12": dX - X1_m - X2_m}
        for k, v in vals.items():
            sup_mom[k] = max(sup_mom[k], float(np.mean(np.abs(v) ** p_norm)))
            if store:
                tables[k][:, m] = v

    record(0, Xe, X1, X2)
    for m in range(N):
        x_h = Xh[:, m][:, None]
        u_h = u_hat.at(m)
        u_e = u_spiked.at(m)
        in_spike = j0 <= m < j1

        ch = _coeff_eval(coeffs, m, grid, u_h, x_h)
        bxh = ch["bx"][:, 0, 0]
        sxh = ch["sx"][:, 0, 0]
        bxxh = ch["bxx"][:, 0, 0, 0]
        sxxh = ch["sxx"][:, 0, 0, 0]

        # spiked state forcing (full nonlinear coefficients at X^eps)
        te = m * dt
        xe_col = Xe[:, None]
        Fb_e = coeffs.b(te, u_e, xe_col)[:, 0]
        Fs_e = coeffs.sigma(te, u_e, xe_col)[:, 0]

        # first/second-order forcings with frozen derivatives at (u_hat, X_hat)
        Fb_1 = bxh * X1
        Fs_1 = sxh * X1
        Fb_2 = bxh * X2 + 0.5 * bxxh * X1 * X1
        Fs_2 = sxh * X2 + 0.5 * sxxh * X1 * X1
        db = ds = None
        if in_spike:
            cv = _coeff_eval(coeffs, m, grid, u_e, x_h)
            db = cv["b"][:, 0] - ch["b"][:, 0]
            ds = cv["s"][:, 0] - ch["s"][:, 0]
            dbx = cv["bx"][:, 0, 0] - bxh
            dsx = cv["sx"][:, 0, 0] - sxh
            Fb_1 = Fb_1 + db
            Fs_1 = Fs_1 + ds
            Fb_2 = Fb_2 + dbx * X1
            Fs_2 = Fs_2 + dsx * X1
            delta_f += (cv["f"] - ch["f"]) * dt
        if observer is not None:
            observer(m, {"Y1": Y1, "Y2": Y2, "X1": X1, "X2": X2,
                         "Fb1": Fb_1, "Fs1": Fs_1, "Fb2": Fb_2, "Fs2": Fs_2,
                         "db": db, "ds": ds,
                         "df": (cv["f"] - ch["f"]) if in_spike else None,
                         "in_spike": in_spike})

        # running cost pieces (left-point rule)
        j12_run += (ch["fx"][:, 0] * (X1 + X2) + 0.5 * ch["fxx"][:, 0, 0] * X1 * X1) * dt
        fe = coeffs.f(te, u_e, xe_col)
        dcost_f += (fe - ch["f"]) * dt

        dwm = ens.dW[:, m]
        Ye = decay[None, :] * (Ye + Fb_e[:, None] * mb1[None, :] * dt
                               + (Fs_e * dwm)[:, None] * ms1[None, :])
        Y1 = decay[None, :] * (Y1 + Fb_1[:, None] * mb1[None, :] * dt
                               + (Fs_1 * dwm)[:, None] * ms1[None, :])
        Y2 = decay[None, :] * (Y2 + Fb_2[:, None] * mb1[None, :] * dt
                               + (Fs_2 * dwm)[:, None] * ms1[None, :])
        Xe = xi_tab[m + 1] + Ye @ w
        X1 = Y1 @ w
        X2 = Y2 @ w
        record(m + 1, Xe, X1, X2)
    if observer is not None:
        observer(N, {"Y1": Y1, "Y2": Y2, "X1": X1, "X2": X2,
                     "Fb1": None, "Fs1": None, "Fb2": None, "Fs2": None,
                     "db": None, "ds": None, "df": None, "in_spike": False})

    xT = Xh[:, N][:, None]
    hx = coeffs.h_x(xT)[:, 0]
    hxx = coeffs.h_xx(xT)[:, 0, 0]
    j12_terms = hx * (X1 + X2) + 0.5 * hxx * X1 * X1 + j12_run + delta_f
    cost_inc = coeffs.h(Xe[:, None]) - coeffs.h(xT) + dcost_f

    norms = {k: sup_mom[k] ** (1.0 / p_norm) for k in NORM_KEYS}
    bundle = VariationBundle(
        spike=spike, eps_snapped=eps_snapped, p_norm=p_norm, norms=norms,
        j12_terms=j12_terms, cost_increment=cost_inc, delta_f_integral=delta_f,
        terminal={"X1_T": X1.copy(), "X12_T": (X1 + X2).copy(), "Xe_T": Xe.copy(),
                  "dX_T": Xe - Xh[:, N]},
        tables=tables,
    )
    return bundle


def simulate_variational(coeffs, u_hat, x_hat, spike, kernel, ens, order: int = 1,
                         xi=0.0, p_norm: float = 2.0) -> np.ndarray:
    """Expansion process of the requested order as a full table (paths, N+1, 1)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if x_hat is not None and x_hat.shape[0] != ens.n_paths:
        raise ValueError("reference state and ensemble path counts differ")
    bundle = simulate_variation_bundle(coeffs, kernel, u_hat, spike, xi, ens,
                                       x_hat=x_hat, p_norm=p_norm, store=True)
    key = "X1" if order == 1 else "X2"
    return bundle.tables[key][:, :, None]


def compute_j12(coeffs: CoefficientSet, bundle: VariationBundle, spike: SpikeSpec) -> dict:
    """Monte Carlo estimate of the quadratic cost expansion with its pieces."""
    val, se = bundle.j12()
    dval, dse = bundle.delta_j12()
    return {
        "j12": val, "j12_se": se,
        "delta_j12": dval, "delta_j12_se": dse,
        "delta_f": float(np.mean(bundle.delta_f_integral)),
    }


def knorm_combo(kernel: DiscreteLaplaceKernel, eps: float) -> float:
    """||K_b||_{1,eps} + ||K_sigma||_{2,eps}, closed form when available."""
    return knorm_eps(kernel, "b", 1.0, eps) + knorm_eps(kernel, "sigma", 2.0, eps)


def remainder_rates(
    coeffs: CoefficientSet,
    kernel: DiscreteLaplaceKernel,
    u_hat: ControlPath,
    v: ControlPath,
    tau: float,
    eps_list,
    xi,
    ens: BrownianEnsemble,
    p_norm: float = 2.0,
    use_analytic_knorm: bool = True,
) -> dict:
    """Fit the eps-decay of the expansion norms across a spike-size sweep.

    Common random numbers: every eps reuses the same ensemble and the same
    reference state.  Returns per-eps rows plus per-quantity slope fits
    against eps and against the combined kernel-window norm.
    """
    eps_arr = np.asarray(list(eps_list), dtype=float)
    if eps_arr.size < 4:
        raise ValueError("need at least 4 eps values for a slope fit")
    grid = ens.grid
    if np.any(np.round(eps_arr / grid.dt) < 4):
        raise ValueError(
            "every spike width must span at least 4 grid steps; refine the "
            "time grid or drop the smallest eps values"
        )
    x_hat = simulate_sve(coeffs, u_hat, kernel, xi, ens, mode="lift")

    kn = []
    for eps in eps_arr:
        if use_analytic_knorm and kernel.analytic_b is not None:
            kn.append(knorm_eps(kernel.analytic_b, "b", 1.0, float(eps))
                      + knorm_eps(kernel.analytic_sigma, "sigma", 2.0, float(eps)))
        else:
            kn.append(knorm_combo(kernel, float(eps)))

    rows = []
    norms = {k: [] for k in NORM_KEYS}
    dj_rows = []
    for eps, k_eps in zip(eps_arr, kn):
        spike = SpikeSpec(tau=tau, eps=float(eps), v=v)
        bundle = simulate_variation_bundle(coeffs, kernel, u_hat, spike, xi, ens,
                                           x_hat=x_hat, p_norm=p_norm)
        dj, dj_se = bundle.delta_j12()
        dj_rows.append((bundle.eps_snapped, dj, dj_se))
        for k in NORM_KEYS:
            norms[k].append(bundle.norms[k])
            rows.append({"quantity": k, "eps": bundle.eps_snapped,
                         "norm": bundle.norms[k], "knorm_combo": k_eps})

    fits = {}
    for k in NORM_KEYS:
        vals = np.asarray(norms[k])
        if np.all(vals == 0.0):
            fits[k] = {"exact_zero": True}
            continue
        f_eps = fit_loglog(eps_arr, vals)
        f_kn = fit_loglog(np.asarray(kn), vals)
        fits[k] = {"exact_zero": False, "eps_slope": f_eps["slope"],
                   "eps_r2": f_eps["r2"], "eps_slope_se": f_eps["se_slope"],
                   "knorm_slope": f_kn["slope"], "knorm_r2": f_kn["r2"]}

    dj_abs = np.array([abs(d) for _, d, _ in dj_rows])
    dj_fit = None
    if np.all(dj_abs > 0):
        f = fit_loglog(eps_arr, dj_abs)
        dj_fit = {"eps_slope": f["slope"], "r2": f["r2"], "se_slope": f["se_slope"]}

    return {"rows": rows, "fits": fits, "eps": eps_arr, "knorm": np.asarray(kn),
            "delta_j12": dj_rows, "delta_j12_fit": dj_fit}

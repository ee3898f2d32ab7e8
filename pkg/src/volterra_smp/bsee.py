"""Backward fields on the decay-rate grid: solvers and adjoint assembly.

A first-order field (p, q) attaches one scalar backward equation to every
decay node theta with drift rate theta; a second-order field (P, Q) lives on
node pairs with rate theta_1 + theta_2.  Node equations couple only through
mu-contractions such as sum_i w_i M_b(theta_i)^T p_t(theta_i), which is what
the generators below consume.

Discrete convention (shared by every consumer in this package):

    p_m(theta) = E_m[e^{-theta dt} p_{m+1}(theta)] + omega(theta) g_m,
    q_m(theta) = E_m[e^{-theta dt} p_{m+1}(theta) dW_m] / dt,
    omega(theta) = (1 - e^{-theta dt}) / theta   (dt at theta = 0),

with the generator table evaluated at the solved fields (the fixed point of
the plain Picard iteration).  Random data are supported in one closed-form
family: fields affine in a scalar Gaussian martingale Z with deterministic
vol, p_m = P0_m + P1_m Z_m, which covers state-free problems with quadratic
terminal cost exactly (Z = conditional mean of the terminal state).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, ControlPath
from .grids import ThetaGrid, TimeGrid, hnorm1, hnorm2
from .kernels import DiscreteLaplaceKernel, step_decay_weight
from .simulate import BrownianEnsemble


class PicardError(RuntimeError):
    pass


def theta_grid_from_kernel(kernel: DiscreteLaplaceKernel) -> ThetaGrid:
    return ThetaGrid(nodes=kernel.nodes, mu_weights=kernel.weights)


@dataclass(frozen=True)
class GaussianMartingale:
    """Z_{m+1} = Z_m + vol_m dW_m with a deterministic vol table."""

    values: np.ndarray  # (paths, N+1)
    vol: np.ndarray     # (N+1,), last entry unused

    @classmethod
    def brownian(cls, ens: BrownianEnsemble) -> "GaussianMartingale":
        return cls(values=ens.W, vol=np.ones(ens.grid.n_steps + 1))

    @classmethod
    def terminal_state_mean(cls, kernel: DiscreteLaplaceKernel, grid: TimeGrid,
                            ens: BrownianEnsemble, b_tab: np.ndarray,
                            s_tab: np.ndarray, xi_T: float) -> "GaussianMartingale":
        """E_m[X_T] for the state-free scalar state equation.

        b_tab, s_tab are deterministic (N+1,) drift/diffusion content tables;
        the discrete terminal state is xi_T + sum_j Kb(T-t_j) b_j dt
        + sum_j Ks(T-t_j) s_j dW_j, so the conditional mean is a Gaussian
        martingale with vol_m = Ks(T - t_m) s_m.
        """
        N = grid.n_steps
        ts = grid.T - grid.t[:-1]  # T - t_j >= dt
        kb = kernel.eval("b", ts)[:, 0, 0]
        ks = kernel.eval("sigma", ts)[:, 0, 0]
        mean0 = xi_T + float(np.sum(kb * b_tab[:-1]) * grid.dt)
        vol = np.zeros(N + 1)
        vol[:-1] = ks * s_tab[:-1]
        vals = np.empty((ens.n_paths, N + 1))
        vals[:, 0] = mean0
        np.cumsum(vol[None, :-1] * ens.dW, axis=1, out=vals[:, 1:])
        vals[:, 1:] += mean0
        return cls(values=vals, vol=vol)


@dataclass
class FirstOrderField:
    """Adjoint pair (p, q) on the decay grid, affine in an optional Z."""

    grid: TimeGrid
    tgrid: ThetaGrid
    P0: np.ndarray                     # (N+1, K, n)
    Q0: np.ndarray                     # (N+1, K, n)
    G0: np.ndarray                     # (N+1, K, n) generator table (theta-resolved)
    P1: np.ndarray | None = None       # (N+1, K, n) coefficient of Z
    Z: GaussianMartingale | None = None
    iterations: int = 0
    distances: list = field(default_factory=list)

    @property
    def deterministic(self) -> bool:
        return self.P1 is None

    def p_at(self, m: int) -> np.ndarray:
        """Field at grid index m: (K, n) deterministic or (paths, K, n)."""
        if self.deterministic:
            return self.P0[m]
        return self.P0[None, m] + self.P1[None, m] * self.Z.values[:, m, None, None]

    def q_at(self, m: int) -> np.ndarray:
        return self.Q0[m]


@dataclass
class SecondOrderField:
    """Deterministic pair field (P, Q == 0) on the node-pair grid."""

    grid: TimeGrid
    tgrid: ThetaGrid
    P: np.ndarray   # (N+1, K, K, n, n)
    G: np.ndarray   # (N+1, K, K, n, n)
    asymmetry: float = 0.0
    iterations: int = 0
    distances: list = field(default_factory=list)

    @property
    def Q(self) -> np.ndarray:
        return np.zeros_like(self.P)


def trivial_bsee_solve(
    tgrid: ThetaGrid,
    grid: TimeGrid,
    phi0: np.ndarray,
    g0: np.ndarray,
    phi1: np.ndarray | None = None,
    g1: np.ndarray | None = None,
    Z: GaussianMartingale | None = None,
) -> FirstOrderField:
    """Solution when the generator does not depend on the unknown field.

    phi0/phi1: (K, n) terminal data; g0/g1: (N+1, K, n) generator tables.
    For constant generators the result matches the exact discounted integral
    (1 - e^{-theta (T-t)}) / theta at every node, including theta = 0.
    """
    K = tgrid.size
    N, dt = grid.n_steps, grid.dt
    n = phi0.shape[-1]
    dec = np.exp(-tgrid.nodes * dt)[:, None]           # (K, 1)
    om = step_decay_weight(tgrid.nodes, dt)[:, None]   # (K, 1)

    P0 = np.zeros((N + 1, K, n))
    P0[N] = phi0
    for m in range(N - 1, -1, -1):
        P0[m] = dec * P0[m + 1] + om * g0[m]

    if phi1 is None and g1 is None:
        return FirstOrderField(grid=grid, tgrid=tgrid, P0=P0,
                               Q0=np.zeros((N + 1, K, n)), G0=np.asarray(g0, dtype=float))

    if Z is None:
        raise ValueError("affine terminal/generator data need the Gaussian factor Z")
    P1 = np.zeros((N + 1, K, n))
    P1[N] = 0.0 if phi1 is None else phi1
    g1 = np.zeros((N + 1, K, n)) if g1 is None else g1
    Q0 = np.zeros((N + 1, K, n))
    for m in range(N - 1, -1, -1):
        P1[m] = dec * P1[m + 1] + om * g1[m]
        Q0[m] = dec * P1[m + 1] * Z.vol[m]
    G0 = np.asarray(g0, dtype=float)
    return FirstOrderField(grid=grid, tgrid=tgrid, P0=P0, Q0=Q0, G0=G0, P1=P1, Z=Z)


def trivial_bsee_solve_pairs(tgrid: ThetaGrid, grid: TimeGrid,
                             phi: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Deterministic node-pair solve with rate theta_i + theta_j.

    phi: (K, K, n, n); g: (N+1, K, K, n, n).  Returns P (N+1, K, K, n, n).
    """
    K = tgrid.size
    N, dt = grid.n_steps, grid.dt
    varpi = tgrid.varpi2()
    dec = np.exp(-varpi * dt)[:, :, None, None]
    om = step_decay_weight(varpi.reshape(-1), dt).reshape(K, K)[:, :, None, None]
    P = np.zeros((N + 1,) + phi.shape)
    P[N] = phi
    for m in range(N - 1, -1, -1):
        P[m] = dec * P[m + 1] + om * g[m]
    return P


def s_norm_distance(grid: TimeGrid, tgrid: ThetaGrid, alpha: float,
                    dP: np.ndarray, dQ: np.ndarray | None, order: int) -> float:
    """Space-time norm sqrt( sum_m (T-t_m)^alpha dt (||dP||^2_{1+a} + ||dQ||^2_a) )."""
    wts = (grid.T - grid.t) ** alpha * grid.dt
    if order == 1:
        np_ = hnorm1(dP, tgrid, 1.0 + alpha) ** 2
        nq_ = 0.0 if dQ is None else hnorm1(dQ, tgrid, alpha) ** 2
    else:
        np_ = hnorm2(dP, tgrid, 1.0 + alpha) ** 2
        nq_ = 0.0 if dQ is None else hnorm2(dQ, tgrid, alpha) ** 2
    return float(np.sqrt(np.sum(wts * (np_ + nq_))))


def picard_bsee_solve(
    tgrid: ThetaGrid,
    grid: TimeGrid,
    phi: np.ndarray,
    generator_map,
    alpha: float,
    order: int = 1,
    tol: float = 1e-10,
    max_iter: int = 200,
    symmetrize: bool = False,
):
    """Plain fixed-point iteration over deterministic table fields.

    generator_map(P, Q) -> generator table of the same field shape; each
    iterate solves the generator-frozen equation.  Stops when the weighted
    space-time distance between successive iterates drops below tol; raises
    on iteration exhaustion or three consecutive non-contracting steps.
    Returns the solved field with its iteration distances attached.
    """
    N = grid.n_steps
    P = np.zeros((N + 1,) + phi.shape)
    P[N] = phi
    Q = np.zeros_like(P)
    distances = []
    asym_max = 0.0
    bad_ratio = 0
    for it in range(max_iter):
        G = generator_map(P, Q)
        if order == 1:
            new = trivial_bsee_solve(tgrid, grid, phi, G)
            P_new, Q_new = new.P0, new.Q0
        else:
            P_new = trivial_bsee_solve_pairs(tgrid, grid, phi, G)
            Q_new = np.zeros_like(P_new)
        if symmetrize:
            swapped = np.swapaxes(np.swapaxes(P_new, 1, 2), -2, -1)
            asym_max = max(asym_max, float(np.max(np.abs(P_new - swapped))))
            P_new = 0.5 * (P_new + swapped)
        d = s_norm_distance(grid, tgrid, alpha, P_new - P, Q_new - Q, order)
        distances.append(d)
        if len(distances) >= 2 and distances[-2] > 0:
            bad_ratio = bad_ratio + 1 if d / distances[-2] >= 1.0 else 0
            if bad_ratio >= 3 and d > tol:
                raise PicardError(f"no contraction: distances {distances[-4:]}")
        P, Q = P_new, Q_new
        if d < tol:
            if order == 1:
                fld = FirstOrderField(grid=grid, tgrid=tgrid, P0=P, Q0=Q,
                                      G0=generator_map(P, Q), iterations=it + 1,
                                      distances=distances)
            else:
                fld = SecondOrderField(grid=grid, tgrid=tgrid, P=P,
                                       G=generator_map(P, Q), asymmetry=asym_max,
                                       iterations=it + 1, distances=distances)
            return fld
    raise PicardError(f"max_iter={max_iter} exceeded, last distance {distances[-1]:.3e}")


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def contract_first(kernel: DiscreteLaplaceKernel, which: str, field_tab: np.ndarray) -> np.ndarray:
    """sum_i w_i M(theta_i)^T psi(theta_i): (..., K, n) -> (..., n)."""
    m = kernel.factors(which)
    return np.einsum("k,kca,...kc->...a", kernel.weights, m, field_tab)


def contract_pair_full(kernel: DiscreteLaplaceKernel, P: np.ndarray) -> np.ndarray:
    """mu x mu contraction Msig^T P Msig: (..., K, K, n, n) -> (..., n, n)."""
    ms = kernel.msigma
    return np.einsum("i,j,ica,...ijcd,jdb->...ab", kernel.weights, kernel.weights, ms, P, ms)


def contract_pair_left(kernel: DiscreteLaplaceKernel, which: str, P: np.ndarray) -> np.ndarray:
    """mu[M^T P(., theta_2)]: contract the first node index, (..., K, K, n, n) -> (..., K, n, n)."""
    m = kernel.factors(which)
    return np.einsum("i,ica,...ijcb->...jab", kernel.weights, m, P)


def contract_pair_right(kernel: DiscreteLaplaceKernel, which: str, P: np.ndarray) -> np.ndarray:
    """mu[P(theta_1, .) M]: contract the second node index, -> (..., K, n, n)."""
    m = kernel.factors(which)
    return np.einsum("j,...ijab,jbc->...iac", kernel.weights, P, m)


# ---------------------------------------------------------------------------
# adjoint assembly
# ---------------------------------------------------------------------------

def _det_coeff_tables(coeffs: CoefficientSet, u_hat: ControlPath, grid: TimeGrid):
    """Deterministic derivative tables along a deterministic control.

    Valid when the tags say the state derivatives are x-free; evaluated at a
    dummy state.
    """
    if not u_hat.deterministic:
        raise ValueError("deterministic solve paths need a deterministic reference control")
    n = coeffs.dim
    x0 = np.zeros((1, n))
    N = grid.n_steps
    bx = np.empty((N + 1, n, n))
    sx = np.empty((N + 1, n, n))
    fx = np.empty((N + 1, n))
    fxx = np.empty((N + 1, n, n))
    for m in range(N + 1):
        t = m * grid.dt
        u = u_hat.at(m)
        bx[m] = coeffs.b_x(t, u, x0)[0]
        sx[m] = coeffs.sigma_x(t, u, x0)[0]
        fx[m] = coeffs.f_x(t, u, x0)[0]
        fxx[m] = coeffs.f_xx(t, u, x0)[0]
    return bx, sx, fx, fxx


@dataclass
class AdjointSolution:
    """First- and (optionally) second-order adjoint data plus contractions."""

    kernel: DiscreteLaplaceKernel
    grid: TimeGrid
    tgrid: ThetaGrid
    first: FirstOrderField
    u_hat: ControlPath | None = None
    second: SecondOrderField | None = None
    # contraction tables: deterministic part and Z-coefficient (None if det)
    Ab0: np.ndarray | None = None   # (N+1, n) mu[Mb^T p]
    Ab1: np.ndarray | None = None
    Aq0: np.ndarray | None = None   # (N+1, n) mu[Ms^T q]
    Rss: np.ndarray | None = None   # (N+1, n, n) mu x mu [Ms^T P Ms]
    solve_path: str = "deterministic"

    def finalize(self):
        k = self.kernel
        self.Ab0 = contract_first(k, "b", self.first.P0)
        self.Ab1 = None if self.first.P1 is None else contract_first(k, "b", self.first.P1)
        self.Aq0 = contract_first(k, "sigma", self.first.Q0)
        if self.second is not None:
            self.Rss = contract_pair_full(k, self.second.P)
        else:
            self.Rss = np.zeros((self.grid.n_steps + 1, k.dim, k.dim))
        return self

    def first_contractions_at(self, m: int):
        """(mu[Mb^T p_m], mu[Ms^T q_m]) as per-path rows (paths, n) or (n,)."""
        Ab = self.Ab0[m]
        if self.Ab1 is not None:
            Ab = Ab[None, :] + self.Ab1[m][None, :] * self.first.Z.values[:, m, None]
        return Ab, self.Aq0[m]

    def risk_matrix_at(self, m: int) -> np.ndarray:
        return self.Rss[m]


def assemble_first_adjoint(
    coeffs: CoefficientSet,
    u_hat: ControlPath,
    x_hat: np.ndarray | None,
    kernel: DiscreteLaplaceKernel,
    ens: BrownianEnsemble,
    tol: float = 1e-10,
    max_iter: int = 200,
    lsmc: bool = False,
) -> AdjointSolution:
    """Build the first-order adjoint field for a reference control.

    Solve paths:
      (a) deterministic data (linear terminal cost, x-free cost slope,
          x-free state derivatives): Picard over deterministic tables;
      (b) state-free dynamics with terminal cost of degree <= 2: closed-form
          affine solution driven by Z = E_.[X_T];
      (c) otherwise least-squares Monte Carlo over the lift basis (opt-in).
    """
    grid = ens.grid
    tgrid = theta_grid_from_kernel(kernel)
    tags = coeffs.tags
    n = coeffs.dim
    K = tgrid.size
    derivs_det = (tags.linear_in_state or tags.state_free) and u_hat.deterministic

    if derivs_det and tags.h_degree <= 1 and tags.f_state_degree <= 1:
        bx, sx, fx, _ = _det_coeff_tables(coeffs, u_hat, grid)
        phi = np.broadcast_to(-coeffs.h_x(np.zeros((1, n)))[0], (K, n)).copy()

        def gen_map(P, Q):
            Ab = contract_first(kernel, "b", P)       # (N+1, n)
            Aq = contract_first(kernel, "sigma", Q)
            g = (np.einsum("tca,tc->ta", bx, Ab)
                 + np.einsum("tca,tc->ta", sx, Aq) - fx)
            return np.broadcast_to(g[:, None, :], P.shape).copy()

        fld = picard_bsee_solve(tgrid, grid, phi, gen_map, kernel.alpha,
                                order=1, tol=tol, max_iter=max_iter)
        return AdjointSolution(kernel=kernel, grid=grid, tgrid=tgrid, first=fld,
                               u_hat=u_hat, solve_path="deterministic").finalize()

    if tags.state_free and tags.f_state_degree <= 1 and tags.h_degree <= 2 and u_hat.deterministic:
        if n != 1:
            raise NotImplementedError("the affine closed-form path is scalar-state")
        if x_hat is None:
            raise ValueError("the affine path needs the simulated reference state")
        N = grid.n_steps
        b_tab = np.empty(N + 1)
        s_tab = np.empty(N + 1)
        x0 = np.zeros((1, 1))
        for m in range(N + 1):
            t = m * grid.dt
            b_tab[m] = coeffs.b(t, u_hat.at(m), x0)[0, 0]
            s_tab[m] = coeffs.sigma(t, u_hat.at(m), x0)[0, 0]
        # Z_m = E_m[X_T]; the deterministic forcing offset is recovered from
        # the simulated terminal state, which must match Z_T pathwise.
        Z = GaussianMartingale.terminal_state_mean(kernel, grid, ens, b_tab, s_tab, 0.0)
        offsets = x_hat[:, -1, 0] - Z.values[:, -1]
        shift = float(np.mean(offsets))
        if float(np.max(np.abs(offsets - shift))) > 1e-8 * max(1.0, abs(shift)):
            raise ValueError("reference state is not state-free on this ensemble")
        Z = GaussianMartingale(values=Z.values + shift, vol=Z.vol)
        # terminal: -h_x(X_T) = -(h1 + h2 X_T); slope from h_xx, level from h_x(0)
        h1 = coeffs.h_x(np.zeros((1, 1)))[0, 0]
        h2 = coeffs.h_xx(np.zeros((1, 1)))[0, 0, 0]
        _, _, fx, _ = _det_coeff_tables(coeffs, u_hat, grid)
        phi0 = np.full((K, 1), -h1)
        phi1 = np.full((K, 1), -h2)
        g0 = np.broadcast_to(-fx[:, None, :], (N + 1, K, 1)).copy()
        fld = trivial_bsee_solve(tgrid, grid, phi0, g0, phi1=phi1, Z=Z)
        return AdjointSolution(kernel=kernel, grid=grid, tgrid=tgrid, first=fld,
                               u_hat=u_hat, solve_path="affine").finalize()

    if lsmc:
        return _assemble_first_adjoint_lsmc(coeffs, u_hat, x_hat, kernel, ens)
    raise ValueError(
        "unsupported coefficient structure for closed-form adjoints "
        f"(tags: {tags}); enable lsmc for the regression path"
    )


def _assemble_first_adjoint_lsmc(coeffs, u_hat, x_hat, kernel, ens) -> AdjointSolution:
    """Regression solve over the lift basis {1, Y_i(t)}; best-effort accuracy.

    One explicit backward sweep: the generator at step m is assembled from
    the regression-conditioned discounted field and q estimate at m.
    """
    from .simulate import simulate_lift

    grid = ens.grid
    tgrid = theta_grid_from_kernel(kernel)
    n = coeffs.dim
    if n != 1:
        raise NotImplementedError("LSMC adjoints are scalar-state")
    N, dt = grid.n_steps, grid.dt
    K = tgrid.size
    Y, X = simulate_lift(coeffs, u_hat, kernel, 0.0 if x_hat is None else x_hat[:, 0, 0].mean(), ens,
                         self_test=False)
    if x_hat is None:
        x_hat = X
    paths = ens.n_paths
    dec = np.exp(-tgrid.nodes * dt)
    om = step_decay_weight(tgrid.nodes, dt)

    p = np.empty((paths, K))
    p[:] = -coeffs.h_x(x_hat[:, -1])[:, 0][:, None]
    p_tab0 = np.zeros((N + 1, K, 1))
    q_tab0 = np.zeros((N + 1, K, 1))
    g_tab0 = np.zeros((N + 1, K, 1))
    p_tab0[N] = np.mean(p, axis=0)[:, None]
    mb = kernel.mb[:, 0, 0] * kernel.weights
    ms = kernel.msigma[:, 0, 0] * kernel.weights

    for m in range(N - 1, -1, -1):
        basis = np.concatenate([np.ones((paths, 1)), Y[:, m, :, 0]], axis=1)
        disc = p * dec[None, :]
        # rank-tolerant projection: lift coordinates are collinear at early
        # times (all start from zero) and strongly correlated across nodes
        coef_p, *_ = np.linalg.lstsq(basis, disc, rcond=1e-8)
        p_tilde = basis @ coef_p                   # E_m[e^{-th dt} p_{m+1}]
        coef_q, *_ = np.linalg.lstsq(basis, disc * ens.dW[:, m][:, None] / dt, rcond=1e-8)
        q_m = basis @ coef_q
        t = m * dt
        u = u_hat.at(m)
        bxm = coeffs.b_x(t, u, x_hat[:, m])[:, 0, 0]
        sxm = coeffs.sigma_x(t, u, x_hat[:, m])[:, 0, 0]
        fxm = coeffs.f_x(t, u, x_hat[:, m])[:, 0]
        g = bxm * (p_tilde @ mb) + sxm * (q_m @ ms) - fxm
        p = p_tilde + om[None, :] * g[:, None]
        p_tab0[m] = np.mean(p, axis=0)[:, None]
        q_tab0[m] = np.mean(q_m, axis=0)[:, None]
        g_tab0[m] = np.mean(g)
    fld = FirstOrderField(grid=grid, tgrid=tgrid, P0=p_tab0, Q0=q_tab0, G0=g_tab0)
    return AdjointSolution(kernel=kernel, grid=grid, tgrid=tgrid, first=fld,
                           u_hat=u_hat, solve_path="lsmc").finalize()


def assemble_second_adjoint(
    coeffs: CoefficientSet,
    first: AdjointSolution,
    kernel: DiscreteLaplaceKernel,
    ens: BrownianEnsemble,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> AdjointSolution:
    """Attach the node-pair field (P, Q == 0) to a solved first-order field.

    Requires x-free second state derivatives of b and sigma (linear-in-state
    or state-free dynamics) and constant cost Hessians, which keeps the pair
    equation deterministic even when (p, q) is random.  Every iterate is
    symmetrized; the largest pre-symmetrization asymmetry is recorded.
    """
    tags = coeffs.tags
    if not (tags.linear_in_state or tags.state_free):
        raise ValueError("pair field requires x-free state-derivative structure")
    if tags.h_degree > 2 or tags.f_state_degree > 2:
        raise ValueError("pair field requires cost Hessians constant in x")
    grid = ens.grid
    tgrid = first.tgrid
    n = coeffs.dim
    K = tgrid.size
    bx, sx, _, fxx = _det_coeff_tables(coeffs, first.u_hat, grid)
    hxx = coeffs.h_xx(np.zeros((1, n)))[0]
    phi = np.broadcast_to(-hxx, (K, K, n, n)).copy()
    # x-free second derivatives of b, sigma vanish under the supported tags,
    # so the Hessian block of the generator reduces to -f_xx.
    hess_term = -fxx  # (N+1, n, n)

    def gen_map(P, Q):
        left_b = contract_pair_left(kernel, "b", P)     # (N+1, K, n, n), theta2-indexed
        right_b = contract_pair_right(kernel, "b", P)   # (N+1, K, n, n), theta1-indexed
        mid = contract_pair_full(kernel, P)             # (N+1, n, n)
        g = np.zeros_like(P)
        g += np.einsum("tca,tjcb->tjab", bx, left_b)[:, None, :, :, :]
        g += np.einsum("tiac,tcb->tiab", right_b, bx)[:, :, None, :, :]
        if np.any(Q):
            left_s = contract_pair_left(kernel, "sigma", Q)
            right_s = contract_pair_right(kernel, "sigma", Q)
            g += np.einsum("tca,tjcb->tjab", sx, left_s)[:, None, :, :, :]
            g += np.einsum("tiac,tcb->tiab", right_s, sx)[:, :, None, :, :]
        smid = np.einsum("tca,tcd,tdb->tab", sx, mid, sx)
        g += (smid + hess_term)[:, None, None, :, :]
        return g

    fld2 = picard_bsee_solve(tgrid, grid, phi, gen_map, kernel.alpha, order=2,
                             tol=tol, max_iter=max_iter, symmetrize=True)
    first.second = fld2
    return first.finalize()


def assemble_adjoints(
    coeffs: CoefficientSet,
    u_hat: ControlPath,
    x_hat: np.ndarray | None,
    kernel: DiscreteLaplaceKernel,
    ens: BrownianEnsemble,
    tol: float = 1e-10,
    max_iter: int = 200,
    lsmc: bool = False,
) -> AdjointSolution:
    """First- and second-order adjoint fields with cached contractions."""
    adj = assemble_first_adjoint(coeffs, u_hat, x_hat, kernel, ens,
                                 tol=tol, max_iter=max_iter, lsmc=lsmc)
    return assemble_second_adjoint(coeffs, adj, kernel, ens, tol=tol, max_iter=max_iter)

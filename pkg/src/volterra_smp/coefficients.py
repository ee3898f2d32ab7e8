"""Problem coefficients, control paths and the bundled test problems.

A ``CoefficientSet`` packages the drift b, diffusion sigma, running cost f and
terminal cost h together with their first and second state derivatives and a
set of structural tags that the adjoint assemblers use to pick a solve path.
All evaluators are vectorized over paths: ``t`` is a scalar grid time, ``u``
has shape (du,) or (paths, du), ``x`` has shape (paths, n).

Stacked Hessians follow the convention out[p, i, j, k] = d^2 phi^i / dx_j dx_k,
so the quadratic form <phi_xx X, X> is einsum("pijk,pj,pk->pi").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import TimeGrid
from .rng import scalar_rng


@dataclass(frozen=True)
class StructuralTags:
    """Declared structure used to dispatch adjoint solve paths."""

    linear_in_state: bool = False     # b_x, sigma_x independent of x; b_xx = sigma_xx = 0
    state_free: bool = False          # b, sigma independent of x entirely
    control_affine: bool = False      # b, sigma affine in u
    sigma_control_free: bool = False  # sigma independent of u
    f_state_degree: int = 2           # 0: x-free, 1: linear in x, 2: quadratic in x
    h_degree: int = 2                 # 1: linear terminal cost, 2: quadratic


@dataclass(frozen=True)
class ControlDomain:
    """Finite grid of admissible control points, shape (V, du)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError("control grid must be (V, du)")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CoefficientSet:
    dim: int
    du: int
    b: Callable
    sigma: Callable
    f: Callable
    h: Callable
    b_x: Callable
    sigma_x: Callable
    f_x: Callable
    h_x: Callable
    b_xx: Callable
    sigma_xx: Callable
    f_xx: Callable
    h_xx: Callable
    control_domain: ControlDomain
    tags: StructuralTags = field(default_factory=StructuralTags)
    kappa: float = 1.0
    name: str = "custom"

    def self_test(self, seed: int = 7, n_points: int = 16, rel_tol: float = 1e-6) -> None:
        """Check derivative evaluators against central finite differences."""
        rng = scalar_rng(seed, tag=101)
        n, du = self.dim, self.du
        t = rng.uniform(0.0, 1.0)
        u = rng.normal(size=(n_points, du))
        x = rng.normal(size=(n_points, n))
        eps = 1e-5

        def fd_grad(fn, vec_out: bool):
            cols = []
            for j in range(n):
                dx = np.zeros((n_points, n))
                dx[:, j] = eps
                cols.append((fn(t, u, x + dx) - fn(t, u, x - dx)) / (2 * eps))
            stacked = np.stack(cols, axis=-1)  # (..., n) derivative axis last
            return stacked

        checks = [
            (fd_grad(self.b, True), self.b_x(t, u, x), "b_x"),
            (fd_grad(self.sigma, True), self.sigma_x(t, u, x), "sigma_x"),
            (fd_grad(self.f, False), self.f_x(t, u, x), "f_x"),
        ]
        hx_fd = []
        for j in range(n):
            dx = np.zeros((n_points, n))
            dx[:, j] = eps
            hx_fd.append((self.h(x + dx) - self.h(x - dx)) / (2 * eps))
        checks.append((np.stack(hx_fd, axis=-1), self.h_x(x), "h_x"))

        for approx, exact, label in checks:
            scale = np.maximum(np.max(np.abs(exact)), 1.0)
            err = np.max(np.abs(approx - exact)) / scale
            if err > rel_tol:
                raise ValueError(f"derivative self-test failed for {label}: rel err {err:.3e}")

    def delta(self, which: str, t: float, u_hat, v, x) -> np.ndarray:
        """phi(t, v, x) - phi(t, u_hat, x) for phi in {b, sigma, f} and derivatives."""
        fn = {
            "b": self.b, "sigma": self.sigma, "f": self.f,
            "b_x": self.b_x, "sigma_x": self.sigma_x, "f_x": self.f_x,
        }[which]
        return fn(t, v, x) - fn(t, u_hat, x)


@dataclass(frozen=True)
class ControlPath:
    """Control table on the grid: (N+1, du) deterministic or (paths, N+1, du).

    Adapted per-path tables are legal when built from increments with index
    strictly below the step at which the value applies; the bundled problems
    only use deterministic tables.
    """

    values: np.ndarray
    deterministic: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if self.deterministic and v.ndim != 2:
            raise ValueError("deterministic control table must be (N+1, du)")
        if not self.deterministic and v.ndim != 3:
            raise ValueError("per-path control table must be (paths, N+1, du)")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, grid: TimeGrid, du: int = 1) -> "ControlPath":
        val = np.broadcast_to(np.atleast_1d(np.asarray(value, dtype=float)), (du,))
        return cls(np.tile(val, (grid.n_steps + 1, 1)), deterministic=True)

    def at(self, m: int) -> np.ndarray:
        """Control at grid index m: (du,) or (paths, du)."""
        return self.values[m] if self.deterministic else self.values[:, m]

    @property
    def n_steps(self) -> int:
        return (self.values.shape[0] if self.deterministic else self.values.shape[1]) - 1


def _aspaths(arr, paths: int) -> np.ndarray:
    out = np.atleast_1d(np.asarray(arr, dtype=float))
    if out.ndim == 1:
        out = np.broadcast_to(out, (paths, out.shape[0]))
    return out


def _scalar_problem(name, b, sigma, f, h, b_x, sigma_x, f_x, h_x, b_xx, sigma_xx,
                    f_xx, h_xx, u_grid, tags, kappa) -> CoefficientSet:
    """Wrap scalar (n = du = 1) formulas into vectorized evaluators."""

    def vec1(fn):
        def wrapped(t, u, x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            u1 = _aspaths(u, x1.shape[0])[:, 0]
            vals = np.broadcast_to(np.asarray(fn(t, u1, x1), dtype=float), x1.shape)
            return vals[:, None]
        return wrapped

    def vec0(fn):
        def wrapped(t, u, x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            u1 = _aspaths(u, x1.shape[0])[:, 0]
            return np.broadcast_to(np.asarray(fn(t, u1, x1), dtype=float), x1.shape).copy()
        return wrapped

    def mat(fn):
        def wrapped(t, u, x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            u1 = _aspaths(u, x1.shape[0])[:, 0]
            vals = np.broadcast_to(np.asarray(fn(t, u1, x1), dtype=float), x1.shape)
            return vals[:, None, None]
        return wrapped

    def hess(fn):
        def wrapped(t, u, x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            u1 = _aspaths(u, x1.shape[0])[:, 0]
            vals = np.broadcast_to(np.asarray(fn(t, u1, x1), dtype=float), x1.shape)
            return vals[:, None, None, None]
        return wrapped

    def hterm(fn):
        def wrapped(x):
            return np.asarray(fn(np.asarray(x, dtype=float)[:, 0]), dtype=float)
        return wrapped

    def hterm_vec(fn):
        def wrapped(x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            return np.broadcast_to(np.asarray(fn(x1), dtype=float), x1.shape)[:, None]
        return wrapped

    def hterm_mat(fn):
        def wrapped(x):
            x1 = np.asarray(x, dtype=float)[:, 0]
            return np.broadcast_to(np.asarray(fn(x1), dtype=float), x1.shape)[:, None, None]
        return wrapped

    return CoefficientSet(
        dim=1, du=1,
        b=vec1(b), sigma=vec1(sigma), f=vec0(f), h=hterm(h),
        b_x=mat(b_x), sigma_x=mat(sigma_x), f_x=vec1(f_x), h_x=hterm_vec(h_x),
        b_xx=hess(b_xx), sigma_xx=hess(sigma_xx), f_xx=mat(f_xx), h_xx=hterm_mat(h_xx),
        control_domain=ControlDomain(np.asarray(u_grid, dtype=float)[:, None]),
        tags=tags, kappa=kappa, name=name,
    )


def lq_linear_cost(b1=0.5, b2=1.0, s1=0.3, s0=0.4, c1=0.6, r=2.5, ch=1.0,
                   u_grid=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> CoefficientSet:
    """Linear dynamics, control-free diffusion, linear-in-state costs.

    All adjoint data (h_x, f_x, b_x, sigma_x) are deterministic, so the
    adjoint fields are deterministic tables; the diffusion gap vanishes and
    the risk-adjustment term drops out of the inequality checks.
    """
    return _scalar_problem(
        "lq_linear_cost",
        b=lambda t, u, x: b1 * x + b2 * u,
        sigma=lambda t, u, x: s1 * x + s0,
        f=lambda t, u, x: c1 * x + 0.5 * r * u * u,
        h=lambda x: ch * x,
        b_x=lambda t, u, x: b1, sigma_x=lambda t, u, x: s1,
        f_x=lambda t, u, x: c1, h_x=lambda x: ch,
        b_xx=lambda t, u, x: 0.0, sigma_xx=lambda t, u, x: 0.0,
        f_xx=lambda t, u, x: 0.0, h_xx=lambda x: 0.0,
        u_grid=u_grid,
        tags=StructuralTags(linear_in_state=True, control_affine=True,
                            sigma_control_free=True, f_state_degree=1, h_degree=1),
        kappa=max(abs(b1), abs(s1)),
    )


def state_free_quadratic(b0=0.1, b2=1.0, s0=0.3, s2=0.8, r=0.4, h2=1.2, h1=0.5,
                         u_grid=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> CoefficientSet:
    """State-free controlled dynamics with a quadratic terminal cost.

    The first-order adjoint field is a closed-form affine function of the
    conditional mean of the terminal state; the second-order field is
    deterministic and nonzero, so the risk-adjustment term is exercised.
    """
    return _scalar_problem(
        "state_free_quadratic",
        b=lambda t, u, x: b0 + b2 * u + 0.0 * x,
        sigma=lambda t, u, x: s0 + s2 * u + 0.0 * x,
        f=lambda t, u, x: 0.5 * r * u * u + 0.0 * x,
        h=lambda x: 0.5 * h2 * x * x + h1 * x,
        b_x=lambda t, u, x: 0.0, sigma_x=lambda t, u, x: 0.0,
        f_x=lambda t, u, x: 0.0, h_x=lambda x: h2 * x + h1,
        b_xx=lambda t, u, x: 0.0, sigma_xx=lambda t, u, x: 0.0,
        f_xx=lambda t, u, x: 0.0, h_xx=lambda x: h2,
        u_grid=u_grid,
        tags=StructuralTags(state_free=True, control_affine=True,
                            f_state_degree=0, h_degree=2),
        kappa=0.0,
    )


def bilinear_lq(b1=0.3, b2=0.3, b3=0.1, s1=0.2, s2=0.9, s3=0.7,
                qx=0.6, r=0.3, h2=1.0, h1=0.4,
                u_grid=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> CoefficientSet:
    """Linear-in-state dynamics with control/state interaction terms.

    The interaction terms make the state derivatives control dependent
    (delta b_x, delta sigma_x nonzero under a spike), which activates the
    second-order variational process and the quadratic remainder orders.
    """
    return _scalar_problem(
        "bilinear_lq",
        b=lambda t, u, x: b1 * x + (b2 + b3 * x) * u,
        sigma=lambda t, u, x: s1 * x + (s2 + s3 * x) * u,
        f=lambda t, u, x: 0.5 * (qx * x * x + r * u * u),
        h=lambda x: 0.5 * h2 * x * x + h1 * x,
        b_x=lambda t, u, x: b1 + b3 * u, sigma_x=lambda t, u, x: s1 + s3 * u,
        f_x=lambda t, u, x: qx * x, h_x=lambda x: h2 * x + h1,
        b_xx=lambda t, u, x: 0.0, sigma_xx=lambda t, u, x: 0.0,
        f_xx=lambda t, u, x: qx, h_xx=lambda x: h2,
        u_grid=u_grid,
        tags=StructuralTags(linear_in_state=True, f_state_degree=2, h_degree=2),
        kappa=max(abs(b1) + abs(b3), abs(s1) + abs(s3)),
    )


def zero_problem(u_grid=(0.0,)) -> CoefficientSet:
    """All coefficients identically zero; every derived object vanishes."""
    return _scalar_problem(
        "zero",
        b=lambda t, u, x: 0.0 * x, sigma=lambda t, u, x: 0.0 * x,
        f=lambda t, u, x: 0.0 * x, h=lambda x: 0.0 * x,
        b_x=lambda t, u, x: 0.0, sigma_x=lambda t, u, x: 0.0,
        f_x=lambda t, u, x: 0.0, h_x=lambda x: 0.0,
        b_xx=lambda t, u, x: 0.0, sigma_xx=lambda t, u, x: 0.0,
        f_xx=lambda t, u, x: 0.0, h_xx=lambda x: 0.0,
        u_grid=u_grid,
        tags=StructuralTags(linear_in_state=True, state_free=True, control_affine=True,
                            sigma_control_free=True, f_state_degree=0, h_degree=1),
        kappa=0.0,
    )


PROBLEMS = {
    "lq_linear_cost": lq_linear_cost,
    "state_free_quadratic": state_free_quadratic,
    "bilinear_lq": bilinear_lq,
    "zero": zero_problem,
}


def make_problem(name: str, **params) -> CoefficientSet:
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; available: {sorted(PROBLEMS)}")
    return PROBLEMS[name](**params)

"""Semi-analytic layer: partition functions, best-response marginals, the
marginal-KL value function and its derivative, and the scalar penalty ODE.

Everything is evaluated by tensor-product Gauss-Legendre quadrature over the
marginals' support boxes. The evaluator is immutable and its methods are
pure, so concurrent evaluation at different penalty weights is safe. This
module is a validation lab for the particle flow, not a production path: the
joint quadrature is limited to d_x + d_y <= 4.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import xlogy

from .model import Box, CostFunction, Marginal

# Joint kernels up to this many entries are cached; larger ones are streamed.
_CACHE_ENTRY_LIMIT = 40_000_000
_CHUNK_ROWS = 2048


def _tensor_gauss_legendre(box: Box, nodes_per_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre nodes and weights on a box."""
    base_x, base_w = leggauss(nodes_per_dim)
    axes_x, axes_w = [], []
    for a in range(box.dim):
        lo, hi = box.low[a], box.high[a]
        axes_x.append(0.5 * (hi - lo) * base_x + 0.5 * (hi + lo))
        axes_w.append(0.5 * (hi - lo) * base_w)
    grids = np.meshgrid(*axes_x, indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    weights = axes_w[0]
    for a in range(1, box.dim):
        weights = np.multiply.outer(weights, axes_w[a])
    return nodes, weights.ravel()


class ResponseEvaluator:
    """Quadrature-backed evaluator for a pair of analytic marginals and a cost.

    Integrals against each marginal use fixed Gauss-Legendre nodes weighted by
    the marginal density, so same-grid identities (e.g. the Fubini consistency
    of the partition function) hold to rounding.
    """

    def __init__(
        self,
        mu: Marginal,
        nu: Marginal,
        cost: CostFunction,
        quad_nodes_per_dim: int = 120,
        quad_box_mu: Box | None = None,
        quad_box_nu: Box | None = None,
    ):
        if mu.kind != "analytic" or nu.kind != "analytic":
            raise ValueError("the evaluator requires analytic marginals")
        if mu.dim > 2 or nu.dim > 2:
            raise ValueError("quadrature supports at most 2 dimensions per marginal")
        if quad_nodes_per_dim < 2:
            raise ValueError("need at least 2 quadrature nodes per dimension")
        self.mu = mu
        self.nu = nu
        self.cost = cost
        self.quad_nodes_per_dim = quad_nodes_per_dim
        self.quad_box_mu = quad_box_mu or mu.support_box
        self.quad_box_nu = quad_box_nu or nu.support_box

        self.nodes_x, base_wx = _tensor_gauss_legendre(self.quad_box_mu, quad_nodes_per_dim)
        self.nodes_y, base_wy = _tensor_gauss_legendre(self.quad_box_nu, quad_nodes_per_dim)
        # Weights absorb the densities: sum(w_mu * f(nodes_x)) ~ integral of f d(mu).
        self.w_mu = base_wx * mu.density_at(self.nodes_x)
        self.w_nu = base_wy * nu.density_at(self.nodes_y)
        self._cost_matrix: np.ndarray | None = None

    # -- joint-kernel plumbing -------------------------------------------------

    def _joint_ok(self):
        if self.mu.dim + self.nu.dim > 4:
            raise ValueError("joint quadrature limited to d_x + d_y <= 4")

    def _get_cost_matrix(self) -> np.ndarray | None:
        n = len(self.nodes_x) * len(self.nodes_y)
        if n > _CACHE_ENTRY_LIMIT:
            return None
        if self._cost_matrix is None:
            self._cost_matrix = self._cost_block(self.nodes_x, self.nodes_y)
        return self._cost_matrix

    def _cost_block(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        nx, ny = len(xs), len(ys)
        block = np.empty((nx, ny))
        for i in range(nx):
            block[i] = self.cost.evaluate(np.broadcast_to(xs[i], ys.shape), ys)
        return block

    def _kernel_pass(self, lam: float, with_cost_moments: bool = False) -> dict:
        """One sweep over the joint kernel exp(-c/lam).

        Returns z1 (per x-node), z2 (per y-node), z, and optionally the
        sigma-weighted cost moments needed by the derivative formula.
        """
        self._joint_ok()
        cmat = self._get_cost_matrix()
        nx = len(self.nodes_x)
        z1 = np.empty(nx)
        z2 = np.zeros(len(self.nodes_y))
        ec = 0.0
        ec_logz1 = None
        if cmat is not None:
            kern = np.exp(-cmat / lam)
            z1 = kern @ self.w_nu
            z2 = self.w_mu @ kern
            if with_cost_moments:
                ck = cmat * kern
                ec = float(self.w_mu @ ck @ self.w_nu)
                ec_row = ck @ self.w_nu  # per x-node: integral of c e^{-c/lam} d(nu)
                ec_col = self.w_mu @ ck
                return {"z1": z1, "z2": z2, "ec": ec, "ec_row": ec_row, "ec_col": ec_col}
            return {"z1": z1, "z2": z2}

        ec_row = np.zeros(nx)
        ec_col = np.zeros(len(self.nodes_y))
        for start in range(0, nx, _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, nx)
            block = self._cost_block(self.nodes_x[start:stop], self.nodes_y)
            kern = np.exp(-block / lam)
            z1[start:stop] = kern @ self.w_nu
            z2 += self.w_mu[start:stop] @ kern
            if with_cost_moments:
                ck = block * kern
                ec_row[start:stop] = ck @ self.w_nu
                ec_col += self.w_mu[start:stop] @ ck
        if with_cost_moments:
            ec = float(self.w_mu @ ec_row)
            return {"z1": z1, "z2": z2, "ec": ec, "ec_row": ec_row, "ec_col": ec_col}
        return {"z1": z1, "z2": z2}

    # -- partition functions ---------------------------------------------------

    @staticmethod
    def _check_lam(lam: float) -> float:
        lam = float(lam)
        if lam <= 0:
            raise ValueError("the penalty weight must be positive")
        return lam

    def partition_function(self, lam: float) -> float:
        """Z(lam) = double integral of exp(-c/lam) d(mu) d(nu); lies in (0, 1]."""
        lam = self._check_lam(lam)
        pas = self._kernel_pass(lam)
        return float(self.w_mu @ pas["z1"])

    def partition_given_x(self, lam: float, x) -> float | np.ndarray:
        """Z1(x) = integral of exp(-c(x, .)/lam) d(nu)."""
        lam = self._check_lam(lam)
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.empty(len(pts))
        for start in range(0, len(pts), _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, len(pts))
            block = self._cost_block(pts[start:stop], self.nodes_y)
            out[start:stop] = np.exp(-block / lam) @ self.w_nu
        return float(out[0]) if single else out

    def partition_given_y(self, lam: float, y) -> float | np.ndarray:
        """Z2(y) = integral of exp(-c(., y)/lam) d(mu)."""
        lam = self._check_lam(lam)
        pts = np.asarray(y, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.empty(len(pts))
        for start in range(0, len(pts), _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, len(pts))
            block = self._cost_block(self.nodes_x, pts[start:stop])
            out[start:stop] = self.w_mu @ np.exp(-block / lam)
        return float(out[0]) if single else out

    # -- best-response marginals -----------------------------------------------

    def best_response_marginal_x(self, lam: float, x) -> float | np.ndarray:
        """First marginal of the tilted measure: mu(x) Z1(x) / Z."""
        lam = self._check_lam(lam)
        z = self.partition_function(lam)
        return self.mu.density_at(x) * self.partition_given_x(lam, x) / z

    def best_response_marginal_y(self, lam: float, y) -> float | np.ndarray:
        """Second marginal of the tilted measure: nu(y) Z2(y) / Z."""
        lam = self._check_lam(lam)
        z = self.partition_function(lam)
        return self.nu.density_at(y) * self.partition_given_y(lam, y) / z

    # -- value function and derivative ------------------------------------------

    def marginal_kl_sum(self, lam: float) -> float:
        """Sum of the KLs of the best-response marginals against mu and nu.

        Evaluated as -2 log Z + (1/Z) int Z1 log Z1 d(mu)
                              + (1/Z) int Z2 log Z2 d(nu), clamped at 0.
        """
        lam = self._check_lam(lam)
        pas = self._kernel_pass(lam)
        z1, z2 = pas["z1"], pas["z2"]
        z = float(self.w_mu @ z1)
        t1 = float(self.w_mu @ xlogy(z1, np.maximum(z1, 1e-300))) / z
        t2 = float(self.w_nu @ xlogy(z2, np.maximum(z2, 1e-300))) / z
        return max(float(-2.0 * np.log(z)) + t1 + t2, 0.0)

    def marginal_kl_sum_derivative(self, lam: float) -> float:
        """d/d(lam) of ``marginal_kl_sum`` via the tilted-covariance formula.

        Equals Cov_sigma(c, log(Z1 Z2)) / lam^2 where sigma is the tilted
        measure exp(-c/lam) mu nu / Z; the identity holds at the discrete
        level on the shared quadrature grid.
        """
        lam = self._check_lam(lam)
        pas = self._kernel_pass(lam, with_cost_moments=True)
        z1, z2 = pas["z1"], pas["z2"]
        z = float(self.w_mu @ z1)
        log_z1 = np.log(np.maximum(z1, 1e-300))
        log_z2 = np.log(np.maximum(z2, 1e-300))
        e_c = pas["ec"] / z
        e_log = (float(self.w_mu @ (z1 * log_z1)) + float(self.w_nu @ (z2 * log_z2))) / z
        e_c_log = (float(pas["ec_row"] @ (self.w_mu * log_z1))
                   + float(pas["ec_col"] @ (self.w_nu * log_z2))) / z
        return (e_c_log - e_c * e_log) / lam**2

    def best_response_energy(self, lam: float) -> float:
        """Value -lam log Z(lam) of the penalized energy at the tilted measure."""
        lam = self._check_lam(lam)
        return -lam * float(np.log(self.partition_function(lam)))

    def tilted_cost_mean(self, lam: float) -> float:
        """Mean transport cost under the tilted measure sigma(lam)."""
        lam = self._check_lam(lam)
        pas = self._kernel_pass(lam, with_cost_moments=True)
        z = float(self.w_mu @ pas["z1"])
        return pas["ec"] / z

    # -- penalty ODE -------------------------------------------------------------

    def solve_penalty_ode(self, lambda0: float, t_end: float, dt_ode: float) -> np.ndarray:
        """Integrate d(lam)/dt = marginal_kl_sum(lam) by classical RK4.

        Returns rows (t, lam, marginal_kl_sum(lam)) at every step, including
        t = 0 and t = t_end.
        """
        lam = self._check_lam(lambda0)
        if dt_ode <= 0:
            raise ValueError("dt_ode must be positive")
        v = self.marginal_kl_sum
        rows = []
        t = 0.0
        n_steps = int(round(t_end / dt_ode))
        for _ in range(n_steps):
            k1 = v(lam)
            rows.append((t, lam, k1))
            k2 = v(lam + 0.5 * dt_ode * k1)
            k3 = v(lam + 0.5 * dt_ode * k2)
            k4 = v(lam + dt_ode * k3)
            lam = lam + dt_ode * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
            t += dt_ode
        rows.append((t, lam, v(lam)))
        return np.array(rows)


def save_sweep_csv(path, rows) -> None:
    """Persist a penalty-weight sweep: rows of (lambda, Z, V, dV_dlambda, E_d)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lambda,Z,V,dV_dlambda,E_d\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def save_trace_csv(path, rows) -> None:
    """Persist a penalty ODE trace: rows of (t, lambda, V)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,lambda,V\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

"""Linear-quadratic optimal contract: backward ODEs, closed forms, regimes.

The value function of the owner's reformulated control problem is linear in
the risk state, V(t, y) = K_t' y + m_t, so the whole contract reduces to two
backward ODEs:

    dK/dt + (A - r I)' K + rho = 0,   K(T) = rho
    dm/dt - r m - 0.5 K' R^{-1} K = 0,   m(T) = 0

K_t doubles as the payment sensitivity of the optimal contract and fixes the
suggested effort E*_t = R^{-1} K_t.  Both ODEs are integrated backward with a
classical fixed-step fourth-order Runge-Kutta scheme so grids line up exactly
with the simulator.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import Scenario

__all__ = [
    "NumericalError",
    "SingularMatrixError",
    "LQSolution",
    "PaymentRegime",
    "solve_K",
    "solve_m",
    "solve_lq",
    "closed_form_K_scalar",
    "closed_form_K_matrix",
    "optimal_effort",
    "principal_cost",
    "payment_regime",
    "contract_coefficients",
    "ode_residual",
    "solution_to_csv",
]


class NumericalError(RuntimeError):
    """Raised when an integration or optimization loses finiteness."""


class SingularMatrixError(NumericalError):
    """(A - r I) is singular; callers should fall back to solve_K."""


@dataclass(frozen=True)
class LQSolution:
    """Time-gridded contract solution.

    grid has M+1 increasing points with grid[0] = 0 and grid[-1] = T;
    K is (M+1, n), m is (M+1,), E_star is (M+1, n).
    """

    grid: np.ndarray
    K: np.ndarray
    m: np.ndarray
    E_star: np.ndarray
    J_P_star: float


@dataclass(frozen=True)
class PaymentRegime:
    """Classification of the intermediate-payment optimum by delta_p - delta_a.

    tag is one of 'no_intermediate_payment' (difference >= 1, p* = 0),
    'unbounded_impractical' (difference <= 0, p* grows without bound), or
    'time_dependent_degenerate' (in between: p* flips from 0 to the upper
    bound at switch_time).
    """

    tag: str
    switch_time: float | None = None


def _grid(horizon: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linspace(0.0, horizon, steps + 1)


def _rk4_backward(rhs, terminal: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Integrate x' = rhs(t, x) backward from grid[-1] to grid[0].

    Returns values on the grid with the terminal slot holding ``terminal``
    bitwise.  rhs is evaluated at intermediate stage times, so non-autonomous
    systems integrate at full fourth order.
    """
    M = len(grid) - 1
    out = np.empty((M + 1,) + np.shape(terminal))
    out[M] = terminal
    x = np.array(terminal, dtype=float)
    for k in range(M - 1, -1, -1):
        t1, t0 = grid[k + 1], grid[k]
        h = t0 - t1  # negative
        k1 = rhs(t1, x)
        k2 = rhs(t1 + 0.5 * h, x + 0.5 * h * k1)
        k3 = rhs(t1 + 0.5 * h, x + 0.5 * h * k2)
        k4 = rhs(t0, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericalError(
                f"K/m integration lost finiteness at t={t0:.6g}; "
                "check A and the horizon")
        out[k] = x
    return out


def solve_K(s: Scenario, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward-integrate the sensitivity ODE; returns (grid, K).

    K has shape (steps+1, n) and K[-1] equals rho exactly.
    """
    A, rho, r = s.network.A, s.network.rho, s.costs.r
    M_T = (A - r * np.eye(s.n)).T
    grid = _grid(s.costs.horizon, steps)

    def rhs(_t, K):
        return -(M_T @ K) - rho

    K = _rk4_backward(rhs, rho.astype(float), grid)
    return grid, K


def _k_on_refined(s: Scenario, grid: np.ndarray, K: np.ndarray) -> "callable":
    """Evaluator for K at arbitrary stage times, by one local RK4 substep.

    Keeps solve_m fourth-order accurate while consuming only the gridded K
    produced by solve_K: the value at an off-grid stage time is obtained by
    re-integrating K's own ODE from the nearest later grid point.
    """
    A, rho, r = s.network.A, s.network.rho, s.costs.r
    M_T = (A - r * np.eye(s.n)).T

    def rhs(K_val):
        return -(M_T @ K_val) - rho

    def at(t: float, hint: int) -> np.ndarray:
        t_hi = grid[hint]
        if t == t_hi:
            return K[hint]
        h = t - t_hi  # negative: step backward from the known later value
        x = K[hint]
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return at


def solve_m(s: Scenario, grid: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Backward-integrate the scalar offset ODE on the K grid.

    m(T) = 0 exactly and m <= 0 throughout since the forcing term
    0.5 K'R^{-1}K is nonnegative.
    """
    K = np.asarray(K, dtype=float)
    if K.shape[0] != len(grid):
        raise ValueError(f"grid mismatch: K has {K.shape[0]} rows for "
                         f"{len(grid)} grid points")
    r = s.costs.r
    Rinv = np.linalg.inv(s.costs.R)
    k_at = _k_on_refined(s, grid, K)
    M = len(grid) - 1
    m = np.empty(M + 1)
    m[M] = 0.0
    x = 0.0
    for k in range(M - 1, -1, -1):
        t1, t0 = grid[k + 1], grid[k]
        h = t0 - t1

        def forcing(K_val):
            return 0.5 * K_val @ Rinv @ K_val

        K_hi = K[k + 1]
        K_mid = k_at(t1 + 0.5 * h, k + 1)
        K_lo = K[k]
        k1 = r * x + forcing(K_hi)
        k2 = r * (x + 0.5 * h * k1) + forcing(K_mid)
        k3 = r * (x + 0.5 * h * k2) + forcing(K_mid)
        k4 = r * (x + h * k3) + forcing(K_lo)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(x):
            raise NumericalError(f"m integration lost finiteness at t={t0:.6g}")
        m[k] = x
    return m


def optimal_effort(K: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Suggested effort path E*[k] = R^{-1} K[k]."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    E = np.linalg.solve(np.atleast_2d(R), K.T).T
    if not np.all(np.isfinite(E)):
        raise NumericalError("effort path contains non-finite entries")
    return E


def principal_cost(K0: np.ndarray, m0: float, y0: np.ndarray, ja_floor: float) -> float:
    """Minimum expected cost of the owner: K_0'y_0 + m_0 - floor."""
    return float(np.dot(np.atleast_1d(K0), np.atleast_1d(y0)) + m0 - ja_floor)


def solve_lq(s: Scenario, steps: int | None = None) -> LQSolution:
    """Solve both ODEs and assemble the full LQ contract solution.

    With steps omitted the grid matches the scenario's simulation grid, so
    the resulting effort and sensitivity paths can be fed to the simulator
    directly.
    """
    if steps is None:
        steps = s.n_steps()
    grid, K = solve_K(s, steps)
    m = solve_m(s, grid, K)
    E = optimal_effort(K, s.costs.R)
    jp = principal_cost(K[0], m[0], s.network.y0, s.costs.ja_floor)
    return LQSolution(grid=grid, K=K, m=m, E_star=E, J_P_star=jp)


def closed_form_K_scalar(A: float, rho: float, r: float, T: float, t) -> np.ndarray:
    """One-node closed form of the sensitivity ODE.

    K(t) = rho/(A-r) * ((A-r+1) e^{(A-r)(T-t)} - 1), with the analytic limit
    rho * (1 + T - t) when |A - r| < 1e-9.  Evaluated through expm1 so the
    two branches join smoothly.
    """
    t = np.asarray(t, dtype=float)
    tau = T - t
    eps = A - r
    if abs(eps) < 1e-9:
        return rho * (1.0 + tau)
    x = eps * tau
    # rho/eps*((eps+1)e^x - 1) = rho*(e^x + tau*expm1(x)/x), stable near eps=0
    phi = np.where(x == 0.0, 1.0, np.expm1(x) / np.where(x == 0.0, 1.0, x))
    return rho * (np.exp(x) + tau * phi)


def closed_form_K_matrix(s: Scenario, t) -> np.ndarray:
    """Network closed form via the matrix exponential.

    K(t) = (M')^{-1} [ (M' + I) e^{M'(T-t)} - I ] rho with M = A - r I.
    The operand order puts rho rightmost (matrix acting on a vector); this is
    the ordering under which the ODE residual vanishes.  Raises
    SingularMatrixError when (A - r I) is not safely invertible.
    """
    A, rho, r, T = s.network.A, s.network.rho, s.costs.r, s.costs.horizon
    n = s.n
    Mt = (A - r * np.eye(n)).T
    sv = np.linalg.svd(Mt, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise SingularMatrixError("(A - r I) is singular; use solve_K instead")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((len(t_arr), n))
    eye = np.eye(n)
    for i, ti in enumerate(t_arr):
        expM = scipy.linalg.expm(Mt * (T - ti))
        out[i] = np.linalg.solve(Mt, ((Mt + eye) @ expM - eye) @ rho)
    return out if np.ndim(t) else out[0]


def payment_regime(delta_p: float, delta_a: float, r: float, T: float) -> PaymentRegime:
    """Classify the intermediate-payment optimum.

    The pointwise payment coefficient is (delta_p - delta_a - e^{-r(T-t)}).
    difference >= 1 keeps it nonnegative for all t (no payment); <= 0 keeps
    it negative (payment unbounded, impractical since the terminal transfer
    then goes negative); in between the sign flips once at
    e^{-r(T-t)} = delta_p - delta_a.
    """
    diff = delta_p - delta_a
    if diff >= 1.0:
        return PaymentRegime(tag="no_intermediate_payment")
    if diff <= 0.0:
        return PaymentRegime(tag="unbounded_impractical")
    if r == 0.0:
        # coefficient is diff - 1 < 0 everywhere: switch sits at t = 0
        return PaymentRegime(tag="time_dependent_degenerate", switch_time=0.0)
    t_star = T + math.log(diff) / r
    t_star = min(max(t_star, 0.0), T)
    return PaymentRegime(tag="time_dependent_degenerate", switch_time=t_star)


@dataclass(frozen=True)
class ContractCoefficients:
    """Per-grid-point coefficients of the optimal payment flow.

    The cumulative payment obeys
    dc = (r c + drift) dt + gain' (dY - A Y dt)
    with drift = -0.5 K'R^{-1}K and gain = -K, starting from c_0.
    """

    grid: np.ndarray
    drift: np.ndarray   # (M+1,)
    gain: np.ndarray    # (M+1, n)
    r: float
    c0: float


def contract_coefficients(solution: LQSolution, s: Scenario) -> ContractCoefficients:
    """Extract the payment-flow coefficients from a converged solution."""
    Rinv = np.linalg.inv(s.costs.R)
    drift = -0.5 * np.einsum("ki,ij,kj->k", solution.K, Rinv, solution.K)
    c0 = -s.costs.ja_floor / abs(s.costs.gamma)
    return ContractCoefficients(grid=solution.grid, drift=drift,
                                gain=-solution.K, r=s.costs.r, c0=c0)


def ode_residual(grid: np.ndarray, values: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Max-norm residual |dx/dt - rhs| on interior grid points.

    The time derivative is a fourth-order five-point centered stencil, so
    residuals of an accurate solution sit near rounding level rather than at
    the O(dt^2) floor a three-point stencil would impose.  Requires a
    uniform grid with at least five points; returns residuals for indices
    2..M-2.
    """
    values = np.asarray(values, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    h = grid[1] - grid[0]
    if not np.allclose(np.diff(grid), h, rtol=1e-9):
        raise ValueError("residual check requires a uniform grid")
    if len(grid) < 5:
        raise ValueError("residual check requires at least five grid points")
    deriv = (-values[4:] + 8.0 * values[3:-1] - 8.0 * values[1:-3] + values[:-4]) / (12.0 * h)
    return np.max(np.abs(deriv - rhs[2:-2]), axis=-1)


def solution_to_csv(solution: LQSolution) -> str:
    """Serialize to CSV with columns t, K_1..K_n, m, E_1..E_n.

    Deterministic 17-significant-digit formatting.
    """
    n = solution.K.shape[1]
    buf = io.StringIO()
    header = ["t"] + [f"K_{i+1}" for i in range(n)] + ["m"] + [f"E_{i+1}" for i in range(n)]
    buf.write(",".join(header) + "\n")
    for k, t in enumerate(solution.grid):
        row = [t, *solution.K[k], solution.m[k], *solution.E_star[k]]
        buf.write(",".join(format(float(x), ".17g") for x in row) + "\n")
    return buf.getvalue()

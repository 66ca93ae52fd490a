"""Seeded Monte-Carlo simulation of risk, payment, and income processes.

Random numbers come from a counter-based Philox generator keyed by the
scenario seed.  The increment for (path p, step k, node i) occupies the fixed
stream position (p * steps + k) * n + i, so draws are a pure function of
(seed, path, step) and never depend on ensemble size, evaluation order, or
thread count.  Paired experiments (deviation tests, volatility comparisons)
reuse increments exactly, either implicitly by sharing a seed and grid or
explicitly by passing an increments array.

The income process is integrated in discounted form, d(e^{-rt} M) with exact
interest accrual per step.  For a linear terminal cost this makes the
participation identity E[J_A(E*)] = floor hold exactly at any step size, so
deterministic checks meet tight tolerances without tiny steps.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .lq import NumericalError
from .model import Scenario, default_effort_box

__all__ = [
    "EffortPolicy",
    "GriddedEffort",
    "FeedbackEffort",
    "PerturbedEffort",
    "ContractPolicy",
    "TerminalCost",
    "linear_terminal_cost",
    "PathEnsemble",
    "brownian_increments",
    "simulate_risk",
    "simulate_contract",
    "ensemble_stats",
    "stats_to_csv",
]


class EffortPolicy:
    """Base class; subclasses emit per-path effort for a simulation step."""

    def efforts(self, k: int, t: float, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class GriddedEffort(EffortPolicy):
    """Deterministic effort path sampled on the simulation grid.

    path has shape (steps+1, n); step k applies path[k] on [t_k, t_{k+1}).
    """

    path: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "path", np.atleast_2d(np.asarray(self.path, dtype=float)))

    def efforts(self, k, t, Y):
        return np.broadcast_to(self.path[k], Y.shape)


@dataclass(frozen=True)
class FeedbackEffort(EffortPolicy):
    """State-feedback policy; fn maps (t, Y[paths, n]) to efforts[paths, n]."""

    fn: Callable[[float, np.ndarray], np.ndarray]

    def efforts(self, k, t, Y):
        return np.asarray(self.fn(t, Y), dtype=float)


@dataclass(frozen=True)
class PerturbedEffort(EffortPolicy):
    """Base policy plus a gridded deviation, clamped to the effort box."""

    base: EffortPolicy
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.atleast_2d(np.asarray(self.delta, dtype=float)))

    def efforts(self, k, t, Y):
        return self.base.efforts(k, t, Y) + self.delta[k]


@dataclass(frozen=True)
class ContractPolicy:
    """The (zeta, p, c0) triple plus the terminal-payment rule.

    zeta is the payment sensitivity path (steps+1, n), p the intermediate
    payment path (steps+1,), both on the simulation grid; c0 is the virtual
    initial payment actually disbursed at T through c_T = c_0 + sum(dc).
    """

    zeta: np.ndarray
    p: np.ndarray
    c0: float
    terminal_rule: str = "c_T = c_0 + integral of dc_t"

    def __post_init__(self):
        object.__setattr__(self, "zeta", np.atleast_2d(np.asarray(self.zeta, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost h of the manager with first and second derivatives.

    Must be decreasing (deriv < 0) and convex.  The linear default covers
    every shipped scenario; a curved h exercises the risk-compensation term
    of the income drift.
    """

    value: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    second_deriv: Callable[[np.ndarray], np.ndarray]
    linear_slope: float | None = None


def linear_terminal_cost(gamma: float) -> TerminalCost:
    if gamma >= 0:
        raise ValueError("terminal cost slope must be negative")
    return TerminalCost(
        value=lambda M: gamma * M,
        deriv=lambda M: np.full_like(np.asarray(M, dtype=float), gamma),
        second_deriv=lambda M: np.zeros_like(np.asarray(M, dtype=float)),
        linear_slope=gamma,
    )


@dataclass(frozen=True)
class PathEnsemble:
    """Seeded trajectory bundle.

    Y is (paths, steps+1, n); increments holds the Brownian increments
    actually consumed, (paths, steps, n).  After simulate_contract the
    payment c, income M, and the running discounted manager cost are
    attached with shape (paths, steps+1).  effort_cost_running accumulates
    only the effort part of the running cost; the payment part is folded in
    by simulate_contract (it depends on the contract, not the paths).
    """

    seed: int
    dt: float
    times: np.ndarray
    Y: np.ndarray
    increments: np.ndarray
    effort_cost_running: np.ndarray
    effort_l1: np.ndarray
    sigma_l2: np.ndarray
    vol_bound_ok: bool
    c: np.ndarray | None = None
    income: np.ndarray | None = None
    fa_running: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]


def brownian_increments(seed: int, n_paths: int, n_steps: int, n: int, dt: float) -> np.ndarray:
    """Normal(0, dt) increments from a Philox stream keyed by the seed.

    Path p's block occupies stream positions [p*n_steps*n, (p+1)*n_steps*n),
    so any prefix of paths is reproduced identically regardless of how many
    paths are requested.
    """
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return gen.standard_normal((n_paths, n_steps, n)) * np.sqrt(dt)


def simulate_risk(s: Scenario, policy: EffortPolicy,
                  increments: np.ndarray | None = None,
                  n_paths: int | None = None,
                  e_max: np.ndarray | None = None) -> PathEnsemble:
    """Euler-Maruyama paths of dY = A Y dt - E dt + Sigma(Y) dB.

    Pass ``increments`` to reuse draws from another run (common random
    numbers); otherwise they are generated from the scenario seed.  Efforts
    are clamped to the box [0, e_max]; a GriddedEffort path violating the
    box is rejected up front rather than silently clipped.
    """
    n = s.n
    steps = s.n_steps()
    dt = s.costs.horizon / steps
    times = s.time_grid()
    if n_paths is None:
        n_paths = s.sim.n_paths if increments is None else increments.shape[0]
    if e_max is None:
        suggested = policy.path if isinstance(policy, GriddedEffort) else None
        e_max = default_effort_box(s, suggested)
    e_max = np.broadcast_to(np.asarray(e_max, dtype=float), (n,))

    if increments is None:
        increments = brownian_increments(s.sim.seed, n_paths, steps, n, dt)
    else:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (n_paths, steps, n):
            raise ValueError(f"increments shape {increments.shape} does not match "
                             f"({n_paths}, {steps}, {n})")

    if isinstance(policy, GriddedEffort):
        if policy.path.shape != (steps + 1, n):
            raise ValueError(f"gridded effort shape {policy.path.shape} does not "
                             f"match grid ({steps + 1}, {n})")
        if np.any(policy.path < -1e-12) or np.any(policy.path > e_max + 1e-9):
            raise ValueError("gridded effort leaves the admissible box [0, e_max]")

    A = s.network.A
    vol = s.network.volatility
    cost_model = s.costs.effort_cost_model()
    disc = np.exp(-s.costs.r * times)

    Y = np.empty((n_paths, steps + 1, n))
    Y[:, 0, :] = s.network.y0
    eff_cost = np.zeros((n_paths, steps + 1))
    eff_l1 = np.zeros(n_paths)
    sig_l2 = np.zeros(n_paths)
    ones = np.ones(n)

    for k in range(steps):
        Yk = Y[:, k, :]
        if not np.all(np.isfinite(Yk)):
            bad = np.argwhere(~np.isfinite(Yk))[0]
            raise NumericalError(f"non-finite risk state at path {bad[0]}, step {k}")
        E = np.clip(policy.efforts(k, times[k], Yk), 0.0, e_max)
        drift = Yk @ A.T - E
        if vol.kind == "zero":
            noise = 0.0
        else:
            sig = vol.sigma(Yk)
            noise = np.einsum("pij,pj->pi", sig, increments[:, k, :]) \
                if sig.shape[0] > 1 else increments[:, k, :] @ sig[0].T
            sig_l2 += np.sum((sig @ ones) ** 2, axis=-1) * dt
        Y[:, k + 1, :] = Yk + drift * dt + noise
        eff_cost[:, k + 1] = eff_cost[:, k] + disc[k] * cost_model.value(E) * dt
        eff_l1 += np.sqrt(np.sum(E * E, axis=-1)) * dt

    return PathEnsemble(
        seed=s.sim.seed, dt=dt, times=times, Y=Y, increments=increments,
        effort_cost_running=eff_cost, effort_l1=eff_l1, sigma_l2=sig_l2,
        vol_bound_ok=bool(np.all(sig_l2 <= vol.l2_cap)),
    )


def simulate_contract(s: Scenario, contract: ContractPolicy,
                      suggested: np.ndarray, ensemble: PathEnsemble,
                      terminal_cost: TerminalCost | None = None) -> PathEnsemble:
    """Integrate the payment and income processes along realized risk paths.

    The income drift compensates discounted future revenue, offsets the
    running cost at the suggested effort, rewards the observable risk
    innovation through zeta, and (for curved terminal costs) adds the
    volatility compensation proportional to h''.  The manager's actual
    effort enters only through the realized dY.

    Returns a new ensemble carrying c, income, and fa_running.
    """
    steps = len(ensemble.times) - 1
    n = s.n
    suggested = np.atleast_2d(np.asarray(suggested, dtype=float))
    if suggested.shape != (steps + 1, n):
        raise ValueError("suggested effort grid does not match the ensemble grid")
    if contract.zeta.shape != (steps + 1, n) or contract.p.shape != (steps + 1,):
        raise ValueError("contract grids do not match the ensemble grid")
    if np.any(contract.p < -1e-12) or np.any(contract.p > s.costs.p_max + 1e-9):
        raise ValueError("intermediate payment leaves the admissible set [0, p_max]")

    if terminal_cost is None:
        terminal_cost = linear_terminal_cost(s.costs.gamma)
    r = s.costs.r
    dt = ensemble.dt
    times = ensemble.times
    disc = np.exp(-r * times)
    cost_model = s.costs.effort_cost_model()
    vol = s.network.volatility
    A = s.network.A
    P = ensemble.n_paths

    # running cost at the suggested effort, used by the income drift
    f_eff_sugg = np.array([float(cost_model.value(suggested[k])) for k in range(steps + 1)])
    f_star = f_eff_sugg - s.costs.delta_a * contract.p

    income = np.empty((P, steps + 1))
    income[:, 0] = contract.c0
    linear = terminal_cost.linear_slope is not None

    if linear:
        gamma = terminal_cost.linear_slope
        m_disc = disc[0] * income[:, 0].copy()
        for k in range(steps):
            Yk, Yk1 = ensemble.Y[:, k, :], ensemble.Y[:, k + 1, :]
            innov = Yk1 - Yk - (Yk @ A.T) * dt + suggested[k] * dt
            q = (-f_star[k] / gamma) * dt + (innov @ contract.zeta[k]) / gamma
            m_disc = m_disc + disc[k] * q
            income[:, k + 1] = m_disc / disc[k + 1]
    else:
        M = income[:, 0].copy()
        for k in range(steps):
            hp = terminal_cost.deriv(M)
            if np.any(hp == 0.0):
                raise NumericalError("terminal cost derivative vanished; income "
                                     "drift is undefined")
            hval = terminal_cost.value(M)
            hpp = terminal_cost.second_deriv(M)
            Yk, Yk1 = ensemble.Y[:, k, :], ensemble.Y[:, k + 1, :]
            innov = Yk1 - Yk - (Yk @ A.T) * dt + suggested[k] * dt
            if vol.kind == "zero":
                quad = 0.0
            else:
                sig = vol.sigma(Yk)
                sz = np.einsum("pji,j->pi", sig, contract.zeta[k]) \
                    if sig.shape[0] > 1 else contract.zeta[k] @ sig[0]
                quad = np.sum(sz * sz, axis=-1)
            drift = (r * hval / hp - f_star[k] / hp
                     - 0.5 * (hpp / hp) * quad / hp ** 2)
            M = M + drift * dt + (innov @ contract.zeta[k]) / hp
            income[:, k + 1] = M

    paid = np.concatenate([[0.0], np.cumsum(contract.p[:-1] * dt)])
    c = income - paid[None, :]

    pay_cost_running = np.concatenate(
        [[0.0], np.cumsum(disc[:-1] * s.costs.delta_a * contract.p[:-1] * dt)])
    fa_running = ensemble.effort_cost_running - pay_cost_running[None, :]

    return replace(ensemble, c=c, income=income, fa_running=fa_running)


@dataclass(frozen=True)
class EnsembleStats:
    times: np.ndarray
    mean_Y: np.ndarray       # (steps+1, n)
    var_Y: np.ndarray        # (steps+1, n)
    quantiles_Y: np.ndarray  # (len(qs), steps+1, n)
    qs: tuple
    mean_c: np.ndarray | None = None
    var_c: np.ndarray | None = None
    mean_income: np.ndarray | None = None
    var_income: np.ndarray | None = None


def _var(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Unbiased sample variance; a single observation has variance zero."""
    if x.shape[axis] < 2:
        return np.zeros(x.shape[:axis] + x.shape[axis + 1:])
    return np.var(x, axis=axis, ddof=1)


def ensemble_stats(e: PathEnsemble, qs=(0.05, 0.5, 0.95)) -> EnsembleStats:
    """Per-time mean, unbiased variance, and quantiles for Y, c, and M."""
    if e.n_paths < 1:
        raise ValueError("empty ensemble")
    stats = EnsembleStats(
        times=e.times,
        mean_Y=e.Y.mean(axis=0),
        var_Y=_var(e.Y),
        quantiles_Y=np.quantile(e.Y, qs, axis=0),
        qs=tuple(qs),
        mean_c=None if e.c is None else e.c.mean(axis=0),
        var_c=None if e.c is None else _var(e.c),
        mean_income=None if e.income is None else e.income.mean(axis=0),
        var_income=None if e.income is None else _var(e.income),
    )
    return stats


def stats_to_csv(stats: EnsembleStats) -> str:
    """Summary CSV: t, mean_Y_1..n, var_Y_1..n, mean_c, var_c."""
    n = stats.mean_Y.shape[1]
    buf = io.StringIO()
    header = (["t"] + [f"mean_Y_{i+1}" for i in range(n)]
              + [f"var_Y_{i+1}" for i in range(n)] + ["mean_c", "var_c"])
    buf.write(",".join(header) + "\n")
    has_c = stats.mean_c is not None
    for k, t in enumerate(stats.times):
        row = [t, *stats.mean_Y[k], *stats.var_Y[k]]
        row += [stats.mean_c[k], stats.var_c[k]] if has_c else [float("nan")] * 2
        buf.write(",".join(format(float(x), ".17g") for x in row) + "\n")
    return buf.getvalue()


def paths_to_csv(e: PathEnsemble) -> str:
    """Per-path dump: path, t, Y_1..n plus c and M when present."""
    n = e.Y.shape[2]
    buf = io.StringIO()
    header = ["path", "t"] + [f"Y_{i+1}" for i in range(n)]
    if e.c is not None:
        header += ["c", "M"]
    buf.write(",".join(header) + "\n")
    for p in range(e.n_paths):
        for k, t in enumerate(e.times):
            row = [p, t, *e.Y[p, k]]
            if e.c is not None:
                row += [e.c[p, k], e.income[p, k]]
            buf.write(",".join(format(float(x), ".17g") if i else str(int(x))
                               for i, x in enumerate(row)) + "\n")
    return buf.getvalue()

"""Manager-side verification: best response, cost estimation, IC/IR checks.

Incentive compatibility is verified statistically against a finite family of
deviations under common random numbers rather than by solving the manager's
dynamic program: the static best-response condition reduces optimality to a
pointwise comparison, and paired simulation validates the whole pipeline,
contract integrator included.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .model import CostSpec, Scenario, default_effort_box
from .sim import (ContractPolicy, EffortPolicy, GriddedEffort, PathEnsemble,
                  TerminalCost, linear_terminal_cost, simulate_contract,
                  simulate_risk)

__all__ = [
    "AgentCostEstimate",
    "DeviationResult",
    "ICReport",
    "IRResult",
    "MartingaleReport",
    "best_response_static",
    "agent_cost",
    "default_deviations",
    "verify_ic",
    "verify_ir",
    "martingale_check",
    "ic_report_text",
]


@dataclass(frozen=True)
class AgentCostEstimate:
    mean: float
    std_error: float
    n_paths: int


@dataclass(frozen=True)
class DeviationResult:
    description: str
    estimate: AgentCostEstimate
    paired_diff: float       # mean of J(dev) - J(base) on shared draws
    paired_std_error: float


@dataclass(frozen=True)
class ICReport:
    base_cost: AgentCostEstimate
    deviations: list[DeviationResult]
    passed: bool
    tolerance_sigmas: float = 3.0


@dataclass(frozen=True)
class IRResult:
    estimate: AgentCostEstimate
    target: float
    passed: bool
    tolerance: float


@dataclass(frozen=True)
class MartingaleReport:
    checkpoints: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    target: float
    max_abs_deviation: float
    passed: bool


def best_response_static(zeta: np.ndarray, p: float, costs: CostSpec,
                         e_max: np.ndarray | None = None) -> np.ndarray:
    """Pointwise cost-minimizing effort under incentive zeta and payment p.

    The response maximizes zeta'E - f_A(t, p, E); with separable costs the
    payment term drops out, leaving the marginal-cost inversion projected
    onto the admissible box.  Exact for the quadratic cost with diagonal R
    and for any separable per-node convex cost.
    """
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    if not np.all(np.isfinite(zeta)):
        raise ValueError("zeta contains non-finite entries")
    model = costs.effort_cost_model()
    e = model.marginal_inverse(zeta)
    lo = np.zeros_like(e)
    if e_max is None:
        return np.maximum(e, lo)
    return np.clip(e, lo, np.broadcast_to(np.asarray(e_max, dtype=float), e.shape))


def _path_costs(s: Scenario, withcontract: PathEnsemble,
                terminal_cost: TerminalCost) -> np.ndarray:
    """Realized discounted manager cost per path."""
    disc_T = np.exp(-s.costs.r * withcontract.times[-1])
    return withcontract.fa_running[:, -1] + disc_T * terminal_cost.value(
        withcontract.income[:, -1])


def agent_cost(s: Scenario, contract: ContractPolicy, policy: EffortPolicy,
               suggested: np.ndarray | None = None,
               increments: np.ndarray | None = None,
               terminal_cost: TerminalCost | None = None,
               e_max: np.ndarray | None = None,
               _return_paths: bool = False):
    """Monte-Carlo estimate of the manager's expected cost under a policy.

    The risk paths follow ``policy`` (the manager's actual effort); the
    contract reacts only to the realized risk and the suggested effort,
    which defaults to the static best response along the zeta path.
    """
    if suggested is None:
        box = e_max if e_max is not None else default_effort_box(s)
        suggested = np.stack([
            best_response_static(z, float(pk), s.costs, box)
            for z, pk in zip(contract.zeta, contract.p)])
    if terminal_cost is None:
        terminal_cost = linear_terminal_cost(s.costs.gamma)
    if e_max is None:
        e_max = default_effort_box(s, suggested)
    ens = simulate_risk(s, policy, increments=increments, e_max=e_max)
    ens = simulate_contract(s, contract, suggested, ens, terminal_cost)
    costs = _path_costs(s, ens, terminal_cost)
    est = AgentCostEstimate(
        mean=float(costs.mean()),
        std_error=float(costs.std(ddof=1) / np.sqrt(len(costs))) if len(costs) > 1 else 0.0,
        n_paths=len(costs),
    )
    if _return_paths:
        return est, costs, ens
    return est


def default_deviations(suggested: np.ndarray, grid: np.ndarray,
                       e_max: np.ndarray) -> list[tuple[str, GriddedEffort]]:
    """Standard deviation family around a suggested effort path.

    Multiplicative scalings, per-node zeroing, a time-reversed path, edge-held
    time shifts both ways, the constant time-average, and an additive bump.
    Ten members for a one-node system; grows with the node count through the
    per-node zeroing block.  All paths are clamped to [0, e_max].
    """
    suggested = np.atleast_2d(suggested)
    steps1, n = suggested.shape
    out: list[tuple[str, GriddedEffort]] = []

    def clamp(path):
        return np.clip(path, 0.0, e_max)

    for scale in (0.5, 0.8, 1.2, 1.5):
        out.append((f"scaled x{scale}", GriddedEffort(clamp(scale * suggested))))
    for i in range(n):
        z = suggested.copy()
        z[:, i] = 0.0
        out.append((f"node {i+1} zeroed", GriddedEffort(clamp(z))))
    out.append(("time-reversed", GriddedEffort(clamp(suggested[::-1]))))

    shift = max(1, (steps1 - 1) // 10)
    fwd = np.concatenate([np.repeat(suggested[:1], shift, axis=0), suggested[:-shift]])
    bwd = np.concatenate([suggested[shift:], np.repeat(suggested[-1:], shift, axis=0)])
    out.append(("shifted +10% of horizon", GriddedEffort(clamp(fwd))))
    out.append(("shifted -10% of horizon", GriddedEffort(clamp(bwd))))

    out.append(("constant time-average", GriddedEffort(
        clamp(np.broadcast_to(suggested.mean(axis=0), suggested.shape).copy()))))
    bump = 0.2 * max(float(np.max(np.abs(suggested))), 1e-2)
    out.append(("additive +20% of peak", GriddedEffort(clamp(suggested + bump))))
    return out


def verify_ic(s: Scenario, contract: ContractPolicy, suggested: np.ndarray,
              deviations: list[tuple[str, EffortPolicy]] | None = None,
              terminal_cost: TerminalCost | None = None,
              tolerance_sigmas: float = 3.0) -> ICReport:
    """Paired deviation test of incentive compatibility.

    Every deviation reuses the base run's Brownian increments; the report
    passes iff each paired cost difference J(dev) - J(E*) clears
    -tolerance_sigmas standard errors.  Statistical failure is a verdict,
    not an exception.
    """
    suggested = np.atleast_2d(np.asarray(suggested, dtype=float))
    e_max = default_effort_box(s, suggested)
    if deviations is None:
        deviations = default_deviations(suggested, s.time_grid(), e_max)
    if not deviations:
        raise ValueError("need at least one deviation")
    if terminal_cost is None:
        terminal_cost = linear_terminal_cost(s.costs.gamma)

    base_est, base_paths, base_ens = agent_cost(
        s, contract, GriddedEffort(suggested), suggested=suggested,
        terminal_cost=terminal_cost, e_max=e_max, _return_paths=True)

    results = []
    passed = True
    for label, policy in deviations:
        est, dev_paths, _ = agent_cost(
            s, contract, policy, suggested=suggested,
            increments=base_ens.increments, terminal_cost=terminal_cost,
            e_max=e_max, _return_paths=True)
        diff = dev_paths - base_paths
        diff_mean = float(diff.mean())
        diff_se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        ok = diff_mean >= -tolerance_sigmas * diff_se - 1e-9
        passed = passed and ok
        results.append(DeviationResult(label, est, diff_mean, diff_se))
    return ICReport(base_cost=base_est, deviations=results, passed=passed,
                    tolerance_sigmas=tolerance_sigmas)


def verify_ir(s: Scenario, contract: ContractPolicy, suggested: np.ndarray,
              terminal_cost: TerminalCost | None = None,
              tolerance_sigmas: float = 3.0,
              abs_floor: float = 1e-6) -> IRResult:
    """Participation check: expected cost equals the reservation floor.

    The tolerance is tolerance_sigmas standard errors with an absolute floor
    so the noiseless case is held to a tight deterministic bound.
    """
    est = agent_cost(s, contract, GriddedEffort(np.atleast_2d(suggested)),
                     suggested=np.atleast_2d(suggested), terminal_cost=terminal_cost)
    tol = max(tolerance_sigmas * est.std_error, abs_floor)
    gap = abs(est.mean - s.costs.ja_floor)
    return IRResult(estimate=est, target=s.costs.ja_floor,
                    passed=bool(gap <= tol), tolerance=tol)


def martingale_check(s: Scenario, contract: ContractPolicy, suggested: np.ndarray,
                     checkpoints=None,
                     terminal_cost: TerminalCost | None = None,
                     tolerance_sigmas: float = 3.0) -> MartingaleReport:
    """Flatness of the expected total manager cost along the horizon.

    Builds U_t = integral of discounted running cost up to t plus the
    discounted terminal cost evaluated at the current income, and asserts
    its ensemble mean stays at the reservation floor at every checkpoint.
    """
    T = s.costs.horizon
    if checkpoints is None:
        checkpoints = np.array([0.0, T / 4, T / 2, 3 * T / 4, T])
    checkpoints = np.asarray(checkpoints, dtype=float)
    if np.any(checkpoints < 0) or np.any(checkpoints > T + 1e-12):
        raise ValueError("checkpoints must lie in [0, T]")
    if terminal_cost is None:
        terminal_cost = linear_terminal_cost(s.costs.gamma)

    suggested = np.atleast_2d(np.asarray(suggested, dtype=float))
    e_max = default_effort_box(s, suggested)
    ens = simulate_risk(s, GriddedEffort(suggested), e_max=e_max)
    ens = simulate_contract(s, contract, suggested, ens, terminal_cost)

    target = s.costs.ja_floor
    means = np.empty(len(checkpoints))
    ses = np.empty(len(checkpoints))
    for j, t in enumerate(checkpoints):
        k = int(round(t / ens.dt))
        U = ens.fa_running[:, k] + np.exp(-s.costs.r * ens.times[k]) \
            * terminal_cost.value(ens.income[:, k])
        means[j] = U.mean()
        ses[j] = U.std(ddof=1) / np.sqrt(len(U)) if len(U) > 1 else 0.0
    dev = np.abs(means - target)
    tol = tolerance_sigmas * ses + 1e-9
    return MartingaleReport(
        checkpoints=checkpoints, means=means, std_errors=ses, target=target,
        max_abs_deviation=float(dev.max()), passed=bool(np.all(dev <= tol)))


def ic_report_text(report: ICReport, ir: IRResult | None = None) -> str:
    """Human-readable verification report with one row per deviation."""
    buf = io.StringIO()
    buf.write("incentive-compatibility report\n")
    buf.write(f"  base cost: {report.base_cost.mean:.6f} "
              f"(se {report.base_cost.std_error:.2e}, "
              f"{report.base_cost.n_paths} paths)\n")
    buf.write(f"  tolerance: {report.tolerance_sigmas:g} paired standard errors\n")
    for d in report.deviations:
        verdict = "ok" if d.paired_diff >= -report.tolerance_sigmas * d.paired_std_error - 1e-9 \
            else "VIOLATION"
        buf.write(f"  {d.description:<28s} diff {d.paired_diff:+.6e} "
                  f"(se {d.paired_std_error:.2e})  {verdict}\n")
    buf.write(f"  IC verdict: {'pass' if report.passed else 'FAIL'}\n")
    if ir is not None:
        buf.write(f"individual-rationality: estimate {ir.estimate.mean:.6f} "
                  f"vs floor {ir.target:.6f} (tol {ir.tolerance:.2e}) "
                  f"-> {'pass' if ir.passed else 'FAIL'}\n")
    return buf.getvalue()

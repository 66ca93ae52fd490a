"""Problem-instance data model, validation, and the scenario file format.

A scenario bundles a risk network (coupled linear drift with optional
diffusion), the cost structure of the owner/manager pair, and simulation
controls.  All types are frozen dataclasses holding read-only numpy arrays,
so instances can be shared freely across threads.

Dependency-matrix orientation
-----------------------------
``A[i, j]`` scales the influence of node ``j``'s risk level on node ``i``'s
drift: rows receive, columns emit.  Under this convention an upper-triangular
``A`` for a two-node system means node 1 is exposed to node 2 but not the
other way around.  All solvers and case studies in this package assume this
orientation.

Scenario file grammar
---------------------
Plain text, three sections::

    [network]
    n = 2
    a = 2, 0.2; 0, 2          # row-major, rows split by ';'
    rho = 5, 5
    y0 = 5, 5
    volatility = state_scaled  # zero | constant | state_scaled
    d = 0.2, 0; 0, 0.2         # required unless volatility = zero

    [costs]
    r = 0.3
    horizon = 1.0
    ja_floor = -10
    effort_cost_r = 1.5, 0; 0, 1.5
    delta_a = 0.5              # optional, default 0.5
    delta_p = 2.0              # optional, default 2.0
    gamma = -1                 # optional, default -1
    p_max = 10                 # optional, default 10
    e_max = 50, 50             # optional, default derived at run time

    [sim]
    dt = 0.001
    n_paths = 10000
    seed = 20260810

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Vectors are comma-separated, matrices use ';' between rows.  Keys are
lower_snake_case and unknown keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

__all__ = [
    "ScenarioError",
    "ScenarioParseError",
    "ScenarioValidationError",
    "VolatilitySpec",
    "RiskNetwork",
    "LQEffortCost",
    "ConvexEffortCost",
    "TabulatedConvexCost",
    "CostSpec",
    "SimControls",
    "Scenario",
    "load_scenario",
    "validate_scenario",
    "serialize_scenario",
    "default_effort_box",
]

VOLATILITY_KINDS = ("zero", "constant", "state_scaled")


class ScenarioError(ValueError):
    """Base class for scenario loading and validation problems."""


class ScenarioParseError(ScenarioError):
    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ScenarioValidationError(ScenarioError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "scenario failed validation:\n  - " + "\n  - ".join(self.violations)
        )


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VolatilitySpec:
    """Diffusion coefficient of the risk dynamics.

    kind 'zero' ignores D; 'constant' uses Sigma(Y) = D; 'state_scaled'
    uses Sigma(Y) = D @ diag(Y).  ``l2_cap`` is a monitoring threshold for
    the pathwise integral of ||Sigma(Y) 1||^2; simulations record whether
    it was exceeded but never reject paths.
    """

    kind: str = "zero"
    D: np.ndarray | None = None
    l2_cap: float = math.inf

    def __post_init__(self):
        if self.D is not None:
            object.__setattr__(self, "D", _frozen(self.D))

    def sigma(self, Y: np.ndarray) -> np.ndarray:
        """Sigma(Y) for a batch of states Y with shape (paths, n).

        Returns an array of shape (paths, n, n); the zero kind returns a
        broadcastable all-zero (1, n, n).
        """
        n = Y.shape[-1]
        if self.kind == "zero":
            return np.zeros((1, n, n))
        if self.kind == "constant":
            return np.broadcast_to(self.D, (1, n, n))
        # state_scaled: (D @ diag(Y))_{ij} = D_{ij} * Y_j per path
        return self.D[None, :, :] * Y[:, None, :]


@dataclass(frozen=True)
class RiskNetwork:
    """Coupled risk dynamics dY = A Y dt - E dt + Sigma(Y) dB."""

    n: int
    A: np.ndarray
    rho: np.ndarray
    y0: np.ndarray
    volatility: VolatilitySpec = field(default_factory=VolatilitySpec)

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(np.atleast_2d(self.A)))
        object.__setattr__(self, "rho", _frozen(np.atleast_1d(self.rho)))
        object.__setattr__(self, "y0", _frozen(np.atleast_1d(self.y0)))


class LQEffortCost:
    """Quadratic effort cost 0.5 * E' R E with marginal R E."""

    kind = "lq"

    def __init__(self, R):
        self.R = _frozen(np.atleast_2d(R))

    def value(self, E: np.ndarray) -> np.ndarray:
        E = np.asarray(E, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", E, self.R, E)

    def marginal_inverse(self, zeta: np.ndarray) -> np.ndarray:
        """Solve R E = zeta for E (the unconstrained first-order point)."""
        zeta = np.asarray(zeta, dtype=float)
        return np.linalg.solve(self.R, zeta[..., None])[..., 0]

    def value_of_inverse(self, zeta: np.ndarray) -> np.ndarray:
        """0.5 * zeta' R^{-1} zeta, the effort cost at the responding effort."""
        return self.value(self.marginal_inverse(zeta))


class ConvexEffortCost:
    """Separable strictly convex effort cost sum_i g(E_i).

    ``marginal`` is the scalar derivative g' (strictly increasing, g'(0) >= 0)
    applied per node; ``value`` is g itself.  The marginal inverse is solved
    by bisection, so only g' is strictly required; when ``value`` is omitted
    it is recovered by quadrature of the marginal from zero.
    """

    kind = "general_convex"

    def __init__(self, marginal: Callable[[float], float],
                 value: Callable[[float], float] | None = None,
                 e_hi: float = 1e6):
        self.marginal = marginal
        self._value = value
        self.e_hi = float(e_hi)

    def value(self, E: np.ndarray) -> np.ndarray:
        E = np.asarray(E, dtype=float)
        if self._value is not None:
            return np.sum(np.vectorize(self._value)(E), axis=-1)
        # fallback: integrate the marginal on a fixed fine grid per entry
        flat = E.reshape(-1)
        out = np.empty_like(flat)
        for i, e in enumerate(flat):
            xs = np.linspace(0.0, e, 257)
            out[i] = np.trapz([self.marginal(x) for x in xs], xs)
        return out.reshape(E.shape[:-1] + (E.shape[-1],)).sum(axis=-1)

    def marginal_inverse(self, zeta: np.ndarray) -> np.ndarray:
        """Per-coordinate solve of g'(e) = zeta_i by bisection on [0, e_hi]."""
        zeta = np.asarray(zeta, dtype=float)
        flat = zeta.reshape(-1)
        out = np.empty_like(flat)
        for i, z in enumerate(flat):
            out[i] = self._invert_scalar(z)
        return out.reshape(zeta.shape)

    def _invert_scalar(self, z: float) -> float:
        if not np.isfinite(z):
            raise ValueError("non-finite incentive value")
        lo, hi = 0.0, self.e_hi
        if z <= self.marginal(lo):
            return lo
        if z >= self.marginal(hi):
            return hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.marginal(mid) < z:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-14 * max(1.0, hi):
                break
        return 0.5 * (lo + hi)

    def value_of_inverse(self, zeta: np.ndarray) -> np.ndarray:
        return self.value(self.marginal_inverse(zeta))


class TabulatedConvexCost(ConvexEffortCost):
    """Convex effort cost defined by a tabulated marginal g'(e).

    The table must be strictly increasing in both columns; values between
    knots are linearly interpolated and the cost value is the running
    trapezoid integral of the marginal.
    """

    def __init__(self, efforts, marginals):
        efforts = np.asarray(efforts, dtype=float)
        marginals = np.asarray(marginals, dtype=float)
        if efforts.ndim != 1 or efforts.shape != marginals.shape:
            raise ValueError("effort and marginal tables must be equal-length vectors")
        if np.any(np.diff(efforts) <= 0) or np.any(np.diff(marginals) <= 0):
            raise ValueError("tabulated marginal must be strictly increasing")
        self._e = efforts
        self._m = marginals
        cumulative = np.concatenate(
            [[0.0], np.cumsum(0.5 * (marginals[1:] + marginals[:-1]) * np.diff(efforts))]
        )
        self._cum = cumulative
        super().__init__(marginal=self._interp_marginal, value=self._interp_value,
                         e_hi=float(efforts[-1]))

    def _interp_marginal(self, e):
        return float(np.interp(e, self._e, self._m))

    def _interp_value(self, e):
        return float(np.interp(e, self._e, self._cum))

    def marginal_inverse(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=float)
        if not np.all(np.isfinite(zeta)):
            raise ValueError("non-finite incentive value")
        return np.interp(zeta, self._m, self._e)


@dataclass(frozen=True)
class CostSpec:
    """Discounting, horizon, and the cost functions of both parties.

    The baseline (LQ) cost family is
    f_AE(E) = 0.5 E'RE, f_Ap(p) = delta_a * p, f_PY(Y) = rho'Y,
    f_Pp(p) = delta_p * p, h_P(Y) = rho'Y, h_A(M) = gamma * M.
    ``effort_cost`` replaces the quadratic term with a general separable
    strictly convex cost; everything else stays linear.
    """

    r: float
    horizon: float
    ja_floor: float
    R: np.ndarray
    delta_a: float = 0.5
    delta_p: float = 2.0
    gamma: float = -1.0
    p_max: float = 10.0
    e_max: np.ndarray | None = None
    effort_cost: ConvexEffortCost | None = None

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(np.atleast_2d(self.R)))
        if self.e_max is not None:
            object.__setattr__(self, "e_max", _frozen(np.atleast_1d(self.e_max)))

    @property
    def effort_cost_kind(self) -> str:
        return "lq" if self.effort_cost is None else self.effort_cost.kind

    def effort_cost_model(self):
        if self.effort_cost is None:
            return LQEffortCost(self.R)
        return self.effort_cost


@dataclass(frozen=True)
class SimControls:
    dt: float
    n_paths: int
    seed: int


@dataclass(frozen=True)
class Scenario:
    network: RiskNetwork
    costs: CostSpec
    sim: SimControls

    @property
    def n(self) -> int:
        return self.network.n

    def n_steps(self) -> int:
        """Number of simulation steps; sim.dt must evenly divide the horizon."""
        steps = int(round(self.costs.horizon / self.sim.dt))
        if steps < 1 or abs(steps * self.sim.dt - self.costs.horizon) > 1e-9 * self.costs.horizon:
            raise ScenarioValidationError(
                [f"sim.dt={self.sim.dt} does not evenly divide horizon={self.costs.horizon}"]
            )
        return steps

    def time_grid(self) -> np.ndarray:
        steps = self.n_steps()
        return np.linspace(0.0, self.costs.horizon, steps + 1)


def default_effort_box(scenario: Scenario, suggested=None) -> np.ndarray:
    """Upper corner of the admissible effort box, one entry per node.

    An explicit ``costs.e_max`` wins.  Otherwise the box is ten times the
    peak of the suggested effort path when one is known, with a floor of
    ten times the terminal effort R^{-1} rho (or 1.0 for a costless
    network) so that zero-incentive contracts still admit test deviations.
    """
    costs = scenario.costs
    if costs.e_max is not None:
        return np.broadcast_to(costs.e_max, (scenario.n,)).astype(float)
    floor = np.linalg.solve(costs.R, scenario.network.rho)
    floor = np.maximum(np.abs(floor), 0.1)
    if suggested is not None:
        peak = np.max(np.abs(np.asarray(suggested, dtype=float)), axis=0)
        floor = np.maximum(floor, peak)
    return 10.0 * floor


# ---------------------------------------------------------------------------
# validation

def _is_symmetric_pd(M: np.ndarray) -> bool:
    if M.shape[0] != M.shape[1]:
        return False
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def validate_scenario(s: Scenario) -> list[str]:
    """Collect every violated invariant; an empty list means admissible.

    Pure: identical inputs always yield the identical list.
    """
    v: list[str] = []
    net, costs, sim = s.network, s.costs, s.sim
    n = net.n

    if not (isinstance(n, (int, np.integer)) and n >= 1):
        v.append(f"n must be a positive integer, got {n!r}")
        return v  # shape checks below are meaningless

    if net.A.shape != (n, n):
        v.append(f"A must be {n}x{n}, got {net.A.shape}")
    else:
        if not np.all(np.isfinite(net.A)):
            v.append("A must be finite")
        off = net.A[~np.eye(n, dtype=bool)]
        if off.size and np.any(off < 0):
            v.append("A off-diagonal entries must be >= 0")
    if net.rho.shape != (n,):
        v.append(f"rho must have length {n}, got shape {net.rho.shape}")
    elif np.any(net.rho < 0) or not np.all(np.isfinite(net.rho)):
        v.append("rho must be finite and componentwise >= 0")
    if net.y0.shape != (n,):
        v.append(f"y0 must have length {n}, got shape {net.y0.shape}")
    elif np.any(net.y0 <= 0) or not np.all(np.isfinite(net.y0)):
        v.append("y0 must be strictly positive")

    vol = net.volatility
    if vol.kind not in VOLATILITY_KINDS:
        v.append(f"volatility kind must be one of {VOLATILITY_KINDS}, got {vol.kind!r}")
    elif vol.kind != "zero":
        if vol.D is None:
            v.append(f"volatility kind {vol.kind!r} requires matrix d")
        elif vol.D.shape != (n, n):
            v.append(f"volatility matrix d must be {n}x{n}, got {vol.D.shape}")
        elif not np.all(np.isfinite(vol.D)):
            v.append("volatility matrix d must be finite")

    if costs.R.shape != (n, n):
        v.append(f"effort_cost_r must be {n}x{n}, got {costs.R.shape}")
    elif not _is_symmetric_pd(costs.R):
        v.append("effort_cost_r not positive definite")
    if not (np.isfinite(costs.r) and costs.r >= 0):
        v.append("r must be >= 0")
    if not (np.isfinite(costs.horizon) and costs.horizon > 0):
        v.append("horizon must be > 0")
    if not (np.isfinite(costs.ja_floor) and costs.ja_floor <= 0):
        v.append("ja_floor must be <= 0")
    if not (np.isfinite(costs.gamma) and costs.gamma < 0):
        v.append("gamma must be < 0")
    if not (np.isfinite(costs.delta_a) and costs.delta_a > 0):
        v.append("delta_a must be > 0")
    if not (np.isfinite(costs.delta_p) and costs.delta_p > 0):
        v.append("delta_p must be > 0")
    if not (np.isfinite(costs.p_max) and costs.p_max >= 0):
        v.append("p_max must be >= 0")
    if costs.e_max is not None:
        if costs.e_max.shape not in ((n,), (1,)):
            v.append(f"e_max must be scalar or length-{n}")
        elif np.any(costs.e_max <= 0):
            v.append("e_max must be > 0")

    if not (np.isfinite(sim.dt) and sim.dt > 0):
        v.append("sim.dt must be > 0")
    elif np.isfinite(costs.horizon) and costs.horizon > 0 and sim.dt >= costs.horizon:
        v.append("sim.dt must be < horizon")
    if sim.n_paths < 1:
        v.append("sim.n_paths must be >= 1")
    return v


# ---------------------------------------------------------------------------
# scenario file parsing

_NETWORK_KEYS = {"n", "a", "rho", "y0", "volatility", "d"}
_COSTS_KEYS = {"r", "horizon", "ja_floor", "effort_cost_r", "delta_a",
               "delta_p", "gamma", "p_max", "e_max"}
_SIM_KEYS = {"dt", "n_paths", "seed"}


def _parse_matrix(text: str, line_no: int) -> np.ndarray:
    rows = []
    for chunk in text.split(";"):
        entries = [e for e in chunk.split(",") if e.strip()]
        if not entries:
            raise ScenarioParseError("empty matrix row", line_no)
        try:
            rows.append([float(e) for e in entries])
        except ValueError as exc:
            raise ScenarioParseError(f"bad numeric entry ({exc})", line_no) from None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ScenarioParseError("matrix rows have unequal lengths", line_no)
    return np.array(rows)


def _parse_vector(text: str, line_no: int) -> np.ndarray:
    mat = _parse_matrix(text, line_no)
    if 1 in mat.shape:
        return mat.reshape(-1)
    raise ScenarioParseError("expected a vector, got a matrix", line_no)


def _parse_scalar(text: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ScenarioParseError(f"expected a number, got {text!r}", line_no) from None


def _parse_int(text: str, line_no: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ScenarioParseError(f"expected an integer, got {text!r}", line_no) from None


def _split_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: dict[str, tuple[str, int]] | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in ("network", "costs", "sim"):
                raise ScenarioParseError(f"unknown section [{name}]", line_no)
            if name in sections:
                raise ScenarioParseError(f"duplicate section [{name}]", line_no)
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ScenarioParseError("expected 'key = value'", line_no)
        if current is None:
            raise ScenarioParseError("key outside of any section", line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in current:
            raise ScenarioParseError(f"duplicate key {key!r}", line_no)
        current[key] = (value, line_no)
    return sections


def load_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document.

    Raises ScenarioParseError with a line diagnostic on malformed input and
    ScenarioValidationError listing every violated invariant otherwise.
    """
    sections = _split_sections(text)
    for required in ("network", "costs", "sim"):
        if required not in sections:
            raise ScenarioParseError(f"missing section [{required}]")

    allowed = {"network": _NETWORK_KEYS, "costs": _COSTS_KEYS, "sim": _SIM_KEYS}
    for name, keys in sections.items():
        for key, (_, line_no) in keys.items():
            if key not in allowed[name]:
                raise ScenarioParseError(f"unknown key {key!r} in [{name}]", line_no)

    def need(section, key):
        if key not in sections[section]:
            raise ScenarioParseError(f"missing key {key!r} in [{section}]")
        return sections[section][key]

    def opt(section, key):
        return sections[section].get(key)

    net_sec = sections["network"]
    n = _parse_int(*need("network", "n"))
    A = _parse_matrix(*need("network", "a"))
    if A.size == 1:
        A = A.reshape(1, 1)
    rho = _parse_vector(*need("network", "rho"))
    y0 = _parse_vector(*need("network", "y0"))

    vol_kind = "zero"
    if "volatility" in net_sec:
        raw, line_no = net_sec["volatility"]
        vol_kind = raw.strip().lower()
        if vol_kind not in VOLATILITY_KINDS:
            raise ScenarioParseError(
                f"volatility must be one of {VOLATILITY_KINDS}, got {raw!r}", line_no)
    D = None
    if "d" in net_sec:
        D = _parse_matrix(*net_sec["d"])
        if D.size == 1:
            D = D.reshape(1, 1)
    volatility = VolatilitySpec(kind=vol_kind, D=D)
    network = RiskNetwork(n=n, A=A, rho=rho, y0=y0, volatility=volatility)

    R = _parse_matrix(*need("costs", "effort_cost_r"))
    if R.size == 1:
        R = R.reshape(1, 1)
    kwargs = dict(
        r=_parse_scalar(*need("costs", "r")),
        horizon=_parse_scalar(*need("costs", "horizon")),
        ja_floor=_parse_scalar(*need("costs", "ja_floor")),
        R=R,
    )
    for name in ("delta_a", "delta_p", "gamma", "p_max"):
        item = opt("costs", name)
        if item is not None:
            kwargs[name] = _parse_scalar(*item)
    item = opt("costs", "e_max")
    if item is not None:
        kwargs["e_max"] = _parse_vector(*item)
    costs = CostSpec(**kwargs)

    sim = SimControls(
        dt=_parse_scalar(*need("sim", "dt")),
        n_paths=_parse_int(*need("sim", "n_paths")),
        seed=_parse_int(*need("sim", "seed")),
    )

    scenario = Scenario(network=network, costs=costs, sim=sim)
    violations = validate_scenario(scenario)
    if violations:
        raise ScenarioValidationError(violations)
    return scenario


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_matrix(M: np.ndarray) -> str:
    return "; ".join(", ".join(_fmt(x) for x in row) for row in np.atleast_2d(M))


def _fmt_vector(v: np.ndarray) -> str:
    return ", ".join(_fmt(x) for x in np.atleast_1d(v))


def serialize_scenario(s: Scenario) -> str:
    """Render a Scenario back to the file format; load(serialize(s)) == s.

    A scenario carrying a programmatic (non-LQ) effort cost cannot be
    expressed in the file format and is rejected.
    """
    if s.costs.effort_cost is not None:
        raise ScenarioError("general convex effort costs are not representable "
                            "in the scenario file format")
    net, costs, sim = s.network, s.costs, s.sim
    lines = [
        "[network]",
        f"n = {net.n}",
        f"a = {_fmt_matrix(net.A)}",
        f"rho = {_fmt_vector(net.rho)}",
        f"y0 = {_fmt_vector(net.y0)}",
        f"volatility = {net.volatility.kind}",
    ]
    if net.volatility.D is not None:
        lines.append(f"d = {_fmt_matrix(net.volatility.D)}")
    lines += [
        "",
        "[costs]",
        f"r = {_fmt(costs.r)}",
        f"horizon = {_fmt(costs.horizon)}",
        f"ja_floor = {_fmt(costs.ja_floor)}",
        f"effort_cost_r = {_fmt_matrix(costs.R)}",
        f"delta_a = {_fmt(costs.delta_a)}",
        f"delta_p = {_fmt(costs.delta_p)}",
        f"gamma = {_fmt(costs.gamma)}",
        f"p_max = {_fmt(costs.p_max)}",
    ]
    if costs.e_max is not None:
        lines.append(f"e_max = {_fmt_vector(costs.e_max)}")
    lines += [
        "",
        "[sim]",
        f"dt = {_fmt(sim.dt)}",
        f"n_paths = {sim.n_paths}",
        f"seed = {sim.seed}",
        "",
    ]
    return "\n".join(lines)


def with_sim(s: Scenario, dt=None, n_paths=None, seed=None) -> Scenario:
    """Return a copy of the scenario with some simulation controls replaced."""
    sim = SimControls(
        dt=s.sim.dt if dt is None else float(dt),
        n_paths=s.sim.n_paths if n_paths is None else int(n_paths),
        seed=s.sim.seed if seed is None else int(seed),
    )
    return replace(s, sim=sim)

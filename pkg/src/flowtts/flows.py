"""Closed-form linear-interpolant flows over Gaussian mixtures.

The interpolant is x_t = (1 - t) * x0 + t * eps with eps ~ N(0, I),
t = 1 pure noise, t = 0 data.  For a Gaussian-mixture prior over x0 every
quantity of interest has an exact expression obtained by per-component
Gaussian conditioning:

  marginal      x_t | c  ~  N((1-t) mu_c, ((1-t)^2 s_c^2 + t^2) I)
  velocity      u(x, t)  =  E[eps - x0 | x_t = x]
  score         grad log p_t(x), mixture-Gaussian gradient
  lookahead     x - t * u(x, t), which equals E[x0 | x_t = x] exactly

so samplers built on top can be checked against independent oracles.

velocity/score/lookahead broadcast over leading axes: x may be a single
(d,) vector or a batch (n, d).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .ledger import BudgetLedger

# Marginal variances are clamped below this to avoid division blow-ups
# near t=0 when a component scale is tiny.
VAR_FLOOR = 1e-12

# The velocity-relation score divides by t; below this floor the direct
# mixture form must be used instead.
SCORE_TIME_FLOOR = 1e-6

_ZERO_SNAP = 1e-12


def _as_readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FlowSpec:
    """Analytic description of a linear-interpolant flow.

    The prior over x0 is a mixture of isotropic Gaussians: component c has
    weight ``weights[c]``, mean ``means[c]`` (dim d) and standard deviation
    ``scales[c]``.
    """

    dim: int
    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_readonly(self.weights))
        object.__setattr__(self, "means", _as_readonly(np.atleast_2d(self.means)))
        object.__setattr__(self, "scales", _as_readonly(self.scales))
        if self.weights.ndim != 1 or self.scales.ndim != 1:
            raise ValueError("weights and scales must be 1-D")
        c = len(self.weights)
        if self.means.shape != (c, self.dim):
            raise ValueError(
                f"means shape {self.means.shape} != ({c}, {self.dim})"
            )
        if len(self.scales) != c:
            raise ValueError("scales length must match weights")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()}, not 1")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.scales))):
            raise ValueError("spec parameters must be finite")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @classmethod
    def single(cls, mean, scale: float) -> "FlowSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(dim=len(mean), weights=np.ones(1), means=mean[None, :],
                   scales=np.array([scale]))

    @classmethod
    def from_components(cls, dim: int, components) -> "FlowSpec":
        """components: iterable of (weight, mean, scale)."""
        w, m, s = zip(*components)
        return cls(dim=dim, weights=np.array(w), means=np.array(m),
                   scales=np.array(s))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in m],
                 "scale": float(s)}
                for w, m, s in zip(self.weights, self.means, self.scales)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowSpec":
        comps = [(c["weight"], c["mean"], c["scale"]) for c in obj["components"]]
        return cls.from_components(int(obj["dim"]), comps)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FlowSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True, eq=False)
class LatentState:
    """A point on the trajectory: value, time, and RNG lineage.

    seed_path identifies the candidate's RNG stream; children extend the
    parent's path, so every candidate owns a disjoint stream.
    """

    value: np.ndarray
    time: float
    seed_path: tuple = ()
    parent: "int | None" = None

    def __post_init__(self):
        object.__setattr__(self, "value", _as_readonly(self.value))
        if not (0.0 <= self.time <= 1.0):
            raise ValueError(f"time {self.time} outside [0, 1]")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("state value must be finite")
        object.__setattr__(self, "seed_path", tuple(int(p) for p in self.seed_path))


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Strictly decreasing time grid from 1.0 to 0.0."""

    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _as_readonly(self.times))
        t = self.times
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("schedule needs at least two times")
        if t[0] != 1.0 or t[-1] != 0.0:
            raise ValueError("schedule must run from 1.0 to 0.0")
        if np.any(np.diff(t) >= 0):
            raise ValueError("schedule times must be strictly decreasing")

    @property
    def count(self) -> int:
        """Number of steps T."""
        return len(self.times) - 1

    @classmethod
    def uniform(cls, steps: int) -> "StepSchedule":
        if steps < 1:
            raise ValueError("need at least one step")
        return cls(np.linspace(1.0, 0.0, steps + 1))

    @classmethod
    def from_json(cls, obj) -> "StepSchedule":
        if isinstance(obj, int):
            return cls.uniform(obj)
        if isinstance(obj, dict):
            return cls.uniform(int(obj["T"]))
        return cls(np.asarray(obj, dtype=np.float64))

    def index_of(self, t: float) -> int:
        """Index of an exact grid time; raises if t is not on the grid."""
        idx = int(np.argmin(np.abs(self.times - t)))
        if self.times[idx] != t:
            raise ValueError(f"time {t} is not on the schedule grid")
        return idx

    def nearest_index(self, t: float) -> int:
        """Index of the grid time closest to t (ties to the larger time)."""
        return int(np.argmin(np.abs(self.times - t)))


# ---------------------------------------------------------------------------
# closed-form quantities


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time {t} outside [0, 1]")
    return t


def marginal_params(spec: FlowSpec, t: float):
    """Per-component marginal of x_t: (weights, means (C,d), variances (C,)).

    Mixture weights of the x_t marginal equal the prior weights; variances
    are floored at VAR_FLOOR.
    """
    t = _check_time(t)
    means = (1.0 - t) * spec.means
    var = (1.0 - t) ** 2 * spec.scales ** 2 + t * t
    return spec.weights, means, np.maximum(var, VAR_FLOOR)


def _log_component_densities(spec, x, t):
    """log w_c + log N(x; m_c(t), v_c(t) I), shape (..., C)."""
    w, means, var = marginal_params(spec, t)
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None, :] - means          # (..., C, d)
    sq = np.sum(diff * diff, axis=-1)       # (..., C)
    return (np.log(w) - 0.5 * (spec.dim * np.log(2.0 * np.pi * var) + sq / var),
            diff, var)


def _responsibilities(spec, x, t):
    logp, diff, var = _log_component_densities(spec, x, t)
    logp = logp - logsumexp(logp, axis=-1, keepdims=True)
    return np.exp(logp), diff, var


def log_marginal_density(spec: FlowSpec, x, t: float):
    """log p_t(x) of the analytic marginal; broadcasts over leading axes."""
    logp, _, _ = _log_component_densities(spec, x, t)
    return logsumexp(logp, axis=-1)


def velocity(spec: FlowSpec, x, t: float):
    """Exact conditional expectation u(x, t) = E[eps - x0 | x_t = x].

    Per component, Gaussian conditioning gives
        E[eps - x0 | x, c] = (t - (1-t) s_c^2) / v_c * (x - m_c) - mu_c
    and the mixture combines components by posterior responsibilities.
    """
    r, diff, var = _responsibilities(spec, x, t)
    t = float(t)
    coef = (t - (1.0 - t) * spec.scales ** 2) / var          # (C,)
    per = coef[:, None] * diff - spec.means                   # (..., C, d)
    return np.sum(r[..., None] * per, axis=-2)


def score(spec: FlowSpec, x, t: float):
    """Gradient of log p_t at x, computed from the mixture form directly."""
    r, diff, var = _responsibilities(spec, x, t)
    per = -diff / var[:, None]
    return np.sum(r[..., None] * per, axis=-2)


def score_from_velocity(spec: FlowSpec, x, t: float):
    """Score via the velocity relation: -((1-t) u + x) / t.

    Valid only for t >= SCORE_TIME_FLOOR; below that the direct mixture
    form is mandatory (the relation divides by t).
    """
    t = _check_time(t)
    if t < SCORE_TIME_FLOOR:
        raise ValueError(
            f"velocity-relation score undefined below t={SCORE_TIME_FLOOR}"
        )
    x = np.asarray(x, dtype=np.float64)
    return -((1.0 - t) * velocity(spec, x, t) + x) / t


def lookahead(state: LatentState, spec: FlowSpec,
              ledger: "BudgetLedger | None" = None,
              phase: str = "rollout") -> np.ndarray:
    """One-Euler extrapolation to t=0: x - t * u(x, t).

    With the exact velocity this equals the posterior mean E[x0 | x_t].
    Charges one velocity evaluation, except at t=0 where it is the identity
    and free by convention.
    """
    if state.time == 0.0:
        return np.array(state.value)
    u = velocity(spec, state.value, state.time)
    if ledger is not None:
        ledger.charge_velocity(phase)
    return state.value - state.time * u


# ---------------------------------------------------------------------------
# steppers


def _resolve_step(state: LatentState, dt, t_next) -> "tuple[float, float]":
    """Validate a reverse step given dt or an exact landing time.

    Passing t_next lands on that value exactly, so trajectories driven by
    a StepSchedule keep grid times bit-exact instead of accumulating
    float drift.
    """
    if t_next is not None:
        t_next = float(t_next)
        if not (0.0 <= t_next < state.time):
            raise ValueError(f"t_next {t_next} must be in [0, time)")
        return t_next - state.time, t_next
    if dt is None:
        raise ValueError("provide dt or t_next")
    if dt >= 0.0:
        raise ValueError("reverse sampling requires dt < 0")
    new_time = state.time + dt
    if new_time < -_ZERO_SNAP:
        raise ValueError(f"step past t=0 (target {new_time})")
    return dt, (0.0 if abs(new_time) <= _ZERO_SNAP else new_time)


def ode_step(state: LatentState, spec: FlowSpec, dt: "float | None" = None,
             ledger: "BudgetLedger | None" = None,
             phase: str = "advance", *,
             t_next: "float | None" = None) -> LatentState:
    """Explicit Euler step of the probability-flow ODE (one velocity eval)."""
    dt, new_time = _resolve_step(state, dt, t_next)
    u = velocity(spec, state.value, state.time)
    if ledger is not None:
        ledger.charge_velocity(phase)
    return replace(state, value=state.value + u * dt, time=new_time)


def sde_step(state: LatentState, spec: FlowSpec, dt: "float | None",
             sigma_t: float, rng: np.random.Generator,
             ledger: "BudgetLedger | None" = None,
             phase: str = "advance", *,
             t_next: "float | None" = None) -> LatentState:
    """Euler-Maruyama step of the marginal-preserving SDE.

    Reverse-time convention: dt < 0, drift (u - sigma_t^2/2 * score) times
    dt plus sigma_t * sqrt(|dt|) * xi with xi from the state's stream.
    Charges one velocity and one score evaluation.
    """
    if sigma_t < 0:
        raise ValueError("sigma_t must be nonnegative")
    dt, new_time = _resolve_step(state, dt, t_next)
    u = velocity(spec, state.value, state.time)
    s = score(spec, state.value, state.time)
    if ledger is not None:
        ledger.charge_velocity(phase)
        ledger.charge_score(phase)
    drift = u - 0.5 * sigma_t ** 2 * s
    noise = sigma_t * np.sqrt(-dt) * rng.standard_normal(spec.dim)
    return replace(state, value=state.value + drift * dt + noise, time=new_time)


def solve_ode(state: LatentState, spec: FlowSpec, schedule: StepSchedule,
              until: float = 0.0,
              ledger: "BudgetLedger | None" = None,
              phase: str = "advance") -> LatentState:
    """Euler-solve along the schedule from state.time down to ``until``.

    Both endpoints must be grid times.
    """
    i = schedule.index_of(state.time)
    j = schedule.index_of(until)
    for k in range(i, j):
        state = ode_step(state, spec, ledger=ledger, phase=phase,
                         t_next=schedule.times[k + 1])
    return state


def ode_solve_batch(spec: FlowSpec, x: np.ndarray, schedule: StepSchedule,
                    start_index: int = 0, stop_index: "int | None" = None,
                    ledger: "BudgetLedger | None" = None,
                    phase: str = "final") -> np.ndarray:
    """Vectorized Euler solve of a batch (n, d) along the schedule.

    Charges n velocity evaluations per step (one per trajectory).
    """
    x = np.array(x, dtype=np.float64)
    n = x.shape[0]
    stop = schedule.count if stop_index is None else stop_index
    for k in range(start_index, stop):
        t, t_next = schedule.times[k], schedule.times[k + 1]
        x = x + velocity(spec, x, t) * (t_next - t)
        if ledger is not None:
            ledger.charge_velocity(phase, n)
    return x


def sde_solve_batch(spec: FlowSpec, x: np.ndarray, schedule: StepSchedule,
                    sigma, rng: "np.random.Generator | None" = None,
                    noise: "np.ndarray | None" = None,
                    ledger: "BudgetLedger | None" = None,
                    phase: str = "final") -> np.ndarray:
    """Vectorized Euler-Maruyama solve of a batch (n, d).

    ``sigma`` is a constant or a callable of t.  Noise may be supplied as a
    (n, T, d) array (one stream per trajectory) or drawn per step from
    ``rng``.  Charges n velocity and n score evaluations per step.
    """
    x = np.array(x, dtype=np.float64)
    n = x.shape[0]
    sigma_fn = sigma if callable(sigma) else (lambda _t, _v=float(sigma): _v)
    if noise is None and rng is None:
        raise ValueError("provide either noise array or rng")
    for k in range(schedule.count):
        t, t_next = schedule.times[k], schedule.times[k + 1]
        dt = t_next - t
        sig = float(sigma_fn(t))
        if sig < 0:
            raise ValueError("sigma_t must be nonnegative")
        drift = velocity(spec, x, t) - 0.5 * sig ** 2 * score(spec, x, t)
        xi = noise[:, k, :] if noise is not None else rng.standard_normal(x.shape)
        x = x + drift * dt + sig * np.sqrt(-dt) * xi
        if ledger is not None:
            ledger.charge_velocity(phase, n)
            ledger.charge_score(phase, n)
    return x


# ---------------------------------------------------------------------------
# sigma schedules for the SDE


def constant_sigma(value: float):
    if value < 0:
        raise ValueError("sigma must be nonnegative")
    return lambda t: value


def linear_sigma(start: float, end: float):
    """Linear in t: sigma(1) = start (coarse, early), sigma(0) = end."""
    if start < 0 or end < 0:
        raise ValueError("sigma must be nonnegative")
    return lambda t: end + (start - end) * t

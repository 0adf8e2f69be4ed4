"""Bounded maximization of predicted recovery.

Three search strategies share one budgeted, trace-recording objective
wrapper: particle swarm (inertia plus cognitive and social pulls with
fresh uniform diagonal matrices every iteration), differential evolution
(rand/1 mutation, per-dimension crossover, strictly greedy selection),
and Bayesian optimization (Matern-5/2 Gaussian process surrogate with
expected improvement). All candidates are clamped to the search box
before evaluation, and the wrapper asserts feasibility, counts
evaluations against the budget, and keeps the best-so-far record.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import norm, qmc

from welloop.data import WellTable
from welloop.stack import StackedModel, predict_stacked
from welloop.trees import TreeEnsemble, predict
from welloop.utils import fmt, subseed_rng

_PSO_TAG = 51
_DE_TAG = 52
_BO_TAG = 53
_GP_NOISE = 1e-6
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class SurrogateError(RuntimeError):
    """The Gaussian process Gram matrix stayed non-positive-definite even
    after jitter escalation."""


class BudgetExhausted(Exception):
    """Internal signal: the evaluation budget ran out mid-search."""


@dataclass(frozen=True)
class BoundedVariable:
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"bounds reversed for {self.name!r}")


@dataclass
class SearchProblem:
    """A bounded maximization problem with an evaluation budget."""

    objective: object
    variables: tuple
    budget: int

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if not self.variables:
            raise ValueError("need at least one variable")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.variables)

    @property
    def lower(self) -> np.ndarray:
        return np.array([v.lower for v in self.variables])

    @property
    def upper(self) -> np.ndarray:
        return np.array([v.upper for v in self.variables])


@dataclass
class TraceEntry:
    index: int
    point: np.ndarray
    value: float


@dataclass
class Trace:
    """Complete evaluation record of one search run."""

    entries: list = field(default_factory=list)
    truncated: bool = False
    iteration_log: list = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(self.values)

    def best(self) -> TraceEntry:
        if not self.entries:
            raise ValueError("trace is empty")
        values = self.values
        return self.entries[int(np.argmax(values))]

    def write_csv(self, path, variable_names=None) -> None:
        names = variable_names or [
            f"u{j}" for j in range(self.entries[0].point.size)
        ]
        best = self.best_so_far()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["evaluation"] + list(names) + ["value", "best_so_far"])
            for e, b in zip(self.entries, best):
                writer.writerow(
                    [e.index] + [fmt(v) for v in e.point] + [fmt(e.value), fmt(b)]
                )


class _Evaluator:
    """Budgeted objective wrapper; every call is bound-checked, recorded,
    and counted. Raising BudgetExhausted stops the surrounding search."""

    def __init__(self, problem: SearchProblem):
        self.problem = problem
        self.lower = problem.lower
        self.upper = problem.upper
        self.trace = Trace()

    def __call__(self, u) -> float:
        if len(self.trace.entries) >= self.problem.budget:
            raise BudgetExhausted
        u = np.asarray(u, dtype=float).reshape(-1)
        if np.any(u < self.lower) or np.any(u > self.upper):
            raise ValueError(f"evaluation point {u} violates the bounds")
        value = float(self.problem.objective(u))
        self.trace.entries.append(
            TraceEntry(index=len(self.trace.entries), point=u.copy(), value=value)
        )
        return value


# --- particle swarm ------------------------------------------------------------


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    personal_best_positions: np.ndarray
    personal_best_values: np.ndarray
    global_best_position: np.ndarray
    global_best_value: float
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494


def pso_move(state: SwarmState, lower, upper, rng) -> None:
    """One velocity-and-position update of the whole swarm, in place.

    Each particle blends its previous velocity (inertia) with pulls
    toward its personal best and the global best, both scaled by fresh
    per-dimension standard-uniform draws, then moves and is clamped to
    the box. No objective evaluation happens here.
    """
    p_count, dim = state.positions.shape
    for p in range(p_count):
        d1 = rng.random(dim)
        d2 = rng.random(dim)
        state.velocities[p] = (
            state.inertia * state.velocities[p]
            + state.cognitive * d1 * (state.personal_best_positions[p] - state.positions[p])
            + state.social * d2 * (state.global_best_position - state.positions[p])
        )
        state.positions[p] = np.clip(
            state.positions[p] + state.velocities[p], lower, upper
        )


def pso(
    problem: SearchProblem,
    swarm_size: int = 10,
    inertia: float = 0.729,
    cognitive: float = 1.494,
    social: float = 1.494,
    iterations: int | None = None,
    seed: int = 0,
    initial=None,
    rng=None,
):
    """Particle swarm maximization; returns (best point, trace).

    `initial` may pin the first particle (1-D) or the whole swarm (2-D).
    Personal and global bests only move on strict improvement, so the
    global best value never decreases.
    """
    if swarm_size < 2:
        raise ValueError("swarm_size must be >= 2")
    rng = rng if rng is not None else subseed_rng(seed, _PSO_TAG)
    ev = _Evaluator(problem)
    lower, upper = problem.lower, problem.upper
    dim = problem.dim
    if iterations is None:
        iterations = max(1, math.ceil(problem.budget / swarm_size))

    positions = lower + rng.random((swarm_size, dim)) * (upper - lower)
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        if initial.ndim == 1:
            positions[0] = np.clip(initial, lower, upper)
        else:
            if initial.shape != positions.shape:
                raise ValueError("initial swarm has the wrong shape")
            positions = np.clip(initial, lower, upper)
    state = SwarmState(
        positions=positions,
        velocities=np.zeros((swarm_size, dim)),
        personal_best_positions=positions.copy(),
        personal_best_values=np.full(swarm_size, -np.inf),
        global_best_position=positions[0].copy(),
        global_best_value=-np.inf,
        inertia=inertia,
        cognitive=cognitive,
        social=social,
    )

    def evaluate_swarm():
        for p in range(swarm_size):
            value = ev(state.positions[p])
            if value > state.personal_best_values[p]:
                state.personal_best_values[p] = value
                state.personal_best_positions[p] = state.positions[p].copy()
        best = int(np.argmax(state.personal_best_values))
        if state.personal_best_values[best] > state.global_best_value:
            state.global_best_value = float(state.personal_best_values[best])
            state.global_best_position = state.personal_best_positions[best].copy()

    try:
        evaluate_swarm()
        for _ in range(iterations):
            if len(ev.trace.entries) >= problem.budget:
                break
            pso_move(state, lower, upper, rng)
            evaluate_swarm()
            ev.trace.iteration_log.append(
                {
                    "personal_best_values": state.personal_best_values.copy(),
                    "global_best_value": state.global_best_value,
                }
            )
    except BudgetExhausted:
        ev.trace.truncated = True
    best = ev.trace.best()
    return best.point.copy(), ev.trace


# --- differential evolution -----------------------------------------------------


def de_trial(population, p, amplification, crossover_rate, lower, upper, rng):
    """Build member p's trial vector: three distinct donors (never p)
    form the clamped mutant, then each dimension takes the mutant value
    when a uniform draw does not exceed the crossover rate."""
    pop = np.asarray(population, dtype=float)
    count, dim = pop.shape
    candidates = np.array([i for i in range(count) if i != p])
    p1, p2, p3 = rng.choice(candidates, size=3, replace=False)
    mutant = pop[p1] + amplification * (pop[p2] - pop[p3])
    mutant = np.clip(mutant, lower, upper)
    cross = rng.random(dim) <= crossover_rate
    return np.where(cross, mutant, pop[p])


def de(
    problem: SearchProblem,
    population_size: int = 10,
    amplification: float = 0.8,
    crossover_rate: float = 0.7,
    iterations: int | None = None,
    seed: int = 0,
    initial=None,
    rng=None,
):
    """Differential evolution maximization; returns (best point, trace).

    Selection is strictly greedy: a trial replaces its parent only when
    it scores strictly higher, so each member's value never decreases.
    """
    if population_size < 4:
        raise ValueError("population_size must be >= 4 for three distinct donors")
    rng = rng if rng is not None else subseed_rng(seed, _DE_TAG)
    ev = _Evaluator(problem)
    lower, upper = problem.lower, problem.upper
    dim = problem.dim
    if iterations is None:
        iterations = max(1, math.ceil(problem.budget / population_size))

    population = lower + rng.random((population_size, dim)) * (upper - lower)
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        if initial.ndim == 1:
            population[0] = np.clip(initial, lower, upper)
        else:
            if initial.shape != population.shape:
                raise ValueError("initial population has the wrong shape")
            population = np.clip(initial, lower, upper)
    fitness = np.full(population_size, -np.inf)

    try:
        for p in range(population_size):
            fitness[p] = ev(population[p])
        for _ in range(iterations):
            if len(ev.trace.entries) >= problem.budget:
                break
            new_population = population.copy()
            new_fitness = fitness.copy()
            for p in range(population_size):
                trial = de_trial(
                    population, p, amplification, crossover_rate, lower, upper, rng
                )
                value = ev(trial)
                if value > fitness[p]:
                    new_population[p] = trial
                    new_fitness[p] = value
            population = new_population
            fitness = new_fitness
            ev.trace.iteration_log.append({"member_values": fitness.copy()})
    except BudgetExhausted:
        ev.trace.truncated = True
    best = ev.trace.best()
    return best.point.copy(), ev.trace


# --- Bayesian optimization --------------------------------------------------------


def expected_improvement(mu, sigma, best) -> np.ndarray:
    """Expected improvement of a Gaussian posterior over the incumbent
    best, for maximization. Non-negative; tends to max(mu - best, 0) as
    sigma vanishes."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.maximum(mu - best, 0.0)
    live = sigma > 1e-12
    if np.any(live):
        g = (mu[live] - best) / sigma[live]
        out = np.array(out, dtype=float)
        out[live] = sigma[live] * (g * norm.cdf(g) + norm.pdf(g))
    return out


def _matern52(dists, length_scale, signal_var):
    a = math.sqrt(5.0) * dists / length_scale
    return signal_var * (1.0 + a + a * a / 3.0) * np.exp(-a)


def _chol_with_jitter(gram):
    for jitter in _JITTERS:
        try:
            return cholesky(gram + jitter * np.eye(gram.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise SurrogateError("surrogate ill-conditioned")


class _GaussianProcess:
    """Matern-5/2 GP on inputs scaled to the unit box; outputs are
    standardized internally and the noise variance is pinned at 1e-6.
    Length scale and signal variance maximize the log marginal likelihood
    from several seeded starts."""

    def __init__(self, x01, y, rng):
        self.x = np.asarray(x01, dtype=float)
        y = np.asarray(y, dtype=float)
        self.y_mean = float(y.mean())
        self.y_sd = float(y.std())
        if self.y_sd == 0:
            self.y_sd = 1.0
        self.yn = (y - self.y_mean) / self.y_sd
        self.dists = cdist(self.x, self.x)
        self._fit(rng)

    def _neg_lml(self, log_params):
        ell, sig2 = np.exp(log_params)
        gram = _matern52(self.dists, ell, sig2) + _GP_NOISE * np.eye(len(self.yn))
        try:
            low = cholesky(gram, lower=True)
        except np.linalg.LinAlgError:
            return 1e12
        alpha = cho_solve((low, True), self.yn)
        return float(
            0.5 * self.yn @ alpha
            + np.log(np.diag(low)).sum()
            + 0.5 * len(self.yn) * math.log(2.0 * math.pi)
        )

    def _fit(self, rng):
        log_bounds = [(math.log(0.02), math.log(10.0)), (math.log(0.05), math.log(50.0))]
        starts = [np.array([math.log(0.5), 0.0])]
        for _ in range(3):
            starts.append(
                np.array([rng.uniform(lo, hi) for lo, hi in log_bounds])
            )
        best = None
        for s in starts:
            res = minimize(self._neg_lml, s, bounds=log_bounds, method="L-BFGS-B")
            if best is None or res.fun < best.fun:
                best = res
        self.length_scale, self.signal_var = np.exp(best.x)
        gram = _matern52(self.dists, self.length_scale, self.signal_var)
        gram = gram + _GP_NOISE * np.eye(len(self.yn))
        self._low = _chol_with_jitter(gram)
        self._alpha = cho_solve((self._low, True), self.yn)

    def predict(self, q01):
        q = np.atleast_2d(np.asarray(q01, dtype=float))
        cross = _matern52(cdist(q, self.x), self.length_scale, self.signal_var)
        mu_n = cross @ self._alpha
        v = cho_solve((self._low, True), cross.T)
        var = self.signal_var - np.einsum("ij,ji->i", cross, v)
        var = np.clip(var, 0.0, None)
        mu = mu_n * self.y_sd + self.y_mean
        sigma = np.sqrt(var) * self.y_sd
        return mu, sigma


def bayes_opt(
    problem: SearchProblem,
    n_init: int = 8,
    iterations: int | None = None,
    seed: int = 0,
    initial=None,
):
    """Gaussian-process maximization; returns (best point, trace).

    Starts from a Latin hypercube design (optionally with a pinned first
    point), then repeatedly fits the surrogate and evaluates the point
    that maximizes expected improvement, found by seeded random
    multistart plus a local bounded polish.
    """
    if n_init < 2:
        raise ValueError("n_init must be >= 2")
    rng = subseed_rng(seed, _BO_TAG)
    ev = _Evaluator(problem)
    lower, upper = problem.lower, problem.upper
    span = upper - lower
    dim = problem.dim
    if iterations is None:
        iterations = max(0, problem.budget - n_init)

    sampler = qmc.LatinHypercube(d=dim, seed=rng)
    points01 = sampler.random(n_init)
    if initial is not None:
        initial = np.asarray(initial, dtype=float).reshape(-1)
        points01[0] = np.clip((initial - lower) / span, 0.0, 1.0)

    x01 = []
    y = []

    def evaluate01(q01):
        u = np.clip(lower + np.asarray(q01) * span, lower, upper)
        value = ev(u)
        x01.append(np.asarray(q01, dtype=float))
        y.append(value)
        return value

    try:
        for q in points01:
            evaluate01(q)
        for _ in range(iterations):
            if len(ev.trace.entries) >= problem.budget:
                break
            gp = _GaussianProcess(np.array(x01), np.array(y), rng)
            best_val = max(y)

            def neg_ei(q):
                mu, sigma = gp.predict(q)
                return -float(expected_improvement(mu, sigma, best_val)[0])

            candidates = rng.random((256, dim))
            mu, sigma = gp.predict(candidates)
            ei = expected_improvement(mu, sigma, best_val)
            start = candidates[int(np.argmax(ei))]
            res = minimize(
                neg_ei, start, bounds=[(0.0, 1.0)] * dim, method="L-BFGS-B"
            )
            pick = res.x if res.fun <= -max(ei.max(), 0.0) else start
            evaluate01(np.clip(pick, 0.0, 1.0))
    except BudgetExhausted:
        ev.trace.truncated = True
    best = ev.trace.best()
    return best.point.copy(), ev.trace


# --- closed-loop well optimization -------------------------------------------------


@dataclass
class WellOptimization:
    """Outcome of re-optimizing one well's engineering parameters."""

    variable_names: tuple
    original: np.ndarray
    optimized: np.ndarray
    original_eur: float
    optimized_eur: float
    method: str
    trace: Trace

    def to_json(self, bounds=None) -> dict:
        out = {
            "method": self.method,
            "variables": list(self.variable_names),
            "original": [float(v) for v in self.original],
            "optimized": [float(v) for v in self.optimized],
            "original_eur": float(self.original_eur),
            "optimized_eur": float(self.optimized_eur),
            "evaluations": len(self.trace.entries),
            "truncated": self.trace.truncated,
        }
        if bounds is not None:
            radar = []
            for name, orig, opt in zip(
                self.variable_names, self.original, self.optimized
            ):
                lo, hi = bounds[name]
                radar.append(
                    {
                        "variable": name,
                        "original_norm": float((orig - lo) / (hi - lo)),
                        "optimized_norm": float((opt - lo) / (hi - lo)),
                    }
                )
            out["radar"] = radar
        return out


METHODS = ("pso", "de", "bayes")


def optimize_well(
    model,
    table: WellTable,
    row: int,
    variables,
    method: str = "pso",
    budget: int = 400,
    bounds: dict | None = None,
    seed: int = 0,
    integer_variables=("stage count",),
) -> WellOptimization:
    """Search the given engineering parameters of one well for the design
    the model rates best, holding every other factor at the well's values.

    Only factors flagged optimizable may be varied. Bounds default to each
    variable's observed range. Integer-valued variables are searched
    continuously, rounded at every evaluation, and reported rounded. The
    well's own design is always evaluated first, so the optimized value
    can never fall below the original.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    variables = list(variables)
    if not variables:
        raise ValueError("need at least one variable to optimize")
    feature_names = list(table.feature_names)
    spec_by_name = {s.name: s for s in table.specs}
    unknown = [v for v in variables if v not in feature_names]
    if unknown:
        raise ValueError(f"not model features: {unknown}")
    frozen = [v for v in variables if not spec_by_name[v].optimizable]
    if frozen:
        raise ValueError(f"not flagged optimizable: {frozen}")
    if not 0 <= row < table.n_rows:
        raise IndexError(f"row {row} outside the table")

    if isinstance(model, StackedModel):
        predictor = lambda x: predict_stacked(model, x)
    elif isinstance(model, TreeEnsemble):
        predictor = lambda x: predict(model, x)
    elif callable(model):
        predictor = model
    else:
        raise TypeError(f"cannot predict with object of type {type(model).__name__}")

    features = table.feature_matrix()
    x0 = features[row]
    if np.isnan(x0).any():
        raise ValueError(f"row {row} still contains missing values")
    col = {name: feature_names.index(name) for name in variables}

    resolved = {}
    for name in variables:
        if bounds is not None and name in bounds:
            lo, hi = float(bounds[name][0]), float(bounds[name][1])
        else:
            column = features[:, col[name]]
            lo, hi = float(np.min(column)), float(np.max(column))
        if not lo < hi:
            raise ValueError(f"degenerate bounds for {name!r}")
        resolved[name] = (lo, hi)

    int_mask = np.array([name in integer_variables for name in variables])
    var_cols = np.array([col[name] for name in variables])

    def objective(u):
        z = np.array(u, dtype=float)
        if int_mask.any():
            z[int_mask] = np.round(z[int_mask])
        point = np.array(x0)
        point[var_cols] = z
        return float(np.asarray(predictor(point[None, :]), dtype=float)[0])

    problem = SearchProblem(
        objective=objective,
        variables=tuple(
            BoundedVariable(name, *resolved[name]) for name in variables
        ),
        budget=budget,
    )
    u0 = np.clip(x0[var_cols], problem.lower, problem.upper)

    if method == "pso":
        _, trace = pso(problem, seed=seed, initial=u0)
    elif method == "de":
        _, trace = de(problem, seed=seed, initial=u0)
    else:
        _, trace = bayes_opt(problem, seed=seed, initial=u0)

    best = trace.best()
    optimized = best.point.copy()
    original = u0.copy()
    if int_mask.any():
        optimized[int_mask] = np.round(optimized[int_mask])
        original[int_mask] = np.round(original[int_mask])
    return WellOptimization(
        variable_names=tuple(variables),
        original=original,
        optimized=optimized,
        original_eur=float(trace.entries[0].value),
        optimized_eur=float(best.value),
        method=method,
        trace=trace,
    )

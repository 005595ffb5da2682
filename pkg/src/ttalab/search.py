"""Trigger threshold and the per-sample configuration search strategies.

All strategies minimise the per-configuration objective "best eps_y over M
adaptation steps with fresh adaptors" and share strict-< improvement
semantics, so the first-enumerated optimum wins ties. Subsets are enumerated
by cardinality, then lexicographically. Budgets count configurations and
adaptation steps exactly (one forward per step).

Greedy strategies stop early when eps_best reaches exactly 0.0: reconstruction
errors are non-negative, so no strictly better value exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .adaptors import Configuration, StepTrace, adapt_steps, init_adaptors
from .recon import ReconSuite
from .tasknet import TaskModel, translate
from .tensor import Tensor


def calibrate_threshold(errors, percentile: float) -> float:
    """Nearest-rank percentile: sorted ascending, value at index ceil(p/100*N)."""
    vals = [float(e) for e in errors]
    if len(vals) == 0:
        raise ValueError("empty error list")
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0,100), got {percentile}")
    vals.sort()
    rank = math.ceil(percentile / 100.0 * len(vals))
    rank = min(max(rank, 1), len(vals))
    return vals[rank - 1]


def trigger(eps_y: float, tau: float) -> bool:
    """Adaptation fires iff eps_y strictly exceeds tau."""
    if not (math.isfinite(eps_y) and math.isfinite(tau)):
        raise ValueError("trigger inputs must be finite")
    return eps_y > tau


def enumerate_configurations(k: int) -> list[Configuration]:
    """All 2^k - 1 non-empty subsets of {1..k}, by size then lexicographic."""
    if k < 1:
        raise ValueError("need at least one intermediate level")
    out = []
    for size in range(1, k + 1):
        for combo in combinations(range(1, k + 1), size):
            out.append(Configuration(combo))
    return out


@dataclass
class SearchBudget:
    configs_evaluated: int = 0
    adapt_steps_total: int = 0
    forwards_total: int = 0


@dataclass
class ConfigEval:
    eps: float
    output: np.ndarray | None = None
    trace: StepTrace | None = None


@dataclass
class SearchOutcome:
    omega_star: Configuration | None
    eps_best: float
    output: np.ndarray
    budget: SearchBudget
    triggered: bool


class MockObjective:
    """Deterministic per-configuration objective for search tests."""

    def __init__(self, k: int, fn, steps_per_eval: int = 1):
        self.k = k
        self.fn = fn
        self.steps_per_eval = steps_per_eval
        self.budget = SearchBudget()

    def evaluate(self, omega: Configuration) -> ConfigEval:
        self.budget.configs_evaluated += 1
        self.budget.adapt_steps_total += self.steps_per_eval
        self.budget.forwards_total += self.steps_per_eval
        return ConfigEval(eps=float(self.fn(omega)), output=None)


def _outcome(ctx, best_cfg, best_eval) -> SearchOutcome:
    if best_cfg is None:
        return SearchOutcome(omega_star=None, eps_best=float("inf"), output=None,
                             budget=ctx.budget, triggered=True)
    return SearchOutcome(omega_star=best_cfg, eps_best=best_eval.eps,
                         output=best_eval.output, budget=ctx.budget, triggered=True)


def grid_search(ctx) -> SearchOutcome:
    """Exhaustive search over all 2^k - 1 configurations."""
    best_cfg, best_eval, best_eps = None, None, math.inf
    for cfg in enumerate_configurations(ctx.k):
        ev = ctx.evaluate(cfg)
        if ev.eps < best_eps:
            best_cfg, best_eval, best_eps = cfg, ev, ev.eps
    return _outcome(ctx, best_cfg, best_eval)


def random_search(ctx, n_config: int, rng: np.random.Generator) -> SearchOutcome:
    """Evaluate min(n_config, |Omega|) distinct uniform configurations.

    The sampled set is evaluated in canonical enumeration order, so an
    exhausted sample reproduces grid_search exactly, ties included.
    """
    if n_config < 1:
        raise ValueError("n_config must be >= 1")
    space = enumerate_configurations(ctx.k)
    take = min(n_config, len(space))
    idx = sorted(rng.choice(len(space), size=take, replace=False).tolist())
    best_cfg, best_eval, best_eps = None, None, math.inf
    for i in idx:
        ev = ctx.evaluate(space[i])
        if ev.eps < best_eps:
            best_cfg, best_eval, best_eps = space[i], ev, ev.eps
    return _outcome(ctx, best_cfg, best_eval)


def forward_selection(ctx, faithful_pseudocode: bool = False) -> SearchOutcome:
    """Greedy growth from the empty set, adding the best strictly-improving level.

    Stops when a round yields no strict improvement (or eps hits the 0.0
    floor). If even the first round adopts nothing (all evaluations
    non-finite), falls back to the best single candidate evaluated so the
    returned configuration is non-empty.
    """
    if faithful_pseudocode:
        return _forward_selection_literal(ctx)
    levels = list(range(1, ctx.k + 1))
    selected: list[int] = []
    best_cfg, best_eval, best_eps = None, None, math.inf
    first_round: list[tuple[Configuration, ConfigEval]] = []
    while len(selected) < ctx.k:
        round_best = None
        for r in levels:
            if r in selected:
                continue
            cfg = Configuration.of(selected + [r])
            ev = ctx.evaluate(cfg)
            if not selected:
                first_round.append((cfg, ev))
            if round_best is None or ev.eps < round_best[1].eps:
                round_best = (cfg, ev, r)
        if round_best is None:
            break
        cfg, ev, r = round_best
        if ev.eps < best_eps:
            best_cfg, best_eval, best_eps = cfg, ev, ev.eps
            selected.append(r)
            selected.sort()
            if best_eps == 0.0:
                break
        else:
            break
    if best_cfg is None and first_round:
        # non-emptiness fallback: best single candidate, ties to first evaluated
        best_cfg, best_eval = min(first_round, key=lambda ce: ce[1].eps)
    return _outcome(ctx, best_cfg, best_eval)


def _forward_selection_literal(ctx) -> SearchOutcome:
    """The pseudocode variant: the candidate set grows within a round and the
    search breaks at the first non-improving evaluation."""
    levels = list(range(1, ctx.k + 1))
    selected: list[int] = []
    best_cfg, best_eval = None, None
    stop = False
    while not stop and len(selected) < ctx.k:
        omega: list[int] = []
        progressed = False
        for r in levels:
            if r in selected:
                continue
            omega.append(r)
            cfg = Configuration.of(omega)
            ev = ctx.evaluate(cfg)
            if best_eval is None or ev.eps < best_eval.eps:
                best_cfg, best_eval = cfg, ev
                selected.append(r)
                selected.sort()
                progressed = True
            else:
                stop = True
                break
        if not progressed:
            break
    return _outcome(ctx, best_cfg, best_eval)


def backward_elimination(ctx) -> SearchOutcome:
    """Greedy shrink from the full set via the best strictly-improving removal.

    The full set is evaluated once as the baseline; the search keeps omega
    non-empty by stopping at singletons.
    """
    selected = list(range(1, ctx.k + 1))
    best_cfg = Configuration.of(selected)
    best_eval = ctx.evaluate(best_cfg)
    while len(selected) > 1 and best_eval.eps != 0.0:
        round_best = None
        for r in selected:
            cfg = Configuration.of([i for i in selected if i != r])
            ev = ctx.evaluate(cfg)
            if round_best is None or ev.eps < round_best[1].eps:
                round_best = (cfg, ev, r)
        cfg, ev, r = round_best
        if ev.eps < best_eval.eps:
            best_cfg, best_eval = cfg, ev
            selected.remove(r)
        else:
            break
    return _outcome(ctx, best_cfg, best_eval)


def bayesian_search(ctx, n_trials: int = 20, n_start: int = 5,
                    rng: np.random.Generator | None = None, gamma: float = 0.25,
                    candidates_per_trial: int = 24) -> SearchOutcome:
    """TPE over k independent inclusion bits.

    The first n_start trials sample Omega uniformly without replacement; later
    trials split the history at the gamma quantile, fit per-bit Bernoulli
    densities with add-1 smoothing, draw candidates from the good density and
    take the best good/bad likelihood ratio among not-yet-evaluated ones. The
    search stops early once every configuration has been evaluated.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if n_start < 1 or n_start > n_trials:
        raise ValueError("need 1 <= n_start <= n_trials")
    space = enumerate_configurations(ctx.k)
    init_count = min(n_start, len(space))
    init = [space[i] for i in rng.choice(len(space), size=init_count, replace=False)]
    history: list[tuple[Configuration, float]] = []
    evaluated: set[tuple[int, ...]] = set()
    best_cfg, best_eval, best_eps = None, None, math.inf
    for t in range(1, n_trials + 1):
        if len(evaluated) == len(space):
            break
        if t <= init_count:
            cfg = init[t - 1]
        else:
            cfg = _tpe_propose(history, ctx.k, rng, gamma, candidates_per_trial, evaluated, space)
            if cfg is None:
                break
        ev = ctx.evaluate(cfg)
        evaluated.add(cfg.active)
        history.append((cfg, ev.eps))
        if ev.eps < best_eps:
            best_cfg, best_eval, best_eps = cfg, ev, ev.eps
    return _outcome(ctx, best_cfg, best_eval)


def _tpe_propose(history, k: int, rng: np.random.Generator, gamma: float,
                 n_candidates: int, evaluated: set, space) -> Configuration | None:
    ordered = sorted(history, key=lambda he: he[1])
    n_good = max(1, math.ceil(gamma * len(ordered)))
    good = [cfg for cfg, _ in ordered[:n_good]]
    bad = [cfg for cfg, _ in ordered[n_good:]] or good
    p_good = _bit_density(good, k)
    p_bad = _bit_density(bad, k)

    candidates = []
    for _ in range(n_candidates):
        bits = rng.random(k) < p_good
        if not bits.any():
            bits[rng.integers(k)] = True
        candidates.append(tuple(i + 1 for i in range(k) if bits[i]))
    best, best_score = None, -math.inf
    seen = set()
    for cand in candidates:
        if cand in seen or cand in evaluated:
            continue
        seen.add(cand)
        score = 0.0
        for i in range(k):
            if (i + 1) in cand:
                score += math.log(p_good[i]) - math.log(p_bad[i])
            else:
                score += math.log(1.0 - p_good[i]) - math.log(1.0 - p_bad[i])
        if score > best_score:
            best, best_score = cand, score
    if best is not None:
        return Configuration(best)
    remaining = [cfg for cfg in space if cfg.active not in evaluated]
    if not remaining:
        return None
    return remaining[rng.integers(len(remaining))]


def _bit_density(configs, k: int) -> np.ndarray:
    counts = np.zeros(k)
    for cfg in configs:
        for i in cfg.active:
            counts[i - 1] += 1
    return (counts + 1.0) / (len(configs) + 2.0)


# ---------------------------------------------------------------------------
# the real per-sample evaluator and runner


@dataclass
class AdaptEvaluator:
    """Objective that evaluates a configuration with fresh adaptors + M steps.

    Adaptor init RNG is keyed by (seed, sample_index, omega) so results do not
    depend on evaluation order or parallel schedule.
    """

    task: TaskModel
    suite: ReconSuite
    x: np.ndarray
    m_steps: int
    seed: int = 0
    sample_index: int = 0
    adaptor_lr: float = 3e-4
    adaptor_width: int = 8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    budget: SearchBudget = field(default_factory=SearchBudget)
    trace_sink: list | None = None

    @property
    def k(self) -> int:
        return self.task.num_levels

    def evaluate(self, omega: Configuration) -> ConfigEval:
        seed = int(np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.sample_index, omega.code())
        ).generate_state(1)[0])
        adaptors = init_adaptors(self.task, seed=seed, input_width=self.adaptor_width)
        trace = adapt_steps(self.task, self.suite, adaptors, omega, self.x,
                            self.m_steps, lr=self.adaptor_lr,
                            loss_weights=self.loss_weights)
        self.budget.configs_evaluated += 1
        self.budget.adapt_steps_total += len(trace.steps)
        self.budget.forwards_total += len(trace.steps)
        if self.trace_sink is not None:
            self.trace_sink.append(trace)
        return ConfigEval(eps=trace.best_eps_y, output=trace.best_output, trace=trace)


STRATEGY_NAMES = ("grid", "rand10", "rand50", "fs", "be", "tpe", "static-all")


@dataclass
class TtaRunner:
    """Binds a trained task model + suite to the gating and search machinery."""

    task: TaskModel
    suite: ReconSuite
    m_steps: int = 5
    adaptor_lr: float = 3e-4
    adaptor_width: int = 8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    fs_faithful_pseudocode: bool = False
    tpe_trials: int = 20
    tpe_start: int = 5
    tpe_gamma: float = 0.25
    tpe_candidates: int = 24

    def unadapted(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        with T.no_grad():
            trace = translate(self.task, Tensor(np.asarray(x, dtype=np.float32)))
            eps_y = self.suite.member_error("y", trace.output).item()
        return trace.output.data.copy(), eps_y

    def run_sample(self, x: np.ndarray, strategy: str, tau: float,
                   sample_index: int = 0, trace_sink: list | None = None) -> SearchOutcome:
        """Gate on eps_y > tau, then dispatch to the chosen strategy.

        Untriggered samples return the unadapted output untouched with an
        all-zero budget. static-all skips the gate and always adapts with the
        full configuration (approximating static TTA at every level).
        """
        if strategy not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {strategy!r}; pick one of {STRATEGY_NAMES}")
        output, eps_unadapted = self.unadapted(x)
        fired = True if strategy == "static-all" else trigger(eps_unadapted, tau)
        if not fired:
            return SearchOutcome(omega_star=None, eps_best=eps_unadapted,
                                 output=output, budget=SearchBudget(), triggered=False)
        ctx = AdaptEvaluator(task=self.task, suite=self.suite,
                             x=np.asarray(x, dtype=np.float32), m_steps=self.m_steps,
                             seed=self.seed, sample_index=sample_index,
                             adaptor_lr=self.adaptor_lr, adaptor_width=self.adaptor_width,
                             loss_weights=self.loss_weights, trace_sink=trace_sink)
        if strategy == "grid":
            outcome = grid_search(ctx)
        elif strategy in ("rand10", "rand50"):
            n = int(strategy[4:])
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(sample_index, 101)))
            outcome = random_search(ctx, n, rng)
        elif strategy == "fs":
            outcome = forward_selection(ctx, self.fs_faithful_pseudocode)
        elif strategy == "be":
            outcome = backward_elimination(ctx)
        elif strategy == "tpe":
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(sample_index, 102)))
            outcome = bayesian_search(ctx, n_trials=self.tpe_trials, n_start=self.tpe_start,
                                      rng=rng, gamma=self.tpe_gamma,
                                      candidates_per_trial=self.tpe_candidates)
        else:  # static-all
            cfg = Configuration.of(range(1, ctx.k + 1))
            ev = ctx.evaluate(cfg)
            outcome = _outcome(ctx, cfg, ev)
        if outcome.omega_star is None or outcome.output is None:
            # every evaluation failed: report the unadapted result
            return SearchOutcome(omega_star=None, eps_best=eps_unadapted, output=output,
                                 budget=ctx.budget, triggered=True)
        return outcome

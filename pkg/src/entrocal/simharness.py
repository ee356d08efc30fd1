"""Monte Carlo harness on synthetic finite populations.

A scenario (a JSON-compatible dict) describes a stratified population, its
covariates, an outcome model and a selection mechanism.  The population is
generated once from the scenario seed; each replication then draws a sample
with its own RNG stream ``default_rng([seed, rep])`` and applies every
estimator in the roster.  Metrics are computed on the population mean.

Scenario schema (see ``docs/formats.md`` for the full description)::

    {
      "population_size": 1000000,
      "seed": 1,
      "factors": [{"name": "region", "levels": 10, "level_weights": [...]}],
      "covariates": [
        {"name": "x1", "dist": "gaussian", "mean": 0, "sd": 1,
         "effects": {"region": [...]}},
        {"name": "b", "dist": "bernoulli", "p": 0.3, "effects": {...}}
      ],
      "outcome": {"type": "linear", "intercept": 1, "terms": ["x1", "sq:x1"],
                  "coef": [1, 0.5], "sigma": 1},
      "selection": {"type": "oracle_strata"},
      "estimators": [{"type": "gec", "entropy": "el", "ps_mode": "oracle",
                      "covariates": ["x1"]}]
    }

Terms are a covariate name, ``sq:name``, ``exp:name``, ``a*b`` or
``dummies:factor`` (indicators of every level but the first).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from entrocal.dual_solver import CalibrationProblem, SolverControls
from entrocal.entropy import link_induced_entropy, parse_entropy, parse_link
from entrocal.errors import ConfigError, EntrocalError
from entrocal.twostep import debias_regressor, debiased_calibration, step1_weights

__all__ = [
    "allocate_strata",
    "largest_remainder",
    "Population",
    "generate_population",
    "draw_sample",
    "Estimator",
    "parse_roster",
    "SimMetrics",
    "compute_metrics",
    "run_monte_carlo",
    "metrics_csv",
    "validate_scenario",
]

Z95 = 1.96
CSV_COLUMNS = ("estimator", "ps_mode", "bias", "se", "rmse", "rb", "cr", "failures")


def allocate_strata(stratum_sizes) -> np.ndarray:
    """Five units from strata larger than 15, a third (rounded down) otherwise."""
    N = np.asarray(stratum_sizes)
    if np.any(N < 0):
        raise ValueError("stratum sizes must be non-negative")
    N = N.astype(np.int64)
    return np.where(N > 15, 5, N // 3)


def largest_remainder(total: int, shares) -> np.ndarray:
    """Integer sizes summing to ``total`` and proportional to ``shares``."""
    s = np.asarray(shares, dtype=float)
    raw = total * s / s.sum()
    sizes = np.floor(raw).astype(np.int64)
    short = total - int(sizes.sum())
    if short:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:short]] += 1
    return sizes


# Scenario and population -----------------------------------------------------


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return cfg[key]


def validate_scenario(scenario: dict) -> dict:
    """Check the scenario structure and return it; raises ConfigError."""
    if not isinstance(scenario, dict):
        raise ConfigError("scenario must be a JSON object")
    N = _require(scenario, "population_size", "scenario")
    if not isinstance(N, int) or N < 1:
        raise ConfigError("population_size must be a positive integer")
    for f in scenario.get("factors", []):
        L = _require(f, "levels", f"factor {f.get('name')}")
        _require(f, "name", "factor")
        lw = f.get("level_weights")
        if not isinstance(L, int) or L < 1:
            raise ConfigError(f"factor {f['name']}: levels must be a positive integer")
        if lw is not None and (len(lw) != L or any(not w > 0 for w in lw)):
            raise ConfigError(f"factor {f['name']}: level_weights must be {L} positive numbers")
    names = {f["name"]: f["levels"] for f in scenario.get("factors", [])}
    for c in scenario.get("covariates", []):
        where = f"covariate {c.get('name')}"
        _require(c, "name", "covariate")
        dist = c.get("dist", "gaussian")
        if dist not in ("gaussian", "bernoulli"):
            raise ConfigError(f"{where}: unknown dist '{dist}'")
        if dist == "gaussian" and not c.get("sd", 1.0) >= 0:
            raise ConfigError(f"{where}: sd must be non-negative")
        if dist == "bernoulli" and not 0 < c.get("p", 0.5) < 1:
            raise ConfigError(f"{where}: p must lie in (0, 1)")
        for fac, eff in c.get("effects", {}).items():
            if fac not in names:
                raise ConfigError(f"{where}: unknown factor '{fac}'")
            if len(eff) != names[fac]:
                raise ConfigError(f"{where}: effects for '{fac}' need {names[fac]} values")
    out = _require(scenario, "outcome", "scenario")
    if out.get("type", "linear") not in ("linear", "binary"):
        raise ConfigError(f"outcome: unknown type '{out.get('type')}'")
    if len(out.get("terms", [])) != len(out.get("coef", [])):
        raise ConfigError("outcome: terms and coef differ in length")
    if not out.get("sigma", 0.0) >= 0:
        raise ConfigError("outcome: sigma must be non-negative")
    if not all(math.isfinite(float(b)) for b in out.get("coef", [])):
        raise ConfigError("outcome: coefficients must be finite")
    sel = _require(scenario, "selection", "scenario")
    kind = _require(sel, "type", "selection")
    if kind == "equal":
        n = _require(sel, "n", "selection")
        if not isinstance(n, int) or not 0 < n <= N:
            raise ConfigError("selection: n must be an integer in [1, N]")
    elif kind == "logistic":
        if len(sel.get("terms", [])) != len(sel.get("coef", [])):
            raise ConfigError("selection: terms and coef differ in length")
    elif kind != "oracle_strata":
        raise ConfigError(f"selection: unknown type '{kind}'")
    return scenario


@dataclass(frozen=True, eq=False)
class Population:
    stratum: np.ndarray
    stratum_sizes: np.ndarray
    sample_sizes: np.ndarray
    factors: dict
    factor_levels: dict
    covariates: dict
    y: np.ndarray
    pi: np.ndarray

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def mean(self) -> float:
        return float(self.y.mean())

    def term(self, token: str) -> np.ndarray:
        if token.startswith("sq:"):
            v = self.term(token[3:])
            return v * v
        if token.startswith("exp:"):
            return np.exp(self.term(token[4:]))
        if "*" in token:
            a, b = token.split("*", 1)
            return self.term(a) * self.term(b)
        if token in self.covariates:
            return self.covariates[token]
        raise ConfigError(f"unknown term '{token}'")

    def columns(self, tokens) -> list[str]:
        out = []
        for t in tokens:
            if t.startswith("dummies:"):
                fac = t[8:]
                if fac not in self.factors:
                    raise ConfigError(f"unknown factor '{fac}'")
                out += [f"{fac}=={k}" for k in range(1, self.factor_levels[fac])]
            else:
                out.append(t)
        return out

    def design(self, tokens, rows=None, intercept: bool = True) -> np.ndarray:
        """Design matrix of the given terms, optionally restricted to ``rows``."""
        cols = []
        sel = slice(None) if rows is None else rows
        for c in self.columns(tokens):
            if "==" in c:
                fac, k = c.split("==")
                cols.append((self.factors[fac][sel] == int(k)).astype(float))
            else:
                cols.append(np.asarray(self.term(c)[sel], dtype=float))
        m = self.y[sel].size
        if intercept:
            cols.insert(0, np.ones(m))
        if not cols:
            return np.empty((m, 0))
        return np.column_stack(cols)


def generate_population(scenario: dict) -> Population:
    """Deterministic finite population from a scenario."""
    validate_scenario(scenario)
    N = scenario["population_size"]
    rng = np.random.default_rng(scenario.get("seed", 0))
    facs = scenario.get("factors", [])
    shapes = [f["levels"] for f in facs]
    cells = list(itertools.product(*[range(L) for L in shapes])) or [()]
    share = np.ones(len(cells))
    for j, f in enumerate(facs):
        lw = np.asarray(f.get("level_weights", [1.0] * f["levels"]), dtype=float)
        share *= np.array([lw[c[j]] for c in cells])
    sizes = largest_remainder(N, share)
    stratum = np.repeat(np.arange(len(cells)), sizes)
    factors = {
        f["name"]: np.repeat(np.array([c[j] for c in cells], dtype=np.int64), sizes)
        for j, f in enumerate(facs)
    }
    levels = {f["name"]: f["levels"] for f in facs}
    covs = {}
    for c in scenario.get("covariates", []):
        shift = np.zeros(N)
        for fac, eff in c.get("effects", {}).items():
            shift += np.asarray(eff, dtype=float)[factors[fac]]
        if c.get("dist", "gaussian") == "gaussian":
            covs[c["name"]] = c.get("mean", 0.0) + shift + c.get("sd", 1.0) * rng.standard_normal(N)
        else:
            p = special.expit(special.logit(c.get("p", 0.5)) + shift)
            covs[c["name"]] = (rng.random(N) < p).astype(float)
    pop = Population(stratum, sizes, allocate_strata(sizes), factors, levels, covs,
                     np.zeros(N), np.zeros(N))
    out = scenario["outcome"]
    eta = out.get("intercept", 0.0) + _linear(pop, out.get("terms", []), out.get("coef", []))
    if out.get("type", "linear") == "linear":
        y = eta + out.get("sigma", 0.0) * rng.standard_normal(N)
    else:
        y = (rng.random(N) < special.expit(eta)).astype(float)
    pi = _selection_probabilities(pop, scenario["selection"], N)
    return Population(stratum, sizes, pop.sample_sizes, factors, levels, covs, y, pi)


def _linear(pop: Population, terms, coef) -> np.ndarray:
    if not terms:
        return np.zeros(pop.size)
    X = pop.design(terms, intercept=False)
    if X.shape[1] != len(coef):
        raise ConfigError("number of coefficients does not match the expanded terms")
    return X @ np.asarray(coef, dtype=float)


def _selection_probabilities(pop: Population, sel: dict, N: int) -> np.ndarray:
    kind = sel["type"]
    if kind == "oracle_strata":
        return (pop.sample_sizes / pop.stratum_sizes.clip(min=1))[pop.stratum]
    if kind == "equal":
        return np.full(N, sel["n"] / N)
    eta = _linear(pop, sel.get("terms", []), sel.get("coef", []))
    if "target_n" in sel:
        target = float(sel["target_n"])
        if not 0 < target < N:
            raise ConfigError("selection: target_n must lie in (0, N)")
        f = lambda a: float(special.expit(a + eta).sum()) - target
        lo, hi = -50.0, 50.0
        a = optimize.brentq(f, lo, hi, xtol=1e-12)
    else:
        a = sel.get("intercept", 0.0)
    return special.expit(a + eta)


def draw_sample(pop: Population, selection: dict, rng) -> np.ndarray:
    """Sorted indices of one sample."""
    kind = selection["type"]
    if kind == "oracle_strata":
        starts = np.concatenate([[0], np.cumsum(pop.stratum_sizes)[:-1]])
        parts = [
            s + rng.choice(Nh, size=nh, replace=False)
            for s, Nh, nh in zip(starts, pop.stratum_sizes, pop.sample_sizes)
            if nh > 0
        ]
        return np.sort(np.concatenate(parts))
    if kind == "equal":
        return np.sort(rng.choice(pop.size, size=selection["n"], replace=False))
    return np.flatnonzero(rng.random(pop.size) < pop.pi)


# Estimators ------------------------------------------------------------------


@dataclass(frozen=True)
class Estimator:
    """One roster entry.

    ``kind`` is ``gec``, ``ipw`` or ``naive``; ``ps_mode`` is ``oracle``
    (true selection probabilities), ``equal`` (N/n) or ``estimated``
    (calibrated propensity model on ``ps_covariates``).
    """

    name: str
    kind: str
    ps_mode: str = "equal"
    entropy: str = "skl"
    covariates: tuple = ()
    ps_covariates: tuple = ()
    link: str = "logit"

    def __post_init__(self):
        if self.kind not in ("gec", "ipw", "naive"):
            raise ConfigError(f"estimator {self.name}: unknown type '{self.kind}'")
        if self.ps_mode not in ("oracle", "equal", "estimated"):
            raise ConfigError(f"estimator {self.name}: unknown ps_mode '{self.ps_mode}'")
        if self.kind == "naive":
            object.__setattr__(self, "ps_mode", "equal")
        if self.ps_mode == "estimated" and not self.ps_covariates:
            raise ConfigError(f"estimator {self.name}: estimated ps_mode needs ps_covariates")
        try:
            parse_entropy(self.entropy)
            parse_link(self.link)
        except ValueError as exc:
            raise ConfigError(f"estimator {self.name}: {exc}") from exc


def parse_roster(entries) -> list[Estimator]:
    out = []
    for k, e in enumerate(entries):
        if not isinstance(e, dict):
            raise ConfigError("estimator entries must be objects")
        kind = e.get("type", "gec")
        ent = e.get("entropy", "skl")
        mode = e.get("ps_mode", "equal")
        name = e.get("name") or (ent.upper() if kind == "gec" else kind.upper())
        out.append(
            Estimator(
                name=name,
                kind=kind,
                ps_mode=mode,
                entropy=ent,
                covariates=tuple(e.get("covariates", ())),
                ps_covariates=tuple(e.get("ps_covariates", ())),
                link=e.get("link", "logit"),
            )
        )
    names = [e.name for e in out]
    if len(set(zip(names, [e.ps_mode for e in out]))) != len(out):
        raise ConfigError("estimator (name, ps_mode) pairs must be unique")
    return out


class _Context:
    """Population-level quantities shared by every replication."""

    def __init__(self, pop: Population, roster, controls):
        self.pop = pop
        self.controls = controls
        self.N = pop.size
        self.designs = {}
        self.totals = {}
        self.oracle_debias = {}
        for est in roster:
            for toks in (est.covariates, est.ps_covariates):
                if toks not in self.designs:
                    self.designs[toks] = pop.design(toks)
                    self.totals[toks] = self.designs[toks].sum(axis=0)
            if est.kind == "gec" and est.ps_mode == "oracle":
                key = est.entropy
                if key not in self.oracle_debias:
                    d = 1.0 / pop.pi[pop.pi > 0]
                    g = debias_regressor(d, parse_entropy(key), what="population")
                    self.oracle_debias[key] = float(g.sum())


def _apply(est: Estimator, ctx: _Context, idx: np.ndarray) -> tuple[float, float]:
    """Estimated mean and its variance for one sample."""
    pop = ctx.pop
    y = pop.y[idx]
    n, N = idx.size, ctx.N
    if est.kind == "naive":
        return float(y.mean()), float(y.var(ddof=1) / n * (1.0 - n / N))
    if est.ps_mode == "oracle":
        d = 1.0 / pop.pi[idx]
        X1 = None
    elif est.ps_mode == "equal":
        d = np.full(n, N / n)
        X1 = None
    else:
        X1 = ctx.designs[est.ps_covariates][idx]
        phi, d, _ = step1_weights(X1, ctx.totals[est.ps_covariates], parse_link(est.link),
                                  ctx.controls)
    if est.kind == "ipw":
        Nhat = d.sum()
        m = float(d @ y / Nhat)
        e = y - m
        return m, float(np.sum(d * (d - 1.0) * e * e) / Nhat**2)
    ent = parse_entropy(est.entropy)
    X2 = ctx.designs[est.covariates][idx]
    if est.ps_mode == "oracle":
        debias = ctx.oracle_debias[est.entropy]
    elif est.ps_mode == "equal":
        debias = N * float(ent.gradient(N / n))
    else:
        link_ent = link_induced_entropy(parse_link(est.link))
        w_pop = link_ent.weight_map(ctx.designs[est.ps_covariates] @ phi)
        debias = float(np.sum(debias_regressor(w_pop, ent, what="population")))
    res = debiased_calibration(X2, y, d, ctx.totals[est.covariates], debias, ent,
                               design1=X1, controls=ctx.controls)
    return res.total / N, res.variance / N**2


def _replicate(ctx: _Context, roster, selection, seed: int, rep: int):
    rng = np.random.default_rng([seed, rep])
    idx = draw_sample(ctx.pop, selection, rng)
    out = []
    for est in roster:
        try:
            if idx.size < 2:
                raise ConfigError("sample has fewer than two units")
            out.append(_apply(est, ctx, idx))
        except (EntrocalError, np.linalg.LinAlgError, FloatingPointError):
            out.append(None)
    return out


# Metrics ---------------------------------------------------------------------


@dataclass(frozen=True)
class SimMetrics:
    bias: float
    se: float
    rmse: float
    rb: float
    cr: float
    reps: int
    failures: int = 0


def compute_metrics(estimates, variances, truth: float, failures: int = 0) -> SimMetrics:
    """Bias, MC standard error, RMSE, relative bias of V, and CI coverage."""
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    R = est.size
    if R < 2:
        nan = math.nan
        return SimMetrics(nan, nan, nan, nan, nan, R, failures)
    bias = float(est.mean() - truth)
    se = float(est.std(ddof=1))
    rmse = math.sqrt(bias * bias + se * se)
    rb = float(var.mean() / (se * se) - 1.0) if se > 0 else math.nan
    half = Z95 * np.sqrt(np.maximum(var, 0.0))
    cr = float(np.mean((est - half <= truth) & (truth <= est + half)))
    return SimMetrics(bias, se, rmse, rb, cr, R, failures)


def _threads(threads) -> int:
    if threads is None:
        threads = os.environ.get("ENTROCAL_THREADS", "1")
    try:
        t = int(threads)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid thread count {threads!r}") from exc
    if t < 1:
        raise ConfigError("thread count must be positive")
    return t


def run_monte_carlo(scenario: dict, roster=None, reps: int = 500, seed: int | None = None,
                    threads=None, population: Population | None = None,
                    controls: SolverControls | None = None) -> dict:
    """Apply the roster to ``reps`` independent samples.

    Returns an ordered ``{(name, ps_mode): SimMetrics}``.  Results do not
    depend on ``threads``: each replication draws from its own stream.
    """
    if reps < 2:
        raise ConfigError("reps must be at least 2")
    validate_scenario(scenario)
    if roster is None:
        roster = scenario.get("estimators")
        if not roster:
            raise ConfigError("scenario defines no estimators")
    roster = [r if isinstance(r, Estimator) else parse_roster([r])[0] for r in roster]
    seed = scenario.get("seed", 0) if seed is None else seed
    pop = population if population is not None else generate_population(scenario)
    ctx = _Context(pop, roster, controls or SolverControls())
    sel = scenario["selection"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            nt = _threads(threads)
            if nt == 1:
                rows = [_replicate(ctx, roster, sel, seed, r) for r in range(reps)]
            else:
                with ThreadPoolExecutor(max_workers=nt) as pool:
                    rows = list(pool.map(lambda r: _replicate(ctx, roster, sel, seed, r),
                                         range(reps)))
    truth = pop.mean
    out = {}
    for j, est in enumerate(roster):
        ok = [row[j] for row in rows if row[j] is not None]
        m = compute_metrics([a for a, _ in ok], [v for _, v in ok], truth, reps - len(ok))
        out[(est.name, est.ps_mode)] = m
    return out


def _fmt(v) -> str:
    return format(float(v), ".17g") if isinstance(v, float) else str(v)


def metrics_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for (name, mode), m in results.items():
        w.writerow([name, mode] + [_fmt(v) for v in (m.bias, m.se, m.rmse, m.rb, m.cr)]
                   + [m.failures])
    return buf.getvalue()

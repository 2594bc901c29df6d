"""Data-generating process, scenario presets and Monte Carlo performance studies.

All Bernoulli variables are drawn from linear probability indices; the
three noise terms inside those indices are ``N(4, 1)``. Every variable of
every run has its own random stream (see :mod:`triangulate.rng`), and the
null companion run used for type I error re-uses the streams of its run with
the treatment effect set to zero.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import rng
from .cohort import BINARY, CONTINUOUS, Cohort
from .errors import ProbabilityOutOfRange, TriangulateError, WeakInstrumentWarning
from .estimators import Z_975, EstimatorOptions, canonical_method, estimate
from .parallel import ordered_map

MAX_CLIPPED_FRACTION = 0.001
BIAS_MCSE_THRESHOLD = 3.0

# stream addresses of the individual variables within a run
_Z, _W0, _EPS_W1, _U, _EPS_Y0, _DRAW_Y0, _EPS_X, _DRAW_X, _EPS_Y1, _DRAW_Y1 = range(1, 11)


@dataclass(frozen=True)
class ScenarioSpec:
    """Full parameter set of the data-generating process.

    Coefficient names follow ``<target>_<source>``: ``x_y0z`` is the effect of
    the product ``Y0 * Z`` on the probability of treatment, ``y1_eps`` the
    loading of the ``N(4, 1)`` noise in the study-period outcome, and so on.
    """

    name: str = "custom"
    n: int = 5000
    n_clusters: int = 50
    beta: float = 0.1
    outcome_kind: str = BINARY
    w1_w0: float = 0.0
    w1_eps: float = 1.0
    y0_0: float = 0.0
    y0_u: float = 0.0
    y0_w0: float = 0.0
    y0_eps: float = 0.0
    x_0: float = 0.0
    x_z: float = 0.0
    x_u: float = 0.0
    x_w0: float = 0.0
    x_w1: float = 0.0
    x_y0: float = 0.0
    x_y0z: float = 0.0
    x_eps: float = 0.0
    y1_0: float = 0.0
    y1_u: float = 0.0
    y1_w1: float = 0.0
    y1_z: float = 0.0
    y1_eps: float = 0.0

    def __post_init__(self):
        if self.n <= 0 or self.n_clusters <= 0 or self.n % self.n_clusters:
            raise ValueError("n must be a positive multiple of n_clusters")
        if self.outcome_kind not in (BINARY, CONTINUOUS):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")

    def coefficients(self) -> dict[str, float]:
        skip = {"name", "n", "n_clusters", "outcome_kind"}
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}


class SimulatedCohort(NamedTuple):
    cohort: Cohort
    u: np.ndarray
    clipped_fraction: float


def _bernoulli(p, gen):
    clipped = int(np.count_nonzero((p < 0.0) | (p > 1.0)))
    return (gen.random(p.shape[0]) < np.clip(p, 0.0, 1.0)).astype(float), clipped


def simulate_cohort(spec: ScenarioSpec, seed: int, run: int = 0) -> SimulatedCohort:
    """Draw one cohort. ``u`` (the unmeasured confounder) is returned separately
    and never enters the :class:`Cohort`."""
    n, g = spec.n, spec.n_clusters

    def stream(var):
        return rng.substream(seed, rng.SIMULATION, run, var)

    cluster = np.repeat(np.arange(g), n // g)
    z = (stream(_Z).random(g) < 0.5).astype(float)[cluster]
    w0 = stream(_W0).standard_normal(n)
    w1 = spec.w1_w0 * w0 + spec.w1_eps * stream(_EPS_W1).standard_normal(n)
    u = stream(_U).standard_normal(n)
    eps_y0 = stream(_EPS_Y0).normal(4.0, 1.0, n)
    eps_x = stream(_EPS_X).normal(4.0, 1.0, n)
    eps_y1 = stream(_EPS_Y1).normal(4.0, 1.0, n)

    clipped = 0
    draws = 0
    y0_index = spec.y0_0 + spec.y0_u * u + spec.y0_w0 * w0 + spec.y0_eps * eps_y0
    if spec.outcome_kind == BINARY:
        y0, c = _bernoulli(y0_index, stream(_DRAW_Y0))
        clipped += c
        draws += n
    else:
        y0 = y0_index
    x_index = (
        spec.x_0
        + spec.x_z * z
        + spec.x_u * u
        + spec.x_w0 * w0
        + spec.x_w1 * w1
        + spec.x_y0 * y0
        + spec.x_y0z * y0 * z
        + spec.x_eps * eps_x
    )
    x, c = _bernoulli(x_index, stream(_DRAW_X))
    clipped += c
    draws += n
    y1_index = (
        spec.y1_0
        + spec.y1_u * u
        + spec.beta * x
        + spec.y1_w1 * w1
        + spec.y1_z * z
        + spec.y1_eps * eps_y1
    )
    if spec.outcome_kind == BINARY:
        y1, c = _bernoulli(y1_index, stream(_DRAW_Y1))
        clipped += c
        draws += n
    else:
        y1 = y1_index
    fraction = clipped / draws
    if fraction > MAX_CLIPPED_FRACTION:
        raise ProbabilityOutOfRange(fraction)
    cohort = Cohort(
        patient_id=np.arange(n),
        cluster_id=cluster,
        x=x,
        y0=y0,
        y1=y1,
        w0=w0[:, None],
        w1=w1[:, None],
        z=z,
        outcome_kind=spec.outcome_kind,
        w0_names=("w0_1",),
        w1_names=("w1_1",),
    )
    return SimulatedCohort(cohort, u, fraction)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# Shared structure. Noise loadings of 0.02 put 0.08 (+/- 0.02) into every
# index; intercepts are set so the reference groups sit at 20% event risk
# and 20% treatment probability.
_BASE = dict(
    w1_w0=0.7,
    w1_eps=0.7,
    y0_0=0.12,
    y0_w0=0.025,
    y0_eps=0.02,
    x_0=0.12,
    x_z=0.35,
    x_w0=0.02,
    x_w1=0.02,
    x_eps=0.02,
    y1_0=0.12,
    y1_w1=0.025,
    y1_eps=0.02,
)
_UNMEASURED = dict(y0_u=0.04, x_u=0.04, y1_u=0.04)
_Y0_TO_X = dict(x_y0=0.25)
_Z_TO_Y1 = dict(y1_z=0.05)


def _scenario(name, *parts):
    params = dict(_BASE)
    for p in parts:
        params.update(p)
    return ScenarioSpec(name=name, **params)


# POA presets extend scenario 8: the prior outcome now interacts with the
# instrument in the treatment model. The prior outcome carries almost no
# unmeasured confounding in the basic case, and the direct Z -> Y1 effect is
# kept small because the logistic second stage cannot absorb an additive
# probability-scale Z effect without bias.
_POA = dict(
    y0_u=0.001,
    x_0=0.07,
    x_z=0.2,
    x_u=0.03,
    x_w0=0.01,
    x_w1=0.01,
    x_y0=0.05,
    x_y0z=0.4,
    y1_0=0.15,
    y1_u=0.05,
    y1_z=0.015,
)
_POA_AC1 = dict(y0_u=0.03, y1_u=0.06)
# intercept lowered so the marginal event rate stays near the basic case
_POA_AC2 = dict(y1_z=0.1, y1_0=0.11)
_POA_AC3 = dict(x_y0z=0.1, x_0=0.1)

# continuous outcomes: Y0 and Y1 are the indices themselves
_POA_CONTINUOUS = dict(
    outcome_kind=CONTINUOUS,
    y0_0=-1.6,
    y0_u=0.003,
    y0_eps=0.4,
    x_0=0.22,
    x_z=0.2,
    x_y0=0.02,
    x_y0z=0.25,
    y1_0=-0.28,
    y1_u=0.1,
    y1_eps=0.1,
)
_POA_AC3_CONTINUOUS = dict(x_y0z=0.05)

PRESETS: dict[str, ScenarioSpec] = {
    "S1": _scenario("S1"),
    "S2": _scenario("S2", _Y0_TO_X),
    "S3": _scenario("S3", _Z_TO_Y1),
    "S4": _scenario("S4", _Y0_TO_X, _Z_TO_Y1),
    "S5": _scenario("S5", _UNMEASURED),
    "S6": _scenario("S6", _UNMEASURED, _Y0_TO_X),
    "S7": _scenario("S7", _UNMEASURED, _Z_TO_Y1),
    "S8": _scenario("S8", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1),
    "POA_basic": _scenario("POA_basic", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1, _POA),
    "POA_AC1": _scenario("POA_AC1", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1, _POA, _POA_AC1),
    "POA_AC2": _scenario("POA_AC2", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1, _POA, _POA_AC2),
    "POA_AC3": _scenario("POA_AC3", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1, _POA, _POA_AC3),
    "POA_basic_continuous": _scenario(
        "POA_basic_continuous", _UNMEASURED, _Y0_TO_X, _Z_TO_Y1, _POA, _POA_CONTINUOUS
    ),
    "POA_AC3_continuous": _scenario(
        "POA_AC3_continuous",
        _UNMEASURED,
        _Y0_TO_X,
        _Z_TO_Y1,
        _POA,
        _POA_CONTINUOUS,
        _POA_AC3_CONTINUOUS,
    ),
}

SCENARIOS = tuple(f"S{i}" for i in range(1, 9))
POA_PRESETS = tuple(k for k in PRESETS if k.startswith("POA_"))
DEFAULT_METHODS = ("CaT", "IV_TSLS", "DiD")
Z_METHODS = ("CaT_with_Z", "DiD_with_Z")
POA_METHODS = ("POA_IV", "CaT", "CaT_with_Z", "IV_TSLS", "DiD", "DiD_with_Z")


def get_preset(preset: str | ScenarioSpec) -> ScenarioSpec:
    if isinstance(preset, ScenarioSpec):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _RunTask:
    spec: ScenarioSpec
    methods: tuple[str, ...]
    seed: int
    alpha_z: float

    def _estimates(self, cohort):
        opts = EstimatorOptions(se_method="analytic")
        out = np.full((len(self.methods), 2), np.nan)
        for j, m in enumerate(self.methods):
            try:
                r = estimate(m, cohort, opts)
            except (TriangulateError, np.linalg.LinAlgError):
                continue
            out[j] = r.estimate, r.se
        return out

    def __call__(self, run: int) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", WeakInstrumentWarning)
            main = simulate_cohort(self.spec, self.seed, run)
            null = simulate_cohort(replace(self.spec, beta=0.0), self.seed, run)
            return np.concatenate(
                [self._estimates(main.cohort), self._estimates(null.cohort)], axis=1
            )


@dataclass(frozen=True)
class MethodPerformance:
    method: str
    n_ok: int
    n_failed: int
    bias: float
    empirical_sd: float
    mean_se: float
    mse: float
    coverage: float
    t1e: float
    mcse_bias: float
    mcse_mse: float
    mcse_coverage: float
    mcse_t1e: float

    @property
    def biased(self) -> bool:
        return abs(self.bias) > BIAS_MCSE_THRESHOLD * self.mcse_bias

    @property
    def unbiased(self) -> bool:
        return not self.biased


def _performance(method, beta, est, se, null_est, null_se) -> MethodPerformance:
    ok = np.isfinite(est) & np.isfinite(se)
    e, s = est[ok], se[ok]
    k = int(ok.sum())
    err = e - beta
    cover = (np.abs(err) <= Z_975 * s).astype(float)
    nok = np.isfinite(null_est) & np.isfinite(null_se) & (null_se > 0)
    reject = (np.abs(null_est[nok] / null_se[nok]) > Z_975).astype(float)
    kn = int(nok.sum())
    c = float(cover.mean()) if k else float("nan")
    t = float(reject.mean()) if kn else float("nan")
    return MethodPerformance(
        method=method,
        n_ok=k,
        n_failed=int(est.shape[0] - k),
        bias=float(err.mean()) if k else float("nan"),
        empirical_sd=float(e.std(ddof=1)) if k > 1 else float("nan"),
        mean_se=float(s.mean()) if k else float("nan"),
        mse=float(np.mean(err**2)) if k else float("nan"),
        coverage=100.0 * c,
        t1e=100.0 * t,
        mcse_bias=float(e.std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan"),
        mcse_mse=float((err**2).std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan"),
        mcse_coverage=math.sqrt(c * (1 - c) / k) if k else float("nan"),
        mcse_t1e=math.sqrt(t * (1 - t) / kn) if kn else float("nan"),
    )


@dataclass(frozen=True)
class PerformanceSummary:
    scenario: str
    beta: float
    n_sim: int
    seed: int
    methods: tuple[str, ...]
    performance: dict[str, MethodPerformance]
    estimates: np.ndarray = field(repr=False)  # (n_sim, n_methods), NaN for failures

    def __getitem__(self, method: str) -> MethodPerformance:
        return self.performance[canonical_method(method)]

    # -- serialization --------------------------------------------------

    SUMMARY_METRICS = (
        ("bias_x100", lambda p: 100 * p.bias),
        ("sd_x100", lambda p: 100 * p.empirical_sd),
        ("se_x100", lambda p: 100 * p.mean_se),
        ("mse_x100", lambda p: 100 * p.mse),
        ("coverage_pct", lambda p: p.coverage),
        ("t1e_pct", lambda p: p.t1e),
        ("biased", lambda p: int(p.biased)),
        ("n_failed", lambda p: p.n_failed),
    )
    MCSE_METRICS = (
        ("mcse_bias", lambda p: p.mcse_bias),
        ("mcse_mse", lambda p: p.mcse_mse),
        ("mcse_coverage", lambda p: p.mcse_coverage),
        ("mcse_t1e", lambda p: p.mcse_t1e),
    )

    def _table(self, metrics):
        rows = [["scenario", "metric", *self.methods]]
        for name, get in metrics:
            rows.append([self.scenario, name, *(_fmt(get(self.performance[m])) for m in self.methods)])
        return rows

    def write_summary_csv(self, path) -> None:
        _write_rows(path, self._table(self.SUMMARY_METRICS))

    def write_mcse_csv(self, path) -> None:
        _write_rows(path, self._table(self.MCSE_METRICS))

    def write_estimates_long(self, path) -> None:
        rows = [["scenario", "method", "run", "estimate"]]
        for j, m in enumerate(self.methods):
            for r in range(self.estimates.shape[0]):
                rows.append([self.scenario, m, r, _fmt(self.estimates[r, j])])
        _write_rows(path, rows)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "beta": self.beta,
            "n_sim": self.n_sim,
            "seed": self.seed,
            "methods": {m: {**asdict(p), "biased": p.biased} for m, p in self.performance.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6g}"


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def run_monte_carlo(
    preset: str | ScenarioSpec,
    n_sim: int = 1000,
    seed: int = 0,
    methods: Sequence[str] = DEFAULT_METHODS,
    with_z_variants: bool = False,
    threads: int = 1,
) -> PerformanceSummary:
    """Simulate ``n_sim`` cohorts and summarise estimator performance.

    Type I error comes from a companion cohort per run, drawn from the same
    streams with the treatment effect set to zero.
    """
    spec = get_preset(preset)
    methods = tuple(canonical_method(m) for m in methods)
    if with_z_variants:
        methods += tuple(m for m in Z_METHODS if m not in methods)
    task = _RunTask(spec, methods, int(seed), 0.05)
    out = np.array(ordered_map(task, range(n_sim), threads))  # (n_sim, k, 4)
    perf = {
        m: _performance(m, spec.beta, out[:, j, 0], out[:, j, 1], out[:, j, 2], out[:, j, 3])
        for j, m in enumerate(methods)
    }
    return PerformanceSummary(spec.name, spec.beta, n_sim, int(seed), methods, perf, out[:, :, 0])


def run_poa_study(
    preset: str | ScenarioSpec = "POA_basic",
    n_sim: int = 1000,
    seed: int = 0,
    methods: Sequence[str] = POA_METHODS,
    threads: int = 1,
) -> PerformanceSummary:
    """Monte Carlo study of the prior-outcome augmented IV next to the standard methods."""
    spec = get_preset(preset)
    methods = tuple(canonical_method(m) for m in methods)
    if "POA_IV" not in methods:
        methods = ("POA_IV",) + methods
    return run_monte_carlo(spec, n_sim=n_sim, seed=seed, methods=methods, threads=threads)


def preset_audit(preset: str | ScenarioSpec, seed: int = 0, runs: int = 5) -> dict[str, float]:
    """Event rates, first-stage strength and clipping over a few simulated cohorts."""
    from .cohort import first_stage_f_statistic

    spec = get_preset(preset)
    stats = {"y0_rate": [], "y1_rate": [], "x_rate": [], "first_stage_f": [], "clipped": []}
    for r in range(runs):
        sim = simulate_cohort(spec, seed, r)
        c = sim.cohort
        stats["y0_rate"].append(float(c.y0.mean()))
        stats["y1_rate"].append(float(c.y1.mean()))
        stats["x_rate"].append(float(c.x.mean()))
        stats["first_stage_f"].append(first_stage_f_statistic(c))
        stats["clipped"].append(sim.clipped_fraction)
    return {k: float(np.mean(v)) for k, v in stats.items()}

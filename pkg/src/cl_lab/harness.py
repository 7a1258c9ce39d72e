"""Experiment harness: scenario builders, sweeps, and CSV emission.

An :class:`ExperimentSpec` is a declarative description of one experiment —
what to compute (kind), on which task set (scenario), over which (p, sigma)
grid, with how many Monte Carlo runs and which master seed. Specs come from
JSON config files and/or CLI flags and are executed by
:func:`run_experiment` / :func:`run_order_search`, which emit rows of the
fixed CSV schema below.

Sweep CSV schema (one row per valid grid point):
``p, sigma, scenario, theory_F, theory_G, sim_F, sim_F_se, sim_G, sim_G_se,
runs`` — floats with 17 significant digits so 64-bit values round-trip
exactly; sim columns are empty when runs = 0, theory_F is empty for T = 1.
Grid points in the near-square band (n-1 <= p <= n+1) are skipped and listed
in the machine-readable summary instead of being extrapolated.

Order-search CSV schema: ``order, forgetting, generalization,
delta_vs_best`` with orders written as comma-joined 1-based task labels.

Geometry files (scenario ``custom-geometry-file``) are JSON documents
``{"norms_sq": [...], "dist_sq": [[...], ...]}``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    TaskEnsemble,
    TaskGeometry,
    ensemble_from_geometry,
    geometry_from_ensemble,
)
from .errors import TaskSetupError
from .ordering import CategoryScenario, OrderRanking, brute_force_optimal_order
from .sim import MetricReport, RunConfig, monte_carlo
from .theory import (
    Regime,
    SystemParams,
    expected_forgetting,
    expected_forgetting_under,
    expected_generalization,
    expected_generalization_under,
)

__all__ = [
    "ExperimentSpec",
    "SweepRow",
    "ExperimentResult",
    "build_scenario",
    "load_geometry",
    "run_experiment",
    "run_order_search",
    "write_sweep_csv",
    "read_sweep_csv",
    "format_sweep_csv",
]

logger = logging.getLogger(__name__)

KINDS = ("theory", "simulate", "sweep-p", "order-search", "validate")
SCENARIOS = (
    "identical",
    "orthogonal",
    "one-vs-many",
    "categories",
    "custom-geometry-file",
)

SWEEP_COLUMNS = (
    "p", "sigma", "scenario", "theory_F", "theory_G",
    "sim_F", "sim_F_se", "sim_G", "sim_G_se", "runs",
)
ORDER_COLUMNS = ("order", "forgetting", "generalization", "delta_vs_best")


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative experiment description (config + flags resolve to this)."""

    kind: str
    scenario: str = "identical"
    T: int = 8
    n: int = 50
    p: tuple[int, ...] = (60, 100, 200, 400, 1000)
    sigma: tuple[float, ...] = (0.1, 0.3, 0.5)
    runs: int = 300
    master_seed: int = 0
    workers: int = 0
    out: str | None = None
    sparsity: int = 10
    cross_distance: float = 1.0
    category_sizes: tuple[int, ...] | None = None
    geometry_file: str | None = None
    objective: str = "forgetting"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TaskSetupError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.scenario not in SCENARIOS:
            raise TaskSetupError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}"
            )
        object.__setattr__(self, "p", tuple(int(v) for v in _as_tuple(self.p)))
        object.__setattr__(self, "sigma", tuple(float(v) for v in _as_tuple(self.sigma)))
        if self.category_sizes is not None:
            object.__setattr__(
                self, "category_sizes", tuple(int(v) for v in _as_tuple(self.category_sizes))
            )
        for name in ("T", "n", "runs", "master_seed", "workers", "sparsity"):
            v = getattr(self, name)
            if int(v) != v or v < 0 or (v == 0 and name in ("T", "n", "sparsity")):
                raise TaskSetupError(f"{name} must be a nonnegative integer (positive for T/n), got {v!r}")
            object.__setattr__(self, name, int(v))
        if not self.p or any(v < 1 for v in self.p):
            raise TaskSetupError(f"p values must be positive, got {self.p!r}")
        if not self.sigma or any(v < 0 for v in self.sigma):
            raise TaskSetupError(f"sigma values must be >= 0, got {self.sigma!r}")
        if self.objective not in ("forgetting", "generalization"):
            raise TaskSetupError(f"unknown objective {self.objective!r}")
        if self.scenario == "custom-geometry-file" and not self.geometry_file:
            raise TaskSetupError("scenario custom-geometry-file needs geometry_file")

    @classmethod
    def from_sources(
        cls, kind: str, config: Mapping | None = None, **overrides
    ) -> "ExperimentSpec":
        """Build a spec with precedence CLI overrides > config > defaults.

        ``config`` keys use the CLI flag names (``seed`` for the master
        seed); overrides with value None are treated as absent.
        """
        values: dict = {}
        alias = {"seed": "master_seed"}
        known = {f.name for f in fields(cls)}
        for source in (config or {}), overrides:
            for key, value in source.items():
                if value is None:
                    continue
                key = alias.get(key, key)
                if key == "kind":
                    continue
                if key not in known:
                    raise TaskSetupError(f"unknown experiment field {key!r}")
                values[key] = value
        return cls(kind=kind, **values)


def _as_tuple(value) -> tuple:
    if isinstance(value, (list, tuple, np.ndarray)):
        return tuple(value)
    return (value,)


# ---------------------------------------------------------------------------
# Scenario builders
# ---------------------------------------------------------------------------


def load_geometry(path: str | Path) -> TaskGeometry:
    """Read a ``{"norms_sq": [...], "dist_sq": [[...]]}`` JSON document."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return TaskGeometry(
            norms_sq=np.asarray(doc["norms_sq"], dtype=np.float64),
            dist_sq=np.asarray(doc["dist_sq"], dtype=np.float64),
        )
    except KeyError as exc:
        raise TaskSetupError(f"geometry file {path} is missing key {exc}") from exc


def build_scenario(
    name: str,
    T: int,
    n: int,
    p: int,
    sigma: float,
    sparsity: int = 10,
    cross_distance: float = 1.0,
    category_sizes: Sequence[int] | None = None,
    geometry_file: str | Path | None = None,
) -> TaskEnsemble:
    """Construct the ground-truth ensemble for a named scenario.

    * ``identical`` — every task shares one ``sparsity``-sparse unit vector
      (requires p >= sparsity);
    * ``orthogonal`` — disjoint-support unit vectors: per-task blocks of
      ``sparsity`` coordinates when p >= T * sparsity, otherwise the first T
      standard basis vectors (requires p >= T). Either way all norms are 1
      and all pairwise squared gaps are 2;
    * ``one-vs-many`` — one special task at squared gap ``cross_distance``
      from T-1 identical tasks, unit norms;
    * ``categories`` — ``category_sizes`` groups at squared gap
      ``cross_distance`` across groups, 0 within, unit norms;
    * ``custom-geometry-file`` — any embeddable geometry loaded from JSON.

    The last three realize vectors from the geometry, so they need p >= T.
    """
    if T < 1 or p < 1:
        raise TaskSetupError(f"need T >= 1 and p >= 1, got T={T}, p={p}")
    if name == "identical":
        s = sparsity
        if p < s:
            raise TaskSetupError(f"identical scenario needs p >= sparsity={s}, got p={p}")
        shared = np.zeros(p)
        shared[:s] = 1.0 / np.sqrt(s)
        w = np.tile(shared, (T, 1))
    elif name == "orthogonal":
        s = sparsity
        w = np.zeros((T, p))
        if p >= T * s:
            for t in range(T):
                w[t, t * s:(t + 1) * s] = 1.0 / np.sqrt(s)
        elif p >= T:
            for t in range(T):
                w[t, t] = 1.0
        else:
            raise TaskSetupError(
                f"orthogonal scenario needs p >= T={T} basis positions, got p={p}"
            )
    elif name == "one-vs-many":
        if T < 2:
            raise TaskSetupError("one-vs-many needs T >= 2")
        scenario = CategoryScenario((1, T - 1), cross_distance=cross_distance)
        return ensemble_from_geometry(scenario.geometry(), n=n, p=p, sigma=sigma)
    elif name == "categories":
        if not category_sizes:
            raise TaskSetupError("categories scenario needs category_sizes")
        if sum(category_sizes) != T:
            raise TaskSetupError(
                f"category sizes {tuple(category_sizes)!r} must sum to T={T}"
            )
        scenario = CategoryScenario(tuple(category_sizes), cross_distance=cross_distance)
        return ensemble_from_geometry(scenario.geometry(), n=n, p=p, sigma=sigma)
    elif name == "custom-geometry-file":
        if geometry_file is None:
            raise TaskSetupError("custom-geometry-file scenario needs a path")
        geometry = load_geometry(geometry_file)
        if geometry.T != T:
            raise TaskSetupError(
                f"geometry file has T={geometry.T} tasks but the spec says T={T}"
            )
        return ensemble_from_geometry(geometry, n=n, p=p, sigma=sigma)
    else:
        raise TaskSetupError(f"unknown scenario {name!r}")
    return TaskEnsemble(ground_truths=w, n=n, sigma=sigma)


def _scenario_geometry(spec: ExperimentSpec) -> TaskGeometry:
    """Geometry of a spec's scenario without realizing any vectors."""
    if spec.scenario == "custom-geometry-file":
        geometry = load_geometry(spec.geometry_file)
        if geometry.T != spec.T:
            raise TaskSetupError(
                f"geometry file has T={geometry.T} tasks but the spec says T={spec.T}"
            )
        return geometry
    if spec.scenario == "one-vs-many":
        return CategoryScenario((1, spec.T - 1), cross_distance=spec.cross_distance).geometry()
    if spec.scenario == "categories":
        if not spec.category_sizes or sum(spec.category_sizes) != spec.T:
            raise TaskSetupError("categories scenario needs sizes summing to T")
        return CategoryScenario(spec.category_sizes, cross_distance=spec.cross_distance).geometry()
    ensemble = build_scenario(
        spec.scenario, spec.T, spec.n, max(spec.p), 0.0, sparsity=spec.sparsity
    )
    return geometry_from_ensemble(ensemble)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    p: int
    sigma: float
    scenario: str
    theory_F: float | None
    theory_G: float
    sim_F: float | None
    sim_F_se: float | None
    sim_G: float | None
    sim_G_se: float | None
    runs: int


@dataclass(frozen=True)
class ExperimentResult:
    rows: tuple[SweepRow, ...]
    summary: dict


def _theory_point(geometry: TaskGeometry, params: SystemParams):
    if params.regime is Regime.OVERPARAMETERIZED:
        F = expected_forgetting(geometry, params) if params.T >= 2 else None
        G = expected_generalization(geometry, params)
    else:
        F = expected_forgetting_under(geometry, params) if params.T >= 2 else None
        G = expected_generalization_under(geometry, params)
    return F, G


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Evaluate theory (and simulation when runs > 0) over the (p, sigma) grid.

    Grid point k gets the derived master seed (spec.master_seed, k), so a
    sweep is reproducible as a whole while runs stay independent across
    points. Writes the CSV (and a JSON summary next to it) when spec.out is
    set; always returns the rows and summary.
    """
    rows: list[SweepRow] = []
    skipped: list[dict] = []
    max_z = 0.0
    z_count = 0
    point_index = -1
    for p in spec.p:
        for sigma in spec.sigma:
            point_index += 1
            if spec.n - 1 <= p <= spec.n + 1:
                reason = (
                    f"p={p} is in the near-square band around n={spec.n}; "
                    "no expectation formula applies"
                )
                logger.warning("skipping grid point (p=%s, sigma=%s): %s", p, sigma, reason)
                skipped.append({"p": p, "sigma": sigma, "reason": reason})
                continue
            ensemble = build_scenario(
                spec.scenario, spec.T, spec.n, p, sigma,
                sparsity=spec.sparsity,
                cross_distance=spec.cross_distance,
                category_sizes=spec.category_sizes,
                geometry_file=spec.geometry_file,
            )
            params = SystemParams(n=spec.n, p=p, sigma=sigma, T=spec.T)
            geometry = geometry_from_ensemble(ensemble)
            theory_F, theory_G = _theory_point(geometry, params)
            report: MetricReport | None = None
            if spec.runs > 0:
                config = RunConfig(
                    runs=spec.runs,
                    master_seed=(spec.master_seed, point_index),
                    parallelism=spec.workers,
                )
                report = monte_carlo(ensemble, config)
                for sim, se, theory in (
                    (report.forgetting, report.stderr_forgetting, theory_F),
                    (report.generalization, report.stderr_generalization, theory_G),
                ):
                    if sim is None or theory is None:
                        continue
                    z_count += 1
                    if se > 0:
                        max_z = max(max_z, abs(sim - theory) / se)
                    elif sim != theory:
                        max_z = float("inf")
            rows.append(
                SweepRow(
                    p=p,
                    sigma=sigma,
                    scenario=spec.scenario,
                    theory_F=theory_F,
                    theory_G=theory_G,
                    sim_F=None if report is None else report.forgetting,
                    sim_F_se=None if report is None else report.stderr_forgetting,
                    sim_G=None if report is None else report.generalization,
                    sim_G_se=None if report is None else report.stderr_generalization,
                    runs=spec.runs,
                )
            )
    summary = {
        "kind": spec.kind,
        "scenario": spec.scenario,
        "T": spec.T,
        "n": spec.n,
        "seed": spec.master_seed,
        "runs": spec.runs,
        "rows": len(rows),
        "skipped": skipped,
        "max_abs_z": (max_z if z_count else None),
    }
    if spec.out:
        write_sweep_csv(spec.out, rows)
        with open(str(spec.out) + ".summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ExperimentResult(rows=tuple(rows), summary=summary)


# ---------------------------------------------------------------------------
# CSV emission / parsing
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def format_sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, col)) for col in SWEEP_COLUMNS])
    return buf.getvalue()


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_sweep_csv(rows))


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    """Parse a sweep CSV back into rows (exact float round-trip)."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise TaskSetupError(f"unexpected sweep CSV header in {path}")
        for rec in reader:
            out.append(
                SweepRow(
                    p=int(rec["p"]),
                    sigma=float(rec["sigma"]),
                    scenario=rec["scenario"],
                    theory_F=_opt_float(rec["theory_F"]),
                    theory_G=float(rec["theory_G"]),
                    sim_F=_opt_float(rec["sim_F"]),
                    sim_F_se=_opt_float(rec["sim_F_se"]),
                    sim_G=_opt_float(rec["sim_G"]),
                    sim_G_se=_opt_float(rec["sim_G_se"]),
                    runs=int(rec["runs"]),
                )
            )
    return out


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


# ---------------------------------------------------------------------------
# Order search
# ---------------------------------------------------------------------------


def run_order_search(spec: ExperimentSpec) -> tuple[str, "OrderRankingProxy"]:
    """Rank every effective order of the spec's scenario geometry.

    Returns the CSV text (written to spec.out when set) and the ranking.
    The p used for the closed forms is the first grid value.
    """
    geometry = _scenario_geometry(spec)
    params = SystemParams(n=spec.n, p=spec.p[0], sigma=spec.sigma[0], T=spec.T)
    ranking = brute_force_optimal_order(geometry, params, objective=spec.objective)
    best_value = ranking.value(ranking.best)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ORDER_COLUMNS)
    for entry in ranking.entries:
        writer.writerow(
            [
                ",".join(str(v) for v in entry.order),
                _fmt(entry.forgetting),
                _fmt(entry.generalization),
                _fmt(ranking.value(entry) - best_value),
            ]
        )
    text = buf.getvalue()
    if spec.out:
        with open(spec.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text, ranking


OrderRankingProxy = object  # forward name for the docstring only

"""Monte Carlo ground truth for the closed forms in :mod:`cl_lab.theory`.

Each run draws fresh Gaussian task data and plays the sequential learner
forward: starting from ``w_0 = 0``, task t's model is either the
interpolating solution closest to the previous model (overparameterized,
p > n) or the unique least-squares solution (underparameterized, n > p).
Empirical forgetting and generalization are then measured from the realized
trajectory exactly as the theory defines them.

Reproducibility contract
------------------------
All randomness flows from one 64-bit master seed through documented,
stateless substreams: run k, task t, retry a uses a Philox generator seeded
with ``SeedSequence(entropy=master_seed, spawn_key=(k, t, a))``. Standard
normals are produced by a single fixed transform: the inverse normal CDF
applied to centered 53-bit uniforms ``(m + 0.5) / 2^53``. Per-run results are
therefore independent of worker count, and :func:`monte_carlo` reduces them
in ascending run order with compensated summation, so a report is
bit-identical for any parallelism setting.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack as _lapack
from scipy.special import ndtri

from .core import TaskEnsemble
from .errors import SingularDataError, TaskSetupError

__all__ = [
    "TaskData",
    "Trajectory",
    "MetricReport",
    "RunConfig",
    "StreamTree",
    "standard_normals",
    "generate_task_data",
    "minnorm_step",
    "least_squares_step",
    "run_sequence",
    "measure_metrics",
    "monte_carlo",
]

logger = logging.getLogger(__name__)

#: Reciprocal condition number below which a Gram matrix counts as singular.
GRAM_RCOND_MIN = 1e-12
#: Residual tolerance for the interpolation / normal-equations checks.
STEP_RESIDUAL_TOL = 1e-8
#: Resamples allowed per task before the run is abandoned.
MAX_RESAMPLES = 3
#: Abort threshold on the fraction of runs that hit a singular draw.
SINGULAR_RUN_FRACTION_MAX = 0.01


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamTree:
    """Stateless, deterministic substream derivation for one run.

    ``generator(task, retry)`` never depends on call order or on any other
    stream, which is what makes runs independent of scheduling.
    """

    master_seed: int | tuple[int, ...]
    run_index: int = 0

    def generator(self, task_index: int, retry: int = 0) -> np.random.Generator:
        entropy = self.master_seed
        if isinstance(entropy, tuple):
            entropy = list(entropy)
        ss = np.random.SeedSequence(
            entropy=entropy, spawn_key=(self.run_index, task_index, retry)
        )
        return np.random.Generator(np.random.Philox(ss))


def standard_normals(rng: np.random.Generator, size: int) -> np.ndarray:
    """N(0,1) draws via inverse CDF of centered 53-bit uniforms.

    The uniform ``(m + 0.5) * 2^-53`` with integer m in [0, 2^53) lies
    strictly inside (0, 1), so ndtri never sees an endpoint.
    """
    m = rng.integers(0, 1 << 53, size=size, dtype=np.uint64)
    return ndtri((m + 0.5) * 2.0**-53)


# ---------------------------------------------------------------------------
# Data and trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskData:
    """One task's training set: feature columns X (p, n) and responses y (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[1] != y.size:
            raise TaskSetupError(
                f"X must be (p, n) with y of length n, got {X.shape} vs {y.size}"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class Trajectory:
    """Model sequence w_0 .. w_T of one simulated run, rows of ``models``.

    ``resamples`` counts degenerate draws that were retried while producing
    the trajectory (0 in virtually every run).
    """

    models: np.ndarray
    resamples: int = 0

    def __post_init__(self):
        m = np.asarray(self.models, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise TaskSetupError("models must be a (T+1, p) array")
        if np.any(m[0] != 0.0):
            raise TaskSetupError("trajectories must start at w_0 = 0")
        object.__setattr__(self, "models", m)

    @property
    def T(self) -> int:
        return self.models.shape[0] - 1


@dataclass(frozen=True)
class MetricReport:
    """Measured forgetting / generalization, optionally averaged over runs.

    ``forgetting`` is None for T = 1 (no old task exists). ``per_task_error``
    holds ``|w_T - w*_i|^2`` per task (run-averaged when run_count > 1), and
    ``generalization`` is exactly its mean. Standard errors are sample
    standard deviations over runs divided by sqrt(run_count); they are 0 for
    single-run reports.
    """

    forgetting: float | None
    generalization: float
    per_task_error: np.ndarray
    run_count: int
    stderr_forgetting: float
    stderr_generalization: float

    def __post_init__(self):
        object.__setattr__(
            self, "per_task_error", np.asarray(self.per_task_error, dtype=np.float64)
        )


@dataclass(frozen=True)
class RunConfig:
    """Monte Carlo execution plan.

    ``parallelism`` is a worker-count hint only (0 = auto); results are a
    pure function of (ensemble, runs, master_seed).
    """

    runs: int
    master_seed: int | tuple[int, ...]
    parallelism: int = 0

    def __post_init__(self):
        if int(self.runs) != self.runs or self.runs < 1:
            raise TaskSetupError(f"runs must be a positive integer, got {self.runs!r}")
        if int(self.parallelism) != self.parallelism or self.parallelism < 0:
            raise TaskSetupError(f"parallelism must be >= 0, got {self.parallelism!r}")
        object.__setattr__(self, "runs", int(self.runs))
        object.__setattr__(self, "parallelism", int(self.parallelism))


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def generate_task_data(
    w_star: np.ndarray, n: int, sigma: float, rng: np.random.Generator
) -> TaskData:
    """Draw one task's dataset: X i.i.d. N(0,1), y = X^T w* + sigma z.

    Draw order is fixed — the p*n entries of X filled column by column, then
    the n noise variates (scaled by sigma afterwards, so the stream is
    identical whether or not sigma is zero).
    """
    w_star = np.asarray(w_star, dtype=np.float64).ravel()
    p = w_star.size
    if n < 1 or p < 1:
        raise TaskSetupError(f"need n >= 1 and p >= 1, got n={n}, p={p}")
    draws = standard_normals(rng, p * n)
    X = draws.reshape((p, n), order="F")
    z = standard_normals(rng, n)
    y = X.T @ w_star + sigma * z
    return TaskData(X=X, y=y)


def _factor_spd(gram: np.ndarray, what: str):
    """Cholesky-factor an SPD matrix and screen its conditioning.

    Raises SingularDataError when the factorization fails or the estimated
    condition number exceeds 1/GRAM_RCOND_MIN.
    """
    anorm = float(np.abs(gram).sum(axis=0).max())
    try:
        c, low = sla.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularDataError(f"{what} is not positive definite: {exc}") from exc
    rcond, info = _lapack.dpocon(c, anorm, uplo="L")
    if info != 0 or not np.isfinite(rcond) or rcond < GRAM_RCOND_MIN:
        raise SingularDataError(
            f"{what} is numerically singular (rcond={rcond:.3e})"
        )
    return c, low


def minnorm_step(w_prev: np.ndarray, data: TaskData) -> np.ndarray:
    """Interpolating model closest to w_prev (overparameterized step).

    ``w = w_prev + X (X^T X)^{-1} (y - X^T w_prev)`` — the unique minimizer
    of ``|w - w_prev|`` subject to ``X^T w = y``. The n x n Gram system is
    solved via Cholesky; no inverse is formed.
    """
    w_prev = np.asarray(w_prev, dtype=np.float64).ravel()
    p, n = data.X.shape
    if w_prev.size != p:
        raise TaskSetupError(f"w_prev has size {w_prev.size}, expected p={p}")
    if p <= n:
        raise TaskSetupError(f"min-norm step requires p > n, got p={p}, n={n}")
    predictions = data.X.T @ w_prev
    c, low = _factor_spd(data.X.T @ data.X, "task Gram matrix X^T X")
    coef = sla.cho_solve((c, low), data.y - predictions, check_finite=False)
    w = w_prev + data.X @ coef
    scale = max(1.0, float(np.linalg.norm(data.y)), float(np.linalg.norm(predictions)))
    residual = float(np.linalg.norm(data.X.T @ w - data.y))
    if residual > STEP_RESIDUAL_TOL * scale:
        raise SingularDataError(
            f"interpolation constraint violated: residual {residual:.3e} "
            f"exceeds {STEP_RESIDUAL_TOL:.0e} * {scale:.3e}"
        )
    return w


def least_squares_step(data: TaskData) -> np.ndarray:
    """Unique least-squares model (underparameterized step).

    ``w = (X X^T)^{-1} X y``; independent of any previous model. The p x p
    normal-equations system is solved via Cholesky.
    """
    p, n = data.X.shape
    if n <= p:
        raise TaskSetupError(f"least-squares step requires n > p, got p={p}, n={n}")
    rhs = data.X @ data.y
    c, low = _factor_spd(data.X @ data.X.T, "normal-equations matrix X X^T")
    w = sla.cho_solve((c, low), rhs, check_finite=False)
    scale = max(1.0, float(np.linalg.norm(rhs)))
    gradient = float(np.linalg.norm(data.X @ (data.X.T @ w) - rhs))
    if gradient > STEP_RESIDUAL_TOL * scale:
        raise SingularDataError(
            f"normal equations not solved: gradient norm {gradient:.3e}"
        )
    return w


# ---------------------------------------------------------------------------
# Sequential runs and metrics
# ---------------------------------------------------------------------------


def run_sequence(ensemble: TaskEnsemble, streams: StreamTree) -> Trajectory:
    """Play all T tasks in order from w_0 = 0 and record every model.

    The step type follows the regime (min-norm for p > n, least squares for
    n > p; p = n is rejected). A degenerate draw is retried with a fresh
    substream up to MAX_RESAMPLES times before the run fails.
    """
    p, n = ensemble.p, ensemble.n
    if p == n:
        raise TaskSetupError(
            f"p = n = {p} is rejected: neither regime's learner applies and "
            "the Gram conditioning is worst-case"
        )
    overparameterized = p > n
    models = np.zeros((ensemble.T + 1, p))
    resamples = 0
    for t in range(1, ensemble.T + 1):
        w_star = ensemble.ground_truths[t - 1]
        last_error: SingularDataError | None = None
        for retry in range(MAX_RESAMPLES + 1):
            rng = streams.generator(task_index=t, retry=retry)
            data = generate_task_data(w_star, n, ensemble.sigma, rng)
            try:
                if overparameterized:
                    models[t] = minnorm_step(models[t - 1], data)
                else:
                    models[t] = least_squares_step(data)
                last_error = None
                break
            except SingularDataError as exc:
                last_error = exc
                resamples += 1
                logger.warning(
                    "degenerate draw at run=%s task=%d retry=%d: %s",
                    streams.run_index, t, retry, exc,
                )
        if last_error is not None:
            raise SingularDataError(
                f"task {t} failed after {MAX_RESAMPLES} resamples: {last_error}"
            )
    return Trajectory(models=models, resamples=resamples)


def _neumaier_sum(values: Iterable[float]) -> float:
    """Compensated (Kahan-Babuska) summation in iteration order."""
    total = 0.0
    comp = 0.0
    for v in values:
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def _mean(values: Sequence[float]) -> float:
    return _neumaier_sum(values) / len(values)


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    m = _mean(values)
    ssq = _neumaier_sum((v - m) ** 2 for v in values)
    return (ssq / (len(values) - 1)) ** 0.5 / len(values) ** 0.5


def measure_metrics(trajectory: Trajectory, ensemble: TaskEnsemble) -> MetricReport:
    """Empirical metrics of one trajectory.

    forgetting = mean over i < T of (|w_T - w*_i|^2 - |w_i - w*_i|^2);
    generalization = mean over all i of |w_T - w*_i|^2 (None / absent
    forgetting for T = 1).
    """
    T = ensemble.T
    if trajectory.T != T:
        raise TaskSetupError(
            f"trajectory has {trajectory.T} steps but ensemble has T={T} tasks"
        )
    final = trajectory.models[T]
    gaps = final[None, :] - ensemble.ground_truths
    per_task = np.einsum("ij,ij->i", gaps, gaps)
    forgetting = None
    if T >= 2:
        drops = []
        for i in range(1, T):
            own = trajectory.models[i] - ensemble.ground_truths[i - 1]
            drops.append(per_task[i - 1] - float(own @ own))
        forgetting = _mean(drops)
    return MetricReport(
        forgetting=forgetting,
        generalization=_mean(per_task.tolist()),
        per_task_error=per_task,
        run_count=1,
        stderr_forgetting=0.0,
        stderr_generalization=0.0,
    )


def _single_run(ensemble: TaskEnsemble, config: RunConfig, k: int):
    trajectory = run_sequence(ensemble, StreamTree(config.master_seed, k))
    report = measure_metrics(trajectory, ensemble)
    return report.forgetting, report.per_task_error, trajectory.resamples


def monte_carlo(ensemble: TaskEnsemble, config: RunConfig) -> MetricReport:
    """Average metrics over ``config.runs`` independent runs.

    Run k uses substreams derived from (master_seed, k) only, and the
    reduction walks runs in ascending k with compensated summation — the
    report is bit-identical for any worker count. Aborts when more than
    SINGULAR_RUN_FRACTION_MAX of runs hit degenerate draws, which indicates a
    p ≈ n misconfiguration rather than bad luck.
    """
    worker = lambda k: _single_run(ensemble, config, k)
    if config.parallelism == 1 or config.runs == 1:
        results = [worker(k) for k in range(config.runs)]
    else:
        workers = config.parallelism or min(8, os.cpu_count() or 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, range(config.runs)))

    singular_runs = sum(1 for _, _, resamples in results if resamples > 0)
    if singular_runs > SINGULAR_RUN_FRACTION_MAX * config.runs:
        raise SingularDataError(
            f"{singular_runs}/{config.runs} runs hit singular data; "
            "p is probably too close to n for stable simulation"
        )

    per_task_runs = [per_task for _, per_task, _ in results]
    T = ensemble.T
    per_task_mean = np.array(
        [_mean([row[i] for row in per_task_runs]) for i in range(T)]
    )
    gen_runs = [_mean(row.tolist()) for row in per_task_runs]
    if T >= 2:
        forg_runs = [forg for forg, _, _ in results]
        forgetting = _mean(forg_runs)
        stderr_forg = _stderr(forg_runs)
    else:
        forgetting = None
        stderr_forg = 0.0
    return MetricReport(
        forgetting=forgetting,
        generalization=_mean(per_task_mean.tolist()),
        per_task_error=per_task_mean,
        run_count=config.runs,
        stderr_forgetting=stderr_forg,
        stderr_generalization=_stderr(gen_runs),
    )

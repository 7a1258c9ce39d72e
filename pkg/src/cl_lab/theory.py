"""Closed-form expectations for sequential minimum-norm linear regression.

Setting: T linear regression tasks are learned one after another. Each task t
draws n i.i.d. standard-Gaussian feature vectors in dimension p and noisy
responses ``y = X^T w*_t + z`` with ``z ~ N(0, sigma^2 I)``. In the
overparameterized regime (p > n) the learner interpolates the current task
while moving as little as possible from the previous weights; in the
underparameterized regime (n > p) it takes the unique least-squares solution.
Starting point is ``w_0 = 0``.

With ``r = 1 - n/p`` every expectation below is an explicit polynomial in r
weighted by the task geometry (squared norms and squared pairwise gaps).
The two headline quantities are

* expected *forgetting* after task T: the average over old tasks i < T of
  ``E|w_T - w*_i|^2 - E|w_i - w*_i|^2``, and
* expected *generalization error*: the average over all tasks of
  ``E|w_T - w*_i|^2``.

Validity: the overparameterized forms require ``p >= n + 2`` and the
underparameterized forms ``n >= p + 2`` (inverse-Wishart moments diverge in
between); :class:`SystemParams` enforces this at construction.

Conventions: task positions and indices in this module are 1-based, matching
the formulas in the docstrings; powers of r are computed by iterative
multiplication so that direct forms and their recursions agree to the last
few ulps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import OverparamRatio, TaskGeometry
from .errors import (
    InapplicablePredicateError,
    NearSquareError,
    RegimeError,
    TaskSetupError,
)

__all__ = [
    "Regime",
    "SystemParams",
    "coefficient_c",
    "expected_forgetting",
    "expected_generalization",
    "expected_forgetting_under",
    "expected_generalization_under",
    "two_task_forgetting",
    "two_task_generalization",
    "expected_task_error",
    "gap_evolution_step",
    "forgetting_recursion_step",
    "forward_transfer_error",
    "negative_forgetting_predicate",
    "g2_derivative",
    "g2_derivative_sign_probe",
]


class Regime(enum.Enum):
    OVERPARAMETERIZED = "overparameterized"  # p >= n + 2
    UNDERPARAMETERIZED = "underparameterized"  # n >= p + 2


@dataclass(frozen=True)
class SystemParams:
    """Sampling parameters (n, p, sigma) and task count T.

    Exactly one regime applies: overparameterized (p >= n + 2) or
    underparameterized (n >= p + 2). Parameter combinations in the
    near-square band in between are rejected outright — no expectation
    implemented here is defined for them.
    """

    n: int
    p: int
    sigma: float
    T: int

    def __post_init__(self):
        for name in ("n", "p", "T"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise TaskSetupError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise TaskSetupError(f"sigma must be finite and >= 0, got {self.sigma!r}")
        object.__setattr__(self, "sigma", float(self.sigma))
        if not (self.p >= self.n + 2 or self.n >= self.p + 2):
            raise NearSquareError(
                f"n={self.n}, p={self.p} fall in the near-square band "
                "(n+2 > p and p+2 > n) where no expectation formula applies"
            )

    @property
    def regime(self) -> Regime:
        if self.p >= self.n + 2:
            return Regime.OVERPARAMETERIZED
        return Regime.UNDERPARAMETERIZED

    @property
    def r(self) -> OverparamRatio:
        """Overparameterization ratio 1 - n/p (overparameterized only)."""
        if self.regime is not Regime.OVERPARAMETERIZED:
            raise RegimeError("r = 1 - n/p is only meaningful for p > n")
        return OverparamRatio.from_counts(self.n, self.p)

    @property
    def noise_coef(self) -> float:
        """p sigma^2 / (p - n - 1), the stationary noise floor (overparam)."""
        self._require(Regime.OVERPARAMETERIZED)
        return self.p * self.sigma**2 / (self.p - self.n - 1)

    def _require(self, regime: Regime) -> None:
        if self.regime is not regime:
            raise RegimeError(
                f"operation requires the {regime.value} regime "
                f"but n={self.n}, p={self.p} are {self.regime.value}"
            )


def _r_powers(r: float, top: int) -> np.ndarray:
    """[r^0, r^1, ..., r^top] by iterative multiplication."""
    out = np.empty(top + 1)
    out[0] = 1.0
    for k in range(1, top + 1):
        out[k] = out[k - 1] * r
    return out


def _check_geometry(geometry: TaskGeometry, params: SystemParams) -> None:
    if geometry.T != params.T:
        raise TaskSetupError(
            f"geometry has {geometry.T} tasks but params declare T={params.T}"
        )


def coefficient_c(i: int, j: int, T: int, r: OverparamRatio | float) -> float:
    """Pairwise gap coefficient ``c_{i,j} = (1-r) (r^{T-i} - r^{j-i} + r^{T-j})``.

    Task positions i < j are 1-based. These weight the squared gaps
    ``|w*_i - w*_j|^2`` inside the expected forgetting, and can be negative
    (small, nearby i and j), which is what makes forgetting non-monotone in
    task similarity.
    """
    if not (1 <= i < j <= T):
        raise TaskSetupError(f"need 1 <= i < j <= T, got i={i}, j={j}, T={T}")
    rv = float(r)
    rpow = _r_powers(rv, T)
    return (1.0 - rv) * (rpow[T - i] - rpow[j - i] + rpow[T - j])


def expected_forgetting(geometry: TaskGeometry, params: SystemParams) -> float:
    """Expected forgetting after the last task, overparameterized regime.

    ``E[F_T] = (1/(T-1)) sum_{i<T} [ (r^T - r^i) |w*_i|^2
    + sum_{j>i} c_{i,j} |w*_i - w*_j|^2
    + (p sigma^2/(p-n-1)) (r^i - r^T) ]``.

    Undefined for T = 1 (there is no old task to forget).
    """
    params._require(Regime.OVERPARAMETERIZED)
    _check_geometry(geometry, params)
    T = params.T
    if T < 2:
        raise TaskSetupError("forgetting is undefined for T = 1")
    r = float(params.r)
    rpow = _r_powers(r, T)
    noise = params.noise_coef
    norms = geometry.norms_sq
    dist = geometry.dist_sq
    total = 0.0
    for i in range(1, T):
        acc = (rpow[T] - rpow[i]) * norms[i - 1]
        for j in range(i + 1, T + 1):
            c_ij = (1.0 - r) * (rpow[T - i] - rpow[j - i] + rpow[T - j])
            acc += c_ij * dist[i - 1, j - 1]
        acc += noise * (rpow[i] - rpow[T])
        total += acc
    return total / (T - 1)


def expected_generalization(geometry: TaskGeometry, params: SystemParams) -> float:
    """Expected generalization error of the final model, overparameterized.

    ``E[G_T] = (r^T/T) sum_i |w*_i|^2
    + (1/T) sum_i (n r^{T-i}/p) sum_k |w*_k - w*_i|^2
    + (p sigma^2/(p-n-1)) (1 - r^T)``.
    """
    params._require(Regime.OVERPARAMETERIZED)
    _check_geometry(geometry, params)
    T = params.T
    r = float(params.r)
    rpow = _r_powers(r, T)
    frac = params.n / params.p
    dist_col_sums = geometry.dist_sq.sum(axis=0)
    total = rpow[T] * float(geometry.norms_sq.sum())
    for i in range(1, T + 1):
        total += frac * rpow[T - i] * dist_col_sums[i - 1]
    return total / T + params.noise_coef * (1.0 - rpow[T])


def expected_forgetting_under(geometry: TaskGeometry, params: SystemParams) -> float:
    """Expected forgetting, underparameterized regime (n >= p + 2).

    Each task's least-squares solution ignores history, so only the gap
    between the last task and each old task survives:
    ``E[F_T] = (1/(T-1)) sum_{i<T} |w*_T - w*_i|^2``.
    """
    params._require(Regime.UNDERPARAMETERIZED)
    _check_geometry(geometry, params)
    T = params.T
    if T < 2:
        raise TaskSetupError("forgetting is undefined for T = 1")
    return float(geometry.dist_sq[T - 1, : T - 1].sum()) / (T - 1)


def expected_generalization_under(geometry: TaskGeometry, params: SystemParams) -> float:
    """Expected generalization error, underparameterized regime.

    ``E[G_T] = (1/T) sum_{i=1..T} |w*_T - w*_i|^2 + p sigma^2/(n-p-1)``
    (the i = T term of the sum is zero).
    """
    params._require(Regime.UNDERPARAMETERIZED)
    _check_geometry(geometry, params)
    T = params.T
    gaps = float(geometry.dist_sq[T - 1, :].sum()) / T
    return gaps + params.p * params.sigma**2 / (params.n - params.p - 1)


def two_task_forgetting(
    params: SystemParams, norm1_sq: float, norm2_sq: float, dist_sq: float
) -> float:
    """Two-task special case of :func:`expected_forgetting`.

    ``E[F_2] = (r^2 - r) |w*_1|^2 + (n/p) |w*_2 - w*_1|^2
    + n r sigma^2 / (p - n - 1)``.
    """
    params._require(Regime.OVERPARAMETERIZED)
    if params.T != 2:
        raise TaskSetupError(f"two-task form needs T=2, params declare T={params.T}")
    r = float(params.r)
    noise = params.n * r * params.sigma**2 / (params.p - params.n - 1)
    return (r * r - r) * norm1_sq + (params.n / params.p) * dist_sq + noise


def two_task_generalization(
    params: SystemParams, norm1_sq: float, norm2_sq: float, dist_sq: float
) -> float:
    """Two-task special case of :func:`expected_generalization`.

    ``E[G_2] = (r^2/2)(|w*_1|^2 + |w*_2|^2) + ((1-r^2)/2) |w*_1 - w*_2|^2
    + p sigma^2 (1-r^2) / (p - n - 1)``.
    """
    params._require(Regime.OVERPARAMETERIZED)
    if params.T != 2:
        raise TaskSetupError(f"two-task form needs T=2, params declare T={params.T}")
    r = float(params.r)
    r2 = r * r
    return (
        0.5 * r2 * (norm1_sq + norm2_sq)
        + 0.5 * (1.0 - r2) * dist_sq
        + params.noise_coef * (1.0 - r2)
    )


def expected_task_error(
    geometry: TaskGeometry, params: SystemParams, t: int, i: int
) -> float:
    """Expected squared error of the model after t tasks on task i's truth.

    ``E|w_t - w*_i|^2 = r^t |w*_i|^2
    + (n/p) sum_{k=1..t} r^{t-k} |w*_k - w*_i|^2
    + (p sigma^2/(p-n-1)) (1 - r^t)``.

    Valid for t in 0..T (t = 0 gives ``|w*_i|^2``, the error of the zero
    initialization) and any evaluated task i in 1..T; i <= t is not required.
    """
    params._require(Regime.OVERPARAMETERIZED)
    _check_geometry(geometry, params)
    T = params.T
    if not (0 <= t <= T):
        raise TaskSetupError(f"t must be in 0..{T}, got {t}")
    if not (1 <= i <= T):
        raise TaskSetupError(f"i must be in 1..{T}, got {i}")
    r = float(params.r)
    rpow = _r_powers(r, max(t, 1))
    frac = params.n / params.p
    total = rpow[t] * geometry.norms_sq[i - 1]
    for k in range(1, t + 1):
        total += frac * rpow[t - k] * geometry.dist_sq[k - 1, i - 1]
    return total + params.noise_coef * (1.0 - rpow[t])


def gap_evolution_step(
    prev_gap: float, dist_sq_next_to_i: float, params: SystemParams
) -> float:
    """One step of the expected-error recursion.

    ``E|w_{t+1} - w*_i|^2 = (1 - n/p) E|w_t - w*_i|^2
    + (n/p) |w*_{t+1} - w*_i|^2 + n sigma^2/(p-n-1)``.

    Iterating from ``|w*_i|^2`` reproduces :func:`expected_task_error`.
    """
    params._require(Regime.OVERPARAMETERIZED)
    frac = params.n / params.p
    noise = params.n * params.sigma**2 / (params.p - params.n - 1)
    return (1.0 - frac) * prev_gap + frac * dist_sq_next_to_i + noise


def forgetting_recursion_step(
    prev_F: float,
    t: int,
    geometry: TaskGeometry,
    per_task_self_errors: Sequence[float],
    params: SystemParams,
) -> float:
    """Expected forgetting after task t+1 from its value after task t.

    ``E[F_{t+1}] = ((t-1)/t) (1-n/p) E[F_t]
    + (n/(t p)) sum_{i=1..t} ( |w*_{t+1} - w*_i|^2 - E|w_i - w*_i|^2 )
    + n sigma^2/(p-n-1)``.

    ``per_task_self_errors[i-1]`` must equal ``expected_task_error(.., i, i)``
    for i = 1..t (extra trailing entries are ignored). The recursion is seeded
    at t = 2 with the direct formula, so t >= 2 is required here.
    """
    params._require(Regime.OVERPARAMETERIZED)
    _check_geometry(geometry, params)
    if t < 2:
        raise TaskSetupError(f"recursion step needs t >= 2 (seed F_2 directly), got {t}")
    if t + 1 > params.T:
        raise TaskSetupError(f"step to t+1={t + 1} exceeds T={params.T}")
    if len(per_task_self_errors) < t:
        raise TaskSetupError(
            f"need self errors for tasks 1..{t}, got {len(per_task_self_errors)}"
        )
    frac = params.n / params.p
    noise = params.n * params.sigma**2 / (params.p - params.n - 1)
    gap_sum = 0.0
    for i in range(1, t + 1):
        gap_sum += geometry.dist_sq[t, i - 1] - per_task_self_errors[i - 1]
    return ((t - 1) / t) * (1.0 - frac) * prev_F + frac * gap_sum / t + noise


def forward_transfer_error(geometry: TaskGeometry, params: SystemParams, t: int) -> float:
    """Expected error of the sequentially-learned model on its own task t.

    Alias for ``expected_task_error(geometry, params, t, t)``; this is the
    history-dependent half of the forward-transfer comparison against a model
    trained from scratch. Recent old tasks carry weight ``n r^{t-i}/p`` that
    grows as i approaches t, so fresher old tasks matter more.
    """
    if not (1 <= t <= params.T):
        raise TaskSetupError(f"t must be in 1..{params.T}, got {t}")
    return expected_task_error(geometry, params, t, t)


def negative_forgetting_predicate(
    norm1_sq: float, norm2_sq: float, inner_product: float, params: SystemParams
) -> bool:
    """Sufficient condition for backward transfer in the two-task case.

    Under the precondition ``sigma^2 < ((p-n-1)/p) |w*_1|^2``, learning task 2
    can only help task 1 (``E[F_2] <= 0``) whenever

    ``2 <w*_1, w*_2> >= (n/p) |w*_1|^2 + |w*_2|^2
    + (p-n) sigma^2 / (p-n-1)``.

    Raises :class:`InapplicablePredicateError` if the precondition fails —
    the predicate then has no truth value (it does not return False).
    """
    params._require(Regime.OVERPARAMETERIZED)
    n, p, sigma = params.n, params.p, params.sigma
    if not sigma**2 < (p - n - 1) / p * norm1_sq:
        raise InapplicablePredicateError(
            f"predicate needs sigma^2 < ((p-n-1)/p) |w*_1|^2 = "
            f"{(p - n - 1) / p * norm1_sq:.6g}, got sigma^2 = {sigma**2:.6g}"
        )
    rhs = (n / p) * norm1_sq + norm2_sq + (p - n) * sigma**2 / (p - n - 1)
    return 2.0 * inner_product >= rhs


def g2_derivative(n: int, sigma: float, inner_product: float, p: float) -> float:
    """d E[G_2] / dp at fixed n, sigma, for unit-speed p.

    ``2 n r <w*_1, w*_2> / p^2 - sigma^2 ( (n+1)(1-r^2)/(p-n-1)^2
    + 2 n r / ((p-n-1) p) )`` with ``r = 1 - n/p``.
    """
    r = 1.0 - n / p
    gap = p - n - 1.0
    signal = 2.0 * n * r * inner_product / p**2
    noise = sigma**2 * ((n + 1) * (1.0 - r * r) / gap**2 + 2.0 * n * r / (gap * p))
    return signal - noise


def g2_derivative_sign_probe(
    params: SystemParams,
    inner_product: float,
    p_grid: Sequence[float] | None = None,
) -> list[tuple[float, int]]:
    """Sign of dE[G_2]/dp across a grid of p values.

    Returns ``[(p, sign), ...]`` with sign in {-1, 0, +1}. A single + to -
    flip certifies a descent floor in p for the two-task generalization
    error; with sigma = 0 and positive correlation the derivative stays
    positive (no floor), and with zero correlation it vanishes identically.

    If no grid is given, a logarithmic grid on [n+2, 1e5] is used.
    """
    if params.T != 2:
        raise TaskSetupError(f"two-task probe needs T=2, params declare T={params.T}")
    n, sigma = params.n, params.sigma
    if p_grid is None:
        p_grid = np.geomspace(n + 2, 1e5, 200)
    out = []
    for p in p_grid:
        if p < n + 2:
            raise TaskSetupError(f"probe grid must satisfy p >= n+2, got p={p}")
        d = g2_derivative(n, sigma, inner_product, float(p))
        out.append((float(p), 0 if d == 0.0 else (1 if d > 0 else -1)))
    return out

"""Task-order scoring and brute-force order search.

The closed-form forgetting depends on the learning order through the
pairwise-gap coefficients ``c_{i,j}``, the generalization error through the
position weights ``r^{T-i}``. This module scores permutations with the exact
formulas, enumerates *effective* orders (permutations that differ only by
swapping identical tasks are the same order), and locates optimal placements
for the structured scenarios: one special task among identical ones, and
tasks split into categories at a common cross-category distance.

Orders are tuples of 1-based task labels in learning position; category
sequences are tuples of 1-based category ids.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import TaskGeometry, permute_geometry
from .errors import OrderSearchError, TaskSetupError
from .theory import (
    Regime,
    SystemParams,
    _r_powers,
    expected_forgetting,
    expected_generalization,
)

__all__ = [
    "OrderScore",
    "OrderRanking",
    "CategoryScenario",
    "OneVsManyPlacement",
    "OrderDivergenceReport",
    "score_order",
    "brute_force_optimal_order",
    "one_vs_many_optimal_position",
    "forgetting_vs_generalization_order_divergence",
    "order_from_category_sequence",
    "effective_category_sequences",
]

#: Hard cap on the factorial search.
BRUTE_FORCE_MAX_T = 10
#: Relative tolerance for grouping orders that tie at the minimum.
TIE_REL_TOL = 1e-12


@dataclass(frozen=True)
class OrderScore:
    """Exact metrics of one learning order.

    ``order_dependent_forgetting`` is the pairwise-gap part of the
    forgetting (same 1/(T-1) scaling), i.e. forgetting minus the
    order-invariant norm and noise parts. Comparing it across orders is
    meaningful when all task norms are equal; ``forgetting`` itself is always
    the full value on the permuted geometry.
    """

    order: tuple[int, ...]
    forgetting: float
    generalization: float
    order_dependent_forgetting: float


@dataclass(frozen=True)
class OrderRanking:
    """All effective orders sorted ascending by one objective."""

    objective: str
    entries: tuple[OrderScore, ...]

    def value(self, entry: OrderScore) -> float:
        return getattr(entry, self.objective)

    @property
    def best(self) -> OrderScore:
        return self.entries[0]

    @property
    def minimizers(self) -> tuple[OrderScore, ...]:
        floor = self.value(self.entries[0])
        tol = TIE_REL_TOL * (1.0 + abs(floor))
        return tuple(e for e in self.entries if self.value(e) <= floor + tol)


@dataclass(frozen=True)
class CategoryScenario:
    """Tasks split into categories: distance 0 within, a common value across.

    All tasks share the same squared norm. ``tasks_per_category`` fixes the
    canonical task labeling: category 1 owns tasks 1..m1, category 2 the next
    m2 labels, and so on.
    """

    tasks_per_category: tuple[int, ...]
    cross_distance: float = 1.0
    within_distance: float = 0.0
    norm_sq: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.tasks_per_category)
        if len(sizes) < 2 or any(m < 1 for m in sizes):
            raise TaskSetupError(
                f"need >= 2 categories with >= 1 task each, got {sizes!r}"
            )
        if self.cross_distance <= 0:
            raise TaskSetupError("cross_distance must be positive")
        if self.within_distance != 0.0:
            raise TaskSetupError("within-category distance is fixed at 0")
        if self.norm_sq < 0:
            raise TaskSetupError("norm_sq must be nonnegative")
        object.__setattr__(self, "tasks_per_category", sizes)

    @property
    def category_count(self) -> int:
        return len(self.tasks_per_category)

    @property
    def T(self) -> int:
        return sum(self.tasks_per_category)

    def labels(self) -> tuple[int, ...]:
        """Category id of each task label, in canonical grouped order."""
        out = []
        for cat, size in enumerate(self.tasks_per_category, start=1):
            out.extend([cat] * size)
        return tuple(out)

    def geometry(self) -> TaskGeometry:
        labels = np.array(self.labels())
        dist = np.where(labels[:, None] == labels[None, :], 0.0, self.cross_distance)
        return TaskGeometry(
            norms_sq=np.full(self.T, self.norm_sq), dist_sq=dist
        )


def _pairwise_gap_term(geometry: TaskGeometry, params: SystemParams) -> float:
    """(1/(T-1)) sum_{i<j} c_{i,j} |w*_i - w*_j|^2 on the given geometry."""
    T = params.T
    r = float(params.r)
    rpow = _r_powers(r, T)
    total = 0.0
    for i in range(1, T):
        for j in range(i + 1, T + 1):
            c_ij = (1.0 - r) * (rpow[T - i] - rpow[j - i] + rpow[T - j])
            total += c_ij * geometry.dist_sq[i - 1, j - 1]
    return total / (T - 1)


def score_order(
    order: Sequence[int], geometry: TaskGeometry, params: SystemParams
) -> OrderScore:
    """Exact forgetting / generalization when tasks are learned in ``order``."""
    params._require(Regime.OVERPARAMETERIZED)
    permuted = permute_geometry(geometry, order)
    return OrderScore(
        order=tuple(int(v) for v in order),
        forgetting=expected_forgetting(permuted, params),
        generalization=expected_generalization(permuted, params),
        order_dependent_forgetting=_pairwise_gap_term(permuted, params),
    )


def _task_equivalence_labels(geometry: TaskGeometry) -> tuple[int, ...]:
    """Category id per task: tasks are equivalent iff swapping them leaves
    the geometry unchanged (equal norm, zero mutual distance, equal rows)."""
    T = geometry.T
    scale = max(1.0, float(geometry.dist_sq.max()), float(geometry.norms_sq.max()))
    tol = 1e-12 * scale

    def equivalent(i: int, j: int) -> bool:
        if abs(geometry.norms_sq[i] - geometry.norms_sq[j]) > tol:
            return False
        if geometry.dist_sq[i, j] > tol:
            return False
        for k in range(T):
            if k in (i, j):
                continue
            if abs(geometry.dist_sq[i, k] - geometry.dist_sq[j, k]) > tol:
                return False
        return True

    labels = [0] * T
    next_label = 0
    for i in range(T):
        if labels[i]:
            continue
        next_label += 1
        labels[i] = next_label
        for j in range(i + 1, T):
            if not labels[j] and equivalent(i, j):
                labels[j] = next_label
    return tuple(labels)


def _distinct_permutations(items: Sequence[int]):
    """Multiset permutations in lexicographic order."""
    pool = sorted(items)
    n = len(pool)
    while True:
        yield tuple(pool)
        # next lexicographic permutation
        k = n - 2
        while k >= 0 and pool[k] >= pool[k + 1]:
            k -= 1
        if k < 0:
            return
        l = n - 1
        while pool[l] <= pool[k]:
            l -= 1
        pool[k], pool[l] = pool[l], pool[k]
        pool[k + 1:] = reversed(pool[k + 1:])


def effective_category_sequences(
    sizes: Sequence[int], collapse_relabelings: bool = False
) -> list[tuple[int, ...]]:
    """Distinct category sequences for categories of the given sizes.

    With ``collapse_relabelings`` every sequence obtainable by renaming
    categories of equal size is represented once, by its lexicographically
    smallest relabeling (e.g. for two equal categories, ``(1,2,1,2)`` stands
    for ``(2,1,2,1)`` too).
    """
    base = []
    for cat, size in enumerate(sizes, start=1):
        base.extend([cat] * size)
    sequences = list(_distinct_permutations(base))
    if not collapse_relabelings:
        return sequences
    k = len(sizes)
    swappable = [
        [c + 1 for c in range(k) if sizes[c] == size] for size in sorted(set(sizes))
    ]
    bijections = []
    for assignment in itertools.product(
        *[itertools.permutations(group) for group in swappable]
    ):
        mapping = {}
        for group, perm in zip(swappable, assignment):
            mapping.update(dict(zip(group, perm)))
        bijections.append(mapping)
    seen = set()
    out = []
    for seq in sequences:
        canonical = min(tuple(m[c] for c in seq) for m in bijections)
        if canonical not in seen:
            seen.add(canonical)
            out.append(canonical)
    return sorted(out)


def order_from_category_sequence(
    sequence: Sequence[int], sizes: Sequence[int]
) -> tuple[int, ...]:
    """Lexicographically smallest task order realizing a category sequence.

    Task labels follow the canonical grouping of :class:`CategoryScenario`:
    category c owns labels ``1 + sum(sizes[:c-1]) .. sum(sizes[:c])``, handed
    out in ascending order as the sequence requests them.
    """
    starts = [1 + sum(sizes[:c]) for c in range(len(sizes))]
    queues = {c + 1: list(range(starts[c], starts[c] + sizes[c])) for c in range(len(sizes))}
    order = []
    for cat in sequence:
        if cat not in queues or not queues[cat]:
            raise OrderSearchError(
                f"category sequence {tuple(sequence)!r} does not match sizes {tuple(sizes)!r}"
            )
        order.append(queues[cat].pop(0))
    if any(queues[c] for c in queues):
        raise OrderSearchError("category sequence is shorter than the task count")
    return tuple(order)


def brute_force_optimal_order(
    geometry: TaskGeometry,
    params: SystemParams,
    objective: str = "forgetting",
    collapse_category_relabelings: bool = False,
) -> OrderRanking:
    """Score every effective order and rank them by the chosen objective.

    Orders that differ only by permuting geometrically identical tasks are
    scored once. ``collapse_category_relabelings`` additionally identifies
    orders that differ by renaming whole categories of equal size, matching
    the effective-order enumeration used for the category scenarios.
    """
    if objective not in ("forgetting", "generalization"):
        raise OrderSearchError(f"unknown objective {objective!r}")
    T = geometry.T
    if T > BRUTE_FORCE_MAX_T:
        raise OrderSearchError(
            f"brute force is capped at T={BRUTE_FORCE_MAX_T} (got T={T}); "
            "enumerate category sequences instead for larger instances"
        )
    if T < 2:
        raise OrderSearchError("order search needs at least two tasks")
    labels = _task_equivalence_labels(geometry)
    sizes = [labels.count(c) for c in range(1, max(labels) + 1)]
    # Task labels in _task_equivalence_labels order are not grouped by
    # category; build queues keyed by category id directly.
    queues_template = {c: [i + 1 for i in range(T) if labels[i] == c] for c in set(labels)}
    sequences = effective_category_sequences(
        sizes, collapse_relabelings=collapse_category_relabelings
    ) if _grouped(labels) else None
    entries = []
    if sequences is not None:
        for seq in sequences:
            queues = {c: list(q) for c, q in queues_template.items()}
            order = tuple(queues[c].pop(0) for c in seq)
            entries.append(score_order(order, geometry, params))
    else:
        # Rare non-grouped labelings (possible only for geometries not built
        # from grouped scenarios): enumerate label sequences directly.
        seen = set()
        for perm in itertools.permutations(range(1, T + 1)):
            key = tuple(labels[t - 1] for t in perm)
            if collapse_category_relabelings:
                key = _canonical_relabeling(key, sizes)
            if key in seen:
                continue
            seen.add(key)
            entries.append(score_order(perm, geometry, params))
    entries.sort(key=lambda e: (getattr(e, objective), e.order))
    return OrderRanking(objective=objective, entries=tuple(entries))


def _grouped(labels: tuple[int, ...]) -> bool:
    """True when each category's tasks form one contiguous ascending block."""
    return list(labels) == sorted(labels)


def _canonical_relabeling(seq: tuple[int, ...], sizes: Sequence[int]) -> tuple[int, ...]:
    k = len(sizes)
    groups = {}
    for c in range(1, k + 1):
        groups.setdefault(sizes[c - 1], []).append(c)
    best = None
    for assignment in itertools.product(
        *[itertools.permutations(g) for g in groups.values()]
    ):
        mapping = {}
        for group, perm in zip(groups.values(), assignment):
            mapping.update(dict(zip(group, perm)))
        cand = tuple(mapping[c] for c in seq)
        if best is None or cand < best:
            best = cand
    return best


@dataclass(frozen=True)
class OneVsManyPlacement:
    """Optimal learning position of one special task among identical peers.

    ``i_star`` is the exact integer argmin of the closed-form forgetting over
    positions (smallest position on ties); ``alpha_star`` is the continuous
    relaxation's optimum ``sqrt(r^T / (T - 2 - (T-1) r))`` reported as a
    diagnostic, or None when its denominator is nonpositive.
    """

    i_star: int
    alpha_star: float | None
    forgetting_by_position: tuple[float, ...]

    @property
    def T(self) -> int:
        return len(self.forgetting_by_position)


def one_vs_many_optimal_position(
    T: int, params: SystemParams, cross_distance: float = 1.0
) -> OneVsManyPlacement:
    """Place one special task among T-1 identical tasks to minimize forgetting.

    The special task sits at unit (or ``cross_distance``) squared gap from
    every other task; all norms are equal. Positions are scored with the full
    closed form and the integer argmin returned.
    """
    params._require(Regime.OVERPARAMETERIZED)
    if T < 3:
        raise OrderSearchError(f"one-vs-many placement needs T >= 3, got T={T}")
    if params.T != T:
        raise TaskSetupError(f"params declare T={params.T}, expected {T}")
    scenario = CategoryScenario(
        tasks_per_category=(1, T - 1), cross_distance=cross_distance
    )
    geometry = scenario.geometry()
    others = list(range(2, T + 1))
    values = []
    for position in range(1, T + 1):
        order = tuple(others[: position - 1] + [1] + others[position - 1:])
        values.append(score_order(order, geometry, params).forgetting)
    i_star = 1 + min(range(T), key=lambda idx: (values[idx], idx))
    r = float(params.r)
    denom = T - 2 - (T - 1) * r
    alpha_star = math.sqrt(_r_powers(r, T)[T] / denom) if denom > 0 else None
    return OneVsManyPlacement(
        i_star=i_star, alpha_star=alpha_star, forgetting_by_position=tuple(values)
    )


@dataclass(frozen=True)
class OrderDivergenceReport:
    """Do the forgetting-optimal and generalization-optimal orders agree?

    ``special_positions_*`` list where the special task sits in each
    minimizer (one-vs-many scenarios only, else None).
    """

    scenario_kind: str
    forgetting_minimizers: tuple[tuple[int, ...], ...]
    generalization_minimizers: tuple[tuple[int, ...], ...]
    shared_minimizers: tuple[tuple[int, ...], ...]
    special_positions_forgetting: tuple[int, ...] | None
    special_positions_generalization: tuple[int, ...] | None

    @property
    def objectives_agree(self) -> bool:
        return len(self.shared_minimizers) > 0


def forgetting_vs_generalization_order_divergence(
    scenario: CategoryScenario, params: SystemParams
) -> OrderDivergenceReport:
    """Compare both objectives' optimal orders on a two-category scenario.

    Supported shapes: one special task vs many identical ones (category
    sizes 1 and m), or two categories of equal size. For one-vs-many the
    generalization optimum puts the special task first while the forgetting
    optimum delays it; for equal occurrence the generalization error is
    order-invariant, so the forgetting optimum is shared.
    """
    sizes = scenario.tasks_per_category
    if scenario.category_count != 2 or not (1 in sizes or sizes[0] == sizes[1]):
        raise OrderSearchError(
            f"unsupported scenario shape {sizes!r}: need sizes (1, m) or (m, m)"
        )
    one_vs_many = 1 in sizes and sizes[0] != sizes[1]
    geometry = scenario.geometry()
    rank_f = brute_force_optimal_order(geometry, params, "forgetting")
    rank_g = brute_force_optimal_order(geometry, params, "generalization")
    min_f = tuple(e.order for e in rank_f.minimizers)
    min_g = tuple(e.order for e in rank_g.minimizers)
    shared = tuple(o for o in min_f if o in set(min_g))
    pos_f = pos_g = None
    if one_vs_many:
        special = 1 if sizes[0] == 1 else sizes[0] + 1
        pos_f = tuple(o.index(special) + 1 for o in min_f)
        pos_g = tuple(o.index(special) + 1 for o in min_g)
    return OrderDivergenceReport(
        scenario_kind="one_vs_many" if one_vs_many else "equal_occurrence",
        forgetting_minimizers=min_f,
        generalization_minimizers=min_g,
        shared_minimizers=shared,
        special_positions_forgetting=pos_f,
        special_positions_generalization=pos_g,
    )

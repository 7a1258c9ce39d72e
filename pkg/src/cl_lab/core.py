"""Domain types shared by every module: task ensembles and their geometry.

A *task ensemble* is an ordered set of T ground-truth weight vectors in a
common feature space of dimension p, together with the per-task sample count
n and noise level sigma. Its *geometry* — the squared norms ``|w_i|^2`` and
pairwise squared gaps ``|w_i - w_j|^2`` — is the sufficient statistic for
every closed-form expectation in :mod:`cl_lab.theory`, so it gets its own
type that can also be built directly from user-supplied matrices.

Indexing convention: tasks are numbered 1..T in documentation, the CLI, and
every public argument that names a task or a position (matching the usual
mathematical notation). Arrays stored on these types are plain numpy arrays
and therefore 0-based; ``norms_sq[0]`` belongs to task 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TaskSetupError

__all__ = [
    "TaskEnsemble",
    "TaskGeometry",
    "OverparamRatio",
    "geometry_from_ensemble",
    "permute_geometry",
    "ensemble_from_geometry",
]

#: Tolerance for the positive-semidefiniteness check of the implied Gram
#: matrix (relative to its largest entry).
GRAM_PSD_TOL = 1e-9


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out is a:
        out = out.copy()
    out.setflags(write=False)
    return out


def _constant_scalar(value, name: str):
    """Collapse a per-task sequence to its common value; reject mixtures.

    Heterogeneous per-task sample counts / noise levels are deliberately
    unsupported: every expectation implemented downstream assumes a single
    n and a single sigma across tasks.
    """
    if np.ndim(value) == 0:
        return value
    values = list(np.asarray(value).ravel())
    if not values:
        raise TaskSetupError(f"{name} sequence is empty")
    if any(v != values[0] for v in values[1:]):
        raise TaskSetupError(
            f"heterogeneous per-task {name} is not supported; "
            f"got {values!r} (a single value must apply to every task)"
        )
    return values[0]


@dataclass(frozen=True)
class TaskEnsemble:
    """Explicit ground truths plus the sampling parameters.

    Attributes:
        ground_truths: (T, p) array; row t-1 is the ground truth of task t,
            already expanded to the common feature dimension p.
        n: samples per task (same for every task).
        sigma: noise standard deviation (same for every task).
    """

    ground_truths: np.ndarray
    n: int
    sigma: float

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.ground_truths, dtype=np.float64))
        if w.ndim != 2 or w.size == 0:
            raise TaskSetupError("ground_truths must be a nonempty (T, p) array")
        if not np.all(np.isfinite(w)):
            raise TaskSetupError("ground_truths contain non-finite entries")
        n = _constant_scalar(self.n, "n")
        sigma = _constant_scalar(self.sigma, "sigma")
        if int(n) != n or n < 1:
            raise TaskSetupError(f"n must be a positive integer, got {n!r}")
        if sigma < 0 or not np.isfinite(sigma):
            raise TaskSetupError(f"sigma must be finite and >= 0, got {sigma!r}")
        object.__setattr__(self, "ground_truths", _as_readonly(w))
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "sigma", float(sigma))

    @property
    def T(self) -> int:
        return self.ground_truths.shape[0]

    @property
    def p(self) -> int:
        return self.ground_truths.shape[1]


@dataclass(frozen=True)
class TaskGeometry:
    """Squared norms and pairwise squared distances of the ground truths.

    Can be constructed directly from matrices (no vectors needed), in which
    case an embeddability check guarantees some vector realization exists:
    the implied Gram matrix ``G[i,j] = (norms_sq[i] + norms_sq[j] -
    dist_sq[i,j]) / 2`` must be positive semidefinite up to tolerance.
    """

    norms_sq: np.ndarray
    dist_sq: np.ndarray

    def __post_init__(self):
        norms = np.asarray(self.norms_sq, dtype=np.float64).ravel()
        dist = np.asarray(self.dist_sq, dtype=np.float64)
        T = norms.size
        if T < 1:
            raise TaskSetupError("norms_sq must have at least one entry")
        if dist.shape != (T, T):
            raise TaskSetupError(
                f"dist_sq must be ({T}, {T}) to match norms_sq, got {dist.shape}"
            )
        if not (np.all(np.isfinite(norms)) and np.all(np.isfinite(dist))):
            raise TaskSetupError("geometry entries must be finite")
        if np.any(norms < 0):
            raise TaskSetupError("norms_sq entries must be nonnegative")
        scale = max(1.0, float(np.abs(dist).max()), float(norms.max()))
        if np.abs(np.diag(dist)).max(initial=0.0) > GRAM_PSD_TOL * scale:
            raise TaskSetupError("dist_sq diagonal must be zero")
        if np.abs(dist - dist.T).max(initial=0.0) > GRAM_PSD_TOL * scale:
            raise TaskSetupError("dist_sq must be symmetric")
        if dist.min(initial=0.0) < -GRAM_PSD_TOL * scale:
            raise TaskSetupError("dist_sq entries must be nonnegative")
        # Store an exactly symmetric, zero-diagonal, nonnegative copy so the
        # invariants hold bit-for-bit on the object itself.
        dist = np.maximum(0.5 * (dist + dist.T), 0.0)
        np.fill_diagonal(dist, 0.0)
        gram = 0.5 * (norms[:, None] + norms[None, :] - dist)
        min_eig = float(np.linalg.eigvalsh(gram)[0])
        if min_eig < -GRAM_PSD_TOL * max(1.0, float(np.abs(gram).max())):
            raise TaskSetupError(
                "geometry is not embeddable: implied Gram matrix has a "
                f"negative eigenvalue {min_eig:.3e}"
            )
        object.__setattr__(self, "norms_sq", _as_readonly(norms))
        object.__setattr__(self, "dist_sq", _as_readonly(dist))

    @property
    def T(self) -> int:
        return self.norms_sq.size

    def gram(self) -> np.ndarray:
        """Implied Gram matrix of inner products ``<w_i, w_j>``."""
        n = self.norms_sq
        return 0.5 * (n[:, None] + n[None, :] - self.dist_sq)


@dataclass(frozen=True)
class OverparamRatio:
    """Overparameterization ratio r = 1 - n/p, valid only for p > n."""

    r: float

    def __post_init__(self):
        if not (0.0 <= self.r < 1.0):
            raise TaskSetupError(f"overparameterization ratio must be in [0, 1), got {self.r!r}")

    @classmethod
    def from_counts(cls, n: int, p: int) -> "OverparamRatio":
        if p <= n:
            raise TaskSetupError(f"ratio requires p > n, got n={n}, p={p}")
        return cls(1.0 - n / p)

    def __float__(self) -> float:
        return self.r


def geometry_from_ensemble(ensemble: TaskEnsemble) -> TaskGeometry:
    """Exact norms and pairwise distances of an ensemble's ground truths."""
    w = ensemble.ground_truths
    T = ensemble.T
    norms = np.einsum("ij,ij->i", w, w)
    dist = np.zeros((T, T))
    for i in range(T):
        for j in range(i + 1, T):
            gap = w[i] - w[j]
            d = float(gap @ gap)
            dist[i, j] = d
            dist[j, i] = d
    return TaskGeometry(norms_sq=norms, dist_sq=dist)


def _validate_order(order: Sequence[int], T: int) -> np.ndarray:
    idx = np.asarray(order)
    if idx.shape != (T,) or sorted(int(v) for v in idx) != list(range(1, T + 1)):
        raise TaskSetupError(
            f"order must be a permutation of 1..{T}, got {list(order)!r}"
        )
    return idx.astype(np.intp) - 1


def permute_geometry(geometry: TaskGeometry, order: Sequence[int]) -> TaskGeometry:
    """Geometry relabeled by a learning order.

    ``order[k]`` (1-based) is the original task learned at position k+1, so
    the returned geometry lists tasks in learning order:
    ``out.norms_sq[k] = in.norms_sq[order[k] - 1]`` and likewise for dist_sq.
    """
    idx = _validate_order(order, geometry.T)
    return TaskGeometry(
        norms_sq=geometry.norms_sq[idx],
        dist_sq=geometry.dist_sq[np.ix_(idx, idx)],
    )


def ensemble_from_geometry(
    geometry: TaskGeometry, n: int, p: int, sigma: float
) -> TaskEnsemble:
    """Realize explicit ground-truth vectors with the given geometry.

    The implied Gram matrix is factored (eigendecomposition with small
    negative eigenvalues clipped to zero), giving T vectors in a T-dimensional
    subspace which are then zero-padded to dimension p. Requires p >= T.
    """
    T = geometry.T
    if p < T:
        raise TaskSetupError(
            f"realizing {T} tasks requires feature dimension p >= {T}, got p={p}"
        )
    evals, evecs = np.linalg.eigh(geometry.gram())
    w_small = evecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]
    w = np.zeros((T, p))
    w[:, :T] = w_small
    return TaskEnsemble(ground_truths=w, n=n, sigma=sigma)

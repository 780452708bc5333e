"""Gaussian-process surrogate over block encodings.

RBF kernel with one shared lengthscale; hyperparameters are picked from a small
fixed grid by log marginal likelihood of the mean-centred targets. The kernel
matrix is Cholesky-factorised once per fit, escalating the diagonal jitter
when the factorisation fails.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from search_space import (
    Block,
    BlockTag,
    SearchSpace,
    block_space_size,
    encode_block,
    encode_blocks,
    enumerate_blocks,
    random_block,
)


JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
ENUMERATION_LIMIT = 10_000
SAMPLE_SIZE = 1_000


class ArchiveTooSmallError(ValueError):
    """Fitting needs at least two archive entries."""


class SurrogateDegenerateError(RuntimeError):
    """No grid cell yields a positive-definite kernel matrix."""


@dataclass(frozen=True)
class GpHyperparams:
    lengthscale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_variance <= 0 or self.noise_variance < 0:
            raise ValueError(f"invalid GP hyperparameters: {self}")


DEFAULT_GRID = tuple(
    GpHyperparams(ell, sf2, sn2)
    for ell, sf2, sn2 in itertools.product((0.5, 1.0, 2.0, 4.0), (0.25, 1.0), (1e-6, 1e-4, 1e-2))
)


@dataclass
class GpModel:
    training_inputs: np.ndarray
    training_targets: np.ndarray
    target_mean: float
    hyperparams: GpHyperparams
    cholesky: np.ndarray
    weights: np.ndarray
    jitter: float
    log_marginal_likelihood: float


@dataclass(eq=False)
class ArchiveEntry:
    block: Block
    encoding: np.ndarray
    score: float
    generation_added: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"archive score must lie in [0, 1], got {self.score}")


@dataclass
class Archive:
    capacity: int = 256
    entries: list[ArchiveEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("archive capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    def get(self, block: Block) -> Optional[ArchiveEntry]:
        for entry in self.entries:
            if entry.block == block:
                return entry
        return None

    def ranked(self) -> list[ArchiveEntry]:
        """Entries by score descending, older first on ties."""
        return sorted(self.entries, key=lambda e: (-e.score, e.generation_added))


def rbf_kernel(u, v, theta: GpHyperparams) -> float:
    diff = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    return float(theta.signal_variance * math.exp(-float(diff @ diff) / (2.0 * theta.lengthscale**2)))


def kernel_matrix(x: np.ndarray, y: np.ndarray, theta: GpHyperparams) -> np.ndarray:
    sq = cdist(np.atleast_2d(x), np.atleast_2d(y), metric="sqeuclidean")
    return theta.signal_variance * np.exp(-sq / (2.0 * theta.lengthscale**2))


def _factorize(k: np.ndarray, noise: float):
    eye = np.eye(k.shape[0])
    for jitter in JITTER_LADDER:
        try:
            factor, lower = linalg.cho_factor(k + (noise + jitter) * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(factor)):
            return factor, jitter
    raise SurrogateDegenerateError("kernel matrix not positive definite after jitter escalation")


def log_marginal_likelihood(x: np.ndarray, y_centered: np.ndarray, theta: GpHyperparams):
    """``(lml, lower_factor, weights, jitter)`` for centred targets."""
    factor, jitter = _factorize(kernel_matrix(x, x, theta), theta.noise_variance)
    weights = linalg.cho_solve((factor, True), y_centered, check_finite=False)
    lower = np.tril(factor)
    lml = (
        -0.5 * float(y_centered @ weights)
        - float(np.sum(np.log(np.diagonal(lower))))
        - 0.5 * len(y_centered) * math.log(2.0 * math.pi)
    )
    return lml, lower, weights, jitter


def fit(archive: Archive, theta_grid: Sequence[GpHyperparams] = DEFAULT_GRID) -> GpModel:
    if len(archive) < 2:
        raise ArchiveTooSmallError(f"fitting needs >= 2 archive entries, got {len(archive)}")
    x = np.vstack([entry.encoding for entry in archive.entries])
    y = np.asarray([entry.score for entry in archive.entries], dtype=float)
    return fit_arrays(x, y, theta_grid)


def fit_arrays(x: np.ndarray, y: np.ndarray, theta_grid: Sequence[GpHyperparams] = DEFAULT_GRID) -> GpModel:
    """Grid search over ``theta_grid``; the first cell wins ties."""
    mean = float(np.mean(y))
    centered = y - mean
    best = None
    for theta in theta_grid:
        try:
            lml, lower, weights, jitter = log_marginal_likelihood(x, centered, theta)
        except SurrogateDegenerateError:
            continue
        if best is None or lml > best[0]:
            best = (lml, theta, lower, weights, jitter)
    if best is None:
        raise SurrogateDegenerateError("every hyperparameter cell failed to factorise")
    lml, theta, lower, weights, jitter = best
    return GpModel(
        training_inputs=x,
        training_targets=y,
        target_mean=mean,
        hyperparams=theta,
        cholesky=lower,
        weights=weights,
        jitter=jitter,
        log_marginal_likelihood=lml,
    )


def predict_many(model: GpModel, encodings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k_star = kernel_matrix(model.training_inputs, encodings, model.hyperparams)
    means = model.target_mean + k_star.T @ model.weights
    v = linalg.solve_triangular(model.cholesky, k_star, lower=True, check_finite=False)
    variances = model.hyperparams.signal_variance - np.sum(v * v, axis=0)
    return means, np.maximum(variances, 0.0)


def predict(model: GpModel, encoding) -> tuple[float, float]:
    means, variances = predict_many(model, np.atleast_2d(np.asarray(encoding, dtype=float)))
    return float(means[0]), float(variances[0])


def acquisition(mean, variance, beta: float):
    """Upper confidence bound."""
    return mean + beta * np.sqrt(np.maximum(variance, 0.0))


def candidate_pool(
    space: SearchSpace,
    tag: BlockTag,
    rng: np.random.Generator,
    enumeration_limit: int = ENUMERATION_LIMIT,
    sample_size: int = SAMPLE_SIZE,
) -> list[Block]:
    """Whole block sub-space when small enough, else a uniform sample."""
    if block_space_size(space, tag) <= enumeration_limit:
        return list(enumerate_blocks(space, tag))
    return [random_block(space, tag, rng) for _ in range(sample_size)]


def propose_next(space: SearchSpace, model: GpModel, candidate_blocks: Sequence[Block], beta: float) -> Block:
    if not candidate_blocks:
        raise ValueError("cannot propose from an empty candidate list")
    tag = candidate_blocks[0].block_tag
    means, variances = predict_many(model, encode_blocks(space, tag, candidate_blocks))
    return candidate_blocks[int(np.argmax(acquisition(means, variances, beta)))]


def make_entry(space: SearchSpace, block: Block, score: float, generation: int) -> ArchiveEntry:
    return ArchiveEntry(block, encode_block(space, block), float(score), int(generation))


def archive_insert(archive: Archive, entry: ArchiveEntry) -> Archive:
    """Deduplicate by block (higher score kept), then evict down to capacity."""
    existing = archive.get(entry.block)
    if existing is not None:
        if entry.score > existing.score:
            existing.score = entry.score
        return archive
    archive.entries.append(entry)
    while len(archive.entries) > archive.capacity:
        worst = min(range(len(archive.entries)), key=lambda i: (archive.entries[i].score, archive.entries[i].generation_added))
        del archive.entries[worst]
    return archive


def archive_extend(archive: Archive, entries: Iterable[ArchiveEntry]) -> Archive:
    for entry in entries:
        archive_insert(archive, entry)
    return archive

"""Residual vector quantisation: greedy cascade encoding, decoding, codebook training
and per-codebook loss weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, ShapeError, TrainingError
from .frontend import FeatureSequence
from .kmeans import kmeans_fit, nearest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray
    index: int = 0

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ShapeError(f"codebook needs K_cb >= 2 rows, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise CorruptionError(f"codebook {self.index} has non-finite entries")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class TokenTargets:
    """``Q x T`` matrix of 0-based codebook indices."""

    indices: np.ndarray
    n_classes: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise ShapeError(f"token targets must be Q x T, got shape {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_classes):
            raise CorruptionError(f"token index outside [0, {self.n_classes})")
        object.__setattr__(self, "indices", idx)

    @property
    def n_books(self) -> int:
        return self.indices.shape[0]

    @property
    def length(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class CodebookWeights:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or np.any(g < 0) or abs(g.sum() - 1.0) > 1e-9:
            raise ConfigError(f"codebook weights must be non-negative and sum to 1, got {g}")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def uniform(cls, n: int) -> "CodebookWeights":
        return cls(np.full(n, 1.0 / n))


def _as_matrix(x) -> np.ndarray:
    data = x.data if isinstance(x, FeatureSequence) else x
    return np.asarray(data, dtype=np.float64)


def rvq_encode(x, books: list[Codebook]) -> tuple[TokenTargets, np.ndarray]:
    """Greedy residual cascade.

    Returns the ``Q x T`` indices and, per stage, the mean squared norm of the
    residual left after that stage.
    """
    if not books:
        raise ShapeError("rvq_encode needs at least one codebook")
    r = _as_matrix(x).copy()
    if r.ndim != 2 or any(b.dim != r.shape[1] for b in books):
        raise ShapeError(f"features of shape {r.shape} do not match codebook dim {books[0].dim}")
    if len({b.size for b in books}) != 1:
        raise ShapeError("all codebooks must have the same number of entries")
    indices = np.empty((len(books), r.shape[0]), dtype=np.int64)
    energy = np.empty(len(books))
    for q, book in enumerate(books):
        idx, _ = nearest(r, book.entries)
        indices[q] = idx
        r -= book.entries[idx]
        energy[q] = float(np.mean(np.sum(r ** 2, axis=1))) if r.shape[0] else 0.0
    return TokenTargets(indices, books[0].size), energy


def rvq_decode(targets: TokenTargets, books: list[Codebook], dim: int | None = None) -> FeatureSequence:
    """Sum the selected entries over the cascade. An empty cascade decodes to zeros
    (pass ``dim`` in that case)."""
    idx = targets.indices
    if idx.shape[0] > len(books):
        raise ShapeError(f"{idx.shape[0]} index rows but only {len(books)} codebooks")
    if dim is None:
        if not books:
            raise ShapeError("dim is required when there are no codebooks")
        dim = books[0].dim
    out = np.zeros((idx.shape[1], dim))
    for q in range(idx.shape[0]):
        book = books[q]
        if idx[q].size and (idx[q].min() < 0 or idx[q].max() >= book.size):
            raise CorruptionError(f"index out of range for codebook {q}")
        out += book.entries[idx[q]]
    return FeatureSequence(out, kind="mel")


def train_codebooks(
    corpus: list,
    n_books: int,
    size: int,
    rng: np.random.Generator,
    max_frames: int | None = 30000,
    max_iter: int = 300,
) -> list[Codebook]:
    """Fit each stage by k-means on the residuals left by the previous stages.

    At most ``max_frames`` frames (sampled without replacement) are used.
    """
    frames = np.concatenate([_as_matrix(x) for x in corpus], axis=0) if corpus else np.empty((0, 0))
    if frames.shape[0] < size:
        raise TrainingError(f"need at least K_cb={size} frames to train codebooks, got {frames.shape[0]}")
    if max_frames is not None and frames.shape[0] > max_frames:
        pick = np.sort(rng.choice(frames.shape[0], size=max_frames, replace=False))
        frames = frames[pick]
    residual = frames.copy()
    books = []
    for q in range(n_books):
        km = kmeans_fit(residual, size, rng, max_iter=max_iter)
        book = Codebook(km.centroids, q)
        idx, _ = nearest(residual, book.entries)
        residual -= book.entries[idx]
        log.info("codebook %d: %d iterations, residual energy %.6g", q, km.n_iter, np.mean(np.sum(residual ** 2, axis=1)))
        books.append(book)
    return books


def compute_gamma(books: list[Codebook], sample: list) -> CodebookWeights:
    """Per-codebook weights proportional to the average residual energy after each stage."""
    if not sample:
        raise ConfigError("compute_gamma needs a non-empty sample")
    err = np.mean([rvq_encode(x, books)[1] for x in sample], axis=0)
    total = err.sum()
    if not total > 0:
        log.warning("all quantisation errors are zero; using uniform codebook weights")
        return CodebookWeights.uniform(len(books))
    return CodebookWeights(err / total)


def books_to_tensors(books: list[Codebook], weights: CodebookWeights | None = None) -> tuple[dict, dict]:
    tensors = {f"codebook.{b.index}": b.entries for b in books}
    if weights is not None:
        tensors["gamma"] = weights.gamma
    meta = {
        "kind": "rvq",
        "books": [{"q": b.index, "K_cb": b.size, "F": b.dim} for b in books],
    }
    return tensors, meta


def books_from_tensors(tensors: dict, meta: dict) -> tuple[list[Codebook], CodebookWeights | None]:
    try:
        books = [Codebook(tensors[f"codebook.{m['q']}"], m["q"]) for m in meta["books"]]
    except KeyError as exc:
        raise CorruptionError(f"tokenizer container lacks {exc}") from exc
    gamma = CodebookWeights(tensors["gamma"]) if "gamma" in tensors else None
    return books, gamma

"""Numeric primitives of the cascade.

Probability normalization, Shannon entropy (nats), top-1/top-2 margin, and
deterministic top-k selection over a fixed label vocabulary. Everything here
is a pure function over immutable inputs and safe to call concurrently.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import ValidationError

# Tolerance for "probabilities sum to one" checks.
SUM_TOLERANCE = 1e-9

_TERMINAL_PUNCTUATION = ".,;:!?"
_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_label(text: str) -> str:
    """Canonical label form used for uniqueness checks and response matching.

    Case-folds, trims surrounding whitespace, strips terminal punctuation,
    and collapses internal whitespace runs to single spaces.
    """
    out = text.strip().casefold()
    out = out.rstrip(_TERMINAL_PUNCTUATION).rstrip()
    return _WHITESPACE_RUN.sub(" ", out)


@dataclass(frozen=True)
class LabelSet:
    """Ordered, immutable class vocabulary.

    Index ``i`` identifies class ``i`` for the lifetime of a run. Labels must
    be non-empty and unique after canonical normalization, so "Watercress"
    and "watercress " cannot coexist.
    """

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValidationError("label set is empty")
        seen: dict[str, int] = {}
        for i, label in enumerate(self.labels):
            key = normalize_label(label)
            if not key:
                raise ValidationError(f"label at position {i} is blank after normalization")
            if key in seen:
                raise ValidationError(
                    f"duplicate label {label!r} at positions {seen[key]} and {i} "
                    f"(both normalize to {key!r})"
                )
            seen[key] = i

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> str:
        return self.labels[index]

    def __iter__(self) -> Iterator[str]:
        return iter(self.labels)

    @cached_property
    def _exact_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.labels)}

    @cached_property
    def _normalized_index(self) -> dict[str, int]:
        return {normalize_label(label): i for i, label in enumerate(self.labels)}

    def index_of(self, label: str) -> int | None:
        """Index for a label string, exact match first, then normalized."""
        hit = self._exact_index.get(label)
        if hit is not None:
            return hit
        return self._normalized_index.get(normalize_label(label))


@dataclass(frozen=True)
class CandidateSet:
    """Top-k labels by probability.

    Entries are ``(label_index, probability)`` pairs sorted by descending
    probability, ties broken by ascending label index. ``k`` equals the
    number of entries (requested k clamped to the vocabulary size).
    """

    entries: tuple[tuple[int, float], ...]
    k: int

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValidationError("candidate set is empty")
        if self.k != len(self.entries):
            raise ValidationError(f"k={self.k} does not match {len(self.entries)} entries")
        indices = [i for i, _ in self.entries]
        if len(set(indices)) != len(indices):
            raise ValidationError("candidate set has duplicate label indices")
        probs = [p for _, p in self.entries]
        for a, b in zip(probs, probs[1:]):
            if b > a:
                raise ValidationError("candidate probabilities are not non-increasing")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.entries)

    @property
    def probabilities(self) -> tuple[float, ...]:
        return tuple(p for _, p in self.entries)

    def label_strings(self, labels: LabelSet) -> tuple[str, ...]:
        return tuple(labels[i] for i in self.indices)


def as_distribution(probs: "np.typing.ArrayLike") -> np.ndarray:
    """Validate and return a probability distribution as a float64 array.

    Requires a non-empty 1-D vector with entries in [0, 1] summing to 1
    within ``SUM_TOLERANCE``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("distribution must be a non-empty 1-D vector")
    if not np.all(np.isfinite(p)):
        bad = int(np.flatnonzero(~np.isfinite(p))[0])
        raise ValidationError(f"distribution entry {bad} is not finite")
    if np.any(p < 0.0) or np.any(p > 1.0):
        bad = int(np.flatnonzero((p < 0.0) | (p > 1.0))[0])
        raise ValidationError(f"distribution entry {bad} = {p[bad]!r} outside [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise ValidationError(f"distribution sums to {total!r}, expected 1 within {SUM_TOLERANCE}")
    return p


def softmax(raw_scores: "np.typing.ArrayLike", temperature: float = 1.0) -> np.ndarray:
    """Normalize raw scores into a probability distribution.

    Scores are divided by ``temperature`` and exponentiated after
    max-subtraction, so arbitrarily large score magnitudes stay finite and a
    constant shift of all scores leaves the output unchanged.

    Args:
        raw_scores: non-empty 1-D vector of finite reals.
        temperature: positive scale applied to scores before exponentiation.

    Raises:
        ValidationError: empty input, non-finite score (names the offending
            index), or non-positive temperature.
    """
    scores = np.asarray(raw_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValidationError("raw scores must be a non-empty 1-D vector")
    if not np.all(np.isfinite(scores)):
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise ValidationError(f"raw score at index {bad} is not finite ({scores[bad]!r})")
    if not (temperature > 0.0 and math.isfinite(temperature)):
        raise ValidationError(f"temperature must be a positive finite real, got {temperature!r}")
    z = scores / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(dist: "np.typing.ArrayLike") -> float:
    """Shannon entropy of a distribution in nats, with 0*ln(0) = 0.

    Always lies in [0, ln N] for an N-class distribution; the bounds are
    clamped to guard float roundoff at the one-hot and uniform extremes.
    """
    p = as_distribution(dist)
    positive = p[p > 0.0]
    h = float(-(positive * np.log(positive)).sum())
    return min(max(h, 0.0), math.log(p.size))


def margin(dist: "np.typing.ArrayLike") -> float:
    """Difference between the largest and second-largest probability.

    A singleton distribution has margin 1.0 by convention, so downstream
    confidence gating always treats it as certain.
    """
    p = as_distribution(dist)
    if p.size == 1:
        return 1.0
    top_two = np.partition(p, -2)[-2:]
    return float(top_two[1] - top_two[0])


def top1_index(dist: "np.typing.ArrayLike") -> int:
    """Argmax of the distribution; ties resolve to the lowest label index."""
    return int(np.argmax(as_distribution(dist)))


def top_k(dist: "np.typing.ArrayLike", labels: LabelSet, k: int) -> CandidateSet:
    """Select the k most probable labels, sorted descending.

    Ties are broken by ascending label index, which makes the selection a
    prefix-stable total order: ``top_k(d, k1)`` is always a prefix of
    ``top_k(d, k2)`` for ``k1 <= k2``.

    ``k`` larger than the vocabulary is clamped with a warning; ``k < 1`` is
    rejected.
    """
    p = as_distribution(dist)
    if len(labels) != p.size:
        raise ValidationError(f"distribution width {p.size} does not match {len(labels)} labels")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > p.size:
        warnings.warn(f"k={k} exceeds the {p.size}-label vocabulary; clamped", stacklevel=2)
        k = p.size
    order = np.argsort(-p, kind="stable")[:k]
    entries = tuple((int(i), float(p[i])) for i in order)
    return CandidateSet(entries=entries, k=k)

"""Threshold-parameterized concept sets and the three set-quality losses.

A concept enters the set for an image once one of its detections clears the
confidence threshold ``1 - lam``; the set only grows with ``lam``. The three
losses (discriminability, coverage, diversity) are all non-increasing in
``lam`` and bounded above by 1, which is what makes threshold calibration by
empirical risk sound.

All functions are pure over immutable inputs. Per-catalog geometry (normalized
concept matrix, per-class pair dissimilarities) is cached on first use, keyed
by catalog identity.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .core import (
    AnnotatedSample,
    ConceptCatalog,
    ConceptId,
    DataError,
    NumericError,
    ZERO_NORM_TOL,
)

__all__ = [
    "CRITERIA",
    "ConceptSet",
    "build_concept_set",
    "confidence_admits",
    "discriminability_loss",
    "coverage_loss",
    "diversity_loss",
    "loss_function",
    "set_size",
]

# The three set-quality criteria, in canonical order.
CRITERIA = ("dis", "cov", "div")

# Absorbs the one-ulp round-trip error of ``1 - (1 - t)`` so that a detection
# with confidence exactly at a threshold breakpoint is always admitted. Far
# above float noise (~2e-16), far below any meaningful confidence gap.
BOUNDARY_GUARD = 1e-12


def confidence_admits(confidence: float, lam: float) -> bool:
    """Inclusive membership test: confidence >= 1 - lam, robust to float round-trip."""
    return confidence >= (1.0 - lam) - BOUNDARY_GUARD


@dataclass(frozen=True)
class ConceptSet:
    """A deduplicated set of concepts selected for one image.

    ``lambda_used`` records the threshold parameter that produced the set;
    it is None for sets built by other means (e.g. model-ranked sets).
    """

    members: frozenset[ConceptId]
    lambda_used: "float | None"

    def sorted_members(self) -> tuple[ConceptId, ...]:
        return tuple(sorted(self.members, key=lambda c: c.id))


def build_concept_set(sample: AnnotatedSample, lam: float) -> ConceptSet:
    """Concepts having at least one detection with confidence >= 1 - lam."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0,1], got {lam}")
    members = frozenset(
        det.concept for det in sample.detections if confidence_admits(det.confidence, lam)
    )
    return ConceptSet(members=members, lambda_used=float(lam))


def set_size(cset: ConceptSet) -> int:
    return len(cset.members)


class _CatalogCache:
    """Normalized concept geometry for one catalog, built once and reused."""

    def __init__(self, catalog: ConceptCatalog) -> None:
        concepts = catalog.all_concepts()  # sorted by id
        mat = np.stack([catalog.embedding_of(c) for c in concepts]).astype(np.float64)
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms < ZERO_NORM_TOL):
            bad = concepts[int(np.argmin(norms))]
            raise NumericError(f"zero-norm embedding for concept {bad.id} ('{bad.text}')")
        self.concepts = concepts
        self.row_of = {c: i for i, c in enumerate(concepts)}
        self.unit = mat / norms[:, None]
        self.class_rows = {
            label: np.array(
                sorted(self.row_of[c] for c in catalog.concepts_for(label)), dtype=np.intp
            )
            for label in catalog.class_labels
        }
        # Sum of pairwise dissimilarities over each class's full candidate pool.
        self.class_pair_sum = {}
        for label, rows in self.class_rows.items():
            m = len(rows)
            if m >= 2:
                phi = self._phi_block(rows, rows)
                self.class_pair_sum[label] = float(np.sum(phi[np.triu_indices(m, k=1)]))

    def _phi_block(self, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        cos = np.clip(self.unit[rows_a] @ self.unit[rows_b].T, -1.0, 1.0)
        return (1.0 - cos) / 2.0

    def member_rows(self, cset: ConceptSet) -> np.ndarray:
        try:
            return np.array(
                sorted(self.row_of[c] for c in cset.members), dtype=np.intp
            )
        except KeyError:
            missing = next(c for c in cset.members if c not in self.row_of)
            raise DataError(
                f"concept {missing.id} ('{missing.text}') not in catalog"
            ) from None

    def unit_image(self, sample) -> np.ndarray:
        x = np.asarray(sample.image_embedding, dtype=np.float64)
        if x.shape[0] != self.unit.shape[1]:
            raise DataError(
                f"embedding dimension mismatch: sample has {x.shape[0]}, "
                f"catalog has {self.unit.shape[1]}"
            )
        norm = float(np.linalg.norm(x))
        if norm < ZERO_NORM_TOL:
            raise NumericError("cosine undefined for (near-)zero image embedding")
        return x / norm


_CACHES: "weakref.WeakKeyDictionary[ConceptCatalog, _CatalogCache]" = (
    weakref.WeakKeyDictionary()
)


def _cache_for(catalog: ConceptCatalog) -> _CatalogCache:
    cache = _CACHES.get(catalog)
    if cache is None:
        cache = _CatalogCache(catalog)
        _CACHES[catalog] = cache
    return cache


def discriminability_loss(
    cset: ConceptSet, sample, catalog: ConceptCatalog
) -> float:
    """One minus selected similarity mass over competing-class similarity mass.

    Empty sets score the maximum penalty 1. May go negative when the selected
    mass exceeds the competing mass; the upper bound of 1 always holds.
    """
    if catalog.num_classes < 2:
        raise DataError("discriminability needs at least 2 classes")
    if not cset.members:
        return 1.0
    cache = _cache_for(catalog)
    x = cache.unit_image(sample)
    sims = 1.0 + np.clip(cache.unit @ x, -1.0, 1.0)
    own_rows = cache.class_rows[_checked_label(sample, catalog)]
    competing = float(np.sum(sims)) - float(np.sum(sims[own_rows]))
    if competing < ZERO_NORM_TOL:
        raise NumericError("degenerate competing-class similarity (denominator ~ 0)")
    selected = float(np.sum(sims[cache.member_rows(cset)]))
    return 1.0 - selected / competing


def coverage_loss(cset: ConceptSet, sample, catalog: ConceptCatalog) -> float:
    """Mean nearest-neighbor dissimilarity from the class candidate pool to the set.

    Empty sets score 1. Zero iff every candidate has a selected twin (in
    particular when the set equals the full pool).
    """
    cache = _cache_for(catalog)
    cand_rows = cache.class_rows[_checked_label(sample, catalog)]
    if not cset.members:
        return 1.0
    phi = cache._phi_block(cand_rows, cache.member_rows(cset))
    return float(np.mean(np.min(phi, axis=1)))


def diversity_loss(cset: ConceptSet, sample, catalog: ConceptCatalog) -> float:
    """One minus the set's share of the class pool's total pairwise dissimilarity.

    Sets with fewer than two concepts score 1 (no pairs to spread over).
    """
    cache = _cache_for(catalog)
    label = _checked_label(sample, catalog)
    cand_rows = cache.class_rows[label]
    if len(cand_rows) < 2:
        raise DataError(
            f"diversity loss needs >= 2 candidate concepts for class {label}"
        )
    denom = cache.class_pair_sum[label]
    if denom < ZERO_NORM_TOL:
        raise NumericError("degenerate candidate pool (all concepts pairwise identical)")
    if len(cset.members) < 2:
        return 1.0
    rows = cache.member_rows(cset)
    phi = cache._phi_block(rows, rows)
    selected = float(np.sum(phi[np.triu_indices(len(rows), k=1)]))
    return 1.0 - selected / denom


_LOSSES = {
    "dis": discriminability_loss,
    "cov": coverage_loss,
    "div": diversity_loss,
}


def loss_function(criterion: str):
    """Look up a loss by its criterion key ('dis', 'cov', or 'div')."""
    try:
        return _LOSSES[criterion]
    except KeyError:
        raise ValueError(f"unknown criterion {criterion!r}, expected one of {CRITERIA}") from None


def _checked_label(sample, catalog: ConceptCatalog) -> int:
    label = sample.label
    if not 0 <= label < catalog.num_classes:
        raise DataError(f"sample {sample.sample_id}: unknown class label {label}")
    return label

"""Similarity and dissimilarity primitives between image and concept embeddings.

Both functions normalize at call time and accumulate in double precision,
so stored embeddings may live at any scale or dtype. They are pure and safe
for unrestricted concurrent use.
"""

from __future__ import annotations

import numpy as np

from .core import DataError, NumericError, ZERO_NORM_TOL

__all__ = ["similarity", "dissimilarity"]


def _cosine(a, b) -> float:
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise DataError(f"embedding dimension mismatch: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise NumericError("cosine undefined for (near-)zero vector")
    cos = float(np.dot(av, bv) / (na * nb))
    # Rounding can push |cos| a few ulp past 1; clamp so ranges hold exactly.
    return min(1.0, max(-1.0, cos))


def similarity(image_embedding, concept_embedding) -> float:
    """Shifted cosine similarity, 1 + cos(angle), in [0, 2].

    2 means parallel directions, 1 orthogonal, 0 opposite.
    """
    return 1.0 + _cosine(image_embedding, concept_embedding)


def dissimilarity(concept_a, concept_b) -> float:
    """Cosine dissimilarity (1 - cos)/2, in [0, 1].

    0 means identical direction, 1 means opposite.
    """
    return (1.0 - _cosine(concept_a, concept_b)) / 2.0

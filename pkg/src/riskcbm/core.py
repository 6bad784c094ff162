"""Shared domain types for the concept-annotation and training pipeline.

Every container here is immutable after construction: numpy payloads are
frozen read-only and collections are stored as tuples. That makes all types
safe to share across concurrent readers and lets downstream modules cache
derived quantities keyed on object identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ZERO_NORM_TOL",
    "ClassLabel",
    "DataError",
    "NumericError",
    "ConceptId",
    "BoundingBox",
    "Detection",
    "AnnotatedSample",
    "ConceptCatalog",
    "make_embedding",
    "make_pixels",
    "validate_dataset",
]

# Class labels are plain integers in [0, num_classes).
ClassLabel = int

# Below this L2 norm a vector has no usable direction and cosine is undefined.
ZERO_NORM_TOL = 1e-12


class DataError(Exception):
    """Malformed, inconsistent, or missing input data."""


class NumericError(Exception):
    """A computation hit a degenerate or diverging numeric regime."""


def make_embedding(values: "Iterable[float] | np.ndarray") -> np.ndarray:
    """Coerce to a read-only 1-D float64 vector.

    Ingested embeddings are stored exactly as provided (no renormalization);
    cosine-based operations normalize at call time.
    """
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"embedding must be a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("embedding contains non-finite entries")
    arr.setflags(write=False)
    return arr


def make_pixels(values) -> np.ndarray:
    """Coerce to a read-only HxWx3 float32 image tensor (values expected in [0,1])."""
    arr = np.array(values, dtype=np.float32, copy=True)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"pixels must have shape HxWx3, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ConceptId:
    """A candidate concept: integer handle, display text, and the class it was proposed for."""

    id: int
    text: str
    class_of_origin: ClassLabel

    def __post_init__(self) -> None:
        if not self.text:
            raise DataError(f"concept {self.id} has empty text")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corners (x1,y1) top-left and (x2,y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def overlaps(self, other: "BoundingBox") -> bool:
        """True iff the intersection has strictly positive area (touching edges do not count)."""
        return (
            self.x1 < other.x2
            and other.x1 < self.x2
            and self.y1 < other.y2
            and other.y1 < self.y2
        )


@dataclass(frozen=True)
class Detection:
    """One detector hit: a box, its confidence, and the concept it localizes."""

    box: BoundingBox
    confidence: float
    concept: ConceptId


@dataclass(eq=False)
class AnnotatedSample:
    """Image record: embedding, class label, candidate detections, optional pixels.

    ``image_pixels`` is only required by the augmentation stage; samples used
    purely for calibration or evaluation may omit it.
    """

    sample_id: str
    label: ClassLabel
    image_embedding: np.ndarray
    detections: Sequence[Detection] = ()
    image_pixels: "np.ndarray | None" = None

    def __post_init__(self) -> None:
        self.image_embedding = make_embedding(self.image_embedding)
        self.detections = tuple(self.detections)
        if self.image_pixels is not None:
            self.image_pixels = make_pixels(self.image_pixels)


@dataclass(eq=False)
class ConceptCatalog:
    """Per-class candidate concept lists with their text embeddings.

    Class labels must be contiguous integers starting at 0, concept ids must
    be globally unique, and every listed concept needs a text embedding.
    """

    per_class: Mapping[ClassLabel, Sequence[ConceptId]]
    text_embeddings: Mapping[ConceptId, np.ndarray]

    def __post_init__(self) -> None:
        labels = sorted(self.per_class)
        if not labels:
            raise DataError("catalog has no classes")
        if labels != list(range(len(labels))):
            raise DataError(f"class labels must be contiguous from 0, got {labels}")
        per_class: dict[int, tuple[ConceptId, ...]] = {}
        seen: set[int] = set()
        for label in labels:
            concepts = tuple(self.per_class[label])
            if not concepts:
                raise DataError(f"class {label} has no candidate concepts")
            for c in concepts:
                if c.id in seen:
                    raise DataError(f"duplicate concept id {c.id} in catalog")
                seen.add(c.id)
                if c.class_of_origin != label:
                    raise DataError(
                        f"concept {c.id} listed under class {label} "
                        f"but claims class {c.class_of_origin}"
                    )
                if c not in self.text_embeddings:
                    raise DataError(f"concept {c.id} ('{c.text}') has no text embedding")
            per_class[label] = concepts
        self.per_class = per_class
        self.text_embeddings = {
            c: make_embedding(v) for c, v in self.text_embeddings.items()
        }

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    @property
    def class_labels(self) -> range:
        return range(self.num_classes)

    @property
    def embedding_dim(self) -> int:
        first = next(iter(self.text_embeddings.values()))
        return int(first.shape[0])

    def concepts_for(self, label: ClassLabel) -> tuple[ConceptId, ...]:
        if label not in self.per_class:
            raise DataError(f"unknown class label {label}")
        return self.per_class[label]

    def embedding_of(self, concept: ConceptId) -> np.ndarray:
        try:
            return self.text_embeddings[concept]
        except KeyError:
            raise DataError(f"concept {concept.id} ('{concept.text}') not in catalog") from None

    def has_concept(self, concept: ConceptId) -> bool:
        return concept in self.text_embeddings

    def all_concepts(self) -> tuple[ConceptId, ...]:
        out = [c for label in self.class_labels for c in self.per_class[label]]
        return tuple(sorted(out, key=lambda c: c.id))


def validate_dataset(
    samples: Sequence[AnnotatedSample], catalog: ConceptCatalog
) -> list[str]:
    """Report structural violations; an empty list means the dataset is valid.

    Pure reporting: nothing raises, nothing is mutated, and repeated calls
    return the same list.
    """
    problems: list[str] = []
    dim = catalog.embedding_dim

    for c in catalog.all_concepts():
        emb = catalog.embedding_of(c)
        if emb.shape[0] != dim:
            problems.append(
                f"concept {c.id} ('{c.text}'): embedding dimension mismatch "
                f"({emb.shape[0]} != {dim})"
            )
        elif float(np.linalg.norm(emb)) < ZERO_NORM_TOL:
            problems.append(f"concept {c.id} ('{c.text}'): zero embedding")

    for sample in samples:
        tag = f"sample {sample.sample_id}"
        known_class = 0 <= sample.label < catalog.num_classes
        if not known_class:
            problems.append(f"{tag}: unknown class label {sample.label}")

        if sample.image_embedding.shape[0] != dim:
            problems.append(
                f"{tag}: embedding dimension mismatch "
                f"({sample.image_embedding.shape[0]} != {dim})"
            )
        elif float(np.linalg.norm(sample.image_embedding)) < ZERO_NORM_TOL:
            problems.append(f"{tag}: zero embedding")

        height = width = None
        if sample.image_pixels is not None:
            height, width = sample.image_pixels.shape[:2]
            if not np.all(np.isfinite(sample.image_pixels)):
                problems.append(f"{tag}: non-finite pixels")
            else:
                lo = float(sample.image_pixels.min())
                hi = float(sample.image_pixels.max())
                if lo < 0.0 or hi > 1.0:
                    problems.append(f"{tag}: pixels outside [0,1] (range [{lo}, {hi}])")

        allowed = (
            set(catalog.concepts_for(sample.label)) if known_class else set()
        )
        for i, det in enumerate(sample.detections):
            dtag = f"{tag}: detection {i} ('{det.concept.text}')"
            if not 0.0 <= det.confidence <= 1.0:
                problems.append(f"{dtag}: confidence out of [0,1] ({det.confidence})")
            box = det.box
            if box.x2 <= box.x1 or box.y2 <= box.y1:
                problems.append(f"{dtag}: degenerate box {box}")
            elif box.x1 < 0 or box.y1 < 0 or (
                width is not None and (box.x2 > width or box.y2 > height)
            ):
                problems.append(f"{dtag}: box outside image bounds {box}")
            if not catalog.has_concept(det.concept):
                problems.append(f"{dtag}: unknown concept id {det.concept.id}")
            elif known_class and det.concept not in allowed:
                problems.append(
                    f"{dtag}: concept not in class {sample.label} candidate set"
                )

    return problems

"""Global vocabulary, one-hot concept labels, and rare-concept augmentation.

The vocabulary is the union of calibrated concept sets over the training
samples; each sample's concept label vector is the membership indicator of
its calibrated set. Concepts whose positive count falls below a threshold
get synthesized extra positives: a reliably detected patch from a source
image is pasted into a same-class target at a window that does not overlap
any of the target's reliable (threshold-passing) boxes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .concept_sets import build_concept_set, confidence_admits
from .core import (
    AnnotatedSample,
    BoundingBox,
    ClassLabel,
    ConceptCatalog,
    ConceptId,
    DataError,
    Detection,
    make_pixels,
)

__all__ = [
    "ConceptVocabulary",
    "Provenance",
    "ORIGINAL",
    "ConceptLabeledSample",
    "AugmentationConfig",
    "AugmentationReport",
    "UnseedableConceptError",
    "build_vocabulary",
    "label_sample",
    "find_sparse_concepts",
    "sample_placement",
    "composite_patch",
    "augment_rare_concept",
    "augment_dataset",
]

# Pasted windows keep the source aspect ratio and are scaled uniformly at
# random within this range of the source box size (then clipped to fit).
SCALE_RANGE = (0.5, 1.0)


class UnseedableConceptError(DataError):
    """No sample provides a reliable source patch for the concept."""


@dataclass(eq=False)
class ConceptVocabulary:
    """Ordered global concept vocabulary; order is ascending concept id."""

    concepts: tuple[ConceptId, ...]
    index_of: dict[ConceptId, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(set(self.concepts), key=lambda c: c.id))
        if len(ordered) != len(self.concepts):
            raise DataError("vocabulary contains duplicate concepts")
        if ordered != tuple(self.concepts):
            raise DataError("vocabulary must be sorted by concept id")
        self.concepts = ordered
        self.index_of = {c: i for i, c in enumerate(ordered)}

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept: ConceptId) -> bool:
        return concept in self.index_of


@dataclass(frozen=True)
class Provenance:
    """Where a labeled sample came from: an original image or an augmentation.

    Augmented entries record the patch source, the inserted concept, and the
    placement window so augmentation invariants can be rechecked post hoc.
    """

    kind: str
    source_id: "str | None" = None
    inserted_concept: "ConceptId | None" = None
    placement: "BoundingBox | None" = None

    def __post_init__(self) -> None:
        if self.kind not in ("original", "augmented"):
            raise DataError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "augmented" and (
            self.source_id is None or self.inserted_concept is None
        ):
            raise DataError("augmented provenance needs source_id and inserted_concept")


ORIGINAL = Provenance(kind="original")


@dataclass(eq=False)
class ConceptLabeledSample:
    """Image with a binary concept label vector aligned to a vocabulary."""

    sample_id: str
    label: ClassLabel
    concept_vector: np.ndarray
    image_embedding: np.ndarray
    detections: Sequence[Detection] = ()
    image_pixels: "np.ndarray | None" = None
    provenance: Provenance = ORIGINAL

    def __post_init__(self) -> None:
        vec = np.array(self.concept_vector, dtype=np.uint8, copy=True)
        if vec.ndim != 1:
            raise DataError(f"concept vector must be 1-D, got shape {vec.shape}")
        if np.any(vec > 1):
            raise DataError("concept vector entries must be 0 or 1")
        vec.setflags(write=False)
        self.concept_vector = vec
        self.detections = tuple(self.detections)

    @property
    def is_original(self) -> bool:
        return self.provenance.kind == "original"


def build_vocabulary(
    samples: Sequence[AnnotatedSample],
    catalog: ConceptCatalog,
    lambda_hat: float,
) -> ConceptVocabulary:
    """Union of calibrated concept sets over the samples, ordered by id."""
    union: set[ConceptId] = set()
    for sample in samples:
        union.update(build_concept_set(sample, lambda_hat).members)
    for concept in union:
        if not catalog.has_concept(concept):
            raise DataError(f"concept {concept.id} ('{concept.text}') not in catalog")
    if not union:
        raise DataError(
            "empty vocabulary: no detection clears the calibrated threshold"
        )
    return ConceptVocabulary(concepts=tuple(sorted(union, key=lambda c: c.id)))


def label_sample(
    sample: AnnotatedSample, vocab: ConceptVocabulary, lambda_hat: float
) -> ConceptLabeledSample:
    """One-hot concept labels: entry j is 1 iff vocabulary concept j is in the calibrated set."""
    vector = np.zeros(len(vocab), dtype=np.uint8)
    for concept in build_concept_set(sample, lambda_hat).members:
        idx = vocab.index_of.get(concept)
        if idx is not None:
            vector[idx] = 1
    return ConceptLabeledSample(
        sample_id=sample.sample_id,
        label=sample.label,
        concept_vector=vector,
        image_embedding=sample.image_embedding,
        detections=sample.detections,
        image_pixels=sample.image_pixels,
        provenance=ORIGINAL,
    )


@dataclass(frozen=True)
class AugmentationConfig:
    min_count: int = 10
    max_placement_attempts: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.min_count < 1:
            raise ValueError(f"min_count must be >= 1, got {self.min_count}")
        if self.max_placement_attempts < 1:
            raise ValueError(
                f"max_placement_attempts must be >= 1, got {self.max_placement_attempts}"
            )


def positive_counts(
    dataset: Sequence[ConceptLabeledSample], vocab: ConceptVocabulary
) -> np.ndarray:
    counts = np.zeros(len(vocab), dtype=np.int64)
    for sample in dataset:
        counts += sample.concept_vector
    return counts


def find_sparse_concepts(
    dataset: Sequence[ConceptLabeledSample],
    vocab: ConceptVocabulary,
    config: AugmentationConfig,
) -> list[tuple[ConceptId, int]]:
    """Vocabulary concepts with fewer than ``min_count`` positive labels, rarest first."""
    counts = positive_counts(dataset, vocab)
    sparse = [
        (concept, int(counts[i]))
        for i, concept in enumerate(vocab.concepts)
        if counts[i] < config.min_count
    ]
    sparse.sort(key=lambda item: (item[1], item[0].id))
    return sparse


def reliable_boxes(
    sample, lambda_hat: float, exclude_concept: "ConceptId | None" = None
) -> list[BoundingBox]:
    """Boxes of threshold-passing detections, optionally excluding one concept."""
    return [
        det.box
        for det in sample.detections
        if confidence_admits(det.confidence, lambda_hat)
        and det.concept != exclude_concept
    ]


def sample_placement(
    target,
    rare_concept: ConceptId,
    lambda_hat: float,
    source_box: BoundingBox,
    rng: np.random.Generator,
    *,
    max_attempts: int = 100,
) -> "BoundingBox | None":
    """Rejection-sample an in-bounds window clear of the target's reliable boxes.

    The window keeps the source box's aspect ratio at a random scale in
    ``SCALE_RANGE`` and may touch, but not overlap, any reliable box of a
    concept other than ``rare_concept``. Returns None after ``max_attempts``
    rejected draws; the caller is expected to skip this target.
    """
    if target.image_pixels is None:
        raise DataError(f"sample {target.sample_id} has no pixels; cannot place a patch")
    if source_box.x2 <= source_box.x1 or source_box.y2 <= source_box.y1:
        raise DataError(f"degenerate source box {source_box}")
    height, width = target.image_pixels.shape[:2]
    blocked = reliable_boxes(target, lambda_hat, exclude_concept=rare_concept)
    for _ in range(max_attempts):
        scale = rng.uniform(*SCALE_RANGE)
        w = min(width, max(1, int(round(source_box.width * scale))))
        h = min(height, max(1, int(round(source_box.height * scale))))
        x1 = int(rng.integers(0, width - w + 1))
        y1 = int(rng.integers(0, height - h + 1))
        window = BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h))
        if not any(window.overlaps(box) for box in blocked):
            return window
    return None


def composite_patch(
    target_pixels: np.ndarray,
    source_patch: np.ndarray,
    source_mask: np.ndarray,
    placement: BoundingBox,
) -> np.ndarray:
    """Masked paste: inside the placement where mask=1 take source, elsewhere keep target.

    The patch and mask must already be resized to the placement dimensions;
    every pixel outside the mask is bit-identical to the target.
    """
    x1, y1, x2, y2 = (int(round(v)) for v in (placement.x1, placement.y1, placement.x2, placement.y2))
    h, w = y2 - y1, x2 - x1
    if source_patch.shape != (h, w, 3):
        raise DataError(
            f"source patch shape {source_patch.shape} does not match placement ({h}, {w}, 3)"
        )
    if source_mask.shape != (h, w):
        raise DataError(
            f"source mask shape {source_mask.shape} does not match placement ({h}, {w})"
        )
    mask = np.asarray(source_mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError("source mask must be binary")
    th, tw = target_pixels.shape[:2]
    if x1 < 0 or y1 < 0 or x2 > tw or y2 > th:
        raise DataError(f"placement {placement} outside target bounds ({th}, {tw})")
    out = np.array(target_pixels, copy=True)
    region = out[y1:y2, x1:x2]
    region[mask == 1] = np.asarray(source_patch, dtype=out.dtype)[mask == 1]
    out.setflags(write=False)
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment; preserves the value range."""
    img = np.asarray(image, dtype=np.float32)
    in_h, in_w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; keeps a binary mask binary."""
    arr = np.asarray(mask)
    in_h, in_w = arr.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.intp), in_h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.intp), in_w - 1)
    return arr[ys][:, xs]


def _int_corners(box: BoundingBox) -> tuple[int, int, int, int]:
    return (
        int(round(box.x1)),
        int(round(box.y1)),
        int(round(box.x2)),
        int(round(box.y2)),
    )


def _best_source_detection(sample, concept: ConceptId, lambda_hat: float):
    """Highest-confidence reliable detection of the concept, or None."""
    best = None
    for det in sample.detections:
        if det.concept != concept or not confidence_admits(det.confidence, lambda_hat):
            continue
        if best is None or det.confidence > best.confidence:
            best = det
    return best


def augment_rare_concept(
    dataset: Sequence[ConceptLabeledSample],
    rare_concept: ConceptId,
    vocab: ConceptVocabulary,
    lambda_hat: float,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> list[ConceptLabeledSample]:
    """Append synthesized positives for one concept until it reaches ``min_count``.

    Patch sources are original samples with a reliable detection of the
    concept and pixels on hand; targets are original same-class samples with
    pixels, visited in random order without replacement. Originals are never
    mutated; if targets run out first a warning is emitted and the partially
    augmented dataset is returned.
    """
    if rare_concept not in vocab:
        raise DataError(f"concept {rare_concept.id} not in vocabulary")
    out = list(dataset)
    idx = vocab.index_of[rare_concept]
    count = int(sum(int(s.concept_vector[idx]) for s in out))
    if count >= config.min_count:
        return out

    sources = [
        s
        for s in out
        if s.is_original
        and s.image_pixels is not None
        and _best_source_detection(s, rare_concept, lambda_hat) is not None
    ]
    if not sources:
        raise UnseedableConceptError(
            f"unseedable concept {rare_concept.id} ('{rare_concept.text}'): "
            "no reliable source patch available"
        )
    targets = [
        s
        for s in out
        if s.is_original
        and s.label == rare_concept.class_of_origin
        and s.image_pixels is not None
    ]
    order = rng.permutation(len(targets))
    one_hot = np.zeros(len(vocab), dtype=np.uint8)
    one_hot[idx] = 1

    sequence = 0
    for t in order:
        if count >= config.min_count:
            break
        target = targets[int(t)]
        candidates = [s for s in sources if s.sample_id != target.sample_id]
        if not candidates:
            continue
        source = candidates[int(rng.integers(len(candidates)))]
        src_det = _best_source_detection(source, rare_concept, lambda_hat)
        sx1, sy1, sx2, sy2 = _int_corners(src_det.box)
        sh, sw = source.image_pixels.shape[:2]
        sx1, sy1 = max(0, sx1), max(0, sy1)
        sx2, sy2 = min(sw, sx2), min(sh, sy2)
        if sx2 - sx1 < 1 or sy2 - sy1 < 1:
            continue
        placement = sample_placement(
            target,
            rare_concept,
            lambda_hat,
            src_det.box,
            rng,
            max_attempts=config.max_placement_attempts,
        )
        if placement is None:
            continue
        px1, py1, px2, py2 = _int_corners(placement)
        patch = source.image_pixels[sy1:sy2, sx1:sx2]
        mask = np.ones((sy2 - sy1, sx2 - sx1), dtype=np.uint8)
        patch = resize_bilinear(patch, py2 - py1, px2 - px1)
        mask = resize_nearest(mask, py2 - py1, px2 - px1)
        pixels = composite_patch(target.image_pixels, patch, mask, placement)
        sequence += 1
        out.append(
            ConceptLabeledSample(
                sample_id=f"{target.sample_id}-aug-{rare_concept.id}-{sequence}",
                label=target.label,
                concept_vector=np.maximum(target.concept_vector, one_hot),
                image_embedding=target.image_embedding,
                detections=target.detections,
                image_pixels=make_pixels(pixels),
                provenance=Provenance(
                    kind="augmented",
                    source_id=source.sample_id,
                    inserted_concept=rare_concept,
                    placement=placement,
                ),
            )
        )
        count += 1

    if count < config.min_count:
        warnings.warn(
            f"augmentation exhausted for concept {rare_concept.id} "
            f"('{rare_concept.text}'): reached {count} < {config.min_count} positives",
            stacklevel=2,
        )
    return out


@dataclass(eq=False)
class AugmentationOutcome:
    concept: ConceptId
    count_before: int
    count_after: int
    status: str  # "met" | "exhausted" | "unseedable"


@dataclass(eq=False)
class AugmentationReport:
    outcomes: list[AugmentationOutcome] = field(default_factory=list)

    @property
    def added(self) -> int:
        return sum(o.count_after - o.count_before for o in self.outcomes)


def augment_dataset(
    dataset: Sequence[ConceptLabeledSample],
    vocab: ConceptVocabulary,
    lambda_hat: float,
    config: AugmentationConfig,
) -> tuple[list[ConceptLabeledSample], AugmentationReport]:
    """Run rare-concept augmentation for every sparse vocabulary concept.

    Concepts are processed rarest-first and sequentially: positives added for
    one concept count toward the next. Unseedable concepts are reported and
    skipped rather than failing the run.
    """
    rng = np.random.default_rng(config.rng_seed)
    out = list(dataset)
    report = AugmentationReport()
    for concept, _ in find_sparse_concepts(out, vocab, config):
        idx = vocab.index_of[concept]
        before = int(sum(int(s.concept_vector[idx]) for s in out))
        if before >= config.min_count:
            report.outcomes.append(
                AugmentationOutcome(concept, before, before, "met")
            )
            continue
        try:
            out = augment_rare_concept(out, concept, vocab, lambda_hat, config, rng)
        except UnseedableConceptError as exc:
            warnings.warn(str(exc), stacklevel=2)
            report.outcomes.append(
                AugmentationOutcome(concept, before, before, "unseedable")
            )
            continue
        after = int(sum(int(s.concept_vector[idx]) for s in out))
        status = "met" if after >= config.min_count else "exhausted"
        report.outcomes.append(AugmentationOutcome(concept, before, after, status))
    return out, report

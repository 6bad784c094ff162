"""Accuracy and concept-compliance metrics for trained bottleneck models.

Concept Compliance Accuracy (CCA) counts a test sample only when it is
correctly classified AND the model's effective concept set simultaneously
meets all three set-quality budgets, evaluated against the true label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import RiskBudget
from .cbm_trainer import CbmModel, forward, sigmoid
from .concept_sets import (
    ConceptSet,
    coverage_loss,
    discriminability_loss,
    diversity_loss,
)
from .core import AnnotatedSample, ClassLabel, ConceptCatalog, DataError
from .dataset_builder import ConceptVocabulary

__all__ = [
    "EvalConfig",
    "SampleCompliance",
    "EvalReport",
    "predict",
    "effective_concept_set",
    "accuracy_report",
    "cca_versus_nec",
]


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation knobs: effective-set size cap and compliance thresholds."""

    nec: int = 10
    budget: RiskBudget = field(
        default_factory=lambda: RiskBudget(alpha_dis=0.7, alpha_cov=0.2, alpha_div=0.2)
    )

    def __post_init__(self) -> None:
        if self.nec < 1:
            raise ValueError(f"nec must be >= 1, got {self.nec}")


@dataclass(frozen=True)
class SampleCompliance:
    """Per-sample indicators: correct prediction plus the three loss constraints."""

    sample_id: str
    correct: bool
    dis_ok: bool
    cov_ok: bool
    div_ok: bool

    @property
    def compliant(self) -> bool:
        return self.correct and self.dis_ok and self.cov_ok and self.div_ok


@dataclass(eq=False)
class EvalReport:
    overall_accuracy: float
    worst_class_accuracy: float
    cca: float
    per_class_accuracy: np.ndarray
    per_sample: list[SampleCompliance]
    nec: int
    budget: RiskBudget
    n_samples: int

    def __post_init__(self) -> None:
        self.per_class_accuracy = np.asarray(self.per_class_accuracy, dtype=np.float64)


def predict(model: CbmModel, sample) -> ClassLabel:
    """Argmax class; ties go to the smallest class index."""
    _, class_logits = forward(model, sample.image_embedding)
    return int(np.argmax(class_logits))


def effective_concept_set(
    model: CbmModel, sample, vocab: ConceptVocabulary, nec: int
) -> ConceptSet:
    """Top-``nec`` concepts by bottleneck activation among the predicted class's vocabulary.

    Ties break toward the smaller vocabulary index; if the class has fewer
    than ``nec`` vocabulary concepts the whole class-restricted set returns.
    """
    if nec < 1:
        raise ValueError(f"nec must be >= 1, got {nec}")
    concept_logits, class_logits = forward(model, sample.image_embedding)
    predicted = int(np.argmax(class_logits))
    activations = sigmoid(concept_logits)
    candidates = [
        i for i, c in enumerate(vocab.concepts) if c.class_of_origin == predicted
    ]
    ranked = sorted(candidates, key=lambda i: (-activations[i], i))[:nec]
    return ConceptSet(
        members=frozenset(vocab.concepts[i] for i in ranked), lambda_used=None
    )


def accuracy_report(
    model: CbmModel,
    test_set: Sequence[AnnotatedSample],
    vocab: ConceptVocabulary,
    catalog: ConceptCatalog,
    eval_config: EvalConfig,
) -> EvalReport:
    """Overall, worst-class, and concept-compliance accuracy over a test set.

    Effective sets are restricted by the predicted class; the three losses
    are evaluated against the true label. Samples carrying augmented
    provenance are skipped (test data is never augmented).
    """
    samples = [
        s
        for s in test_set
        if getattr(s, "provenance", None) is None or s.provenance.kind == "original"
    ]
    if not samples:
        raise DataError("test set is empty")
    budget = eval_config.budget
    num_classes = catalog.num_classes
    correct = np.zeros(num_classes, dtype=np.int64)
    totals = np.zeros(num_classes, dtype=np.int64)
    per_sample: list[SampleCompliance] = []
    for sample in samples:
        if not 0 <= sample.label < num_classes:
            raise DataError(f"sample {sample.sample_id}: unknown class label {sample.label}")
        predicted = predict(model, sample)
        cset = effective_concept_set(model, sample, vocab, eval_config.nec)
        entry = SampleCompliance(
            sample_id=sample.sample_id,
            correct=predicted == sample.label,
            dis_ok=discriminability_loss(cset, sample, catalog) <= budget.alpha_dis,
            cov_ok=coverage_loss(cset, sample, catalog) <= budget.alpha_cov,
            div_ok=diversity_loss(cset, sample, catalog) <= budget.alpha_div,
        )
        per_sample.append(entry)
        totals[sample.label] += 1
        correct[sample.label] += int(entry.correct)
    missing = np.flatnonzero(totals == 0)
    if missing.size:
        raise DataError(
            f"class {int(missing[0])} absent from test set; "
            "worst-class accuracy undefined"
        )
    per_class = correct / totals
    return EvalReport(
        overall_accuracy=float(np.sum(correct)) / float(np.sum(totals)),
        worst_class_accuracy=float(np.min(per_class)),
        cca=float(np.mean([s.compliant for s in per_sample])),
        per_class_accuracy=per_class,
        per_sample=per_sample,
        nec=eval_config.nec,
        budget=budget,
        n_samples=len(per_sample),
    )


def cca_versus_nec(
    model: CbmModel,
    test_set: Sequence[AnnotatedSample],
    vocab: ConceptVocabulary,
    catalog: ConceptCatalog,
    budget: RiskBudget,
    nec_values: Sequence[int],
) -> list[tuple[int, EvalReport]]:
    """Evaluate the report at several effective-set sizes (for compliance curves)."""
    out = []
    for nec in nec_values:
        config = EvalConfig(nec=int(nec), budget=budget)
        out.append((int(nec), accuracy_report(model, test_set, vocab, catalog, config)))
    return out

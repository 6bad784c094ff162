"""Vocabulary, labeling, and rare-concept augmentation."""

import numpy as np
import pytest

from conftest import make_catalog, make_sample
from riskcbm.concept_sets import confidence_admits
from riskcbm.core import BoundingBox, DataError, Detection
from riskcbm.dataset_builder import (
    AugmentationConfig,
    ConceptVocabulary,
    UnseedableConceptError,
    augment_dataset,
    augment_rare_concept,
    build_vocabulary,
    composite_patch,
    find_sparse_concepts,
    label_sample,
    resize_bilinear,
    resize_nearest,
    sample_placement,
)
from riskcbm.synth import SynthSpec, generate_synthetic


@pytest.fixture
def catalog():
    return make_catalog(
        {0: [[1, 0], [0, 1], [1, 1]], 1: [[-1, 0], [0, -1]]}
    )


def gray(h=64, w=64, value=0.25):
    return np.full((h, w, 3), value, dtype=np.float32)


class TestVocabulary:
    def test_union_and_order(self, catalog):
        a, b, c = catalog.concepts_for(0)
        samples = [
            make_sample("s0", 0, [1, 0], [(a, 0.9), (b, 0.8)]),
            make_sample("s1", 0, [1, 0], [(b, 0.9), (c, 0.85)]),
        ]
        vocab = build_vocabulary(samples, catalog, 0.3)
        assert vocab.concepts == (a, b, c)
        assert [vocab.index_of[x] for x in (a, b, c)] == [0, 1, 2]

    def test_order_independence(self, catalog):
        a, b, c = catalog.concepts_for(0)
        samples = [
            make_sample("s0", 0, [1, 0], [(a, 0.9)]),
            make_sample("s1", 0, [1, 0], [(c, 0.9)]),
            make_sample("s2", 0, [1, 0], [(b, 0.9)]),
        ]
        forward = build_vocabulary(samples, catalog, 0.5)
        backward = build_vocabulary(list(reversed(samples)), catalog, 0.5)
        assert forward.concepts == backward.concepts

    def test_empty_vocabulary_is_an_error(self, catalog):
        a = catalog.concepts_for(0)[0]
        samples = [make_sample("s0", 0, [1, 0], [(a, 0.99)])]
        with pytest.raises(DataError, match="empty vocabulary"):
            build_vocabulary(samples, catalog, 0.0)

    def test_lambda_one_collects_every_detected_concept(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        d = catalog.concepts_for(1)[0]
        samples = [
            make_sample("s0", 0, [1, 0], [(a, 0.01), (b, 0.2)]),
            make_sample("s1", 1, [-1, 0], [(d, 0.0)]),
        ]
        vocab = build_vocabulary(samples, catalog, 1.0)
        assert set(vocab.concepts) == {a, b, d}

    def test_duplicate_or_unsorted_construction_rejected(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        with pytest.raises(DataError):
            ConceptVocabulary(concepts=(a, a))
        with pytest.raises(DataError):
            ConceptVocabulary(concepts=(b, a))


class TestLabeling:
    def test_indicator_vector(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        sample = make_sample("s0", 0, [1, 0], [(c, 0.9), (a, 0.95)])
        labeled = label_sample(sample, vocab, 0.3)
        assert labeled.concept_vector.tolist() == [1, 0, 1]
        assert labeled.is_original

    def test_empty_set_gives_zero_vector(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        sample = make_sample("s0", 0, [1, 0], [(a, 0.1)])
        assert label_sample(sample, vocab, 0.2).concept_vector.tolist() == [0, 0, 0]

    def test_full_set_gives_ones(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        sample = make_sample("s0", 0, [1, 0], [(a, 0.9), (b, 0.9), (c, 0.9)])
        assert label_sample(sample, vocab, 0.5).concept_vector.tolist() == [1, 1, 1]

    def test_concepts_outside_vocab_ignored(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a,))
        sample = make_sample("s0", 0, [1, 0], [(a, 0.9), (b, 0.9)])
        assert label_sample(sample, vocab, 0.5).concept_vector.tolist() == [1]

    def test_label_matches_membership_recomputation(self, catalog):
        rng = np.random.default_rng(41)
        concepts = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=tuple(concepts))
        for _ in range(25):
            confs = [(c, float(rng.uniform(0, 1))) for c in concepts]
            lam = float(rng.uniform(0, 1))
            sample = make_sample("s", 0, [1, 0], confs)
            labeled = label_sample(sample, vocab, lam)
            for c, conf in confs:
                expected = 1 if confidence_admits(conf, lam) else 0
                assert labeled.concept_vector[vocab.index_of[c]] == expected


class TestSparseConcepts:
    def test_counts_and_ordering(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        samples = [
            make_sample(f"s{i}", 0, [1, 0], [(a, 0.9)] + ([(b, 0.9)] if i < 3 else []))
            for i in range(6)
        ]
        labeled = [label_sample(s, vocab, 0.5) for s in samples]
        sparse = find_sparse_concepts(labeled, vocab, AugmentationConfig(min_count=10))
        assert sparse == [(c, 0), (b, 3), (a, 6)]

    def test_all_concepts_frequent_enough(self, catalog):
        a, _, _ = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a,))
        samples = [make_sample(f"s{i}", 0, [1, 0], [(a, 0.9)]) for i in range(4)]
        labeled = [label_sample(s, vocab, 0.5) for s in samples]
        assert find_sparse_concepts(labeled, vocab, AugmentationConfig(min_count=3)) == []


class TestPlacement:
    def _target(self, catalog, detections):
        return make_sample("t", 0, [1, 0], detections, pixels=gray())

    def test_unconstrained_image_accepts_first_window(self, catalog):
        target = self._target(catalog, [])
        rng = np.random.default_rng(0)
        got = sample_placement(target, catalog.concepts_for(0)[0], 0.5,
                               BoundingBox(0, 0, 20, 20), rng)
        assert got is not None
        assert 0 <= got.x1 < got.x2 <= 64 and 0 <= got.y1 < got.y2 <= 64

    def test_fully_blocked_image_fails(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        blocker = Detection(box=BoundingBox(0, 0, 64, 64), confidence=0.95, concept=b)
        target = make_sample("t", 0, [1, 0], [], pixels=gray())
        target.detections = (blocker,)
        rng = np.random.default_rng(0)
        got = sample_placement(target, a, 0.5, BoundingBox(0, 0, 20, 20), rng,
                               max_attempts=50)
        assert got is None

    def test_rare_concepts_own_boxes_do_not_block(self, catalog):
        a, _, _ = catalog.concepts_for(0)
        own = Detection(box=BoundingBox(0, 0, 64, 64), confidence=0.95, concept=a)
        target = make_sample("t", 0, [1, 0], [], pixels=gray())
        target.detections = (own,)
        rng = np.random.default_rng(0)
        got = sample_placement(target, a, 0.5, BoundingBox(0, 0, 20, 20), rng)
        assert got is not None

    def test_left_half_blocked_forces_right_half(self, catalog):
        """Brute-force feasibility: every valid window lies in the right half."""
        a, b, _ = catalog.concepts_for(0)
        blocker = Detection(box=BoundingBox(0, 0, 32, 64), confidence=0.9, concept=b)
        target = make_sample("t", 0, [1, 0], [], pixels=gray())
        target.detections = (blocker,)
        source_box = BoundingBox(0, 0, 30, 60)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            got = sample_placement(target, a, 0.5, source_box, rng)
            assert got is not None
            w, h = int(got.width), int(got.height)
            feasible = {
                (x, y)
                for x in range(64 - w + 1)
                for y in range(64 - h + 1)
                if not BoundingBox(x, y, x + w, y + h).overlaps(blocker.box)
            }
            assert (int(got.x1), int(got.y1)) in feasible
            assert all(x >= 32 for x, _ in feasible)
            assert got.x1 >= 32

    def test_requires_pixels(self, catalog):
        target = make_sample("t", 0, [1, 0], [])
        with pytest.raises(DataError):
            sample_placement(target, catalog.concepts_for(0)[0], 0.5,
                             BoundingBox(0, 0, 10, 10), np.random.default_rng(0))


class TestComposite:
    def test_zero_mask_is_identity(self):
        target = gray(16, 16)
        patch = np.ones((4, 4, 3), dtype=np.float32)
        mask = np.zeros((4, 4), dtype=np.uint8)
        out = composite_patch(target, patch, mask, BoundingBox(2, 3, 6, 7))
        assert np.array_equal(out, target)

    def test_full_mask_copies_source_inside_only(self):
        target = gray(16, 16)
        patch = np.ones((4, 4, 3), dtype=np.float32)
        mask = np.ones((4, 4), dtype=np.uint8)
        out = composite_patch(target, patch, mask, BoundingBox(2, 3, 6, 7))
        assert np.all(out[3:7, 2:6] == 1.0)
        untouched = np.ones((16, 16), dtype=bool)
        untouched[3:7, 2:6] = False
        assert np.array_equal(out[untouched], target[untouched])

    def test_checkerboard_mask_per_pixel(self):
        """Per-pixel oracle: each coordinate follows its own mask bit."""
        rng = np.random.default_rng(42)
        target = rng.random((12, 12, 3)).astype(np.float32)
        patch = rng.random((6, 6, 3)).astype(np.float32)
        mask = np.indices((6, 6)).sum(axis=0) % 2
        out = composite_patch(target, patch, mask, BoundingBox(3, 4, 9, 10))
        for i in range(12):
            for j in range(12):
                inside = 4 <= i < 10 and 3 <= j < 9
                if inside and mask[i - 4, j - 3] == 1:
                    expected = patch[i - 4, j - 3]
                else:
                    expected = target[i, j]
                assert np.array_equal(out[i, j], expected)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            composite_patch(gray(8, 8), np.ones((3, 3, 3), np.float32),
                            np.ones((4, 4), np.uint8), BoundingBox(0, 0, 4, 4))
        with pytest.raises(DataError):
            composite_patch(gray(8, 8), np.ones((4, 4, 3), np.float32),
                            np.full((4, 4), 2, np.uint8), BoundingBox(0, 0, 4, 4))

    def test_resize_helpers(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1).repeat(3, axis=2) / 15.0
        up = resize_bilinear(img, 8, 8)
        assert up.shape == (8, 8, 3)
        assert float(up.min()) >= 0.0 and float(up.max()) <= 1.0
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        big = resize_nearest(mask, 4, 4)
        assert big.shape == (4, 4)
        assert set(np.unique(big)) <= {0, 1}


def build_augmentation_fixture(seed=3, lam_hat=0.3, min_count=8):
    spec = SynthSpec(classes=2, concepts_per_class=4, samples_per_class=12,
                     seed=seed, image_size=64)
    samples, catalog = generate_synthetic(spec)
    vocab = build_vocabulary(samples, catalog, lam_hat)
    labeled = [label_sample(s, vocab, lam_hat) for s in samples]
    config = AugmentationConfig(min_count=min_count, max_placement_attempts=100,
                                rng_seed=0)
    return labeled, vocab, catalog, config


class TestAugmentation:
    def test_appends_exactly_the_shortfall(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        samples = []
        for i in range(8):
            confs = [(b, 0.9)] + ([(a, 0.9)] if i < 3 else [(a, 0.1)])
            samples.append(
                make_sample(f"s{i}", 0, [1, 0], confs, pixels=gray())
            )
        labeled = [label_sample(s, vocab, 0.3) for s in samples]
        config = AugmentationConfig(min_count=5, rng_seed=0)
        rng = np.random.default_rng(config.rng_seed)
        out = augment_rare_concept(labeled, a, vocab, 0.3, config, rng)
        added = [s for s in out if not s.is_original]
        assert len(added) == 2
        idx = vocab.index_of[a]
        assert sum(int(s.concept_vector[idx]) for s in out) == 5

    def test_max_update_rule(self, catalog):
        a, b, c = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b, c))
        samples = [
            make_sample("src", 0, [1, 0], [(a, 0.9), (b, 0.9)], pixels=gray()),
            make_sample("tgt", 0, [1, 0], [(b, 0.9)], pixels=gray()),
        ]
        labeled = [label_sample(s, vocab, 0.3) for s in samples]
        assert labeled[1].concept_vector.tolist() == [0, 1, 0]
        rng = np.random.default_rng(0)
        out = augment_rare_concept(labeled, a, vocab, 0.3,
                                   AugmentationConfig(min_count=2), rng)
        added = [s for s in out if not s.is_original]
        assert len(added) == 1
        assert added[0].concept_vector.tolist() == [1, 1, 0]
        assert added[0].provenance.source_id == "src"
        assert added[0].provenance.inserted_concept == a
        # originals untouched
        assert labeled[1].concept_vector.tolist() == [0, 1, 0]

    def test_unseedable_concept_raises(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b))
        samples = [make_sample("s0", 0, [1, 0], [(b, 0.9)], pixels=gray())]
        labeled = [label_sample(s, vocab, 0.3) for s in samples]
        rng = np.random.default_rng(0)
        with pytest.raises(UnseedableConceptError):
            augment_rare_concept(labeled, a, vocab, 0.3,
                                 AugmentationConfig(min_count=2), rng)

    def test_exhaustion_warns_and_keeps_dataset(self, catalog):
        a, b, _ = catalog.concepts_for(0)
        vocab = ConceptVocabulary(concepts=(a, b))
        # the only possible target is fully blocked by a reliable box of b
        blocked = make_sample("tgt", 0, [1, 0], [(b, 0.95)], pixels=gray())
        blocked.detections = (
            Detection(box=BoundingBox(0, 0, 64, 64), confidence=0.95, concept=b),
        )
        source = make_sample("src", 0, [1, 0], [(a, 0.9)], pixels=gray())
        labeled = [label_sample(s, vocab, 0.3) for s in (source, blocked)]
        rng = np.random.default_rng(0)
        with pytest.warns(UserWarning, match="exhausted"):
            out = augment_rare_concept(labeled, a, vocab, 0.3,
                                       AugmentationConfig(min_count=3,
                                                          max_placement_attempts=20),
                                       rng)
        # source already counts one positive; the blocked target adds nothing
        idx = vocab.index_of[a]
        assert sum(int(s.concept_vector[idx]) for s in out) == 1

    def test_full_run_meets_counts_and_invariants(self):
        labeled, vocab, catalog, config = build_augmentation_fixture()
        augmented, report = augment_dataset(labeled, vocab, 0.3, config)
        counts = np.zeros(len(vocab), dtype=int)
        for s in augmented:
            counts += s.concept_vector
        for outcome in report.outcomes:
            if outcome.status != "unseedable":
                assert counts[vocab.index_of[outcome.concept]] >= config.min_count
        originals = {s.sample_id: s for s in labeled}
        checked = 0
        for s in augmented:
            if s.is_original:
                continue
            checked += 1
            target = originals[s.sample_id.rsplit("-aug-", 1)[0]]
            placement = s.provenance.placement
            blocked = [
                d.box
                for d in target.detections
                if confidence_admits(d.confidence, 0.3)
                and d.concept != s.provenance.inserted_concept
            ]
            assert not any(placement.overlaps(b) for b in blocked)
            x1, y1, x2, y2 = (int(round(v)) for v in
                              (placement.x1, placement.y1, placement.x2, placement.y2))
            outside = np.ones(s.image_pixels.shape[:2], dtype=bool)
            outside[y1:y2, x1:x2] = False
            assert np.array_equal(s.image_pixels[outside], target.image_pixels[outside])
            expected = target.concept_vector.copy()
            expected[vocab.index_of[s.provenance.inserted_concept]] = 1
            assert np.array_equal(s.concept_vector, expected)
        assert checked > 0

    def test_determinism_under_fixed_seed(self):
        labeled, vocab, catalog, config = build_augmentation_fixture()
        a1, _ = augment_dataset(labeled, vocab, 0.3, config)
        a2, _ = augment_dataset(labeled, vocab, 0.3, config)
        assert [s.sample_id for s in a1] == [s.sample_id for s in a2]
        for s1, s2 in zip(a1, a2):
            assert np.array_equal(s1.concept_vector, s2.concept_vector)
            if not s1.is_original:
                assert s1.provenance.placement == s2.provenance.placement
                assert np.array_equal(s1.image_pixels, s2.image_pixels)

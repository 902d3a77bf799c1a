import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabfeat.data.synthetic import generate_scene
from stabfeat.exceptions import FormatError
from stabfeat.features import FeatureSet
from stabfeat.retrieval import (
    BowIndex,
    BowVector,
    VerifyConfig,
    Vocabulary,
    bow_similarity,
    build_vocabulary,
    hamming,
    load_vocabulary,
    match_descriptors,
    quantize,
    query,
    save_vocabulary,
    verify_loop,
)


def blobs(seed=0, k=4, per=30, dim=5):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 10, (k, dim))
    return centers, [c + rng.normal(0, 0.1, (per, dim)) for c in centers]


class TestVocabulary:
    def test_recovers_blob_centers(self):
        centers, groups = blobs()
        vocab = build_vocabulary(np.vstack(groups), k=4, seed=0)
        d = np.linalg.norm(vocab.centroids[:, None] - centers[None], axis=2)
        assert d.min(axis=1).max() < 0.1

    def test_seeded(self):
        _, groups = blobs(1)
        a = build_vocabulary(groups, k=3, seed=7)
        b = build_vocabulary(groups, k=3, seed=7)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_idf_formula(self):
        # 4 images; word of blob 0 appears in images 0,1,2 and blob 1 only in image 3
        centers, groups = blobs(2, k=2, per=10)
        images = [groups[0], groups[0], groups[0], groups[1]]
        vocab = build_vocabulary(images, k=2, seed=0)
        w0 = vocab.assign(groups[0][:1])[0]
        assert vocab.idf[w0] == pytest.approx(max(0.0, math.log(4 / 4)))
        assert vocab.idf[1 - w0] == pytest.approx(math.log(4 / 2))

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least"):
            build_vocabulary(np.zeros((3, 2)), k=4)

    def test_binary_assign_is_hamming(self):
        rng = np.random.default_rng(0)
        packed = rng.integers(0, 256, (40, 2), dtype=np.uint8)
        vocab = build_vocabulary(packed, k=5, seed=0, kind="binary", dim=16)
        assert set(np.unique(vocab.centroids)) <= {0.0, 1.0}
        cpacked = np.packbits(vocab.centroids.astype(np.uint8), axis=1)
        want = np.argmin(hamming(packed, cpacked), axis=1)
        np.testing.assert_array_equal(vocab.assign(packed), want)

    def test_file_round_trip(self, tmp_path):
        _, groups = blobs(3)
        vocab = build_vocabulary(groups, k=4, seed=9)
        save_vocabulary(vocab, tmp_path / "v.dsfv")
        got = load_vocabulary(tmp_path / "v.dsfv")
        np.testing.assert_array_equal(got.centroids, vocab.centroids)
        np.testing.assert_array_equal(got.idf, vocab.idf)
        assert (got.kind, got.seed) == ("float", 9)

    @pytest.mark.parametrize("cut", [0, 4, 10, 22, 30])
    def test_file_truncated(self, tmp_path, cut):
        _, groups = blobs(3)
        save_vocabulary(build_vocabulary(groups, k=4), tmp_path / "v")
        raw = (tmp_path / "v").read_bytes()
        (tmp_path / "t").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_vocabulary(tmp_path / "t")


class TestBow:
    def test_similarity_identity_and_disjoint(self):
        a = BowVector({0: 0.5, 1: 0.5})
        assert bow_similarity(a, a) == 1.0
        assert bow_similarity(a, BowVector({2: 1.0})) == 0.0
        assert bow_similarity(BowVector(), BowVector()) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=3, max_size=3), st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
    def test_similarity_oracle(self, x, y):
        x, y = np.array(x) / sum(x), np.array(y) / sum(y)
        a, b = BowVector(dict(enumerate(x))), BowVector(dict(enumerate(y)))
        assert bow_similarity(a, b) == pytest.approx(1 - 0.5 * np.abs(x - y).sum(), abs=1e-12)
        assert bow_similarity(a, b) == pytest.approx(bow_similarity(b, a))

    def test_quantize_tfidf(self):
        vocab = Vocabulary(np.array([[0.0], [10.0], [20.0]]), np.array([1.0, 2.0, 0.0]))
        v = quantize(np.array([[0.1], [0.2], [9.9], [20.0]]), vocab)
        # tf = (.5, .25, .25), times idf = (.5, .5, 0), normalized
        assert v.weights == pytest.approx({0: 0.5, 1: 0.5})

    def test_quantize_falls_back_to_tf(self):
        vocab = Vocabulary(np.array([[0.0], [10.0]]), np.zeros(2))
        v = quantize(np.array([[0.0], [0.0], [10.0]]), vocab)
        assert v.weights == pytest.approx({0: 2 / 3, 1: 1 / 3})

    def test_quantize_width_checked(self):
        with pytest.raises(ValueError, match="width"):
            quantize(np.zeros((2, 3)), Vocabulary(np.zeros((2, 2)), np.ones(2)))

    def test_query_exclusion_and_past_only(self):
        index = BowIndex()
        for i in range(6):
            index.add(i, BowVector({i % 2: 1.0}))
        q = BowVector({0: 1.0})
        assert query(index, q, top_n=3, exclusion_gap=1, position=3) == [(0, 1.0), (1, 0.0), (5, 0.0)]
        assert query(index, q, top_n=3, exclusion_gap=1, position=3, past_only=True) == [(0, 1.0), (1, 0.0)]

    def test_query_bad_gap(self):
        with pytest.raises(ValueError):
            query(BowIndex(), BowVector(), exclusion_gap=-1)


class TestMatching:
    def test_scene_matches_are_true_pairs(self):
        sc = generate_scene(n_static=30, seed=1)
        m = match_descriptors(*sc.features)
        assert len(m) >= 25
        np.testing.assert_array_equal(sc.matches.idx2[m.idx1], m.idx2)

    def test_ratio_test(self):
        a = FeatureSet(np.zeros((1, 3)), [[0.0, 0.0]], image_size=(4, 4))
        b = FeatureSet(np.zeros((2, 3)), [[1.0, 0.0], [0.0, 1.1]], image_size=(4, 4))
        assert len(match_descriptors(a, b, ratio=0.8)) == 0
        assert len(match_descriptors(a, b, ratio=0.95)) == 1

    def test_hamming_margin(self):
        kp = np.zeros((2, 3))
        a = FeatureSet(kp[:1], np.zeros((1, 4), np.uint8), "binary", (4, 4))
        b = FeatureSet(kp, np.array([[0, 0, 0, 0], [255, 255, 0, 0]], np.uint8), "binary", (4, 4))
        assert len(match_descriptors(a, b, hamming_margin=16)) == 1
        assert len(match_descriptors(a, b, hamming_margin=17)) == 0

    def test_kind_mismatch(self):
        a = FeatureSet(np.zeros((1, 3)), np.zeros((1, 8)))
        b = FeatureSet(np.zeros((1, 3)), np.zeros((1, 1), np.uint8), "binary")
        with pytest.raises(ValueError):
            match_descriptors(a, b)


class TestVerify:
    def test_static_scene_verifies(self):
        sc = generate_scene(n_static=40, n_dynamic=10, seed=2)
        s = verify_loop(*sc.features, cfg=VerifyConfig(threshold=1e-3), candidate=5, query_id=20)
        assert s.verified and s.inliers == 40 and s.score < 1e-9
        assert (s.query, s.candidate) == (20, 5)

    def test_too_few_matches_unverified(self):
        sc = generate_scene(n_static=10, seed=2)
        s = verify_loop(*sc.features, cfg=VerifyConfig(min_inliers=12))
        assert not s.verified and s.score == math.inf

    def test_weighted_needs_map_size(self):
        sc = generate_scene(n_static=30, seed=3)
        w, h = sc.features[0].image_size
        s = verify_loop(*sc.features, np.ones((h, w)), VerifyConfig())
        assert s.verified

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabfeat.data.corpus import load_corpus, save_corpus
from stabfeat.data.prep import DEFAULT_CATEGORIES, LabelMap, mine_triplets, stability_from_labels
from stabfeat.data.synthetic import (
    KIND_MOVING,
    KIND_PARKED,
    KIND_STATIC,
    KIND_TREE,
    CorpusConfig,
    generate_corpus,
    generate_scene,
)
from stabfeat.exceptions import FormatError
from stabfeat.geometry import symmetric_distances


@pytest.fixture(scope="module")
def tiny():
    return generate_corpus(n_frames=12, n_places=6, held_out=2, seed=5)


class TestStability:
    def test_partition(self):
        ids = np.array([[0, 2, 8], [10, 13, 7]])
        S = stability_from_labels(LabelMap(ids))
        np.testing.assert_array_equal(S, [[1, 1, 0], [0, 0, 1]])

    def test_custom_static_set(self):
        ids = np.array([[8, 13]])
        np.testing.assert_array_equal(stability_from_labels(LabelMap(ids), {"vegetation"}), [[1, 0]])

    def test_unknown_category_name(self):
        with pytest.raises(ValueError, match="unknown static"):
            stability_from_labels(LabelMap(np.zeros((1, 1))), {"lava"})

    def test_unknown_label_id(self):
        with pytest.raises(ValueError, match="missing"):
            LabelMap(np.array([[200]]))


class TestMining:
    def test_negative_constraints(self):
        loops = [(50, 0), (60, 10), (70, 20)]
        recs, skipped = mine_triplets(loops, 80, negatives_per_query=3, gap=5, seed=1)
        assert skipped == 0 and len(recs) == 9
        for r in recs:
            assert abs(r.negative - r.query) >= 5 and abs(r.negative - r.positive) >= 5
            assert (r.query, r.negative) not in loops and (r.negative, r.query) not in loops

    def test_seeded(self):
        a = mine_triplets([(30, 0)], 40, 2, seed=3)
        b = mine_triplets([(30, 0)], 40, 2, seed=3)
        assert a == b

    def test_skips_without_pool(self, caplog):
        recs, skipped = mine_triplets([(3, 0)], 5, gap=10)
        assert recs == [] and skipped == 1
        assert "skipped" in caplog.text

    @pytest.mark.parametrize("loops", [[], [(1, 1)], [(0, 9)]])
    def test_rejects(self, loops):
        with pytest.raises(ValueError):
            mine_triplets(loops, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 15))
    def test_negatives_eligible(self, seed, gap):
        rng = np.random.default_rng(seed)
        n = 60
        loops = [(int(b), int(a)) for a, b in rng.integers(0, n, (5, 2)) if a != b]
        if not loops:
            return
        recs, skipped = mine_triplets(loops, n, 1, gap, seed)
        assert len(recs) + skipped == len(loops)
        partner = {(a, b) for a, b in loops} | {(b, a) for a, b in loops}
        for r in recs:
            assert (r.query, r.negative) not in partner
            assert min(abs(r.negative - r.query), abs(r.negative - r.positive)) >= max(gap, 1)


class TestScene:
    @pytest.mark.parametrize("seed", range(5))
    def test_static_points_satisfy_F(self, seed):
        sc = generate_scene(n_static=30, n_dynamic=10, seed=seed)
        d = symmetric_distances(sc.F, sc.matches)
        assert d[sc.inlier].max() < 1e-9
        assert d[~sc.inlier].min() > sc.config.dynamic_margin

    def test_permuted_second_view(self):
        sc = generate_scene(n_static=20, seed=1)
        fs1, fs2 = sc.features
        np.testing.assert_allclose(fs2.normalized()[sc.matches.idx2], sc.matches.p2)
        np.testing.assert_allclose(fs1.normalized(), sc.matches.p1)

    def test_masks_mark_dynamic(self):
        sc = generate_scene(n_static=20, n_dynamic=5, seed=2)
        xy = np.rint(sc.features[0].xy[~sc.inlier]).astype(int)
        assert np.all(sc.masks[0][xy[:, 1], xy[:, 0]] == 0)

    def test_seeded(self):
        a, b = generate_scene(seed=4, noise=0.3), generate_scene(seed=4, noise=0.3)
        np.testing.assert_array_equal(a.features[1].keypoints, b.features[1].keypoints)

    @pytest.mark.parametrize("kw", [dict(n_static=5), dict(baseline=0.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            generate_scene(**kw)


class TestCorpus:
    def test_layout(self, tiny):
        assert len(tiny.frames) == 12
        assert tiny.loops == [(f, f - 6) for f in range(6, 12)]
        assert tiny.held_out_ids == [10, 11]
        assert tiny.train_loops() == [(f, f - 6) for f in range(6, 10)]
        assert tiny.trajectory().shape == (12, 3, 4)

    def test_frame_contents(self, tiny):
        f = tiny.frames[7]
        h, w = f.stability.shape
        assert f.image.shape == (3, h, w) and f.dense.shape == (h, w, 8)
        assert f.image.dtype == np.float32 and 0 <= f.image.min() and f.image.max() <= 1
        assert len(f.kind) == len(f.features)
        assert f.place == 1

    def test_truth_versus_semantics(self, tiny):
        # trees and parked cars are physically stable but semantically dynamic
        kinds = np.concatenate([f.kind for f in tiny.frames])
        sem, truth = [], []
        for f in tiny.frames:
            xy = np.rint(f.features.xy).astype(int)
            sem.append(f.stability[xy[:, 1], xy[:, 0]])
            truth.append(f.truth[xy[:, 1], xy[:, 0]])
        sem, truth = np.concatenate(sem), np.concatenate(truth)
        for k in (KIND_PARKED, KIND_TREE):
            assert (kinds == k).any()
            assert truth[kinds == k].mean() > 0.9 and sem[kinds == k].mean() < 0.1
        assert truth[kinds == KIND_MOVING].max() == 0
        assert sem[kinds == KIND_STATIC].mean() > 0.9

    def test_seeded(self):
        a = generate_corpus(n_frames=3, n_places=3, held_out=0, seed=8)
        b = generate_corpus(n_frames=3, n_places=3, held_out=0, seed=8)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.image, fb.image)
            np.testing.assert_array_equal(fa.features.descriptors, fb.features.descriptors)

    @pytest.mark.parametrize("kw", [dict(n_places=0), dict(held_out=200), dict(descriptor_kind="x")])
    def test_config_rejects(self, kw):
        with pytest.raises(ValueError):
            CorpusConfig(**kw)

    def test_config_dict_round_trip(self):
        cfg = CorpusConfig(image_size=(32, 24), seed=3)
        text = {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in cfg.to_dict().items()}
        assert CorpusConfig.from_dict(text) == cfg


class TestCorpusFiles:
    def test_round_trip(self, tiny, tmp_path):
        save_corpus(tiny, tmp_path)
        got = load_corpus(tmp_path)
        assert got.config == tiny.config and got.loops == tiny.loops
        for a, b in zip(got.frames, tiny.frames):
            np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-7)
            np.testing.assert_array_equal(a.labels.ids, b.labels.ids)
            np.testing.assert_array_equal(a.stability, b.stability)
            np.testing.assert_array_equal(a.truth, b.truth)
            np.testing.assert_array_equal(a.dense, b.dense)
            np.testing.assert_array_equal(a.features.descriptors, b.features.descriptors)
        np.testing.assert_allclose(got.trajectory(), tiny.trajectory(), rtol=1e-12, atol=1e-12)

    def test_static_set_applied_on_load(self, tiny, tmp_path):
        save_corpus(tiny, tmp_path)
        names = set(DEFAULT_CATEGORIES.values())
        got = load_corpus(tmp_path, static_categories=names)
        assert all(f.stability.all() for f in got.frames)

    def test_gap_in_numbering(self, tiny, tmp_path):
        save_corpus(tiny, tmp_path)
        (tmp_path / "images" / "000003.ppm").unlink()
        with pytest.raises(FormatError, match="expected frame 000003"):
            load_corpus(tmp_path)

    def test_missing_images(self, tmp_path):
        with pytest.raises(FormatError, match="images"):
            load_corpus(tmp_path)

    def test_bad_loop_reference(self, tiny, tmp_path):
        save_corpus(tiny, tmp_path)
        (tmp_path / "loops.csv").write_text("id_a,id_b\n0,99\n")
        with pytest.raises(FormatError, match="missing frame"):
            load_corpus(tmp_path)

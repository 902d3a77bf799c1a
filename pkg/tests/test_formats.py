import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from stabfeat.data import formats
from stabfeat.exceptions import FormatError
from stabfeat.features import FeatureSet
from stabfeat.geometry import Matches

tmp_settings = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


class TestNetpbm:
    @tmp_settings
    @given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=20)))
    def test_pgm_round_trip(self, tmp_path, grid):
        formats.write_pgm(tmp_path / "a.pgm", grid)
        np.testing.assert_array_equal(formats.read_pgm(tmp_path / "a.pgm"), grid)

    @tmp_settings
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12), st.sampled_from([" ", "\n", "\t", "  \n"]))
    def test_pgm_agrees_with_pillow(self, tmp_path, seed, w, h, sep):
        grid = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
        head = f"P5{sep}# a comment\n{w}{sep}{h}{sep}255\n".encode()
        path = tmp_path / "c.pgm"
        path.write_bytes(head + grid.tobytes())
        ours = formats.read_pgm(path)
        theirs = np.asarray(Image.open(path))
        np.testing.assert_array_equal(ours, theirs)

    @tmp_settings
    @given(st.integers(0, 10_000), st.integers(1, 10), st.integers(1, 10))
    def test_ppm_agrees_with_pillow(self, tmp_path, seed, w, h):
        img = np.random.default_rng(seed).uniform(0, 1, (3, h, w))
        formats.write_ppm(tmp_path / "i.ppm", img)
        ours = formats.read_ppm(tmp_path / "i.ppm")
        theirs = np.asarray(Image.open(tmp_path / "i.ppm")).transpose(2, 0, 1) / 255.0
        np.testing.assert_allclose(ours, theirs, atol=1e-7)
        np.testing.assert_allclose(ours, img, atol=0.5 / 255 + 1e-7)

    @pytest.mark.parametrize(
        "raw,msg",
        [
            (b"P2\n1 1\n255\n\x00", "magic"),
            (b"P5\n2 2\n255\n\x00", "data bytes"),
            (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
            (b"P5\n0 1\n255\n", "size"),
            (b"P5\n1", "truncated"),
            (b"P5\nx 1\n255\n\x00", "non-numeric"),
            (b"", "truncated"),
        ],
    )
    def test_pgm_rejects(self, tmp_path, raw, msg):
        (tmp_path / "b.pgm").write_bytes(raw)
        with pytest.raises(FormatError, match=msg):
            formats.read_pgm(tmp_path / "b.pgm")

    def test_ppm_is_not_pgm(self, tmp_path):
        formats.write_ppm(tmp_path / "i.ppm", np.zeros((3, 2, 2)))
        with pytest.raises(FormatError, match="P5"):
            formats.read_pgm(tmp_path / "i.ppm")

    def test_pgm_write_range(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_pgm(tmp_path / "x.pgm", np.array([[256]]))


class TestActivation:
    @tmp_settings
    @given(hnp.arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1, width=32)))
    def test_round_trip_exact(self, tmp_path, amap):
        formats.write_activation(tmp_path / "a.dsfa", amap)
        np.testing.assert_array_equal(formats.read_activation(tmp_path / "a.dsfa"), amap)

    def test_layout(self, tmp_path):
        formats.write_activation(tmp_path / "a.dsfa", np.array([[0.5, 1.0]], np.float32))
        raw = (tmp_path / "a.dsfa").read_bytes()
        assert raw[:4] == b"DSFA" and struct.unpack("<II", raw[4:12]) == (1, 2)
        assert struct.unpack("<2f", raw[12:]) == (0.5, 1.0)

    @pytest.mark.parametrize("raw", [b"DSFA", b"XXXX" + bytes(12), b"DSFA" + struct.pack("<II", 0, 3), b"DSFA" + struct.pack("<II", 2, 2) + bytes(15)])
    def test_rejects(self, tmp_path, raw):
        (tmp_path / "a.dsfa").write_bytes(raw)
        with pytest.raises(FormatError):
            formats.read_activation(tmp_path / "a.dsfa")


class TestDescriptors:
    @tmp_settings
    @given(st.integers(0, 10_000), st.integers(0, 20), st.integers(1, 40))
    def test_float_round_trip(self, tmp_path, seed, n, dim):
        d = np.random.default_rng(seed).normal(size=(n, dim)).astype(np.float32)
        formats.write_descriptors(tmp_path / "d.dsfd", d)
        out, kind, got_dim = formats.read_descriptors(tmp_path / "d.dsfd")
        assert (kind, got_dim) == ("float", dim)
        np.testing.assert_array_equal(out, d)

    @tmp_settings
    @given(st.integers(0, 10_000), st.integers(0, 20), st.integers(1, 300))
    def test_binary_round_trip(self, tmp_path, seed, n, bits):
        d = np.random.default_rng(seed).integers(0, 256, (n, (bits + 7) // 8), dtype=np.uint8)
        formats.write_descriptors(tmp_path / "d.dsfd", d, "binary", bits)
        out, kind, got = formats.read_descriptors(tmp_path / "d.dsfd")
        assert (kind, got) == ("binary", bits)
        np.testing.assert_array_equal(out, d)

    def test_binary_width_checked(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_descriptors(tmp_path / "d", np.zeros((2, 3), np.uint8), "binary", 32)

    def test_unknown_kind_code(self, tmp_path):
        (tmp_path / "d").write_bytes(b"DSFD" + struct.pack("<IIB", 0, 4, 7))
        with pytest.raises(FormatError, match="kind"):
            formats.read_descriptors(tmp_path / "d")

    def test_length_mismatch(self, tmp_path):
        (tmp_path / "d").write_bytes(b"DSFD" + struct.pack("<IIB", 2, 4, 0) + bytes(31))
        with pytest.raises(FormatError, match="need 32 bytes"):
            formats.read_descriptors(tmp_path / "d")

    def test_dense_grid(self, tmp_path):
        g = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        formats.write_dense_grid(tmp_path / "g", g)
        np.testing.assert_array_equal(formats.read_dense_grid(tmp_path / "g", 3, 4), g)
        with pytest.raises(FormatError):
            formats.read_dense_grid(tmp_path / "g", 4, 4)


class TestText:
    def test_keypoints(self, tmp_path):
        kp = np.array([[1.5, 2.25, 0.125], [0, 0, 1e-9]])
        formats.write_keypoints(tmp_path / "k.tsv", kp)
        np.testing.assert_array_equal(formats.read_keypoints(tmp_path / "k.tsv"), kp)

    @pytest.mark.parametrize("text,msg", [("1\t2\n", "3 tab"), ("1\t2\tx\n", "non-numeric"), ("1\t2\tnan\n", "non-finite")])
    def test_keypoints_reject(self, tmp_path, text, msg):
        (tmp_path / "k.tsv").write_text(text)
        with pytest.raises(FormatError, match=msg) as info:
            formats.read_keypoints(tmp_path / "k.tsv")
        assert info.value.position == 1

    def test_matches_with_weights(self, tmp_path):
        m = Matches([[0.1, 0.2]], [[0.3, -0.4]], weights=[0.75])
        formats.write_matches(tmp_path / "m.txt", m)
        got = formats.read_matches(tmp_path / "m.txt")
        np.testing.assert_array_equal(got.p1, m.p1)
        np.testing.assert_array_equal(got.weights, [0.75])

    def test_matches_mixed_width(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 0 0 0\n0 0 0 0 1\n")
        with pytest.raises(FormatError, match="some lines"):
            formats.read_matches(tmp_path / "m.txt")

    def test_loops(self, tmp_path):
        formats.write_loops(tmp_path / "l.csv", [(5, 1), (7, 2)])
        assert formats.read_loops(tmp_path / "l.csv") == [(5, 1), (7, 2)]
        (tmp_path / "bad.csv").write_text("id_a,id_b\n3,3\n")
        with pytest.raises(FormatError, match="itself"):
            formats.read_loops(tmp_path / "bad.csv")

    def test_trajectory(self, tmp_path):
        poses = np.random.default_rng(1).normal(size=(4, 3, 4))
        formats.write_trajectory(tmp_path / "t.txt", poses)
        np.testing.assert_allclose(formats.read_trajectory(tmp_path / "t.txt"), poses, rtol=1e-12)
        (tmp_path / "bad.txt").write_text("1 2 3\n")
        with pytest.raises(FormatError, match="12"):
            formats.read_trajectory(tmp_path / "bad.txt")

    def test_categories(self, tmp_path):
        formats.write_categories(tmp_path / "c.tsv", {0: "road", 13: "car"})
        assert formats.read_categories(tmp_path / "c.tsv") == {0: "road", 13: "car"}
        (tmp_path / "bad.tsv").write_text("300\tx\n")
        with pytest.raises(FormatError, match="0..255"):
            formats.read_categories(tmp_path / "bad.tsv")

    def test_not_utf8(self, tmp_path):
        (tmp_path / "x.csv").write_bytes(b"\xff\xfe\x00")
        with pytest.raises(FormatError, match="UTF-8"):
            formats.read_loops(tmp_path / "x.csv")


class TestConfig:
    def test_parse(self):
        text = "# header\nlr = 0.5  # trailing\n\nmode=dense\n"
        assert formats.parse_config(text) == {"lr": "0.5", "mode": "dense"}

    def test_duplicate(self):
        with pytest.raises(FormatError, match="duplicate") as info:
            formats.parse_config("a=1\na=2\n")
        assert info.value.position == 2

    def test_missing_equals(self):
        with pytest.raises(FormatError, match="key=value"):
            formats.parse_config("justakey\n")

    def test_round_trip_tuples(self, tmp_path):
        formats.write_config(tmp_path / "c.cfg", {"epochs": (20, 30), "lr": 0.1})
        assert formats.read_config(tmp_path / "c.cfg") == {"epochs": "20,30", "lr": "0.1"}


def test_feature_set_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    fs = FeatureSet(np.column_stack([rng.uniform(0, 11, (6, 2)), rng.uniform(0, 1, 6)]), rng.normal(size=(6, 8)), image_size=(16, 12))
    formats.write_feature_set(tmp_path / "f", fs)
    got = formats.read_feature_set(tmp_path / "f", (16, 12))
    np.testing.assert_allclose(got.keypoints, fs.keypoints, rtol=1e-8)
    np.testing.assert_array_equal(got.descriptors, fs.descriptors)


def test_feature_set_count_mismatch(tmp_path):
    formats.write_keypoints(tmp_path / "f.kpts.tsv", np.zeros((2, 3)))
    formats.write_descriptors(tmp_path / "f.desc.dsfd", np.zeros((3, 4), np.float32))
    with pytest.raises(FormatError, match="2 keypoints but 3"):
        formats.read_feature_set(tmp_path / "f", (4, 4))


def test_csv_text():
    assert formats.csv_text(["a", "b"], [["1", "x,y"]]) == 'a,b\n1,"x,y"\n'

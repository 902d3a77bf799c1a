import csv
from pathlib import Path

import numpy as np
import pytest

from stabfeat.cli import run
from stabfeat.data import formats
from stabfeat.evaluation import rotation_error

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synth.cfg"
    cfg.write_text("n_places = 6\nimage_size = 16,16\nn_static = 30\n")
    assert run(["gen-synth", "--config", str(cfg), "--out", str(root / "corpus"), "--frames", "12", "--held-out", "2"]) == 0
    return root / "corpus"


@pytest.fixture(scope="module")
def model_path(corpus_dir):
    out = corpus_dir.parent / "m.dsfw"
    args = ["train", "--corpus", str(corpus_dir), "--out", str(out), "--epochs", "2", "--base-channels", "2",
            "--gap", "2", "--negatives", "1", "--log", str(corpus_dir.parent / "loss.csv")]
    assert run(args) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert run([]) == 1
        assert "subcommand is required" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["heatmap", "--activation", "a", "--out", "b", "--bogus"]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and "unrecognized" in err[0]

    def test_help_exits_zero(self, capsys):
        assert run(["pr", "--help"]) == 0
        assert "--scores" in capsys.readouterr().out

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("nonsense=1\n")
        assert run(["heatmap", "--config", str(tmp_path / "c.cfg"), "--activation", "a", "--out", "b"]) == 1

    def test_bad_config_value(self, tmp_path):
        (tmp_path / "c.cfg").write_text("step=abc\n")
        assert run(["traj-eval", "--config", str(tmp_path / "c.cfg"), "--est", "a", "--gt", "b"]) == 1


class TestDataErrors:
    def test_missing_file(self, tmp_path, capsys):
        assert run(["heatmap", "--activation", str(tmp_path / "none.dsfa"), "--out", str(tmp_path / "x.pgm")]) == 2
        assert "no such file" in capsys.readouterr().err

    def test_corrupt_file(self, tmp_path, capsys):
        (tmp_path / "a.dsfa").write_bytes(b"DSFA\x01")
        assert run(["heatmap", "--activation", str(tmp_path / "a.dsfa"), "--out", str(tmp_path / "x.pgm")]) == 2
        assert capsys.readouterr().err.count("\n") == 1

    def test_pr_without_positives(self, tmp_path):
        (tmp_path / "gt.csv").write_text("id_a,id_b\n")
        code = run(["pr", "--scores", str(FIXTURES / "pr" / "s.csv"), "--gt", str(tmp_path / "gt.csv"),
                    "--out", str(tmp_path / "c.csv")])
        assert code == 2


def test_pr_fixture(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert run(["pr", "--scores", str(FIXTURES / "pr" / "s.csv"), "--gt", str(FIXTURES / "pr" / "loops.csv"),
                "--out", str(out)]) == 0
    assert out.read_text().splitlines()[-1] == "auc=1.000000"
    assert out.read_text().splitlines()[0] == "threshold,precision,recall"
    assert "auc=1.000000" in capsys.readouterr().out


def test_config_sets_default_and_flag_wins(tmp_path):
    n = 201
    gt = np.zeros((n, 3, 4))
    gt[:, :, :3] = np.eye(3)
    gt[:, 0, 3] = np.arange(n)
    formats.write_trajectory(tmp_path / "gt.txt", gt)
    formats.write_trajectory(tmp_path / "est.txt", gt)
    (tmp_path / "c.cfg").write_text("step = 500\n")
    base = ["traj-eval", "--config", str(tmp_path / "c.cfg"), "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt")]
    assert run(base) == 2  # 200 m path is shorter than the 500 m step from the config
    assert run(base + ["--step", "50", "--out", str(tmp_path / "t.txt")]) == 0
    assert (tmp_path / "t.txt").read_text().startswith("rotation_error=0\n")


def test_traj_eval_drift(tmp_path, capsys):
    from scipy.spatial.transform import Rotation

    gt = np.zeros((101, 3, 4))
    gt[:, :, :3] = np.eye(3)
    gt[:, 0, 3] = np.arange(101)
    est = gt.copy()
    est[:, :, :3] = Rotation.from_euler("z", 0.001 * np.arange(101)).as_matrix()
    formats.write_trajectory(tmp_path / "gt.txt", gt)
    formats.write_trajectory(tmp_path / "est.txt", est)
    assert run(["traj-eval", "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt")]) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert float(line.split("=")[1]) == pytest.approx(rotation_error(est, gt), rel=1e-8)


def test_heatmap_rounding(tmp_path):
    amap = np.array([[0.0, 0.5, 1.0, 1.7], [-0.2, 0.1, 0.998, 0.25]], np.float32)
    formats.write_activation(tmp_path / "a.dsfa", amap)
    assert run(["heatmap", "--activation", str(tmp_path / "a.dsfa"), "--out", str(tmp_path / "h.pgm")]) == 0
    got = formats.read_pgm(tmp_path / "h.pgm")
    np.testing.assert_array_equal(got, [[0, 128, 255, 255], [0, 26, 254, 64]])


def test_grad_check_command(capsys):
    assert run(["grad-check", "--seeds", "1", "--mode", "dense"]) == 0
    assert "dense: max relative error" in capsys.readouterr().out


class TestWorkflow:
    def test_corpus_written(self, corpus_dir):
        assert len(list((corpus_dir / "images").glob("*.ppm"))) == 12
        cfg = formats.read_config(corpus_dir / "corpus.cfg")
        assert cfg["n_frames"] == "12" and cfg["image_size"] == "16,16"

    def test_train_outputs(self, model_path, corpus_dir):
        _, meta = formats_meta(model_path)
        assert meta["epoch"] == "2"
        log = rows(corpus_dir.parent / "loss.csv")
        assert [r["epoch"] for r in log] == ["0", "1"]

    def test_resume_continues(self, model_path, corpus_dir, tmp_path):
        out = tmp_path / "m2.dsfw"
        args = ["train", "--corpus", str(corpus_dir), "--out", str(out), "--epochs", "3", "--base-channels", "2",
                "--gap", "2", "--negatives", "1", "--resume", str(model_path)]
        assert run(args) == 0
        assert formats_meta(out)[1]["epoch"] == "3"
        bad = args[:-1] + [str(model_path), "--lr", "0.2"]
        assert run(bad) == 2

    def test_infer_select_verify_pr(self, model_path, corpus_dir, tmp_path):
        acts = tmp_path / "acts"
        acts.mkdir()
        for n in range(12):
            name = f"{n:06d}"
            assert run(["infer", "--model", str(model_path), "--image", str(corpus_dir / "images" / f"{name}.ppm"),
                        "--out", str(acts / f"{name}.dsfa")]) == 0
        amap = formats.read_activation(acts / "000000.dsfa")
        assert amap.shape == (16, 16) and np.all((amap > 0) & (amap < 1))

        feats = str(corpus_dir / "features" / "000000")
        for method, extra in [
            ("activation", ["--activation", str(acts / "000000.dsfa")]),
            ("semantic", ["--labels", str(corpus_dir / "labels" / "000000.pgm"),
                          "--categories", str(corpus_dir / "categories.tsv")]),
            ("response", ["--width", "16", "--height", "16"]),
        ]:
            assert run(["select", "--features", feats, "--method", method, "--k", "5",
                        "--out", str(tmp_path / method), *extra]) == 0
            assert len(formats.read_keypoints(tmp_path / f"{method}.kpts.tsv")) <= 5
        assert run(["select", "--features", feats, "--method", "activation", "--out", str(tmp_path / "x")]) == 1

        vocab = tmp_path / "v.dsfv"
        assert run(["build-vocab", "--corpus", str(corpus_dir), "--k", "8", "--out", str(vocab)]) == 0
        cands = tmp_path / "cands.csv"
        assert run(["retrieve", "--vocab", str(vocab), "--corpus", str(corpus_dir), "--gap", "2", "--past-only",
                    "--out", str(cands)]) == 0
        got = rows(cands)
        assert got and all(int(r["candidate_id"]) <= int(r["query_id"]) - 2 for r in got)

        scores = tmp_path / "scores.csv"
        assert run(["verify", "--corpus", str(corpus_dir), "--candidates", str(cands), "--min-inliers", "8",
                    "--activations", str(acts), "--out", str(scores)]) == 0
        assert list(rows(scores)[0]) == ["query_id", "candidate_id", "similarity", "verif_score", "inliers"]
        code = run(["pr", "--scores", str(scores), "--gt", str(corpus_dir / "loops.csv"), "--out", str(tmp_path / "pr.csv")])
        assert code == 0, "no true loop among the retrieved candidates"
        assert (tmp_path / "pr.csv").read_text().splitlines()[-1].startswith("auc=")

    def test_pipeline_single_variant(self, corpus_dir, tmp_path, capsys):
        # the default 64-word vocabulary needs more descriptors than 12 tiny frames hold
        assert run(["pipeline", "--corpus", str(corpus_dir), "--variants", "trad", "--out", str(tmp_path / "p")]) == 2
        cfg = tmp_path / "p.cfg"
        cfg.write_text("vocab_k = 8\nexclusion_gap = 2\nmin_inliers = 8\n")
        assert run(["pipeline", "--config", str(cfg), "--corpus", str(corpus_dir), "--variants", "trad",
                    "--out", str(tmp_path / "q")]) == 0
        table = (tmp_path / "q" / "report.csv").read_text().splitlines()
        assert table[0] == "sequence,trad"
        assert table[1].startswith("corpus,")

    def test_pipeline_bad_setting(self, tmp_path):
        (tmp_path / "p.cfg").write_text("bogus = 1\n")
        assert run(["pipeline", "--config", str(tmp_path / "p.cfg"), "--out", str(tmp_path / "o")]) == 1


def formats_meta(path):
    from stabfeat.network import read_weight_file

    return read_weight_file(path)

import json

import numpy as np
import pytest

from convs2svc.cli import main, read_pgm, write_pgm
from convs2svc.features import read_fseq_raw

TINY = """[model]
mode = many2many
hidden = 12
key_dim = 10
embed_dim = 4
groups = 1
blocks = 2
[train]
batch_size = 4
iterations = 4
log_every = 0
checkpoint_every = 0
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]
    manifest = str(root / "corpus" / "manifest.json")
    assert main(["gen-corpus", *c, "--out", str(root / "corpus"), "--speakers", "3", "--sentences", "8"]) == 0
    assert main(["stats", *c, "--manifest", manifest, "--out", str(root / "stats")]) == 0
    assert main(["train", *c, "--manifest", manifest, "--out", str(root / "ckpt")]) == 0
    assert main(["convert", *c, "--manifest", manifest, "--checkpoint", str(root / "ckpt" / "last.npz"),
                 "--speaker-src", "spk0", "--speaker-trg", "spk2", "--forward-attention", "on",
                 "--out", str(root / "conv")]) == 0
    return root, c, manifest


def test_pipeline_outputs(run):
    root, _, _ = run
    profiles = json.loads((root / "stats" / "stats.json").read_text())
    assert [p["name"] for p in profiles] == ["spk0", "spk1", "spk2"]
    assert (root / "ckpt" / "last.npz").exists()
    history = np.loadtxt(root / "ckpt" / "history.tsv")
    assert history.shape == (4, 5)
    converted = sorted((root / "conv" / "converted").glob("*.fseq"))
    assert converted
    for f in converted:
        data, period = read_fseq_raw(f)
        assert data.shape[0] == 31 and period == 8.0
    assert (root / "conv" / "config.ini").exists()


def test_forward_attention_support_in_exported_matrices(run):
    root, _, _ = run
    for f in (root / "conv" / "attention").glob("*.fseq"):
        a, _ = read_fseq_raw(f)
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-5)
        # N0 + N1 - 1 = 19 frames at a 24 ms reduced period
        assert (a[:, 1:] > 0).sum(axis=0).max() <= 19
        img = read_pgm(f.with_suffix(".pgm"))
        assert img.shape == a.shape


def test_evaluate_against_manifest(run):
    root, c, manifest = run
    out = root / "eval"
    assert main(["evaluate", *c, "--converted", str(root / "conv" / "converted"), "--manifest", manifest,
                 "--speaker-trg", "spk2", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mcd_db"]["n"] == len(report["utterances"]) > 0


def test_evaluate_identical_sets_is_perfect(run, tmp_path):
    root, c, manifest = run
    ref = root / "corpus" / "feats" / "spk1"
    assert main(["evaluate", *c, "--converted", str(ref), "--reference", str(ref), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mcd_db"]["mean"] == 0.0
    assert report["lfc"]["mean"] == pytest.approx(1.0)
    assert report["ldr_deviation_pct"]["mean"] == pytest.approx(0.0)


def test_plot_attention(run, tmp_path):
    root, c, manifest = run
    assert main(["plot-attention", *c, "--manifest", manifest, "--checkpoint", str(root / "ckpt" / "last.npz"),
                 "--speaker-src", "spk1", "--speaker-trg", "spk0", "--sentence", "s0003",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "attention_s0003.pgm").exists()


def test_gradcheck_command(run):
    _, c, _ = run
    assert main(["gradcheck", *c, "--tensors", "4", "--coords", "2"]) == 0


def test_unknown_speaker_exit_code(run, tmp_path, capsys):
    root, c, manifest = run
    code = main(["convert", *c, "--manifest", manifest, "--checkpoint", str(root / "ckpt" / "last.npz"),
                 "--speaker-src", "nobody", "--out", str(tmp_path)])
    assert code == 6
    assert "data error" in capsys.readouterr().err


def test_malformed_input_exit_code(run, tmp_path, capsys):
    root, c, manifest = run
    bad = tmp_path / "bad.fseq"
    bad.write_bytes(b"garbage")
    code = main(["convert", *c, "--manifest", manifest, "--checkpoint", str(root / "ckpt" / "last.npz"),
                 "--input", str(bad), "--out", str(tmp_path)])
    assert code == 6
    assert "data error" in capsys.readouterr().err


def test_mode_mismatch_exit_code(run, tmp_path, capsys):
    root, c, manifest = run
    code = main(["convert", *c, "--mode", "realtime", "--manifest", manifest,
                 "--checkpoint", str(root / "ckpt" / "last.npz"), "--out", str(tmp_path)])
    assert code == 5
    assert "mode error" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlr = fast\n")
    assert main(["stats", "--config", str(cfg)]) == 7
    assert main(["stats", "--out", str(tmp_path)]) == 7   # no manifest anywhere
    capsys.readouterr()


def test_resume_with_changed_config_is_refused(run, tmp_path):
    root, c, manifest = run
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("batch_size = 4", "batch_size = 3"))
    code = main(["train", "--config", str(other), "--manifest", manifest, "--out", str(tmp_path),
                 "--resume", str(root / "ckpt" / "last.npz")])
    assert code == 8


def test_pgm_round_trip(tmp_path):
    a = np.array([[0.0, 1.0], [0.5, 0.25], [1.0, 0.0]])
    write_pgm(tmp_path / "a.pgm", a)
    img = read_pgm(tmp_path / "a.pgm")
    # rows are flipped so the first source frame sits at the bottom; dark means high weight
    np.testing.assert_array_equal(img, [[0, 255], [128, 191], [255, 0]])

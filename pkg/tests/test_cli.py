import json

import numpy as np
import pytest

from dana import cli
from dana.graph import perturbed_pair, synthetic_digraph, write_anchors

FAST = ["--dim", "4", "--layers", "1", "--epochs", "5", "--batch-vertices", "8", "--candidates", "8",
        "--eval-every", "0"]


def _write_edges(path, g):
    with open(path, "w") as fh:
        for i, j in g.edges().tolist():
            fh.write(f"{g.ids[i]}\t{g.ids[j]}\n")


@pytest.fixture
def files(tmp_path):
    g = synthetic_digraph(30, seed=0)
    a, b, pairs = perturbed_pair(g, 0.15, seed=0)
    _write_edges(tmp_path / "a.tsv", a)
    _write_edges(tmp_path / "b.tsv", b)
    write_anchors(tmp_path / "anchors.tsv", pairs, a, b)
    return tmp_path


def _train_args(d, out, *extra):
    return ["train", "--edges-a", str(d / "a.tsv"), "--edges-b", str(d / "b.tsv"),
            "--anchors", str(d / "anchors.tsv"), "--out", str(out), *FAST, *extra]


def _metrics(path):
    return json.loads((path / "metrics.json").read_text())


def test_train_then_eval_reproduces_metrics(files, capsys):
    assert cli.main(_train_args(files, files / "run")) == 0
    run = files / "run"
    for name in ("metrics.json", "epochs.jsonl", "embeddings_a.tsv", "embeddings_b.tsv", "checkpoint"):
        assert (run / name).exists(), name
    assert len((run / "epochs.jsonl").read_text().splitlines()) == 5
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint"), "--out", str(files / "ev")]) == 0
    trained, evaluated = _metrics(run), _metrics(files / "ev")
    for k, v in trained.items():
        if isinstance(v, float):
            assert abs(v - evaluated[k]) <= 1e-9, k
    # re-splitting the full anchor file gives the same test set
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint"), "--anchors", str(files / "anchors.tsv"),
                     "--out", str(files / "ev2")]) == 0
    assert _metrics(files / "ev2")["mrr"] == pytest.approx(trained["mrr"], abs=1e-9)


def test_embedding_tsv_format(files):
    assert cli.main(_train_args(files, files / "run")) == 0
    lines = (files / "run" / "embeddings_a.tsv").read_text().splitlines()
    fields = lines[0].split("\t")
    assert len(fields) == 1 + 4
    float(fields[1])
    assert cli.main(["export-embeddings", "--checkpoint", str(files / "run" / "checkpoint"),
                     "--out", str(files / "ex")]) == 0
    assert (files / "ex" / "embeddings_a.tsv").read_text().splitlines() == lines


def test_missing_edges_a_prints_usage(files, capsys):
    rc = cli.main(["train", "--edges-b", str(files / "b.tsv"), "--anchors", str(files / "anchors.tsv"),
                   "--out", str(files / "x")])
    assert rc != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert cli.main(["frobnicate"]) != 0
    assert cli.main(["casestudy", "--out", "x", "--bogus"]) != 0
    assert "usage" in capsys.readouterr().err


def test_invalid_files_name_the_error(files, capsys):
    (files / "bad.tsv").write_text("a b c\n")
    args = _train_args(files, files / "run")
    args[args.index("--edges-a") + 1] = str(files / "bad.tsv")
    rc = cli.main(args)
    assert rc != 0
    assert "bad.tsv" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(files)]) != 0


def test_config_file_and_override(files):
    (files / "cfg.txt").write_text(f"edges-a={files / 'a.tsv'}\nepochs=4\ngamma=0.5\n")

    def args(out, *extra):
        return ["--config", str(files / "cfg.txt"), "train", "--edges-b", str(files / "b.tsv"),
                "--anchors", str(files / "anchors.tsv"), "--out", str(out), "--dim", "4", "--layers", "1",
                "--eval-every", "0", *extra]

    assert cli.main(args(files / "c1")) == 0
    assert _metrics(files / "c1")["epochs"] == 4
    assert cli.main(args(files / "c2", "--epochs", "2")) == 0
    assert _metrics(files / "c2")["epochs"] == 2


def test_sweeps_are_configuration_only(files):
    settings = [("train-ratio", v) for v in (0.2, 0.5, 0.8)] + [("gamma", v) for v in (0.0, 0.1, 1.0)]
    outs = []
    for key, value in settings:
        out = files / "sweep" / f"{key}={value}"
        cfg = files / f"{key}-{value}.cfg"
        cfg.write_text(f"{key}={value}\n")
        assert cli.main(["--config", str(cfg)] + _train_args(files, out)) == 0
        outs.append(out)
    assert all((o / "metrics.json").is_file() for o in outs)
    tests = [_metrics(o)["test_anchors"] for o in outs[:3]]
    assert tests[0] > tests[1] > tests[2]


def test_strict_runs_write_identical_files(files):
    for name in ("r1", "r2"):
        assert cli.main(_train_args(files, files / name)) == 0
    for f in ("epochs.jsonl", "metrics.json"):
        assert (files / "r1" / f).read_bytes() == (files / "r2" / f).read_bytes()


def test_casestudy_writes_plot_data(tmp_path):
    assert cli.main(["casestudy", "--out", str(tmp_path), "--epochs", "3", "--seeds", "0"]) == 0
    for mode in ("DANA-S", "DNA-S"):
        d = tmp_path / mode / "seed0"
        for name in ("W.tsv", "embeddings_a.tsv", "embeddings_b.tsv", "probe.tsv", "metrics.json"):
            assert (d / name).is_file(), (mode, name)
        w = np.loadtxt(d / "W.tsv", delimiter="\t", ndmin=2)
        assert w.shape == (2, 10)


def test_linkpred_command(files):
    g = synthetic_digraph(30, seed=1)
    _write_edges(files / "g.tsv", g)
    for conv in ("on", "off"):
        out = files / f"lp-{conv}"
        assert cli.main(["linkpred", "--edges", str(files / "g.tsv"), "--directed-conv", conv,
                         "--dim", "4", "--epochs", "3", "--out", str(out)]) == 0
        m = _metrics(out)
        assert m["directed_conv"] is (conv == "on")
        assert 0.0 <= m["map"] <= 1.0

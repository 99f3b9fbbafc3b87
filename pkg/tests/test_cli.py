import csv
import io
from fractions import Fraction

import numpy as np
import pytest

from perfcnn.cli import derive_seed, main
from perfcnn.core import write_tensor
from perfcnn.data import Dataset
from perfcnn.masks import read_mask, write_mask
from perfcnn.network import Network, NetworkSpec
from perfcnn.search import PerforationConfig

SHORT = [Fraction(1, 3), Fraction(1, 2), Fraction(2, 3), Fraction(3, 4), Fraction(4, 5), Fraction(5, 6)]
ONE_LAYER = "input x=12 y=12 s=2 classes=4\nconv d=3 t=4 pad=1\nrelu\ngap\nfc t=4\n"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("arch", "toy-two-conv", "--out", d / "net.txt") == 0
    assert run("synth", "--n", 160, "--size", 12, "--channels", 2, "--classes", 4, "--out", d / "data") == 0
    assert run("synth", "--n", 64, "--size", 12, "--channels", 2, "--classes", 4, "--seed", 1,
               "--out", d / "val") == 0
    assert run("train", "--net", d / "net.txt", "--data", d / "data", "--epochs", 3, "--lr", 0.02,
               "--out", d / "w.pcnb") == 0
    return d


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_derive_seed_frozen():
    assert derive_seed(0, "mask") == 6356973369273007365
    assert derive_seed(0, "train") == 1729895838861384137
    assert derive_seed(7, "mask") == 3387067418144034364
    assert derive_seed(123, "synth") == 6787076753972503032
    assert 0 <= derive_seed(2**40, "x") < 2**63


def test_mask_full_and_roundtrip(tmp_path, capsys):
    assert run("mask", "--shape", 6, 5, "--type", "uniform", "--n", 30, "--out", tmp_path / "full.pcnm") == 0
    assert read_mask(tmp_path / "full.pcnm").is_full
    assert run("mask", "--shape", 9, 9, "--type", "grid", "--rate", "3/4", "--out", tmp_path / "g.pcnm") == 0
    err = capsys.readouterr().err
    assert "N=" in err and "r=" in err
    m = read_mask(tmp_path / "g.pcnm")
    write_mask(tmp_path / "g2.pcnm", m)
    assert (tmp_path / "g.pcnm").read_bytes() == (tmp_path / "g2.pcnm").read_bytes()


def test_mask_impact_from_field(tmp_path):
    B = np.random.default_rng(3).random((7, 8, 1)).astype(np.float32)
    write_tensor(tmp_path / "b.pcnt", B)
    assert run("mask", "--shape", 7, 8, "--type", "impact", "--n", 20, "--impacts", tmp_path / "b.pcnt",
               "--out", tmp_path / "i.pcnm") == 0
    want = set(np.argsort(-B[..., 0].ravel(), kind="stable")[:20].tolist())
    assert set(read_mask(tmp_path / "i.pcnm").positions.flat.tolist()) == want


def test_mask_validation(tmp_path):
    assert run("mask", "--shape", 4, 4, "--type", "uniform") == 2
    assert run("mask", "--shape", 4, 4, "--type", "impact", "--n", 3) == 2
    assert run("mask", "--shape", 4, 4, "--type", "uniform", "--n", 99) == 2
    assert run("mask", "--shape", 4, 4, "--type", "impact", "--n", 3, "--impacts", tmp_path / "nope") == 2
    with pytest.raises(SystemExit) as exc:
        run("mask", "--shape", 4, 4, "--type", "uniform", "--rate", "0.3.1")
    assert exc.value.code == 2


def test_eval_unperforated_equals_zero_config(workspace, tmp_path):
    d = workspace
    PerforationConfig.unperforated([0, 3]).write(tmp_path / "zero.cfg")
    assert run("eval", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "val",
               "--out", tmp_path / "a.csv") == 0
    assert run("eval", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "val",
               "--config", tmp_path / "zero.cfg", "--out", tmp_path / "b.csv") == 0
    (a,), (b,) = read_csv(tmp_path / "a.csv"), read_csv(tmp_path / "b.csv")
    for k in ("loss", "error", "conv_mults", "act_bytes"):
        assert a[k] == b[k]


def test_eval_sweep_rerun_identical_and_one_curve_per_type(workspace, tmp_path):
    d = workspace
    args = ["eval", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "val", "--sweep",
            "--layer", 0, "--rates", "1/2", "3/4", "--impact-samples", 32, "--seed", 5]
    assert run(*args, "--out", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = read_csv(tmp_path / "a.csv")
    assert rows[0]["label"] == "baseline"
    curves = {}
    for r in rows[1:]:
        curves.setdefault(r["mask"], []).append(r["rate"])
    assert curves == {k: ["1/2", "3/4"] for k in ("uniform", "grid", "pooling", "impact")}
    # the second conv feeds global pooling, so its sweep has no pooling curve
    assert run("eval", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "val", "--sweep",
               "--layer", 3, "--rates", "1/2", "--masks", "uniform", "grid", "--out", tmp_path / "c.csv") == 0
    assert {r["mask"] for r in read_csv(tmp_path / "c.csv")[1:]} == {"uniform", "grid"}


def test_eval_missing_files(workspace, tmp_path):
    d = workspace
    assert run("eval", "--net", tmp_path / "nope.txt", "--data", d / "val") == 2
    assert run("eval", "--net", d / "net.txt", "--data", tmp_path / "nothing") == 2
    assert run("eval", "--net", d / "net.txt", "--data", d / "val", "--config", tmp_path / "x.cfg") == 2


def test_search_trace(workspace, tmp_path, capsys):
    d = workspace
    assert run("search", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "val",
               "--target", 2.5, "--ladder", *[str(r) for r in SHORT],
               "--out-config", tmp_path / "c.cfg", "--trace", tmp_path / "t.csv") == 0
    rows = read_csv(tmp_path / "t.csv")
    ts = [float(r["t"]) for r in rows]
    assert all(b < a for a, b in zip(ts, ts[1:]))
    err = capsys.readouterr().err
    assert "reached target" in err or "ladder exhausted" in err
    cfg = PerforationConfig.read(tmp_path / "c.cfg", ladder=SHORT)
    assert cfg.layers == (0, 3)


def test_search_single_layer_is_ladder_scan(tmp_path, capsys):
    (tmp_path / "one.txt").write_text(ONE_LAYER)
    Dataset(np.random.default_rng(0).standard_normal((20, 12, 12, 2)), np.arange(20) % 4).save(tmp_path / "d")
    assert run("search", "--net", tmp_path / "one.txt", "--data", tmp_path / "d", "--target", 4,
               "--trace", tmp_path / "t.csv", "--out-config", tmp_path / "c.cfg") == 0
    rates = [r["rate"] for r in read_csv(tmp_path / "t.csv")]
    # 144 positions: N = 144 - floor(144 r), every ladder rate until N <= 36
    assert rates == ["1/3", "1/2", "2/3", "3/4"]
    assert run("search", "--net", tmp_path / "one.txt", "--data", tmp_path / "d", "--target", 100,
               "--ladder", "1/3", "1/2", "--trace", tmp_path / "t2.csv") == 0
    assert "ladder exhausted" in capsys.readouterr().err
    assert run("search", "--net", tmp_path / "one.txt", "--data", tmp_path / "d", "--target", 1) == 2


def test_train_identity_and_determinism(workspace, tmp_path):
    d = workspace
    assert run("train", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "data",
               "--epochs", 0, "--out", tmp_path / "same.pcnb") == 0
    assert (tmp_path / "same.pcnb").read_bytes() == (d / "w.pcnb").read_bytes()
    args = ["train", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "data",
            "--epochs", 1, "--seed", 9, "--val", d / "val"]
    assert run(*args, "--out", tmp_path / "a.pcnb", "--log", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.pcnb", "--log", tmp_path / "b.csv") == 0
    assert (tmp_path / "a.pcnb").read_bytes() == (tmp_path / "b.pcnb").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert list(read_csv(tmp_path / "a.csv")[0]) == ["epoch", "loss", "error", "val_loss", "val_error"]
    assert (tmp_path / "a.pcnb").read_bytes() != (d / "w.pcnb").read_bytes()


def test_train_with_config_changes_weights(workspace, tmp_path):
    d = workspace
    cfg = PerforationConfig((0, 3), ("uniform", "grid"), (1, 1), (0, 1))
    cfg.write(tmp_path / "p.cfg")
    assert run("train", "--net", d / "net.txt", "--weights", d / "w.pcnb", "--data", d / "data",
               "--config", tmp_path / "p.cfg", "--epochs", 1, "--out", tmp_path / "p.pcnb") == 0
    net = Network(NetworkSpec.read(d / "net.txt"))
    net.load_weights(tmp_path / "p.pcnb")
    assert net.num_parameters() > 0


def test_bench_outputs(workspace, tmp_path, capsys):
    d = workspace
    cfg = PerforationConfig((0, 3), ("uniform", "uniform"), (3, 3), (0, 1))
    cfg.write(tmp_path / "p.cfg")
    assert run("bench", "--net", d / "net.txt", "--config", tmp_path / "p.cfg", "--reps", 3,
               "--out", tmp_path / "rep") == 0
    out = capsys.readouterr().out
    assert "theoretical speedup 4.00x" in out
    summary = read_csv(tmp_path / "rep" / "summary.csv")[0]
    assert float(summary["theoretical_speedup"]) == 4.0
    assert float(summary["empirical_speedup"]) > 0
    layers = (tmp_path / "rep" / "layers.csv").read_text().splitlines()
    assert layers[0].startswith("layer,kind,d,S,T,groups,positions,exact_positions,mults")
    assert run("bench", "--net", d / "net.txt", "--reps", 2) == 2
    impact = PerforationConfig((0,), ("impact",), (0,), (0,))
    impact.write(tmp_path / "i.cfg")
    assert run("bench", "--net", d / "net.txt", "--config", tmp_path / "i.cfg") == 2


def test_arch_specs_parse(tmp_path):
    for name in ("nin", "alexnet", "vgg16", "toy-nin", "toy-two-conv"):
        assert run("arch", name, "--out", tmp_path / f"{name}.txt") == 0
        spec = NetworkSpec.read(tmp_path / f"{name}.txt")
        assert spec.format() == (tmp_path / f"{name}.txt").read_text()

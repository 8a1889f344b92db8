import subprocess
import sys

import numpy as np
import pytest

from ternhybrid import data
from ternhybrid.cli import confusion, main
from ternhybrid.model import analysis, serialize
from ternhybrid.model.arch import ArchSpec, build_model
from ternhybrid.model.graph import Conv2D, DenseHead, HybridModel
from ternhybrid.tensor import BatchNorm, ConvGeometry

TINY_ARCH = """
[model]
name = tiny
input = 1x49x10
classes = 3
strassen = true
[conv]
out = 4
kernel = 3x3
stride = 2x2
bn = true
relu = true
[avg_pool]
kernel = global
[bonsai]
depth = 1
proj = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated data plus a tiny model trained through every phase."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "d"), "--classes", "3", "--per-class", "20", "--seed", "2",
                 "--difficulty", "0.5"]) == 0
    (root / "tiny.cfg").write_text(TINY_ARCH)
    assert main(["train", "--arch", str(root / "tiny.cfg"), "--data", str(root / "d"), "--out", str(root / "p1.thnt"),
                 "--phases", "1", "--epochs1", "3", "--quiet"]) == 0
    assert main(["strassenify", "--model", str(root / "p1.thnt"), "--data", str(root / "d"),
                 "--out", str(root / "st.thnt"), "--epochs2", "2", "--epochs3", "1", "--quiet",
                 "--history", str(root / "hist.csv")]) == 0
    return root


class TestGenData:
    def test_deterministic_files(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--classes", "3", "--per-class", "5",
                         "--seed", "7"]) == 0
        for split in ("train", "val", "test"):
            assert (tmp_path / "a" / f"{split}.kwsf").read_bytes() == (tmp_path / "b" / f"{split}.kwsf").read_bytes()
        assert "nearest-prototype test accuracy" in capsys.readouterr().out

    def test_missing_out(self, capsys):
        assert main(["gen-data"]) == 2
        assert capsys.readouterr().err.startswith("error: ConfigError:")


class TestAnalyze:
    def test_dense_macs_equal_ops(self, capsys, tmp_path):
        assert main(["analyze", "--arch", "ds_cnn_like.cfg", "--out", str(tmp_path / "r.csv")]) == 0
        total = (tmp_path / "r.csv").read_text().splitlines()[-1].split(",")
        assert total[0] == "total" and total[3] == total[4] == "2656768"
        assert "multiplication reduction" not in capsys.readouterr().out

    def test_strassen_comparison(self, capsys):
        assert main(["analyze", "--arch", "hybrid.cfg"]) == 0
        out = capsys.readouterr().out
        assert "multiplication reduction" in out and "footprint" in out

    def test_needs_exactly_one_source(self, capsys):
        assert main(["analyze"]) == 2
        assert main(["analyze", "--arch", "hybrid.cfg", "--model", "x.thnt"]) == 2

    def test_unknown_arch(self, capsys):
        assert main(["analyze", "--arch", "nope.cfg"]) == 2


class TestPipeline:
    def test_strassenified_model_is_collapsed(self, workdir):
        m = serialize.load(workdir / "st.thnt")
        assert m.is_strassen
        assert all(layer.shadow is None for layer in m.strassen_layers())
        hist = (workdir / "hist.csv").read_text().splitlines()
        assert hist[0].startswith("epoch,phase") and len(hist) == 1 + 3

    def test_infer_counts_match_analyze(self, workdir, capsys):
        assert main(["infer", "--model", str(workdir / "st.thnt"), "--data", str(workdir / "d"), "--count-ops"]) == 0
        out = capsys.readouterr().out
        counted = next(line for line in out.splitlines() if line.startswith("total"))
        r = analysis.count_ops(serialize.load(workdir / "st.thnt"))
        assert counted.split()[1:5] == [str(r.muls), str(r.adds), str(r.macs), str(r.ops)]
        assert "predicted:" in out

    def test_infer_index_range(self, workdir, capsys):
        assert main(["infer", "--model", str(workdir / "st.thnt"), "--data", str(workdir / "d"),
                     "--index", "1000"]) == 2

    def test_quantize_and_eval(self, workdir, capsys):
        q = workdir / "q.thnt"
        assert main(["quantize", "--model", str(workdir / "st.thnt"), "--data", str(workdir / "d"),
                     "--out", str(q), "--policy", "int8", "--calib-size", "16"]) == 0
        out = capsys.readouterr().out
        assert "policy int8" in out and "quantized" in out
        assert serialize.load(q).qspec
        assert main(["eval", "--model", str(q), "--data", str(workdir / "d")]) == 0
        assert "confusion" in capsys.readouterr().out

    def test_bad_policy(self, workdir, capsys):
        assert main(["quantize", "--model", str(workdir / "st.thnt"), "--data", str(workdir / "d"),
                     "--out", str(workdir / "x.thnt"), "--policy", "int4"]) == 2
        assert "PolicyError" in capsys.readouterr().err


class TestErrors:
    def test_missing_model(self, capsys):
        assert main(["eval", "--model", "/nonexistent.thnt", "--data", "."]) == 2

    def test_malformed_model(self, tmp_path, capsys):
        p = tmp_path / "bad.thnt"
        p.write_bytes(b"THNT\x01\x00garbage")
        assert main(["analyze", "--model", str(p)]) == 3
        err = capsys.readouterr().err
        assert err.startswith("error: FormatError:") and "offset" in err

    def test_malformed_data(self, tmp_path, capsys):
        m = build_model(ArchSpec.from_text(TINY_ARCH))
        serialize.save(m, tmp_path / "m.thnt")
        (tmp_path / "test.kwsf").write_bytes(b"KWSF\x01")
        assert main(["eval", "--model", str(tmp_path / "m.thnt"), "--data", str(tmp_path)]) == 3

    def test_numeric_failure(self, tmp_path, capsys):
        g = ConvGeometry.pointwise(1, 1)
        bn = BatchNorm([1.0], [0.0], [0.0], [-1.0], eps=1e-3)
        m = HybridModel([Conv2D(g, np.ones(g.filter_shape()), None, bn, False)], DenseHead(np.ones((2, 1))),
                        (1, 1, 1), 2)
        serialize.save(m, tmp_path / "m.thnt")
        data.save(data.FeatureDataset(np.ones((4, 1, 1, 1)), [0, 1, 0, 1], 2), tmp_path / "train.kwsf")
        assert main(["quantize", "--model", str(tmp_path / "m.thnt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "q.thnt")]) == 4
        assert capsys.readouterr().err.startswith("error: NumericError:")

    def test_console_entry(self):
        r = subprocess.run([sys.executable, "-m", "ternhybrid", "analyze", "--model", "/nonexistent"],
                           capture_output=True, text=True)
        assert r.returncode == 2 and r.stderr.startswith("error: ")


def test_confusion_matrix():
    cm = confusion(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]), 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternhybrid import data
from ternhybrid.errors import ConfigError, FormatError


def _small(n=5, h=3, w=2, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return data.FeatureDataset(rng.normal(size=(n, 1, h, w)), rng.integers(0, classes, n), classes)


class TestKwsf:
    def test_header_layout(self):
        buf = data.to_bytes(_small())
        assert buf[:4] == b"KWSF"
        assert struct.unpack_from("<HIHHH", buf, 4) == (1, 5, 3, 2, 4)
        # 16-byte header, then 5 records of 6 float32 and one label byte
        assert len(buf) == 16 + 5 * (6 * 4 + 1)

    @given(st.integers(0, 30), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip(self, n, h, w, seed):
        ds = _small(n, h, w, seed=seed)
        back = data.from_bytes(data.to_bytes(ds))
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.num_classes == ds.num_classes

    def test_file_roundtrip_infers_split(self, tmp_path):
        ds = _small()
        data.save(ds, tmp_path / "val.kwsf")
        assert data.load(tmp_path / "val.kwsf").split == "val"

    def test_errors_carry_offsets(self):
        buf = data.to_bytes(_small())
        with pytest.raises(FormatError) as e:
            data.from_bytes(buf[:10])
        assert e.value.offset == 10
        with pytest.raises(FormatError) as e:
            data.from_bytes(b"WAVE" + buf[4:])
        assert e.value.offset == 0
        with pytest.raises(FormatError) as e:
            data.from_bytes(buf[:4] + struct.pack("<H", 7) + buf[6:])
        assert e.value.offset == 4
        with pytest.raises(FormatError):
            data.from_bytes(buf[:-1])

    def test_bad_label_offset(self):
        buf = bytearray(data.to_bytes(_small()))
        rec = 6 * 4 + 1
        buf[16 + 2 * rec + rec - 1] = 9  # third record, label 9 >= 4 classes
        with pytest.raises(FormatError) as e:
            data.from_bytes(bytes(buf))
        assert e.value.offset == 16 + 3 * rec - 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            data.load(tmp_path / "nope.kwsf")


class TestDatasetValidation:
    def test_label_range(self):
        with pytest.raises(ConfigError):
            data.FeatureDataset(np.zeros((2, 1, 2, 2)), [0, 3], 3)

    def test_count_mismatch(self):
        with pytest.raises(ConfigError):
            data.FeatureDataset(np.zeros((2, 1, 2, 2)), [0], 3)

    def test_three_dim_gets_channel(self):
        ds = data.FeatureDataset(np.zeros((2, 4, 3)), [0, 1], 2)
        assert ds.x.shape == (2, 1, 4, 3) and ds.hw == (4, 3)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        ds = _small(6, 4, 3)
        data.export_csv(ds, tmp_path / "d.csv")
        back = data.import_csv(tmp_path / "d.csv", shape=(4, 3), num_classes=4)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)

    def test_header_row_skipped(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("label,a,b\n1,0.5,2\n0,1,1\n")
        ds = data.import_csv(p, shape=(1, 2))
        assert len(ds) == 2 and ds.num_classes == 2

    @pytest.mark.parametrize("text", ["0,1,2,3\n", "0,1\n1,x\n", ""])
    def test_errors(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(ConfigError):
            data.import_csv(p, shape=(1, 2))


class TestGenerator:
    def test_files_are_deterministic(self, tmp_path):
        a = data.gen_data(4, 10, seed=7)
        b = data.gen_data(4, 10, seed=7)
        for split in ("train", "val", "test"):
            assert data.to_bytes(a[split]) == data.to_bytes(b[split])
        c = data.gen_data(4, 10, seed=8)
        assert data.to_bytes(c["train"]) != data.to_bytes(a["train"])

    def test_split_sizes(self):
        d = data.gen_data(12, 100, seed=0)
        assert [len(d[s]) for s in ("train", "val", "test")] == [960, 120, 120]
        assert d["train"].hw == (49, 10)

    def test_noise_free_is_separable(self):
        d = data.gen_data(6, 20, seed=1, difficulty=0.0)
        protos = d["train"].meta["prototypes"]
        for s in ("train", "val", "test"):
            assert data.nearest_prototype_accuracy(d[s], protos) == 1.0

    def test_prototypes_normalized(self):
        p = data.prototypes(3, (8, 5), np.random.default_rng(0))
        np.testing.assert_allclose(p.mean(axis=(1, 2)), 0, atol=1e-12)
        np.testing.assert_allclose(p.std(axis=(1, 2)), 1, atol=1e-12)

    def test_harder_is_less_separable(self):
        easy = data.gen_data(12, 40, seed=2, difficulty=0.5)
        hard = data.gen_data(12, 40, seed=2, difficulty=8.0)
        acc = [data.nearest_prototype_accuracy(d["test"], d["train"].meta["prototypes"]) for d in (easy, hard)]
        assert acc[0] > acc[1]

    @pytest.mark.parametrize("kwargs", [
        {"classes": 1}, {"per_class": 0}, {"difficulty": -1.0}, {"split": (0.5, 0.5, 0.5)},
    ])
    def test_errors(self, kwargs):
        with pytest.raises(ConfigError):
            data.gen_data(**kwargs)

"""Data I/O: TSV ingestion, synthetic generator, checkpoint container."""

import json
import struct

import numpy as np
import pytest
from scipy.stats import ks_2samp

from nutime.data import (
    CHECKPOINT_MAGIC,
    DataError,
    DatasetManifest,
    SynthSpec,
    config_hash,
    generate_synth,
    generate_synth_series,
    load_checkpoint,
    load_ucr_tsv,
    save_checkpoint,
    split_multivariate,
)
from nutime.tokenizer import RawSeries

rng = np.random.default_rng(23)


class TestLoadTsv:
    def test_direct_parse(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("1\t0.5\t0.7\t0.9\n0\t1.0\t2.0\t3.0\n")
        series = load_ucr_tsv(f)
        assert len(series) == 2
        assert series[0].label == 1  # labels {0,1} keep sorted order
        np.testing.assert_allclose(series[0].values[0], [0.5, 0.7, 0.9])

    def test_label_remap_sorted(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("1\t1.0\t2.0\n-1\t3.0\t4.0\n")
        series = load_ucr_tsv(f)
        assert series[0].label == 1 and series[1].label == 0

    def test_scientific_notation(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("0\t1e-3\t-2.5E2\n1\t0.0\t1.0\n")
        series = load_ucr_tsv(f)
        np.testing.assert_allclose(series[0].values[0], [1e-3, -250.0])

    def test_ragged_rows_rejected_with_line(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("0\t1.0\t2.0\n1\t3.0\n")
        with pytest.raises(DataError, match=":2"):
            load_ucr_tsv(f)

    def test_parse_failure_names_line(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("0\t1.0\n1\tbogus\n")
        with pytest.raises(DataError, match=":2"):
            load_ucr_tsv(f)

    def test_non_finite_rejected(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("0\tnan\t1.0\n")
        with pytest.raises(DataError, match=":1"):
            load_ucr_tsv(f)

    def test_empty_file_rejected(self, tmp_path):
        f = tmp_path / "d.tsv"
        f.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_ucr_tsv(f)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_ucr_tsv(tmp_path / "absent.tsv")


class TestSplitMultivariate:
    def test_channel_split(self):
        s = RawSeries(rng.normal(size=(3, 100)), label=1, id="s")
        parts = split_multivariate(s)
        assert len(parts) == 3
        assert [p.id for p in parts] == ["s/ch0", "s/ch1", "s/ch2"]
        assert all(p.n_channels == 1 and p.length == 100 for p in parts)

    def test_rows_reconstruct_input(self):
        s = RawSeries(rng.normal(size=(3, 10)))
        parts = split_multivariate(s)
        np.testing.assert_array_equal(
            np.vstack([p.values for p in parts]), s.values)

    def test_univariate_is_singleton(self):
        s = RawSeries(rng.normal(size=10))
        parts = split_multivariate(s)
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0].values, s.values)


class TestSynthSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(length=100)  # not divisible by 16
        with pytest.raises(ValueError):
            SynthSpec(mode="other")
        with pytest.raises(ValueError):
            SynthSpec(scale_exponents=(-5.0, 2.0))  # outside the scale span
        with pytest.raises(ValueError):
            SynthSpec(shape_families=("sine", "triangle"))
        with pytest.raises(ValueError):
            SynthSpec(scale_exponents=(1.0,))  # one per class required

    def test_dict_round_trip(self):
        spec = SynthSpec(mode="shape", shape_families=("sine", "square"),
                         scale_exponents=(0.0, 0.0))
        assert SynthSpec.from_dict(spec.to_dict()) == spec


class TestSynthGenerator:
    def test_deterministic(self):
        spec = SynthSpec(samples_per_class=4, length=64, seed=9)
        a = generate_synth_series(spec, "train")
        b = generate_synth_series(spec, "train")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.values, y.values)

    def test_splits_differ(self):
        spec = SynthSpec(samples_per_class=4, length=64, seed=9)
        a = generate_synth_series(spec, "train")
        b = generate_synth_series(spec, "val")
        assert not np.array_equal(a[0].values, b[0].values)

    def test_scale_mode_window_means_in_band(self):
        spec = SynthSpec(samples_per_class=8, length=128,
                         scale_exponents=(-2.0, 2.0))
        for s in generate_synth_series(spec, "train"):
            means = s.values.reshape(-1, spec.window_size).mean(axis=-1)
            lo = 10.0 ** spec.scale_exponents[s.label] * 0.5
            hi = 10.0 ** spec.scale_exponents[s.label] * 1.5
            assert np.all(means >= lo * (1 - 1e-9))
            assert np.all(means <= hi * (1 + 1e-9))

    def test_instance_norm_hides_classes(self):
        # per-sample standardization makes the two scale classes
        # indistinguishable under a two-sample KS test at alpha = 0.01
        spec = SynthSpec(samples_per_class=64, length=128,
                         scale_exponents=(-2.0, 2.0))
        series = generate_synth_series(spec, "train")
        normed = {0: [], 1: []}
        for s in series:
            v = s.values.ravel()
            normed[s.label].append((v - v.mean()) / v.std())
        stat = ks_2samp(np.concatenate(normed[0]), np.concatenate(normed[1]))
        assert stat.pvalue > 0.01

    def test_raw_scales_separate_classes(self):
        spec = SynthSpec(samples_per_class=8, length=64,
                         scale_exponents=(-2.0, 2.0))
        series = generate_synth_series(spec, "train")
        mags = {0: [], 1: []}
        for s in series:
            mags[s.label].append(np.abs(s.values).mean())
        assert max(mags[0]) < min(mags[1])

    def test_generate_synth_writes_files(self, tmp_path):
        spec = SynthSpec(samples_per_class=4, length=64)
        manifest = generate_synth(spec, tmp_path)
        for name in ("train.tsv", "val.tsv", "test.tsv", "manifest.json",
                     "spec.json"):
            assert (tmp_path / name).exists()
        loaded = DatasetManifest.load(tmp_path / "manifest.json")
        assert loaded == manifest
        series = load_ucr_tsv(manifest.train_path)
        assert len(series) == 8
        assert manifest.std > 0

    def test_tsv_round_trip_is_exact(self, tmp_path):
        spec = SynthSpec(samples_per_class=2, length=64)
        generate_synth(spec, tmp_path)
        direct = generate_synth_series(spec, "train")
        loaded = load_ucr_tsv(tmp_path / "train.tsv")
        for d, l in zip(direct, loaded):
            np.testing.assert_array_equal(d.values, l.values)


class TestCheckpoint:
    def _params(self):
        return {
            "w": rng.normal(size=(3, 4)).astype(np.float32),
            "b": rng.normal(size=4).astype(np.float32),
            "scalar": np.float32(2.5).reshape(()),
        }

    def test_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "m.ckpt"
        params = self._params()
        config = {"model": {"d_model": 8}, "note": "x"}
        save_checkpoint(params, config, path)
        arrays, meta = load_checkpoint(path)
        assert meta == config
        for k, v in params.items():
            np.testing.assert_array_equal(arrays[k], np.asarray(v))
        # save -> load -> save produces byte-identical files
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(arrays, meta, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self._params(), {}, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self._params(), {}, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self._params(), {}, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 5])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_corrupt_offset_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint({"w": np.ones(2, dtype=np.float32)}, {}, path)
        blob = bytearray(path.read_bytes())
        # the directory's offset field sits 24 bytes before the payload end
        # for this single 8-byte tensor: name(2+1) dtype/ndim(2) dims(8)
        # offset(8) nbytes(8) payload(8)
        offset_pos = len(blob) - 8 - 16
        blob[offset_pos : offset_pos + 8] = struct.pack("<Q", 1 << 40)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="out of bounds"):
            load_checkpoint(path)

    def test_corrupt_metadata_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint({}, {"a": 1}, path)
        blob = bytearray(path.read_bytes())
        blob[16] = 0xFF  # stomp the first metadata byte
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="metadata"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_text("hello")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_payload_is_f32(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint({"w": np.ones(3, dtype=np.float64)}, {}, path)
        arrays, _ = load_checkpoint(path)
        assert arrays["w"].dtype == np.float32


class TestConfigHash:
    def test_stable_and_order_independent(self):
        a = config_hash({"x": 1, "y": [1, 2]})
        b = config_hash({"y": [1, 2], "x": 1})
        assert a == b and len(a) == 16

    def test_sensitive_to_values(self):
        assert config_hash({"x": 1}) != config_hash({"x": 2})

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dtmil.data as data_mod
from dtmil.data import (
    Dataset,
    NormStats,
    apply_normalizer,
    denormalize,
    fit_normalizer,
    load_dataset,
    load_records,
    save_dataset,
    save_records,
    split,
    split_sizes,
)
from dtmil.errors import ConfigError, DimensionError, FormatVersionError, ParseError
from dtmil.flightgen import GenConfig, generate


@pytest.fixture(scope="module")
def records():
    return generate(GenConfig(n_flights=40, seed=3))


class TestSplit:
    def test_ten(self):
        assert split_sizes(10) == (5, 3, 2)
        assert sorted(split(10, seed=1)).count("train") == 5

    def test_deterministic(self):
        assert split(50, seed=7) == split(50, seed=7)
        assert split(50, seed=7) != split(50, seed=8)

    def test_every_record_once(self):
        a = split(37, seed=0)
        assert len(a) == 37 and set(a) == {"train", "val", "test"}

    def test_too_small(self):
        with pytest.raises(ConfigError):
            split(2)

    @pytest.mark.parametrize("props", [(0.5, 0.3, 0.3), (0.5, 0.5), (1.2, -0.1, -0.1)])
    def test_bad_proportions(self, props):
        with pytest.raises(ConfigError):
            split_sizes(10, props)

    def test_largest_remainder(self):
        # 7 * (0.5, 0.3, 0.2) = (3.5, 2.1, 1.4): floors (3, 2, 1), the spare goes to the .5
        assert split_sizes(7) == (4, 2, 1)
        assert split_sizes(11) == (6, 3, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(10, 5000))
    def test_sizes_close_to_exact(self, n):
        sizes = split_sizes(n)
        assert sum(sizes) == n
        for s, p in zip(sizes, (0.5, 0.3, 0.2)):
            assert abs(s - p * n) < 1

    def test_prevalence_preserved(self):
        rng = np.random.default_rng(0)
        labels = rng.uniform(size=600) < 0.2
        failures = 0
        for seed in range(20):
            a = np.array(split(600, seed=seed))
            for name in ("train", "val", "test"):
                if abs(labels[a == name].mean() - labels.mean()) > 0.10:
                    failures += 1
                    break
        assert failures <= 1


class TestNormalizer:
    def test_constant_channel(self):
        st_ = fit_normalizer([np.full((5, 1), 7.0)])
        assert st_.mean[0] == 7.0 and st_.sd[0] == 1.0
        np.testing.assert_array_equal(apply_normalizer(np.full((3, 1), 7.0), st_), 0.0)

    def test_plus_minus_one(self):
        x = np.array([[-1.0], [1.0], [1.0], [-1.0]])
        st_ = fit_normalizer([x])
        assert st_.mean[0] == 0.0 and st_.sd[0] == 1.0
        np.testing.assert_array_equal(apply_normalizer(x, st_), x)

    def test_pooled_matches_one_pass_reference(self):
        rng = np.random.default_rng(5)
        mats = [rng.normal(3.0, 2.0, size=(n, 4)) for n in (5, 9, 2)]
        # Welford over every row of every flight
        count, mean, m2 = 0, np.zeros(4), np.zeros(4)
        for m in mats:
            for row in m:
                count += 1
                d = row - mean
                mean += d / count
                m2 += d * (row - mean)
        st_ = fit_normalizer(mats)
        np.testing.assert_allclose(st_.mean, mean, rtol=1e-13)
        np.testing.assert_allclose(st_.sd, np.sqrt(m2 / count), rtol=1e-13)

    def test_normalized_train_is_standard(self, records):
        ds = Dataset.build(records, seed=0)
        z = np.concatenate([apply_normalizer(ds.features(r), ds.norm) for r in ds.split_records("train")])
        np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-9)
        sd = z.std(0)
        const = ds.norm.sd == 1.0
        np.testing.assert_allclose(sd[~const], 1.0, atol=1e-9)

    def test_no_clipping(self):
        st_ = NormStats(np.array([1.0]), np.array([2.0]))
        assert apply_normalizer([[1001.0]], st_)[0, 0] == 500.0

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(50, 30, size=(20, 3))
        st_ = fit_normalizer([x[:10]])
        np.testing.assert_allclose(denormalize(apply_normalizer(x, st_), st_), x, rtol=0, atol=1e-12)

    def test_width_mismatch(self):
        st_ = NormStats(np.zeros(3), np.ones(3))
        with pytest.raises(DimensionError):
            apply_normalizer(np.zeros((4, 2)), st_)
        with pytest.raises(DimensionError):
            denormalize(np.zeros((4, 5)), st_)


class TestLeakage:
    def test_fit_only_sees_train(self, records, monkeypatch):
        seen = []
        real = data_mod.fit_normalizer

        def audit(mats, *args, **kwargs):
            mats = list(mats)
            seen.append(mats)
            return real(mats, *args, **kwargs)

        monkeypatch.setattr(data_mod, "fit_normalizer", audit)
        ds = Dataset.build(records, seed=2)
        ds.bagset("val")
        ds.bagset("test")
        assert len(seen) == 1
        train = [ds.features(r) for r in ds.split_records("train")]
        assert len(seen[0]) == len(train)
        for a, b in zip(seen[0], train):
            np.testing.assert_array_equal(a, b)

    def test_other_splits_give_other_stats(self, records):
        ds = Dataset.build(records, seed=2)
        val = fit_normalizer([ds.features(r) for r in ds.split_records("val")])
        assert not np.allclose(val.mean, ds.norm.mean)


class TestBagset:
    def test_shapes(self, records):
        ds = Dataset.build(records, seed=0)
        b = ds.bagset("test")
        recs = ds.split_records("test")
        assert b.x.shape == (len(recs), max(r.L for r in recs), ds.D)
        assert ds.D == 10
        np.testing.assert_array_equal(b.mask.sum(1), [r.L for r in recs])
        assert not b.x[~b.mask].any()
        assert b.ids == [r.id for r in recs]

    def test_unknown_split(self, records):
        with pytest.raises(ConfigError):
            Dataset.build(records).split_records("holdout")


class TestFiles:
    def test_round_trip(self, records, tmp_path):
        ds = Dataset.build(records, seed=4, generator=GenConfig(n_flights=40, seed=3).to_dict())
        save_dataset(tmp_path / "d", ds)
        back = load_dataset(tmp_path / "d")
        assert back.records == ds.records
        assert back.assignment == ds.assignment
        assert back.excluded == ds.excluded and back.generator == ds.generator
        np.testing.assert_array_equal(back.norm.mean, ds.norm.mean)
        np.testing.assert_array_equal(back.norm.sd, ds.norm.sd)
        assert [r.mechanisms for r in back.records] == [r.mechanisms for r in ds.records]

    def test_empty(self, tmp_path):
        save_records(tmp_path / "f.tsv", [])
        assert load_records(tmp_path / "f.tsv") == []
        save_dataset(tmp_path / "d", Dataset([]))
        back = load_dataset(tmp_path / "d")
        assert back.N == 0 and back.L_max == 0

    def test_truncated_line(self, records, tmp_path):
        path = tmp_path / "f.tsv"
        save_records(path, records[:3])
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(ParseError):
            load_records(path)
        # cut at a line boundary: only the manifest count can catch it
        lines = text.split("\n")
        path.write_text("\n".join(lines[:3]) + "\n")
        assert len(load_records(path)) == 2
        with pytest.raises(ParseError, match="promises 3"):
            load_records(path, expected=3)

    def test_truncated_mid_line_with_newline(self, records, tmp_path):
        path = tmp_path / "f.tsv"
        save_records(path, records[:2])
        lines = path.read_text().split("\n")
        lines[2] = lines[2][:-30]
        path.write_text("\n".join(lines))
        with pytest.raises(ParseError) as exc:
            load_records(path)
        assert exc.value.line == 3

    def test_malformed_number(self, records, tmp_path):
        path = tmp_path / "f.tsv"
        save_records(path, records[:2])
        lines = path.read_text().split("\n")
        fields = lines[1].split("\t")
        fields[6] = fields[6].replace(",", ",abc,", 1)
        lines[1] = "\t".join(fields)
        path.write_text("\n".join(lines))
        with pytest.raises(ParseError, match="line 2"):
            load_records(path)

    def test_version_checks(self, records, tmp_path):
        ds = Dataset.build(records)
        save_dataset(tmp_path / "d", ds)
        tsv = tmp_path / "d" / "flights.tsv"
        original = tsv.read_text()
        tsv.write_text(original.replace("# dtmil-flights v1", "# dtmil-flights v2", 1))
        with pytest.raises(FormatVersionError):
            load_dataset(tmp_path / "d")
        tsv.write_text(original)
        man = tmp_path / "d" / "manifest.json"
        m = json.loads(man.read_text())
        m["version"] = 9
        man.write_text(json.dumps(m))
        with pytest.raises(FormatVersionError):
            load_dataset(tmp_path / "d")

    def test_missing_header(self, tmp_path):
        path = tmp_path / "f.tsv"
        path.write_text("1\t0\n")
        with pytest.raises(ParseError, match="line 1"):
            load_records(path)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geovalue import synthetic as syn
from geovalue import tabular as tb


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


SIMPLE_SCHEMA = tb.parse_schema("""
id        identifier key
parcel    identifier drop
kind      categorical
area      numeric
price     label_personal
lat       latitude
lon       longitude
""")


def simple_table(rows):
    return tb.RawTable(["id", "parcel", "kind", "area", "price", "lat", "lon"],
                       [list(r) for r in rows])


class TestLoadCsv:
    def test_minimal(self, tmp_path):
        t = tb.load_csv(write(tmp_path, "a,b\n1,x\n"))
        assert t.column_names == ["a", "b"]
        assert t.row_count == 1
        assert t.rows == [["1", "x"]]

    def test_ragged_row_reports_index(self, tmp_path):
        with pytest.raises(tb.RaggedRowError) as info:
            tb.load_csv(write(tmp_path, "a,b\n1,2\n1,2,3\n"))
        assert info.value.row_index == 1

    def test_header_only(self, tmp_path):
        assert tb.load_csv(write(tmp_path, "a,b\n")).row_count == 0

    def test_missing_cells_and_delimiter(self, tmp_path):
        t = tb.load_csv(write(tmp_path, "a;b\n;x\n"), delimiter=";")
        assert t.rows == [[None, "x"]]

    def test_unreadable(self, tmp_path):
        with pytest.raises(tb.TableError):
            tb.load_csv(tmp_path / "nope.csv")

    def test_duplicate_columns(self):
        with pytest.raises(tb.TableError):
            tb.RawTable(["a", "a"], [])


class TestSchema:
    def test_parse_flags_and_filter(self):
        s = tb.parse_schema(syn.SCHEMA_TEXT)
        assert s.key_column.name == "AIN"
        assert s["ParcelID"].drop
        assert s.filters["UseType"] == frozenset(USE for USE in syn.USE_TYPES)
        assert [c.name for c in s.categorical_columns] == ["UseType", "RoofType"]

    def test_needs_exactly_one_label(self):
        with pytest.raises(tb.SchemaMismatchError):
            tb.parse_schema("a numeric\n")

    def test_unknown_kind(self):
        with pytest.raises(tb.SchemaMismatchError):
            tb.parse_schema("a wat\nb label_personal\n")

    def test_assessor_schema_counts(self):
        # 50 columns: 8 identifiers + 1 redundant dropped, 3 labels, lat/lon, 23 categorical, 17 numeric
        lines = [f"id{i} identifier drop" for i in range(8)] + ["dup redundant drop"]
        lines += ["land label_total_land", "personal label_personal", "total label_total",
                  "lat latitude", "lon longitude"]
        lines += [f"cat{i} categorical" for i in range(23)]
        lines += [f"num{i} numeric" for i in range(17)]
        s = tb.parse_schema("\n".join(lines))
        assert len(s.columns) == 8 + 1 + 5 + 23 + 17
        assert len(s.categorical_columns) == 23
        assert len(s.feature_columns) == 40


class TestClean:
    def test_zero_label_row_removed(self):
        t = simple_table([["1", "p", "A", "10", "0", "34", "-118"],
                          ["2", "p", "A", "10", "5", "34", "-118"]])
        out = tb.clean(t, SIMPLE_SCHEMA)
        assert [r[0] for r in out.rows] == ["2"]
        assert "parcel" not in out.column_names and "id" in out.column_names

    def test_identity_when_nothing_to_drop(self):
        schema = tb.parse_schema("a numeric\nb label_personal\n")
        t = tb.RawTable(["a", "b"], [["1", "2"], ["3", "4"]])
        out = tb.clean(t, schema)
        assert out.column_names == t.column_names and out.rows == t.rows

    def test_ten_rows_three_zero(self):
        labels = ["5", "0", "3", "0", "1", "2", "0", "9", "8", "7"]
        t = simple_table([[str(i), "p", "A", "1", lab, "34", "-118"] for i, lab in enumerate(labels)])
        expected = sum(1 for lab in labels if float(lab) != 0)  # direct filter
        assert expected == 7
        assert tb.clean(t, SIMPLE_SCHEMA).row_count == expected

    def test_missing_numeric_and_label_and_filter(self):
        schema = tb.parse_schema("""
id identifier key
kind categorical
area numeric
price label_personal
lat latitude
lon longitude
filter kind in A,B
""")
        t = tb.RawTable(["id", "kind", "area", "price", "lat", "lon"], [
            ["1", "A", "1", "5", "34", "-118"],
            ["2", "C", "1", "5", "34", "-118"],
            ["3", "A", None, "5", "34", "-118"],
            ["4", "B", "1", None, "34", "-118"],
            ["5", "B", "x", "5", "34", "-118"],
        ])
        stats = {}
        out = tb.clean(t, schema, stats)
        assert [r[0] for r in out.rows] == ["1"]
        assert stats == {"filtered": 1, "missing_numeric": 2, "zero_or_missing_label": 1, "kept": 1}

    def test_schema_mismatch(self):
        t = tb.RawTable(["zzz", "price"], [["1", "2"]])
        with pytest.raises(tb.SchemaMismatchError):
            tb.clean(t, tb.parse_schema("price label_personal\n"))

    def test_idempotent_on_synthetic(self, tmp_path):
        props = syn.make_properties(50, seed=3)
        syn.write_csv(props, tmp_path / "p.csv")
        schema = tb.parse_schema(syn.SCHEMA_TEXT)
        once = tb.clean(tb.load_csv(tmp_path / "p.csv"), schema)
        twice = tb.clean(once, schema)
        assert once == twice
        assert once.row_count == 50


class TestCategoricals:
    def table(self, values):
        return tb.RawTable(["c"], [[v] for v in values])

    def test_first_occurrence(self):
        enc = tb.CategoricalEncoder.fit(self.table(["A", "B", "A"]), ["c"])
        assert enc.transform(self.table(["A", "B", "A"])).column("c") == [0, 1, 0]

    def test_single_level(self):
        enc = tb.CategoricalEncoder.fit(self.table(["C", "C"]), ["c"])
        assert enc.transform(self.table(["C", "C"])).column("c") == [0, 0]

    def test_unseen_level(self):
        enc = tb.CategoricalEncoder({"c": {"A": 0, "B": 1}})
        values = ["B", "D"]
        expected = [{"A": 0, "B": 1}.get(v, -1) for v in values]  # direct lookup
        assert enc.transform(self.table(values)).column("c") == expected == [1, -1]
        assert enc.unseen["c"] == 1

    @given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=60))
    def test_codes_dense(self, values):
        enc = tb.CategoricalEncoder.fit(self.table(values), ["c"])
        codes = enc.transform(self.table(values)).column("c")
        assert sorted(set(codes)) == list(range(len(set(values))))


class TestNormalizer:
    def test_population_std(self):
        norm = tb.fit_normalizer([1.0, 2.0, 3.0])
        assert norm.mean[0] == 2.0
        assert norm.std[0] == pytest.approx(math.sqrt(2.0 / 3.0))
        assert norm.std[0] == pytest.approx(0.8165, abs=1e-4)

    def test_apply(self):
        out = tb.apply_normalizer(tb.fit_normalizer([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
        oracle = [(x - 2.0) / math.sqrt(2.0 / 3.0) for x in (1.0, 2.0, 3.0)]
        np.testing.assert_allclose(out, oracle, rtol=1e-12)
        np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_constant_column(self):
        norm = tb.fit_normalizer(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]))
        assert norm.constant.tolist() == [True, False]
        assert np.all(norm.apply(np.array([[5.0, 0.0], [7.0, 1.0]]))[:, 0] == 0.0)

    def test_identity(self):
        norm = tb.Normalizer(np.zeros(2), np.ones(2))
        X = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_array_equal(norm.apply(X), X)

    def test_already_normalized(self):
        x = np.random.default_rng(1).normal(size=1000)
        z = tb.fit_normalizer(x).apply(x)
        norm = tb.fit_normalizer(z)
        assert abs(norm.mean[0]) < 1e-9 and abs(norm.std[0] - 1) < 1e-9

    def test_errors(self):
        with pytest.raises(ValueError):
            tb.fit_normalizer(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            tb.fit_normalizer([1.0, np.nan])
        with pytest.raises(ValueError):
            tb.fit_normalizer(np.ones((3, 2))).apply(np.ones((3, 3)))

    @settings(max_examples=50)
    @given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_round_trip(self, n, d, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, d)) * rng.uniform(0.1, 1e3, d) + rng.uniform(-1e4, 1e4, d)
        norm = tb.fit_normalizer(X)
        back = norm.invert(norm.apply(X))
        np.testing.assert_allclose(back, X, rtol=1e-9, atol=1e-9 * np.abs(X).max())


class TestSplit:
    def test_sizes_100(self):
        assert tb.split_sizes(100, (0.9, 0.05, 0.05)) == (90, 5, 5)

    def test_sizes_table_1(self):
        assert tb.split_sizes(53_944, (0.90, 0.05, 0.05)) == (48_548, 2_698, 2_698)

    def test_sizes_match_enumeration(self):
        # val/test take the smallest count that reaches their share, train the rest
        for n in range(20, 400):
            val = next(c for c in range(n + 1) if c >= n * 0.05 - 1e-9)
            assert tb.split_sizes(n) == (n - 2 * val, val, val)

    def test_empty_partition(self):
        with pytest.raises(ValueError):
            tb.split_sizes(2)
        with pytest.raises(ValueError):
            tb.split_sizes(10, (0.5, 0.5, 0.1))

    def test_deterministic(self):
        fm = make_fm(100)
        a = tb.split(fm, 7)
        b = tb.split(fm, 7)
        assert [p.ids for p in a] == [p.ids for p in b]
        assert [p.n for p in a] == [90, 5, 5]

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(3, 500), st.integers(0, 2**32 - 1))
    def test_disjoint_exhaustive(self, n, seed):
        fr = (0.8, 0.1, 0.1)
        parts = tb.split_indices(n, seed, fr)
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(n))


def make_fm(n, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return tb.FeatureMatrix([f"r{i}" for i in range(n)], rng.normal(size=(n, d)),
                            rng.normal(size=n), np.full(n, 34.0), np.full(n, -118.0))


class TestFeatureMatrix:
    def test_invariants(self):
        with pytest.raises(ValueError):
            tb.FeatureMatrix(["a", "a"], np.zeros((2, 1)), np.zeros(2), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            tb.FeatureMatrix(["a"], np.array([[np.nan]]), np.zeros(1), np.zeros(1), np.zeros(1))
        with pytest.raises(ValueError):
            tb.FeatureMatrix(["a"], np.zeros((1, 1)), np.zeros(1), np.array([91.0]), np.zeros(1))

    def test_file_round_trip(self, tmp_path):
        fm = make_fm(37, d=5)
        fm.ids[3] = "ünïcode-id"
        tb.write_feature_matrix(fm, tmp_path / "x.gvfm")
        raw = (tmp_path / "x.gvfm").read_bytes()
        assert raw[:4] == b"GVFM"
        back = tb.read_feature_matrix(tmp_path / "x.gvfm")
        assert back.ids == fm.ids
        for name in ("X", "y", "lat", "lon"):
            np.testing.assert_array_equal(getattr(back, name), getattr(fm, name))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("pre")
    props = syn.make_properties(400, seed=5)
    syn.write_csv(props, d / "p.csv")
    schema = tb.parse_schema(syn.SCHEMA_TEXT)
    cleaned = tb.clean(tb.load_csv(d / "p.csv"), schema)
    return tb.preprocess(cleaned, schema, seed=11)


class TestPreprocess:
    def test_train_partition_standardized(self, data):
        X = data.train.X
        live = ~data.feature_norm.constant
        assert np.all(np.abs(X.mean(axis=0)) < 1e-7)
        assert np.all(np.abs(X.std(axis=0)[live] - 1) < 1e-6)
        assert abs(data.train.y.mean()) < 1e-7 and abs(data.train.y.std() - 1) < 1e-6

    def test_sizes_and_disjoint(self, data):
        assert (data.train.n, data.val.n, data.test.n) == (360, 20, 20)
        ids = data.train.ids + data.val.ids + data.test.ids
        assert len(set(ids)) == 400

    def test_codes_dense_on_train(self, data):
        for name, mapping in data.encoder.mappings.items():
            assert sorted(mapping.values()) == list(range(len(mapping)))

    def test_feature_names_exclude_labels_and_geo(self, data):
        assert data.feature_names == ["UseType", "RoofType", "SqftMain", "Bedrooms",
                                      "Bathrooms", "YearBuilt"]

    def test_label_inverts_to_price(self, data):
        props = syn.make_properties(400, seed=5)
        price = dict(zip(props.ids, props.price))
        back = data.label_norm.invert(data.test.y)
        np.testing.assert_allclose(back, [price[i] for i in data.test.ids], rtol=1e-7)

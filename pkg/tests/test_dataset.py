import numpy as np
import pytest

from fairkit.dataset import (
    DatasetError,
    dataset_from_columns,
    describe_dataset,
    load_csv,
    make_grid,
    partition,
    split,
    to_csv,
)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


BASIC = "gender,x1,x2,y\nf,1.0,2.0,1\nm,0.5,1.5,-1\nf,0.25,0.75,1\n"
BASIC_SCHEMA = {"gender": "sensitive", "x1": "feature", "x2": "feature", "y": "outcome"}


class TestLoadCsv:
    def test_basic_classification(self, tmp_path):
        data = load_csv(write(tmp_path, BASIC), BASIC_SCHEMA, outcome_kind="classification")
        assert data.n_records == 3
        assert data.d == 2
        np.testing.assert_array_equal(data.sensitive, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(data.outcome, [1.0, -1.0, 1.0])
        assert data.categories["gender"] == ("f", "m")

    def test_missing_value_names_row_and_column(self, tmp_path):
        path = write(tmp_path, "gender,x1,x2,y\nf,1.0,,1\n")
        with pytest.raises(DatasetError, match=r"row 2, column 'x2'"):
            load_csv(path, BASIC_SCHEMA, outcome_kind="classification")

    def test_unparseable_cell_names_row(self, tmp_path):
        path = write(tmp_path, "gender,x1,x2,y\nf,1.0,2.0,1\nm,oops,1.0,-1\n")
        with pytest.raises(DatasetError, match=r"row 3, column 'x1'"):
            load_csv(path, BASIC_SCHEMA, outcome_kind="classification")

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "gender,x1,y\nf,1.0,1\n")
        with pytest.raises(DatasetError, match="missing columns: x2"):
            load_csv(path, BASIC_SCHEMA)

    def test_ragged_row(self, tmp_path):
        path = write(tmp_path, "gender,x1,x2,y\nf,1.0,2.0,1\nm,0.5,-1\n")
        with pytest.raises(DatasetError, match=r"row 3: expected 4 cells"):
            load_csv(path, BASIC_SCHEMA)

    def test_one_hot_expansion_matches_hand_count(self, tmp_path):
        # census-style header: 6 numeric + 8 categorical columns; the
        # hand-expanded width is 6 + total distinct categories
        numeric = [f"n{i}" for i in range(6)]
        categorical = {f"c{i}": ["a", "b", "c"][: 2 + i % 2] for i in range(8)}
        header = ["sex"] + numeric + list(categorical) + ["income"]
        rows = []
        rng = np.random.default_rng(0)
        for i in range(40):
            row = ["m" if i % 2 else "f"]
            row += [f"{rng.normal():.3f}" for _ in numeric]
            row += [cats[i % len(cats)] for cats in categorical.values()]
            row += ["1" if i % 3 else "0"]
            rows.append(",".join(row))
        path = write(tmp_path, ",".join(header) + "\n" + "\n".join(rows) + "\n")
        schema = {"sex": "sensitive", "income": "outcome"}
        schema.update({n: "feature" for n in numeric})
        schema.update({c: "feature" for c in categorical})
        data = load_csv(path, schema, outcome_kind="classification")
        expected = len(numeric) + sum(len(v) for v in categorical.values())
        assert data.d == expected
        assert data.feature_names[6].startswith("c0=")

    def test_round_trip_bit_exact(self, tmp_path):
        text = "g,x1,y\n0,0.1,2.5\n1,-3.25,0.7\n0,1e-3,4.125\n"
        schema = {"g": "sensitive", "x1": "feature", "y": "outcome"}
        first = load_csv(write(tmp_path, text), schema)
        out = tmp_path / "echo.csv"
        to_csv(first, out)
        second = load_csv(out, schema)
        for name in ("g", "x1", "y"):
            np.testing.assert_array_equal(first.column(name), second.column(name))

    def test_column_order_preserved_on_emit(self, tmp_path):
        data = load_csv(write(tmp_path, BASIC), BASIC_SCHEMA, outcome_kind="classification")
        out = tmp_path / "echo.csv"
        to_csv(data, out)
        assert out.read_text().splitlines()[0] == "gender,x1,x2,y"

    def test_bad_classification_labels(self, tmp_path):
        path = write(tmp_path, "g,x,y\n0,1.0,3\n1,2.0,4\n")
        with pytest.raises(DatasetError, match="classification labels"):
            load_csv(path, {"g": "sensitive", "x": "feature", "y": "outcome"}, "classification")


def toy_dataset(y, s, **extra):
    cols = {"s": np.asarray(s, dtype=float), "y": np.asarray(y, dtype=float)}
    roles = {"s": "sensitive", "y": "outcome"}
    for name, values in extra.items():
        cols[name] = np.asarray(values, dtype=float)
        roles[name] = "feature"
    kind = "classification" if set(np.unique(cols["y"])) <= {-1.0, 1.0} else "regression"
    return dataset_from_columns(cols, roles, outcome_kind=kind)


class TestMakeGrid:
    def test_binary_binary_reproduces_half_unit_edges(self):
        data = toy_dataset([1, -1, 1, -1], [0, 1, 0, 1])
        grid = make_grid(data, 2, 2)
        np.testing.assert_allclose(grid.y_edges, [-1.5, 0.0, 1.5])
        np.testing.assert_allclose(grid.s_edges, [-0.5, 0.5, 1.5])

    def test_single_bin_covers_everything(self):
        rng = np.random.default_rng(1)
        data = toy_dataset(rng.normal(size=50), rng.integers(0, 2, 50))
        grid = make_grid(data, 1, 2)
        assert grid.n_y_bins == 1
        k, _ = grid.cell_of(data.outcome, data.sensitive)
        assert set(k) == {0}

    def test_quantile_edges_near_percentiles(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(size=100)
        data = toy_dataset(y, rng.integers(0, 2, 100))
        grid = make_grid(data, 4, 2)
        np.testing.assert_allclose(grid.y_edges[1:4], np.quantile(y, [0.25, 0.5, 0.75]))

    def test_too_few_distinct_values(self):
        data = toy_dataset([1, -1, 1, -1], [0, 1, 0, 1])
        with pytest.raises(DatasetError, match="distinct"):
            make_grid(data, 3, 2)

    def test_explicit_edges_must_cover(self):
        data = toy_dataset([0.0, 5.0], [0, 1])
        with pytest.raises(DatasetError):
            make_grid(data, 2, 2, strategy="explicit", y_edges=[0, 1, 2], s_edges=[-0.5, 0.5, 1.5])


class TestPartition:
    def test_four_singleton_cells(self):
        data = toy_dataset([1, 1, -1, -1], [0, 1, 0, 1])
        index = partition(data, make_grid(data, 2, 2))
        assert index.counts.tolist() == [[1, 1], [1, 1]]

    def test_degenerate_single_cell(self):
        data = toy_dataset([1.0] * 5 + [2.0], [0.0] * 5 + [1.0])
        grid = make_grid(data, 1, 1)
        index = partition(data, grid)
        assert index.counts.tolist() == [[6]]

    def test_counts_match_double_loop(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=1000)
        s = rng.normal(size=1000)
        data = toy_dataset(y, s)
        grid = make_grid(data, 3, 3)
        index = partition(data, grid)
        brute = np.zeros((3, 3), dtype=int)
        for yi, si in zip(y, s):
            for k in range(3):
                for q in range(3):
                    if (
                        grid.y_edges[k] <= yi < grid.y_edges[k + 1]
                        and grid.s_edges[q] <= si < grid.s_edges[q + 1]
                    ):
                        brute[k, q] += 1
        np.testing.assert_array_equal(index.counts, brute)
        assert index.counts.sum() == 1000
        assert index.group_probs.sum() == pytest.approx(1.0)

    def test_record_outside_grid(self):
        data = toy_dataset([0.0, 10.0], [0, 1])
        grid = make_grid(toy_dataset([0.0, 1.0], [0, 1]), 2, 2)
        with pytest.raises(DatasetError, match="outside the grid"):
            partition(data, grid)


class TestSplit:
    def test_deterministic(self):
        data = toy_dataset(np.arange(10.0), [0, 0, 0, 0, 0, 0, 1, 1, 1, 1])
        a = split(data, 0.5, seed=7)
        b = split(data, 0.5, seed=7)
        np.testing.assert_array_equal(a.train.outcome, b.train.outcome)
        np.testing.assert_array_equal(a.test.outcome, b.test.outcome)

    def test_stratified_counts(self):
        data = toy_dataset(np.arange(10.0), [0, 0, 0, 0, 0, 0, 1, 1, 1, 1])
        result = split(data, 0.5, seed=7)
        assert result.stratified
        assert int((result.train.sensitive == 0).sum()) == 3
        assert int((result.train.sensitive == 1).sum()) == 2

    def test_seed_changes_permutation_not_counts(self):
        data = toy_dataset(np.arange(10.0), [0, 0, 0, 0, 0, 0, 1, 1, 1, 1])
        a = split(data, 0.5, seed=1)
        b = split(data, 0.5, seed=2)
        assert sorted(a.train.outcome) != sorted(b.train.outcome)
        for result in (a, b):
            assert int((result.train.sensitive == 0).sum()) == 3

    def test_small_group_falls_back_unstratified(self):
        data = toy_dataset(np.arange(5.0), [0, 0, 0, 0, 1])
        result = split(data, 0.4, seed=0)
        assert not result.stratified
        assert result.train.n_records + result.test.n_records == 5

    def test_counts_within_one_of_fraction(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = int(rng.integers(6, 60))
            s = rng.integers(0, 3, size=n)
            if np.unique(s, return_counts=True)[1].min() < 2:
                continue
            data = toy_dataset(rng.normal(size=n), s)
            frac = float(rng.uniform(0.2, 0.8))
            result = split(data, frac, seed=int(rng.integers(1000)))
            for code, count in zip(*np.unique(s, return_counts=True)):
                got = int((result.train.sensitive == code).sum())
                assert abs(got - frac * count) <= 1.0

    def test_bad_fraction(self):
        data = toy_dataset([1.0, 2.0], [0, 1])
        with pytest.raises(DatasetError):
            split(data, 1.0, seed=0)


class TestRegistry:
    def test_compas_row(self):
        entry = describe_dataset("COMPAS")
        assert entry.n_samples == "11758"
        assert entry.n_features == "36"
        assert entry.tasks == ("BC", "MC")

    def test_adult_row(self):
        entry = describe_dataset("adult")
        assert entry.n_samples == "48842"
        assert entry.n_features == "14"

    def test_unknown_name(self):
        with pytest.raises(DatasetError):
            describe_dataset("nope")

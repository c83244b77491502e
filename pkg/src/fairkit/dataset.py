"""Tabular datasets, discretization grids, and (outcome, sensitive) cells.

A dataset is an immutable collection of columns with declared roles.  The
grid machinery discretizes the outcome and the sensitive attribute into
half-open cells [t_k, t_{k+1}) x [s_q, s_{q+1}); every other module consumes
the resulting cell index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "DatasetError",
    "ColumnSpec",
    "TabularDataset",
    "DiscretizationGrid",
    "GroupIndex",
    "SplitResult",
    "load_csv",
    "to_csv",
    "dataset_from_columns",
    "make_grid",
    "partition",
    "split",
    "DATASET_REGISTRY",
    "describe_dataset",
]

ROLES = ("sensitive", "feature", "outcome", "task", "ignore")
OUTCOME_KINDS = ("regression", "classification")


class DatasetError(ValueError):
    """Schema violation, parse failure, or invalid grid/partition input."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Validated tabular records with fixed column roles.

    ``columns`` holds canonical numeric arrays (categorical columns are
    stored as integer codes with their category list in ``categories``;
    ignored columns keep their raw strings).  Feature matrices are derived
    lazily with categoricals one-hot expanded.  The sensitive column never
    enters the feature block; callers that want it as a model input prepend
    it explicitly.
    """

    schema: tuple[ColumnSpec, ...]
    outcome_kind: str
    columns: Mapping[str, np.ndarray]
    categories: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        roles = [c.role for c in self.schema]
        if roles.count("sensitive") != 1:
            raise DatasetError("exactly one sensitive column is required")
        if roles.count("outcome") != 1:
            raise DatasetError("exactly one outcome column is required")
        if roles.count("task") > 1:
            raise DatasetError("at most one task column is allowed")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise DatasetError(f"unknown outcome kind {self.outcome_kind!r}")
        sizes = {len(self.columns[c.name]) for c in self.schema}
        if len(sizes) != 1:
            raise DatasetError("columns must have equal length")
        if self.n_records == 0:
            raise DatasetError("dataset has no records")
        if self.outcome_kind == "classification":
            y = self.outcome
            if not set(np.unique(y)) <= {-1.0, 1.0}:
                raise DatasetError("classification outcomes must be in {-1, +1}")

    def _column_by_role(self, role: str) -> str:
        return next(c.name for c in self.schema if c.role == role)

    @property
    def n_records(self) -> int:
        return len(self.columns[self.schema[0].name])

    @property
    def sensitive_name(self) -> str:
        return self._column_by_role("sensitive")

    @property
    def outcome_name(self) -> str:
        return self._column_by_role("outcome")

    @property
    def sensitive(self) -> np.ndarray:
        return np.asarray(self.columns[self.sensitive_name], dtype=float)

    @property
    def outcome(self) -> np.ndarray:
        return np.asarray(self.columns[self.outcome_name], dtype=float)

    @property
    def task_ids(self) -> np.ndarray | None:
        names = [c.name for c in self.schema if c.role == "task"]
        if not names:
            return None
        return np.asarray(self.columns[names[0]], dtype=int)

    @cached_property
    def feature_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for col in self.schema:
            if col.role != "feature":
                continue
            if col.name in self.categories:
                names.extend(f"{col.name}={c}" for c in self.categories[col.name])
            else:
                names.append(col.name)
        return tuple(names)

    @cached_property
    def features(self) -> np.ndarray:
        blocks: list[np.ndarray] = []
        for col in self.schema:
            if col.role != "feature":
                continue
            values = self.columns[col.name]
            if col.name in self.categories:
                codes = np.asarray(values, dtype=int)
                onehot = np.zeros((codes.size, len(self.categories[col.name])))
                onehot[np.arange(codes.size), codes] = 1.0
                blocks.append(onehot)
            else:
                blocks.append(np.asarray(values, dtype=float)[:, None])
        if not blocks:
            return np.zeros((self.n_records, 0))
        return np.hstack(blocks)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise DatasetError(f"no column named {name!r}")
        return self.columns[name]

    def subset(self, indices) -> "TabularDataset":
        idx = np.asarray(indices, dtype=int)
        cols = {name: np.asarray(arr)[idx] for name, arr in self.columns.items()}
        return TabularDataset(
            schema=self.schema,
            outcome_kind=self.outcome_kind,
            columns=cols,
            categories=self.categories,
        )


def _parse_float(cell: str, row: int, name: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DatasetError(f"row {row}, column {name!r}: cannot parse {cell!r} as a number") from None


def _classification_labels(values: np.ndarray, name: str) -> np.ndarray:
    got = set(np.unique(values))
    if got <= {-1.0, 1.0}:
        return values
    if got <= {0.0, 1.0}:
        return np.where(values > 0, 1.0, -1.0)
    raise DatasetError(f"column {name!r}: classification labels must be in {{-1,+1}} or {{0,1}}, got {sorted(got)}")


def load_csv(path, schema: Mapping[str, str], outcome_kind: str = "regression") -> TabularDataset:
    """Load and validate a comma-separated UTF-8 file with a header row.

    ``schema`` maps column name -> role in {sensitive, feature, outcome,
    task, ignore}; columns absent from the mapping are an error, as are
    missing cells, unparseable cells, and ragged rows.  Non-numeric
    sensitive or feature columns (detected from their first cell) are coded
    as categoricals in first-appearance order; categorical features are
    one-hot expanded when the feature matrix is built.  Row numbers in error
    messages count the header as row 1.
    """
    for name, role in schema.items():
        if role not in ROLES:
            raise DatasetError(f"column {name!r}: unknown role {role!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("empty file") from None
        header = [h.strip() for h in header]
        missing = [name for name in schema if name not in header]
        if missing:
            raise DatasetError(f"missing columns: {', '.join(sorted(missing))}")
        extra = [h for h in header if h not in schema]
        if extra:
            raise DatasetError(f"columns without a declared role: {', '.join(extra)}")
        raw: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"row {lineno}: expected {len(header)} cells, found {len(row)}")
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise DatasetError(f"row {lineno}, column {name!r}: missing value")
                raw[name].append(cell)
    if not raw[header[0]]:
        raise DatasetError("no data rows")

    columns: dict[str, np.ndarray] = {}
    categories: dict[str, tuple[str, ...]] = {}
    for name in header:
        role = schema[name]
        cells = raw[name]
        if role == "ignore":
            columns[name] = np.array(cells, dtype=object)
            continue
        if role == "task":
            ids = []
            for i, c in enumerate(cells):
                try:
                    ids.append(int(float(c)))
                except ValueError:
                    raise DatasetError(
                        f"row {i + 2}, column {name!r}: task ids must be integers, got {c!r}"
                    ) from None
            columns[name] = np.array(ids, dtype=int)
            continue
        numeric = True
        if role in ("sensitive", "feature"):
            try:
                float(cells[0])
            except ValueError:
                numeric = False
        if numeric:
            values = np.array([_parse_float(c, i + 2, name) for i, c in enumerate(cells)])
            if role == "outcome" and outcome_kind == "classification":
                values = _classification_labels(values, name)
            columns[name] = values
        else:
            cats = list(dict.fromkeys(cells))
            code = {c: i for i, c in enumerate(cats)}
            columns[name] = np.array([code[c] for c in cells], dtype=int)
            categories[name] = tuple(cats)

    spec = tuple(ColumnSpec(name, schema[name]) for name in header)
    return TabularDataset(schema=spec, outcome_kind=outcome_kind, columns=columns, categories=categories)


def to_csv(dataset: TabularDataset, path) -> None:
    """Re-emit a dataset with its original column order.

    Numeric cells are written with ``repr`` so finite values reload
    bit-exactly; categorical codes are written back as their category
    strings.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in dataset.schema])
        names = [c.name for c in dataset.schema]
        for i in range(dataset.n_records):
            row = []
            for name in names:
                value = dataset.columns[name][i]
                if name in dataset.categories:
                    row.append(dataset.categories[name][int(value)])
                elif isinstance(value, str):
                    row.append(value)
                elif float(value).is_integer() and abs(float(value)) < 1e15:
                    row.append(repr(int(value)))
                else:
                    row.append(repr(float(value)))
            writer.writerow(row)


def dataset_from_columns(
    columns: Mapping[str, np.ndarray],
    roles: Mapping[str, str],
    outcome_kind: str = "regression",
    categories: Mapping[str, tuple[str, ...]] | None = None,
    order: Sequence[str] | None = None,
) -> TabularDataset:
    """Build a dataset from in-memory arrays (synthetic data, SEM samples)."""
    names = list(order) if order is not None else list(columns)
    spec = tuple(ColumnSpec(n, roles[n]) for n in names)
    cols = {n: np.asarray(columns[n]) for n in names}
    return TabularDataset(
        schema=spec,
        outcome_kind=outcome_kind,
        columns=cols,
        categories=dict(categories or {}),
    )


@dataclass(frozen=True, eq=False)
class DiscretizationGrid:
    """Strictly increasing edges t_1 < ... < t_{K+1} and s_1 < ... < s_{Q+1}.

    A record with outcome y and sensitive value s belongs to cell (k, q)
    when y falls in [t_k, t_{k+1}) and s in [s_q, s_{q+1}), both half-open.
    """

    y_edges: np.ndarray
    s_edges: np.ndarray

    def __post_init__(self):
        for name, edges in (("y", self.y_edges), ("s", self.s_edges)):
            e = np.asarray(edges, dtype=float)
            if e.size < 2:
                raise DatasetError(f"{name}_edges needs at least two entries")
            if not np.all(np.diff(e) > 0):
                raise DatasetError(f"{name}_edges must be strictly increasing")

    @property
    def n_y_bins(self) -> int:
        return self.y_edges.size - 1

    @property
    def n_s_bins(self) -> int:
        return self.s_edges.size - 1

    def _locate(self, edges: np.ndarray, values: np.ndarray, what: str) -> np.ndarray:
        idx = np.searchsorted(edges, values, side="right") - 1
        bad = (idx < 0) | (idx >= edges.size - 1)
        if np.any(bad):
            n = int(np.argmax(bad))
            raise DatasetError(f"record {n}: {what} value {values[n]!r} outside the grid")
        return idx

    def cell_of(self, y: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=float)
        s = np.asarray(s, dtype=float)
        return self._locate(self.y_edges, y, "outcome"), self._locate(self.s_edges, s, "sensitive")


def _axis_edges(values: np.ndarray, bins: int, what: str) -> np.ndarray:
    distinct = np.unique(values)
    if distinct.size < bins:
        raise DatasetError(f"{what}: {distinct.size} distinct values cannot fill {bins} bins")
    if distinct.size == bins:
        # discrete axis: cut at midpoints, pad the outside by half a unit
        inner = (distinct[:-1] + distinct[1:]) / 2.0
        return np.concatenate(([distinct[0] - 0.5], inner, [distinct[-1] + 0.5]))
    lo, hi = float(distinct[0]), float(np.nextafter(distinct[-1], np.inf))
    if bins == 1:
        return np.array([lo, hi])
    inner = np.quantile(values, np.arange(1, bins) / bins)
    edges = np.concatenate(([lo], inner, [hi]))
    if not np.all(np.diff(edges) > 0):
        raise DatasetError(f"{what}: quantile edges collapse; use fewer bins or explicit edges")
    return edges


def make_grid(
    dataset: TabularDataset,
    k_bins: int,
    q_bins: int,
    strategy: str = "quantile",
    y_edges=None,
    s_edges=None,
) -> DiscretizationGrid:
    """Build a discretization grid over the outcome and sensitive values.

    The quantile strategy places interior edges at empirical quantiles and
    the outer edges at the data minimum and just past the maximum so the
    half-open cells cover every record.  When an axis has exactly as many
    distinct values as requested bins, edges sit at midpoints between
    consecutive values padded by 0.5 outside; binary labels therefore get
    the edges {-1.5, 0, +1.5} and binary groups {-0.5, 0.5, 1.5}.
    """
    if strategy == "explicit":
        if y_edges is None or s_edges is None:
            raise DatasetError("explicit strategy requires y_edges and s_edges")
        grid = DiscretizationGrid(np.asarray(y_edges, float), np.asarray(s_edges, float))
        grid.cell_of(dataset.outcome, dataset.sensitive)  # must cover the data
        return grid
    if strategy != "quantile":
        raise DatasetError(f"unknown strategy {strategy!r}")
    if k_bins < 1 or q_bins < 1:
        raise DatasetError("k_bins and q_bins must be >= 1")
    return DiscretizationGrid(
        _axis_edges(dataset.outcome, k_bins, "outcome"),
        _axis_edges(dataset.sensitive, q_bins, "sensitive"),
    )


@dataclass(frozen=True, eq=False)
class GroupIndex:
    """Record indices per (k, q) cell plus group marginals."""

    cells: Mapping[tuple[int, int], np.ndarray]
    counts: np.ndarray
    group_counts: np.ndarray
    group_probs: np.ndarray

    def indices(self, k: int, q: int) -> np.ndarray:
        return self.cells.get((k, q), np.empty(0, dtype=int))

    def nonempty(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted(self.cells))


def partition(dataset: TabularDataset, grid: DiscretizationGrid) -> GroupIndex:
    """Assign every record to its half-open (k, q) cell."""
    k_idx, q_idx = grid.cell_of(dataset.outcome, dataset.sensitive)
    counts = np.zeros((grid.n_y_bins, grid.n_s_bins), dtype=int)
    cells: dict[tuple[int, int], np.ndarray] = {}
    for k in range(grid.n_y_bins):
        for q in range(grid.n_s_bins):
            idx = np.nonzero((k_idx == k) & (q_idx == q))[0]
            counts[k, q] = idx.size
            if idx.size:
                cells[(k, q)] = idx
    group_counts = counts.sum(axis=0)
    return GroupIndex(
        cells=cells,
        counts=counts,
        group_counts=group_counts,
        group_probs=group_counts / dataset.n_records,
    )


class SplitResult(NamedTuple):
    train: TabularDataset
    test: TabularDataset
    stratified: bool


def split(dataset: TabularDataset, fraction: float, seed: int) -> SplitResult:
    """Deterministic train/test split, stratified by sensitive group.

    Each group with at least two records contributes round(fraction * N_g)
    records (clamped so both sides stay non-empty) to the first split.  If
    any group has fewer than two records the split falls back to a plain
    shuffle and the ``stratified`` flag is False.
    """
    if not 0.0 < fraction < 1.0:
        raise DatasetError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    s = dataset.sensitive
    codes, counts = np.unique(s, return_counts=True)
    stratified = bool(np.all(counts >= 2)) and dataset.n_records >= 2

    def take(n: int) -> int:
        return int(np.clip(round(fraction * n), 1, n - 1))

    first: list[np.ndarray] = []
    second: list[np.ndarray] = []
    if stratified:
        for code in codes:
            idx = np.nonzero(s == code)[0]
            perm = rng.permutation(idx)
            cut = take(idx.size)
            first.append(perm[:cut])
            second.append(perm[cut:])
    else:
        if dataset.n_records < 2:
            raise DatasetError("cannot split fewer than two records")
        perm = rng.permutation(dataset.n_records)
        cut = take(dataset.n_records)
        first.append(perm[:cut])
        second.append(perm[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return SplitResult(dataset.subset(a), dataset.subset(b), stratified)


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    reference: str
    n_samples: str
    n_features: str
    sensitive: tuple[str, ...]
    tasks: tuple[str, ...]


# Catalog of public tabular datasets commonly used in fairness work.  The
# library never downloads them; entries document expected sizes and which
# columns are conventionally treated as sensitive.
DATASET_REGISTRY: dict[str, RegistryEntry] = {
    e.name: e
    for e in (
        RegistryEntry("xAPI Students Performance", "Amrieh et al., 2015", "480", "16", ("Gender", "Nationality", "Native-Country"), ("MC",)),
        RegistryEntry("NLSY", "US Bureau of Labor Statistics, 2019", "~10K", "", ("Birth-date", "Ethnicity", "Gender"), ("BC", "MC", "R")),
        RegistryEntry("Wine Quality", "Cortez et al., 2009", "4898", "13", ("Color",), ("MC", "R")),
        RegistryEntry("Students Performance", "Cortez & Silva, 2014", "649", "33", ("Age", "Gender"), ("R",)),
        RegistryEntry("Drug Consumption", "Fehrman et al., 2016", "1885", "32", ("Age", "Ethnicity", "Gender", "Country"), ("MC",)),
        RegistryEntry("School Effectiveness", "Goldstein, 1987", "15362", "9", ("Ethnicity", "Gender"), ("R",)),
        RegistryEntry("Arrhythmia", "Guvenir et al., 1998", "452", "279", ("Age", "Gender"), ("MC",)),
        RegistryEntry("MovieLens", "Harper & Konstan, 2016", "~100K", "~20", ("Age", "Gender"), ("R",)),
        RegistryEntry("Heritage Health", "Heritage Provider Network, 2011", "~60K", "~20", ("Age", "Gender"), ("MC", "R")),
        RegistryEntry("German Credit", "Hofmann, 1994", "1K", "20", ("Age", "Gender/Marital-Stat"), ("MC",)),
        RegistryEntry("Student Academics Performance", "Hussain et al., 2018", "300", "22", ("Gender",), ("MC",)),
        RegistryEntry("Heart Disease", "Janosi et al., 1988", "303", "75", ("Age", "Gender"), ("MC", "R")),
        RegistryEntry("Census/Adult Income", "Kohavi, 1996", "48842", "14", ("Age", "Ethnicity", "Gender", "Native-Country"), ("BC",)),
        RegistryEntry("COMPAS", "Larson et al., 2016", "11758", "36", ("Age", "Ethnicity", "Gender"), ("BC", "MC")),
        RegistryEntry("Contraceptive Method Choice", "Lim, 1997", "1473", "9", ("Age", "Religion"), ("MC",)),
        RegistryEntry("CelebA Faces", "Liu et al., 2015", "~200K", "40", ("Gender", "Skin-Paleness", "Youth"), ("BC",)),
        RegistryEntry("Chicago Faces", "Ma et al., 2015", "597", "5", ("Ethnicity", "Gender"), ("MC",)),
        RegistryEntry("Diversity in Faces", "Merler et al., 2019", "1M", "47", ("Age", "Gender"), ("MC", "R")),
        RegistryEntry("Bank Marketing", "Moro et al., 2014", "45211", "17-20", ("Age",), ("BC",)),
        RegistryEntry("Stop, Question & Frisk", "NYPD, 2012", "84868", "~100", ("Age", "Ethnicity", "Gender"), ("BC", "MC")),
        RegistryEntry("Communities & Crime", "Redmond, 2009", "1994", "128", ("Ethnicity",), ("R",)),
        RegistryEntry("Diabetes US", "Strack et al., 2014", "101768", "55", ("Age", "Ethnicity"), ("BC", "MC")),
        RegistryEntry("Law School Admission", "Wightman, 1998", "21792", "5", ("Ethnicity", "Gender"), ("R",)),
        RegistryEntry("Credit Card Default", "Yeh, 2016", "30K", "24", ("Age", "Gender"), ("BC",)),
    )
}

_REGISTRY_ALIASES = {
    "adult": "Census/Adult Income",
    "compas": "COMPAS",
}


def describe_dataset(name: str) -> RegistryEntry:
    key = _REGISTRY_ALIASES.get(name.lower(), name)
    for candidate in DATASET_REGISTRY:
        if candidate.lower() == key.lower():
            return DATASET_REGISTRY[candidate]
    raise DatasetError(f"unknown dataset {name!r}; see the registry list")

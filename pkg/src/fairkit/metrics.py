"""Group fairness criteria on model scores and hard predictions.

Threshold-based criteria (demographic parity, equalized odds, predictive
parity) use the strict rule yhat = 1{score > threshold}; ties at the
threshold classify as the negative class.  Cell-based criteria average
absolute differences of per-cell accuracy (or loss) over ordered pairs of
non-empty sensitive cells inside each outcome bin; empty cells are skipped
and reported, never imputed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .dataset import DiscretizationGrid
from .transport import EmpiricalDistribution, default_bins, wasserstein

__all__ = [
    "MetricError",
    "ScoreSet",
    "StrongDPResult",
    "OddsGaps",
    "PredictiveParityResult",
    "CellGapResult",
    "FairnessReport",
    "demographic_parity_gap",
    "strong_demographic_parity",
    "equalized_odds_gaps",
    "predictive_parity_gap",
    "general_fairness_gap",
    "loss_general_fairness_gap",
    "full_report",
]


class MetricError(ValueError):
    """Invalid input to a fairness metric."""


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Aligned per-record scores, group codes, outcomes, and a threshold.

    ``outcome`` may be None for purely score-distribution criteria.  The
    threshold, when present, derives predictions strictly as score > tau.
    """

    scores: np.ndarray
    group: np.ndarray
    outcome: np.ndarray | None = None
    threshold: float | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        group = np.asarray(self.group)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "group", group)
        if self.outcome is not None:
            outcome = np.asarray(self.outcome, dtype=float)
            object.__setattr__(self, "outcome", outcome)
            if outcome.shape != scores.shape:
                raise MetricError("outcome must align with scores")
        if scores.ndim != 1 or scores.size == 0:
            raise MetricError("scores must be a non-empty vector")
        if group.shape != scores.shape:
            raise MetricError("group must align with scores")

    @property
    def codes(self) -> tuple:
        return tuple(dict.fromkeys(self.group.tolist()))

    @property
    def predictions(self) -> np.ndarray:
        if self.threshold is None:
            raise MetricError("this criterion needs a threshold")
        return (self.scores > self.threshold).astype(float)

    def group_mask(self, code) -> np.ndarray:
        return self.group == code


def _max_pairwise_gap(values: Mapping[object, float]) -> float:
    rates = list(values.values())
    if len(rates) < 2:
        return 0.0
    return float(max(abs(a - b) for i, a in enumerate(rates) for b in rates[i + 1:]))


def demographic_parity_gap(scores: ScoreSet) -> float:
    """Largest pairwise gap in positive prediction rates across groups."""
    pred = scores.predictions
    rates = {}
    for code in scores.codes:
        mask = scores.group_mask(code)
        if not mask.any():
            raise MetricError(f"empty group {code!r}")
        rates[code] = float(pred[mask].mean())
    return _max_pairwise_gap(rates)


class StrongDPResult(NamedTuple):
    """Threshold-free demographic parity deviations.

    d_pair sums the order-2 transport cost over ordered group pairs;
    max_w1 is the largest pairwise order-1 cost.  Both are zero exactly
    when all group score distributions coincide at bin resolution.
    """

    d_pair: float
    max_w1: float


def strong_demographic_parity(scores: ScoreSet, bins: int | None = None) -> StrongDPResult:
    codes = scores.codes
    sizes = [int(scores.group_mask(c).sum()) for c in codes]
    b = default_bins(sizes) if bins is None else int(bins)
    dists = {
        c: EmpiricalDistribution.from_samples(scores.scores[scores.group_mask(c)], bins=b)
        for c in codes
    }
    d_pair = 0.0
    max_w1 = 0.0
    for i, a in enumerate(codes):
        for c in codes[i + 1:]:
            d_pair += 2.0 * wasserstein(dists[a], dists[c], order=2)
            max_w1 = max(max_w1, wasserstein(dists[a], dists[c], order=1))
    return StrongDPResult(d_pair=d_pair, max_w1=max_w1)


class OddsGaps(NamedTuple):
    fpr_gap: float
    fnr_gap: float
    excluded: tuple


def equalized_odds_gaps(scores: ScoreSet) -> OddsGaps:
    """Max pairwise false-positive and false-negative rate gaps.

    Groups missing an outcome class are excluded from that comparison and
    reported in ``excluded``.
    """
    if scores.outcome is None:
        raise MetricError("equalized odds needs outcomes")
    pred = scores.predictions
    y = scores.outcome
    fpr: dict[object, float] = {}
    fnr: dict[object, float] = {}
    excluded = []
    for code in scores.codes:
        mask = scores.group_mask(code)
        neg = mask & (y < 0)
        pos = mask & (y > 0)
        if not neg.any() or not pos.any():
            excluded.append(code)
            continue
        fpr[code] = float(pred[neg].mean())
        fnr[code] = float(1.0 - pred[pos].mean())
    return OddsGaps(_max_pairwise_gap(fpr), _max_pairwise_gap(fnr), tuple(excluded))


class PredictiveParityResult(NamedTuple):
    gap: float
    excluded: tuple


def predictive_parity_gap(scores: ScoreSet) -> PredictiveParityResult:
    """Max pairwise precision gap among groups with positive predictions."""
    if scores.outcome is None:
        raise MetricError("predictive parity needs outcomes")
    pred = scores.predictions
    y = scores.outcome
    precision: dict[object, float] = {}
    excluded = []
    for code in scores.codes:
        mask = scores.group_mask(code) & (pred > 0)
        if not mask.any():
            excluded.append(code)
            continue
        precision[code] = float((y[mask] > 0).mean())
    return PredictiveParityResult(_max_pairwise_gap(precision), tuple(excluded))


@dataclass(frozen=True, eq=False)
class CellGapResult:
    """Average absolute per-cell gap plus the raw table behind it.

    ``value`` averages |table[k, p] - table[k, q]| over ordered pairs
    p != q of non-empty cells within each outcome bin k, normalized by the
    number of included pairs.  ``table`` holds the per-cell statistic with
    NaN marking skipped (empty) cells.
    """

    value: float
    table: np.ndarray
    skipped_cells: tuple[tuple[int, int], ...]
    included_pairs: int

    def __float__(self) -> float:
        return self.value


def _cell_gap(table: np.ndarray, counts: np.ndarray) -> tuple[float, tuple, int]:
    n_k, n_q = table.shape
    skipped = tuple(
        (k, q) for k in range(n_k) for q in range(n_q) if counts[k, q] == 0
    )
    total = 0.0
    pairs = 0
    for k in range(n_k):
        present = [q for q in range(n_q) if counts[k, q] > 0]
        for p in present:
            for q in present:
                if p == q:
                    continue
                total += abs(table[k, p] - table[k, q])
                pairs += 1
    value = total / pairs if pairs else 0.0
    return value, skipped, pairs


def _cell_layout(scores: ScoreSet, grid: DiscretizationGrid):
    if scores.outcome is None:
        raise MetricError("cell-based criteria need outcomes")
    try:
        group_values = scores.group.astype(float)
    except ValueError:
        raise MetricError("cell-based criteria need numeric group codes") from None
    k_idx, q_idx = grid.cell_of(scores.outcome, group_values)
    counts = np.zeros((grid.n_y_bins, grid.n_s_bins), dtype=int)
    np.add.at(counts, (k_idx, q_idx), 1)
    return k_idx, q_idx, counts


def general_fairness_gap(
    scores: ScoreSet,
    grid: DiscretizationGrid,
    model_outputs=None,
) -> CellGapResult:
    """Accuracy-parity over (outcome, sensitive) cells.

    The per-cell statistic is the fraction of records whose model output
    falls inside the cell's own outcome bin.  In the binary setting this
    averages the false-positive and false-negative rate gaps.
    """
    f = scores.scores if model_outputs is None else np.asarray(model_outputs, dtype=float)
    if f.shape != scores.scores.shape:
        raise MetricError("model_outputs must align with the score set")
    k_idx, q_idx, counts = _cell_layout(scores, grid)
    edges = grid.y_edges
    in_bin = (f >= edges[k_idx]) & (f < edges[k_idx + 1])
    table = np.full(counts.shape, np.nan)
    hits = np.zeros(counts.shape, dtype=int)
    np.add.at(hits, (k_idx, q_idx), in_bin.astype(int))
    nz = counts > 0
    table[nz] = hits[nz] / counts[nz]
    value, skipped, pairs = _cell_gap(table, counts)
    return CellGapResult(value, table, skipped, pairs)


def loss_general_fairness_gap(
    scores: ScoreSet,
    grid: DiscretizationGrid,
    loss: str = "hard",
    model_outputs=None,
    outcome_kind: str = "classification",
) -> CellGapResult:
    """Loss-parity over (outcome, sensitive) cells.

    The hard loss 1{f outside the cell's outcome bin} is the complement of
    the accuracy statistic, so its gap value is delegated to
    ``general_fairness_gap`` and matches it bitwise.  The linear loss is
    (1 - f*y)/2 for classification and the signed residual f - y for
    regression.
    """
    if loss == "hard":
        base = general_fairness_gap(scores, grid, model_outputs)
        return CellGapResult(base.value, 1.0 - base.table, base.skipped_cells, base.included_pairs)
    if loss != "linear":
        raise MetricError(f"unknown loss kind {loss!r}")
    f = scores.scores if model_outputs is None else np.asarray(model_outputs, dtype=float)
    y = scores.outcome
    k_idx, q_idx, counts = _cell_layout(scores, grid)
    if outcome_kind == "classification":
        losses = (1.0 - f * y) / 2.0
    elif outcome_kind == "regression":
        losses = f - y
    else:
        raise MetricError(f"unknown outcome kind {outcome_kind!r}")
    sums = np.zeros(counts.shape)
    np.add.at(sums, (k_idx, q_idx), losses)
    table = np.full(counts.shape, np.nan)
    nz = counts > 0
    table[nz] = sums[nz] / counts[nz]
    value, skipped, pairs = _cell_gap(table, counts)
    return CellGapResult(value, table, skipped, pairs)


@dataclass(frozen=True, eq=False)
class FairnessReport:
    """Named criterion values with their raw tables and skipped cells."""

    criteria: Mapping[str, Mapping]

    def to_json_dict(self) -> dict:
        out: dict = {}
        for name in sorted(self.criteria):
            entry = dict(self.criteria[name])
            table = entry.get("table")
            if isinstance(table, np.ndarray):
                entry["table"] = [
                    [None if np.isnan(x) else float(x) for x in row] for row in table
                ]
            out[name] = entry
        return out


def _cell_entry(result: CellGapResult) -> dict:
    return {
        "value": result.value,
        "table": result.table,
        "skipped_cells": [list(c) for c in result.skipped_cells],
    }


def full_report(
    scores: ScoreSet,
    grid: DiscretizationGrid | None = None,
    bins: int | None = None,
    outcome_kind: str = "classification",
) -> FairnessReport:
    """Evaluate every criterion the inputs support."""
    criteria: dict[str, dict] = {}
    sdp = strong_demographic_parity(scores, bins=bins)
    criteria["strong_demographic_parity"] = {
        "value": sdp.max_w1,
        "table": None,
        "skipped_cells": [],
        "d_pair": sdp.d_pair,
    }
    if scores.threshold is not None:
        criteria["demographic_parity"] = {
            "value": demographic_parity_gap(scores),
            "table": None,
            "skipped_cells": [],
        }
        if scores.outcome is not None:
            odds = equalized_odds_gaps(scores)
            criteria["equal_false_positive_rates"] = {
                "value": odds.fpr_gap,
                "table": None,
                "skipped_cells": list(odds.excluded),
            }
            criteria["equal_false_negative_rates"] = {
                "value": odds.fnr_gap,
                "table": None,
                "skipped_cells": list(odds.excluded),
            }
            pp = predictive_parity_gap(scores)
            criteria["predictive_parity"] = {
                "value": pp.gap,
                "table": None,
                "skipped_cells": list(pp.excluded),
            }
    if grid is not None and scores.outcome is not None:
        criteria["general_fairness"] = _cell_entry(general_fairness_gap(scores, grid))
        criteria["loss_general_fairness_hard"] = _cell_entry(
            loss_general_fairness_gap(scores, grid, loss="hard")
        )
        criteria["loss_general_fairness_linear"] = _cell_entry(
            loss_general_fairness_gap(scores, grid, loss="linear", outcome_kind=outcome_kind)
        )
    return FairnessReport(criteria=criteria)

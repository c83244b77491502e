"""Linear-Gaussian structural equation models over small labeled DAGs.

A model has one Bernoulli root (the sensitive attribute) and a sequence of
linear equations with independent Gaussian noise, each edge labeled fair or
unfair.  Counterfactual evaluation follows abduction -> action -> prediction:
per-record noise is recovered from the observed values, selected causal
paths are switched to the counterfactual sensitive value, and the equations
are replayed with the shared noise (the factual and counterfactual worlds
are evaluated side by side, so untouched variables reproduce exactly).

Path selections are sets of directed paths starting at the sensitive node;
they are realized by activating the union of their edges, which matches the
path semantics whenever selected paths do not share edges beyond the root.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .dataset import TabularDataset, dataset_from_columns

__all__ = [
    "CausalError",
    "Equation",
    "LinearSEM",
    "PathSelection",
    "AbductedNoise",
    "simulate",
    "sample",
    "fit",
    "path_specific_effect",
    "path_specific_effect_mc",
    "abduct",
    "reconstruct",
    "counterfactual",
    "correct_scores",
    "scenario",
    "all_unfair_paths",
]


class CausalError(ValueError):
    """Invalid SEM, record, or path selection."""


@dataclass(frozen=True)
class Equation:
    """One structural assignment: value = intercept + coeffs . parents + noise."""

    name: str
    intercept: float
    parents: tuple[str, ...]
    coeffs: tuple[float, ...]
    noise_std: float

    def __post_init__(self):
        if len(self.parents) != len(self.coeffs):
            raise CausalError(f"{self.name}: one coefficient per parent required")
        if self.noise_std < 0:
            raise CausalError(f"{self.name}: noise_std must be >= 0")


@dataclass(frozen=True, eq=False)
class LinearSEM:
    sensitive: str
    pi: float
    equations: tuple[Equation, ...]
    outcome: str
    edge_labels: Mapping[tuple[str, str], str] = field(default_factory=dict)
    sensitive_values: tuple[float, float] = (0.0, 1.0)
    unobserved: frozenset[str] = frozenset()

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise CausalError("pi must lie in [0, 1]")
        seen = {self.sensitive}
        for eq in self.equations:
            if eq.name in seen:
                raise CausalError(f"duplicate variable {eq.name!r}")
            for p in eq.parents:
                if p not in seen:
                    raise CausalError(f"{eq.name}: parent {p!r} not defined earlier (graph must be acyclic)")
            seen.add(eq.name)
        if self.outcome not in seen:
            raise CausalError(f"outcome {self.outcome!r} is not a variable")
        edges = set(self.edges)
        for e, label in self.edge_labels.items():
            if tuple(e) not in edges:
                raise CausalError(f"label on missing edge {e!r}")
            if label not in ("fair", "unfair"):
                raise CausalError(f"edge {e!r}: label must be fair or unfair")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.sensitive,) + tuple(eq.name for eq in self.equations)

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        out = []
        for eq in self.equations:
            out.extend((p, eq.name) for p in eq.parents)
        return tuple(out)

    def equation(self, name: str) -> Equation:
        for eq in self.equations:
            if eq.name == name:
                return eq
        raise CausalError(f"no equation for {name!r}")


@dataclass(frozen=True)
class PathSelection:
    """Directed paths from the sensitive node chosen for intervention."""

    paths: tuple[tuple[str, ...], ...]

    @classmethod
    def parse(cls, text: str) -> "PathSelection":
        """Parse "A>D>Y,A>Y" style comma-separated node sequences."""
        items = [p.strip() for p in text.split(",") if p.strip()]
        return cls(tuple(tuple(n.strip() for n in item.split(">")) for item in items))

    def resolved(self, sem: LinearSEM) -> tuple[tuple[str, ...], ...]:
        """Validate against the graph, extending each path to the outcome.

        A path that stops early is extended along unique outgoing edges;
        an ambiguous continuation is an error and requires the full path.
        """
        edges = set(sem.edges)
        children: dict[str, list[str]] = {}
        for u, v in edges:
            children.setdefault(u, []).append(v)
        out = []
        for path in self.paths:
            if len(path) < 2:
                raise CausalError(f"path {path!r} needs at least one edge")
            if path[0] != sem.sensitive:
                raise CausalError(f"path {path!r} must start at {sem.sensitive!r}")
            for u, v in zip(path, path[1:]):
                if (u, v) not in edges:
                    raise CausalError(f"path {path!r}: edge {u}->{v} not in graph")
            path = tuple(path)
            while path[-1] != sem.outcome:
                nxt = children.get(path[-1], [])
                if len(nxt) != 1:
                    raise CausalError(
                        f"path {path!r} does not reach {sem.outcome!r} and has no unique continuation"
                    )
                path = path + (nxt[0],)
            out.append(path)
        return tuple(out)

    def edge_set(self, sem: LinearSEM) -> frozenset[tuple[str, str]]:
        pairs: set[tuple[str, str]] = set()
        for path in self.resolved(sem):
            pairs.update(zip(path, path[1:]))
        return frozenset(pairs)


@dataclass(frozen=True)
class AbductedNoise:
    """Per-equation residuals recovered from one record."""

    residuals: Mapping[str, float]


def simulate(sem: LinearSEM, n: int, seed: int | np.random.Generator = 0) -> dict[str, np.ndarray]:
    """Ancestral sampling of every variable, deterministic per seed."""
    if n < 1:
        raise CausalError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v0, v1 = sem.sensitive_values
    cols: dict[str, np.ndarray] = {
        sem.sensitive: np.where(rng.random(n) < sem.pi, v1, v0)
    }
    for eq in sem.equations:
        value = np.full(n, eq.intercept, dtype=float)
        for p, c in zip(eq.parents, eq.coeffs):
            value += c * cols[p]
        value += eq.noise_std * rng.standard_normal(n)
        cols[eq.name] = value
    return cols


def sample(sem: LinearSEM, n: int, seed: int = 0) -> TabularDataset:
    """Sample a dataset of the observed variables (sensitive, features, outcome)."""
    cols = simulate(sem, n, seed)
    roles = {}
    order = []
    for name in sem.variables:
        if name in sem.unobserved:
            continue
        order.append(name)
        if name == sem.sensitive:
            roles[name] = "sensitive"
        elif name == sem.outcome:
            roles[name] = "outcome"
        else:
            roles[name] = "feature"
    return dataset_from_columns(
        {name: cols[name] for name in order}, roles, outcome_kind="regression", order=order
    )


def _data_columns(data) -> Mapping[str, np.ndarray]:
    if isinstance(data, TabularDataset):
        return {c.name: np.asarray(data.columns[c.name], dtype=float) for c in data.schema}
    return {k: np.asarray(v, dtype=float) for k, v in data.items()}


def fit(data, skeleton: LinearSEM) -> LinearSEM:
    """Refit a SEM's coefficients by per-equation least squares.

    The skeleton supplies the graph, edge labels, and sensitive coding; its
    numeric parameters are ignored.  Noise levels come from residual
    standard deviations and pi from the sensitive-value frequency.
    """
    cols = _data_columns(data)
    for name in skeleton.variables:
        if name in skeleton.unobserved:
            raise CausalError(f"cannot fit: {name!r} is declared unobserved")
        if name not in cols:
            raise CausalError(f"data lacks column {name!r}")
    n = cols[skeleton.sensitive].size
    v0, v1 = skeleton.sensitive_values
    a = cols[skeleton.sensitive]
    if not set(np.unique(a)) <= {float(v0), float(v1)}:
        raise CausalError(f"sensitive column takes values outside {{{v0}, {v1}}}")
    pi = float(np.mean(a == v1))
    equations = []
    for eq in skeleton.equations:
        d = len(eq.parents) + 1
        if n < d:
            raise CausalError(f"{eq.name}: need at least {d} records to fit")
        design = np.column_stack([np.ones(n)] + [cols[p] for p in eq.parents])
        coef, _, rank, _ = np.linalg.lstsq(design, cols[eq.name], rcond=None)
        if rank < d:
            raise CausalError(f"{eq.name}: rank-deficient design matrix")
        resid = cols[eq.name] - design @ coef
        dof = max(n - d, 1)
        equations.append(
            Equation(
                name=eq.name,
                intercept=float(coef[0]),
                parents=eq.parents,
                coeffs=tuple(float(c) for c in coef[1:]),
                noise_std=float(np.sqrt(resid @ resid / dof)),
            )
        )
    return LinearSEM(
        sensitive=skeleton.sensitive,
        pi=pi,
        equations=tuple(equations),
        outcome=skeleton.outcome,
        edge_labels=dict(skeleton.edge_labels),
        sensitive_values=skeleton.sensitive_values,
        unobserved=skeleton.unobserved,
    )


def path_specific_effect(sem: LinearSEM, paths: PathSelection, a: float, a_bar: float) -> float:
    """Closed-form effect transmitted along the selected paths.

    For a linear model this is the sum over selected paths of the product
    of edge coefficients, times (a_bar - a).
    """
    total = 0.0
    for path in paths.resolved(sem):
        prod = 1.0
        for u, v in zip(path, path[1:]):
            eq = sem.equation(v)
            prod *= eq.coeffs[eq.parents.index(u)]
        total += prod
    return float(total * (a_bar - a))


def _twin_eval(
    sem: LinearSEM,
    ref_cols: Mapping[str, np.ndarray],
    a_bar: float,
    active: frozenset[tuple[str, str]],
    noises: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Counterfactual values for all equations, sharing the given noise.

    Each equation reads its parents from the counterfactual world along
    active edges and from the reference world elsewhere; the sensitive
    value is a_bar along active edges out of the root.
    """
    n = ref_cols[sem.sensitive].size
    cf: dict[str, np.ndarray] = {sem.sensitive: np.full(n, a_bar, dtype=float)}
    for eq in sem.equations:
        value = np.full(n, eq.intercept, dtype=float)
        for p, c in zip(eq.parents, eq.coeffs):
            source = cf if (p, eq.name) in active else ref_cols
            value += c * source[p]
        value += noises[eq.name]
        cf[eq.name] = value
    return cf


def path_specific_effect_mc(
    sem: LinearSEM,
    paths: PathSelection,
    a: float,
    a_bar: float,
    n: int,
    seed: int = 0,
) -> float:
    """Monte-Carlo estimate of the path-specific effect.

    Both worlds share the same noise draws (common random numbers), so for
    linear models the estimate matches the closed form up to rounding.
    """
    if n < 2:
        raise CausalError("n must be >= 2")
    rng = np.random.default_rng(seed)
    active = paths.edge_set(sem)
    noises = {eq.name: eq.noise_std * rng.standard_normal(n) for eq in sem.equations}
    ref: dict[str, np.ndarray] = {sem.sensitive: np.full(n, float(a))}
    for eq in sem.equations:
        value = np.full(n, eq.intercept, dtype=float)
        for p, c in zip(eq.parents, eq.coeffs):
            value += c * ref[p]
        ref[eq.name] = value + noises[eq.name]
    cf = _twin_eval(sem, ref, float(a_bar), active, noises)
    return float(np.mean(cf[sem.outcome]) - np.mean(ref[sem.outcome]))


def abduct(sem: LinearSEM, record: Mapping[str, float]) -> AbductedNoise:
    """Recover each equation's noise from one fully observed record."""
    for name in sem.variables:
        if name not in record:
            raise CausalError(f"record lacks variable {name!r}")
    residuals = {}
    for eq in sem.equations:
        pred = eq.intercept + sum(c * float(record[p]) for p, c in zip(eq.parents, eq.coeffs))
        residuals[eq.name] = float(record[eq.name]) - pred
    return AbductedNoise(residuals=residuals)


def reconstruct(sem: LinearSEM, sensitive_value: float, noise: AbductedNoise) -> dict[str, float]:
    """Replay the structural equations under the given noise."""
    cols = {sem.sensitive: float(sensitive_value)}
    for eq in sem.equations:
        value = eq.intercept + sum(c * cols[p] for p, c in zip(eq.parents, eq.coeffs))
        cols[eq.name] = value + noise.residuals[eq.name]
    return cols


def counterfactual(
    sem: LinearSEM,
    record: Mapping[str, float],
    paths: PathSelection,
    a_bar: float,
    mc_samples: int = 1,
    noise_sampler: Callable | None = None,
    seed: int = 0,
) -> float:
    """Outcome the record would have had with a_bar along the selected paths.

    With invertible linear equations the answer is exact: noise is abducted
    once and the equations replayed.  For equations whose noise posterior is
    not a point mass, pass ``noise_sampler(rng, record, abducted) -> dict``
    returning residual draws to average over ``mc_samples`` evaluations.
    """
    active = paths.edge_set(sem)
    base = abduct(sem, record)
    ref_cols = {k: np.atleast_1d(np.asarray(record[k], dtype=float)) for k in sem.variables}
    if noise_sampler is None:
        noises = {k: np.atleast_1d(v) for k, v in base.residuals.items()}
        cf = _twin_eval(sem, ref_cols, float(a_bar), active, noises)
        return float(cf[sem.outcome][0])
    if mc_samples < 1:
        raise CausalError("mc_samples must be >= 1 when sampling noise")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(mc_samples):
        draw = dict(base.residuals)
        draw.update(noise_sampler(rng, record, base))
        noises = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in draw.items()}
        cf = _twin_eval(sem, ref_cols, float(a_bar), active, noises)
        total += float(cf[sem.outcome][0])
    return total / mc_samples


def correct_scores(
    sem: LinearSEM,
    model: Callable[[Mapping[str, np.ndarray]], np.ndarray],
    data,
    paths: PathSelection,
    a_bar: float,
    mc_samples: int = 1,
    noise_sampler: Callable | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Replace model scores by their path-specific counterfactuals.

    Every record is moved to the world where the sensitive attribute equals
    ``a_bar`` along the selected paths: descendants on those paths are
    recomputed from their abducted noise, other variables stay at their
    observed values, and the model is re-evaluated on the corrected inputs
    (averaged over ``mc_samples`` noise draws when a sampler is given).
    Outcome values are never consulted.
    """
    cols = _data_columns(data)
    active = paths.edge_set(sem)
    input_eqs = [eq for eq in sem.equations if eq.name != sem.outcome]
    for name in [sem.sensitive] + [eq.name for eq in input_eqs]:
        if name not in cols:
            raise CausalError(f"data lacks variable {name!r}")
    n = cols[sem.sensitive].size
    residuals: dict[str, np.ndarray] = {}
    for eq in input_eqs:
        pred = np.full(n, eq.intercept, dtype=float)
        for p, c in zip(eq.parents, eq.coeffs):
            pred += c * cols[p]
        residuals[eq.name] = cols[eq.name] - pred

    def corrected_inputs(noise: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        cf: dict[str, np.ndarray] = {sem.sensitive: np.full(n, float(a_bar))}
        for eq in input_eqs:
            value = np.full(n, eq.intercept, dtype=float)
            for p, c in zip(eq.parents, eq.coeffs):
                source = cf if (p, eq.name) in active else cols
                value += c * source[p]
            cf[eq.name] = value + noise[eq.name]
        # the model sees corrected values only along edges into the outcome
        out: dict[str, np.ndarray] = {}
        out[sem.sensitive] = (
            cf[sem.sensitive] if (sem.sensitive, sem.outcome) in active else cols[sem.sensitive]
        )
        for eq in input_eqs:
            out[eq.name] = cf[eq.name] if (eq.name, sem.outcome) in active else cols[eq.name]
        return out

    def evaluate(inputs) -> np.ndarray:
        try:
            scores = np.asarray(model(inputs), dtype=float)
        except Exception as exc:
            raise CausalError(f"model evaluation failed: {exc}") from exc
        if scores.shape != (n,):
            raise CausalError("model must return one score per record")
        if not np.all(np.isfinite(scores)):
            bad = int(np.argmax(~np.isfinite(scores)))
            raise CausalError(f"model returned a non-finite score for record {bad}")
        return scores

    if noise_sampler is None:
        return evaluate(corrected_inputs(residuals))
    if mc_samples < 1:
        raise CausalError("mc_samples must be >= 1 when sampling noise")
    rng = np.random.default_rng(seed)
    total = np.zeros(n)
    for _ in range(mc_samples):
        draw = dict(residuals)
        draw.update(noise_sampler(rng, cols, residuals))
        total += evaluate(corrected_inputs(draw))
    return total / mc_samples


def all_unfair_paths(sem: LinearSEM) -> PathSelection:
    """All sensitive-to-outcome paths containing at least one unfair edge."""
    children: dict[str, list[str]] = {}
    for u, v in sem.edges:
        children.setdefault(u, []).append(v)

    paths: list[tuple[str, ...]] = []

    def walk(path: tuple[str, ...]):
        node = path[-1]
        if node == sem.outcome:
            paths.append(path)
            return
        for nxt in children.get(node, []):
            walk(path + (nxt,))

    walk((sem.sensitive,))
    unfair = [
        p
        for p in paths
        if any(sem.edge_labels.get((u, v)) == "unfair" for u, v in zip(p, p[1:]))
    ]
    return PathSelection(tuple(unfair))


def scenario(name: str) -> LinearSEM:
    """Named example models with documented default coefficients.

    college
        Admission graph: sensitive A, qualifications Q, department D,
        outcome Y, with A->Y and A->D unfair and A->Q fair.  Defaults:
        pi=0.5, all intercepts 0, every edge coefficient 1, unit noise.
    music
        Test-score graph: sensitive S in {-1,+1}, latent aptitude M
        (unobserved), initial score X = S + M (S->X unfair), final score
        Y = M.  X and Y have no noise of their own.
    police / police_a, police_b, police_c
        Search graph: sensitive A, characteristics C, outcome Y.  Variant
        a has only the fair chain A->C->Y; variants b and c add the unfair
        direct edge A->Y (the recorded outcome is the search decision).
    """
    key = name.lower()
    if key == "college":
        return LinearSEM(
            sensitive="A",
            pi=0.5,
            equations=(
                Equation("Q", 0.0, ("A",), (1.0,), 1.0),
                Equation("D", 0.0, ("A",), (1.0,), 1.0),
                Equation("Y", 0.0, ("A", "Q", "D"), (1.0, 1.0, 1.0), 1.0),
            ),
            outcome="Y",
            edge_labels={
                ("A", "Q"): "fair",
                ("A", "D"): "unfair",
                ("A", "Y"): "unfair",
                ("Q", "Y"): "fair",
                ("D", "Y"): "fair",
            },
        )
    if key == "music":
        return LinearSEM(
            sensitive="S",
            pi=0.5,
            sensitive_values=(-1.0, 1.0),
            equations=(
                Equation("M", 0.0, (), (), 1.0),
                Equation("X", 0.0, ("S", "M"), (1.0, 1.0), 0.0),
                Equation("Y", 0.0, ("M",), (1.0,), 0.0),
            ),
            outcome="Y",
            edge_labels={("S", "X"): "unfair", ("M", "X"): "fair", ("M", "Y"): "fair"},
            unobserved=frozenset({"M"}),
        )
    if key in ("police", "police_a", "police_b", "police_c"):
        direct = key in ("police_b", "police_c")
        labels = {("A", "C"): "fair", ("C", "Y"): "fair"}
        y_parents: tuple[str, ...] = ("C",)
        y_coeffs: tuple[float, ...] = (1.0,)
        if direct:
            labels[("A", "Y")] = "unfair"
            y_parents = ("C", "A")
            y_coeffs = (1.0, 1.0)
        return LinearSEM(
            sensitive="A",
            pi=0.5,
            equations=(
                Equation("C", 0.0, ("A",), (1.0,), 1.0),
                Equation("Y", 0.0, y_parents, y_coeffs, 1.0),
            ),
            outcome="Y",
            edge_labels=labels,
        )
    raise CausalError(f"unknown scenario {name!r}")

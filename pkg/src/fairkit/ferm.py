"""Convex fair empirical risk minimization over linear and kernel models.

The trained model minimizes sum-of-losses plus a ridge penalty subject to
an L1 bound on the vector of per-cell mean-score differences: for every
outcome bin, the mean feature vectors of any two non-empty sensitive cells
are collected into constraint columns, and the constraint reads
``||A^T w||_1 <= epsilon``.  A zero budget turns the bound into exact
linear equalities, solved by null-space elimination; a positive budget is
handled by projected gradient (or subgradient for the hinge) with an
active-face refinement for the squared loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import DiscretizationGrid, TabularDataset, partition
from .metrics import MetricError, ScoreSet, general_fairness_gap, loss_general_fairness_gap

__all__ = [
    "FermError",
    "SolverError",
    "KernelSpec",
    "kernel_matrix",
    "ConstraintSystem",
    "FairERMProblem",
    "KernelModel",
    "design_matrix",
    "build_constraints",
    "binary_positive_constraint",
    "train_gferm",
    "train_ferm_binary",
    "LinearFairMap",
    "fair_linear_transform",
    "surrogate_fairness_gap",
    "project_l1_ball",
]

LOSSES = ("squared", "hinge", "logistic")


class FermError(ValueError):
    """Invalid problem specification or data."""


class SolverError(RuntimeError):
    """Optimization failed; carries the last iterate and residuals."""

    def __init__(self, message, last_iterate=None, residuals=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residuals = residuals


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise FermError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and (self.gamma is None or self.gamma <= 0):
            raise FermError("rbf kernel needs gamma > 0")


def kernel_matrix(spec: KernelSpec, X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    Z = X if Z is None else Z
    if spec.kind == "linear":
        return X @ Z.T
    sq = np.sum(X * X, axis=1)[:, None] + np.sum(Z * Z, axis=1)[None, :] - 2.0 * X @ Z.T
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


def design_matrix(dataset: TabularDataset, include_sensitive: bool) -> np.ndarray:
    X = dataset.features
    if include_sensitive:
        return np.hstack([dataset.sensitive[:, None], X])
    return X


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Cell-difference constraints as averaging weights over training rows.

    Column j of ``cell_weights`` carries +1/N_{k,p} on the records of cell
    (k, p) and -1/N_{k,q} on those of cell (k, q), so X^T C reproduces the
    per-cell mean-feature differences for any design X (and K C its
    kernelized counterpart).
    """

    cell_weights: np.ndarray
    pairs: tuple[tuple[int, int, int], ...]
    degenerate: bool

    @property
    def n_constraints(self) -> int:
        return self.cell_weights.shape[1]


def build_constraints(dataset: TabularDataset, grid: DiscretizationGrid) -> ConstraintSystem:
    """One constraint per outcome bin and unordered pair of non-empty cells.

    With fewer than two non-empty sensitive cells in every outcome bin the
    system is empty and flagged degenerate (training falls back to
    unconstrained ridge).
    """
    index = partition(dataset, grid)
    n = dataset.n_records
    columns = []
    pairs = []
    for k in range(index.counts.shape[0]):
        present = [q for q in range(index.counts.shape[1]) if index.counts[k, q] > 0]
        for i, p in enumerate(present):
            for q in present[i + 1:]:
                col = np.zeros(n)
                col[index.indices(k, p)] = 1.0 / index.counts[k, p]
                col[index.indices(k, q)] = -1.0 / index.counts[k, q]
                columns.append(col)
                pairs.append((k, p, q))
    if not columns:
        return ConstraintSystem(np.zeros((n, 0)), (), True)
    return ConstraintSystem(np.column_stack(columns), tuple(pairs), False)


def binary_positive_constraint(dataset: TabularDataset) -> np.ndarray:
    """Single-column weights for the positive-class group-mean difference."""
    y = dataset.outcome
    s = dataset.sensitive
    codes = np.unique(s)
    if codes.size != 2:
        raise FermError("binary training needs exactly two sensitive groups")
    col = np.zeros(dataset.n_records)
    for code, sign in zip(codes, (1.0, -1.0)):
        mask = (s == code) & (y > 0)
        if not mask.any():
            raise FermError(f"group {code!r} has no positive-labeled records")
        col[mask] = sign / mask.sum()
    return col[:, None]


def project_l1_ball(z: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the L1 ball of the given radius."""
    if radius < 0:
        raise FermError("radius must be >= 0")
    a = np.abs(z)
    if a.sum() <= radius:
        return z.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u * np.arange(1, z.size + 1) > css - radius)[0][-1]
    tau = (css[k] - radius) / (k + 1.0)
    return np.sign(z) * np.maximum(a - tau, 0.0)


def _null_basis(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis of {w : M^T w = 0} for a p x m matrix M."""
    p, m = M.shape
    if m == 0:
        return np.eye(p)
    u, s, _ = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > s[0] * max(p, m) * np.finfo(float).eps)) if s.size else 0
    return u[:, rank:]


def _feasibility_correction(beta: np.ndarray, M: np.ndarray, eps: float) -> np.ndarray:
    """Smallest-norm shift of beta making ||M^T beta||_1 <= eps exact."""
    z = M.T @ beta
    if np.abs(z).sum() <= eps:
        return beta
    target = project_l1_ball(z, eps)
    shift, *_ = np.linalg.lstsq(M.T, z - target, rcond=None)
    return beta - shift


class _Objective:
    """Sum-loss objective J(beta) = sum_n loss((D beta)_n, y_n) + beta^T R beta."""

    def __init__(self, D, y, R, loss):
        self.D, self.y, self.R, self.loss = D, y, R, loss

    def value(self, beta: np.ndarray) -> float:
        f = self.D @ beta
        if self.loss == "squared":
            data = np.sum((f - self.y) ** 2)
        elif self.loss == "hinge":
            data = np.sum(np.maximum(0.0, 1.0 - self.y * f))
        else:
            m = -self.y * f
            data = np.sum(np.logaddexp(0.0, m))
        return float(data + beta @ self.R @ beta)

    def subgradient(self, beta: np.ndarray) -> np.ndarray:
        f = self.D @ beta
        if self.loss == "squared":
            g = 2.0 * self.D.T @ (f - self.y)
        elif self.loss == "hinge":
            active = (self.y * f) < 1.0
            g = -self.D.T @ (self.y * active)
        else:
            margins = np.clip(self.y * f, -500.0, 500.0)
            g = self.D.T @ (-self.y / (1.0 + np.exp(margins)))
        return g + 2.0 * self.R @ beta


def _solve_quadratic(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(P, q)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(P, q, rcond=None)[0]


def _solve_squared_equality(P, q, E, e) -> np.ndarray:
    """KKT solve of min b^T P b - 2 q^T b subject to E^T b = e."""
    p = P.shape[0]
    m = E.shape[1]
    if m == 0:
        return _solve_quadratic(P, q)
    kkt = np.block([[2.0 * P, E], [E.T, np.zeros((m, m))]])
    rhs = np.concatenate([2.0 * q, e])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:p]


def _polish_squared(P, q, M, eps, beta, objective) -> np.ndarray:
    """Refine a squared-loss iterate by solving the active-face KKT system."""
    z = M.T @ beta
    scale = max(np.abs(z).max(initial=0.0), eps, 1.0)
    pinned = np.abs(z) <= 1e-7 * scale
    sigma = np.sign(z)
    cols = [M[:, j] for j in range(M.shape[1]) if pinned[j]]
    face = M[:, ~pinned] @ sigma[~pinned]
    E = np.column_stack(cols + [face]) if cols else face[:, None]
    e = np.concatenate([np.zeros(len(cols)), [eps]])
    candidate = _solve_squared_equality(P, q, E, e)
    zc = M.T @ candidate
    ok_signs = np.all(np.sign(zc[~pinned]) == sigma[~pinned])
    feasible = np.abs(zc).sum() <= eps * (1 + 1e-9) + 1e-12
    if ok_signs and feasible and objective.value(candidate) <= objective.value(beta) + 1e-9:
        return candidate
    return beta


def _solve_constrained(
    D: np.ndarray,
    y: np.ndarray,
    R: np.ndarray,
    M: np.ndarray,
    loss: str,
    epsilon: float | None,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Minimize the sum-loss ridge objective under ||M^T beta||_1 <= epsilon.

    epsilon=None drops the constraint; epsilon=0 eliminates it exactly via
    an orthonormal null-space basis.  For a positive budget the squared
    loss runs projected gradient with a final active-face refinement, and
    the hinge/logistic losses run a fixed-budget (sub)gradient scheme with
    averaged iterates; every returned iterate is made exactly feasible.
    """
    if loss not in LOSSES:
        raise FermError(f"unknown loss {loss!r}")
    obj = _Objective(D, y, R, loss)
    p = D.shape[1]
    unconstrained = epsilon is None or M.shape[1] == 0

    def fit_quadratic(basis: np.ndarray | None) -> np.ndarray:
        P = D.T @ D + R
        q = D.T @ y
        if basis is None:
            return _solve_quadratic(P, q)
        if basis.shape[1] == 0:
            return np.zeros(p)
        return basis @ _solve_quadratic(basis.T @ P @ basis, basis.T @ q)

    def fit_iterative(basis: np.ndarray | None, project) -> np.ndarray:
        dim = p if basis is None else basis.shape[1]
        if dim == 0:
            return np.zeros(p)
        v = np.zeros(dim)
        lift = (lambda v: v) if basis is None else (lambda v: basis @ v)
        lower = (lambda g: g) if basis is None else (lambda g: basis.T @ g)
        n = D.shape[0]
        if loss == "logistic":
            # smooth: fixed-step gradient descent
            lip = np.linalg.norm(D, 2) ** 2 / 4.0 + 2.0 * np.linalg.norm(R, 2)
            step = 1.0 / lip
            for _ in range(max_iter):
                v = v - step * lower(obj.subgradient(lift(v)))
                v = project(v)
            return lift(project(v))
        # hinge: strongly convex subgradient with averaged tail iterates
        mu = 2.0 * np.linalg.norm(R, 2) / max(n, 1)
        if mu <= 0:
            raise FermError("hinge loss needs a positive ridge penalty")
        avg = np.zeros(dim)
        kept = 0
        for it in range(max_iter):
            g = lower(obj.subgradient(lift(v))) / n
            v = project(v - g / (mu * (it + 1)))
            if it >= max_iter // 2:
                avg += v
                kept += 1
        v = avg / max(kept, 1)
        return lift(project(v))

    if unconstrained:
        if loss == "squared":
            beta = fit_quadratic(None)
        else:
            beta = fit_iterative(None, lambda v: v)
    elif epsilon == 0.0:
        basis = _null_basis(M)
        if loss == "squared":
            beta = fit_quadratic(basis)
        else:
            beta = fit_iterative(basis, lambda v: v)
    else:
        if epsilon < 0:
            raise FermError("epsilon must be >= 0")
        gram = M.T @ M
        gram_inv = np.linalg.pinv(gram)

        def project(b: np.ndarray) -> np.ndarray:
            z = M.T @ b
            l1 = np.abs(z).sum()
            if l1 <= epsilon:
                return b
            return b - M @ (gram_inv @ (z - project_l1_ball(z, epsilon)))

        if loss == "squared":
            P = D.T @ D + R
            q = D.T @ y
            beta = _solve_quadratic(P, q)
            if np.abs(M.T @ beta).sum() > epsilon:
                lip = 2.0 * np.linalg.norm(P, 2)
                step = 1.0 / lip
                beta = project(beta)
                prev = obj.value(beta)
                for it in range(max_iter):
                    beta = project(beta - step * (2.0 * (P @ beta) - 2.0 * q))
                    if it % 25 == 24:
                        cur = obj.value(beta)
                        if abs(prev - cur) <= 1e-13 * (1.0 + abs(cur)):
                            break
                        prev = cur
                beta = _polish_squared(P, q, M, epsilon, beta, obj)
        else:
            beta = fit_iterative(None, project)
        beta = _feasibility_correction(beta, M, epsilon)

    if not np.all(np.isfinite(beta)):
        raise SolverError(
            "solver diverged",
            last_iterate=beta,
            residuals=None if unconstrained else M.T @ beta,
        )
    if not unconstrained and epsilon is not None:
        achieved = float(np.abs(M.T @ beta).sum())
        if achieved > epsilon + 1e-6:
            raise SolverError(
                f"constraint violated after {max_iter} iterations: {achieved} > {epsilon}",
                last_iterate=beta,
                residuals=M.T @ beta,
            )
    return beta


@dataclass(frozen=True)
class FairERMProblem:
    """Training configuration for the cell-constrained ridge problem."""

    loss: str = "squared"
    lam: float = 1.0
    epsilon: float | None = 0.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    include_sensitive: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise FermError(f"unknown loss {self.loss!r}")
        if self.lam <= 0:
            raise FermError("lam must be > 0")
        if self.epsilon is not None and self.epsilon < 0:
            raise FermError("epsilon must be >= 0 or None")


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Trained model: primal weights (linear) or dual coefficients (rbf)."""

    kernel: KernelSpec
    include_sensitive: bool
    coef: np.ndarray | None
    dual_coef: np.ndarray | None
    training_inputs: np.ndarray | None
    constraint_report: Mapping[str, object]
    objective_value: float

    def decision_function(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if self.kernel.kind == "linear" and self.coef is not None:
            return Z @ self.coef
        return kernel_matrix(self.kernel, Z, self.training_inputs) @ self.dual_coef

    def predict_dataset(self, dataset: TabularDataset) -> np.ndarray:
        return self.decision_function(design_matrix(dataset, self.include_sensitive))


def _report(M, beta, epsilon, pairs, degenerate) -> dict:
    values = M.T @ beta
    return {
        "epsilon": epsilon,
        "achieved_l1": float(np.abs(values).sum()),
        "constraint_values": [float(v) for v in values],
        "pairs": [list(p) for p in pairs],
        "degenerate": bool(degenerate),
    }


def _train(Z, y, C, pairs, degenerate, loss, lam, epsilon, kernel, include_sensitive, max_iter):
    if kernel.kind == "linear":
        D, R, M = Z, lam * np.eye(Z.shape[1]), Z.T @ C
    else:
        K = kernel_matrix(kernel, Z)
        D, R, M = K, lam * K, K @ C
    eff_epsilon = None if degenerate else epsilon
    beta = _solve_constrained(D, y, R, M, loss, eff_epsilon, max_iter=max_iter)
    obj = _Objective(D, y, R, loss)
    return KernelModel(
        kernel=kernel,
        include_sensitive=include_sensitive,
        coef=beta if kernel.kind == "linear" else None,
        dual_coef=None if kernel.kind == "linear" else beta,
        training_inputs=None if kernel.kind == "linear" else Z,
        constraint_report=_report(M, beta, epsilon, pairs, degenerate),
        objective_value=obj.value(beta),
    )


def train_gferm(
    problem: FairERMProblem,
    dataset: TabularDataset,
    grid: DiscretizationGrid,
    max_iter: int = 10_000,
) -> KernelModel:
    """Train under the full per-bin cell-difference constraint system.

    Training is deterministic: the solvers use closed forms or fixed
    zero-initialized iterations, so no seed is consumed.
    """
    Z = design_matrix(dataset, problem.include_sensitive)
    cs = build_constraints(dataset, grid)
    return _train(
        Z, dataset.outcome, cs.cell_weights, cs.pairs, cs.degenerate,
        problem.loss, problem.lam, problem.epsilon, problem.kernel,
        problem.include_sensitive, max_iter,
    )


def train_ferm_binary(
    dataset: TabularDataset,
    loss: str = "squared",
    lam: float = 1.0,
    epsilon: float | None = 0.0,
    kernel: KernelSpec | None = None,
    include_sensitive: bool = False,
    max_iter: int = 10_000,
) -> KernelModel:
    """Single-constraint training for binary outcome and binary group.

    The constraint bounds the difference of mean scores over the
    positive-labeled records of the two groups, which is the linear-loss
    risk gap on the positive class up to a factor -1/2 (reported).
    """
    if dataset.outcome_kind != "classification":
        raise FermError("binary training needs a classification outcome")
    kernel = kernel or KernelSpec()
    Z = design_matrix(dataset, include_sensitive)
    C = binary_positive_constraint(dataset)
    model = _train(
        Z, dataset.outcome, C, ((0, 0, 1),), False,
        loss, lam, epsilon, kernel, include_sensitive, max_iter,
    )
    gap = model.constraint_report["constraint_values"][0]
    report = dict(model.constraint_report)
    report["positive_class_linear_loss_gap"] = -0.5 * gap
    return KernelModel(
        kernel=model.kernel,
        include_sensitive=model.include_sensitive,
        coef=model.coef,
        dual_coef=model.dual_coef,
        training_inputs=model.training_inputs,
        constraint_report=report,
        objective_value=model.objective_value,
    )


@dataclass(frozen=True, eq=False)
class LinearFairMap:
    """Feature elimination that zeroes a linear group-mean constraint.

    Solving <w, u> = 0 for the component with the largest |u_i| (lowest
    index on ties) rewrites the model on d-1 features
    x_j - x_i * (u_j / u_i); the transformed constraint vector is exactly
    zero.  A zero u yields the identity map, flagged.
    """

    pivot: int | None
    ratios: np.ndarray | None

    @property
    def identity(self) -> bool:
        return self.pivot is None

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.identity:
            return X.copy()
        keep = [j for j in range(X.shape[1]) if j != self.pivot]
        return X[:, keep] - np.outer(X[:, self.pivot], self.ratios[keep])


def fair_linear_transform(X: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, LinearFairMap]:
    u = np.asarray(u, dtype=float)
    if np.all(u == 0.0):
        fmap = LinearFairMap(pivot=None, ratios=None)
        return fmap.apply(X), fmap
    pivot = int(np.argmax(np.abs(u)))  # argmax returns the lowest index on ties
    fmap = LinearFairMap(pivot=pivot, ratios=u / u[pivot])
    return fmap.apply(X), fmap


def surrogate_fairness_gap(
    model: KernelModel,
    dataset: TabularDataset,
    grid: DiscretizationGrid,
) -> tuple[float, tuple[tuple[int, int], ...]]:
    """Total gap between hard-count cell parity and its linear-loss surrogate.

    Sums |P_hat difference| - |linear-loss difference| over ordered pairs
    of non-empty cells; a small value certifies that the convex surrogate
    constraint tracks the hard fairness measure on this data.
    """
    scores = ScoreSet(
        scores=model.predict_dataset(dataset),
        group=dataset.sensitive,
        outcome=dataset.outcome,
    )
    try:
        hard = general_fairness_gap(scores, grid)
        linear = loss_general_fairness_gap(
            scores, grid, loss="linear", outcome_kind=dataset.outcome_kind
        )
    except MetricError as exc:
        raise FermError(str(exc)) from exc
    value = (hard.value - linear.value) * hard.included_pairs
    return float(value), hard.skipped_cells

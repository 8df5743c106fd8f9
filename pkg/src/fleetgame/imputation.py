"""Completion of partially observed matrices.

Four interchangeable methods fill the missing cells of a data matrix
(rows = observations, columns = variables): low-rank matrix
factorization fit by alternating least squares, chained linear
regressions (one cycle regresses each incomplete column on all the
others), an iterative random-forest imputer, and a supervised lookup
that copies missing cells from a reference matrix. A fifth name,
``none``, zero-fills for ablations, and ``gain`` is reserved but not
implemented (it would need adversarial network training).

Every method leaves observed cells bit-identical and returns a matrix
with no missing cells; the iterative methods are deterministic under a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor

__all__ = [
    "ImputationProblem",
    "ImputerConfig",
    "ImputationResult",
    "impute",
    "impute_mf",
    "impute_mice",
    "impute_missforest",
    "impute_supervised",
    "IMPUTER_METHODS",
]

IMPUTER_METHODS = ("mf", "mice", "missforest", "supervised", "none", "gain")


@dataclass
class ImputationProblem:
    """A matrix with holes.

    ``observed`` is True where ``values`` carries a real entry. Feature
    columns are always-observed covariates (e.g. coordinates of the
    observation); the remaining target columns are the variables being
    completed. Regression-style imputers condition each target column on
    every other column, features included.
    """

    values: np.ndarray
    observed: np.ndarray
    feature_columns: tuple[int, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise ValueError("values and observed mask must share a shape")

    @property
    def target_columns(self) -> tuple[int, ...]:
        return tuple(
            c for c in range(self.values.shape[1]) if c not in self.feature_columns
        )


@dataclass
class ImputerConfig:
    method: str = "missforest"
    seed: int = 0
    # matrix factorization
    rank: int = 5
    regularization: float = 1e-3
    mf_iterations: int = 50
    # chained regressions
    cycles: int = 5
    # iterative random forest
    trees: int = 50
    max_depth: int = 12
    min_leaf: int = 5
    max_iterations: int = 10
    tolerance: float = 0.0
    n_jobs: int = 1
    # supervised: matrix aligned with the problem, or None to let the
    # caller wire one in (the solver passes its running-average policy)
    reference: np.ndarray | None = None


@dataclass
class ImputationResult:
    values: np.ndarray
    iterations: int = 0
    ridge_fallback: bool = False


def impute(problem: ImputationProblem, config: ImputerConfig) -> ImputationResult:
    """Dispatch on ``config.method``; the result has no missing cells."""
    method = config.method
    if method == "mf":
        return impute_mf(problem, config)
    if method == "mice":
        return impute_mice(problem, config)
    if method == "missforest":
        return impute_missforest(problem, config)
    if method == "supervised":
        return impute_supervised(problem, config)
    if method == "none":
        return ImputationResult(np.where(problem.observed, problem.values, 0.0))
    if method == "gain":
        raise NotImplementedError(
            "the 'gain' method name is reserved; adversarial-network imputation "
            "is not implemented"
        )
    raise ValueError(f"unknown imputation method {method!r}")


def _column_means(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Mean of the observed part per column; 0 for fully missing columns."""
    counts = observed.sum(axis=0)
    sums = np.where(observed, values, 0.0).sum(axis=0)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def impute_mf(problem: ImputationProblem, config: ImputerConfig) -> ImputationResult:
    """Low-rank completion of the target columns by alternating least squares.

    Minimizes the squared error on observed cells plus a Frobenius
    penalty ``regularization`` on both factors. Feature columns are left
    out of the factorization (they are coordinates, not measurements of
    the same quantity) and returned untouched.
    """
    targets = list(problem.target_columns)
    X = problem.values[:, targets]
    O = problem.observed[:, targets]
    if not O.any():
        raise ValueError("matrix factorization needs at least one observed cell")
    n_rows, n_cols = X.shape
    r = config.rank
    if r < 1 or r > min(n_rows, n_cols):
        raise ValueError(f"rank must be in [1, {min(n_rows, n_cols)}], got {r}")

    rng = np.random.default_rng(config.seed)
    scale = np.sqrt(max(np.abs(X[O]).mean(), 1e-12) / r)
    U = rng.normal(size=(n_rows, r)) * scale
    V = rng.normal(size=(n_cols, r)) * scale
    Xz = np.where(O, X, 0.0)
    lam = config.regularization
    eye = np.eye(r)

    def solve_side(fixed, obs, data):
        # rows of the free factor solve independent ridge systems over
        # their observed counterpart rows of the fixed factor
        gram = np.einsum("jr,ij,js->irs", fixed, obs, fixed) + lam * eye
        rhs = data @ fixed
        empty = ~obs.any(axis=1)
        if empty.any():
            gram[empty] = eye  # no observations: pin the factor at zero
            rhs[empty] = 0.0
        if lam == 0.0:
            return np.stack([np.linalg.lstsq(g, b, rcond=None)[0]
                             for g, b in zip(gram, rhs)])
        return np.linalg.solve(gram, rhs[..., None])[..., 0]

    for _ in range(config.mf_iterations):
        U = solve_side(V, O, Xz)
        V = solve_side(U, O.T, Xz.T)

    completed = problem.values.copy()
    completed[:, targets] = np.where(O, X, U @ V.T)
    return ImputationResult(completed, iterations=config.mf_iterations)


def _regress_column(
    X: np.ndarray, rows: np.ndarray, col: int, predict_rows: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Least-squares fit of one column on all others; ridge on rank deficiency."""
    others = [c for c in range(X.shape[1]) if c != col]
    design = np.column_stack([np.ones(rows.sum()), X[np.ix_(rows, others)]])
    y = X[rows, col]
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    fallback = rank < design.shape[1]
    if fallback:
        gram = design.T @ design + 1e-8 * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ y)
    pred_design = np.column_stack(
        [np.ones(predict_rows.sum()), X[np.ix_(predict_rows, others)]]
    )
    return pred_design @ coef, fallback


def impute_mice(problem: ImputationProblem, config: ImputerConfig) -> ImputationResult:
    """Chained linear regressions.

    Missing cells start at their column means. Each cycle revisits every
    incomplete column: its placeholders go back to missing, the observed
    entries are regressed on all other columns (current imputations
    included), and the predictions replace the placeholders. A singular
    design falls back to a lightly ridged solve and flags the result.
    """
    values = problem.values.copy()
    observed = problem.observed
    missing_cols = [c for c in problem.target_columns if not observed[:, c].all()]
    means = _column_means(values, observed)
    values = np.where(observed, values, means[None, :])
    used_ridge = False

    if values.shape[1] >= 2:
        for _ in range(config.cycles):
            for col in missing_cols:
                obs_rows = observed[:, col]
                mis_rows = ~obs_rows
                if not obs_rows.any():
                    continue  # nothing to fit; column keeps its initialization
                pred, fallback = _regress_column(values, obs_rows, col, mis_rows)
                used_ridge = used_ridge or fallback
                values[mis_rows, col] = pred

    return ImputationResult(values, iterations=config.cycles, ridge_fallback=used_ridge)


def impute_missforest(
    problem: ImputationProblem, config: ImputerConfig
) -> ImputationResult:
    """Iterative random-forest imputation.

    Columns are revisited in order of increasing missingness; each gets a
    fresh forest fit on its observed rows against all other columns and
    predicts its missing rows. Iteration stops when the summed squared
    change of the imputed cells first increases (the previous iterate is
    returned), when the change drops to ``tolerance``, or at
    ``max_iterations``.
    """
    values = problem.values.copy()
    observed = problem.observed
    missing_cols = [c for c in problem.target_columns if not observed[:, c].all()]
    means = _column_means(values, observed)
    values = np.where(observed, values, means[None, :])
    if not missing_cols or values.shape[1] < 2:
        return ImputationResult(values, iterations=0)
    order = sorted(missing_cols, key=lambda c: ((~observed[:, c]).sum(), c))

    prev_delta = np.inf
    prev_values = values.copy()
    iterations = 0
    for sweep in range(config.max_iterations):
        before = values.copy()
        for col in order:
            obs_rows = observed[:, col]
            mis_rows = ~obs_rows
            if not obs_rows.any():
                continue
            others = [c for c in range(values.shape[1]) if c != col]
            forest = RandomForestRegressor(
                n_estimators=config.trees,
                max_depth=config.max_depth,
                min_samples_leaf=config.min_leaf,
                random_state=config.seed + 7919 * sweep + col,
                n_jobs=config.n_jobs,
            )
            forest.fit(values[np.ix_(obs_rows, others)], values[obs_rows, col])
            values[mis_rows, col] = forest.predict(values[np.ix_(mis_rows, others)])
        iterations = sweep + 1
        delta = float(((values - before)[~observed] ** 2).sum())
        if delta > prev_delta:
            return ImputationResult(prev_values, iterations=iterations)
        prev_values = values.copy()
        prev_delta = delta
        if delta <= config.tolerance:
            break
    return ImputationResult(values, iterations=iterations)


def impute_supervised(
    problem: ImputationProblem, config: ImputerConfig
) -> ImputationResult:
    """Copy missing cells from a reference matrix aligned with the problem.

    Orders of magnitude faster than the model-based imputers since there
    is nothing to fit. The reference must cover every missing cell.
    """
    if config.reference is None:
        raise ValueError("supervised imputation needs config.reference")
    reference = np.asarray(config.reference, dtype=float)
    if reference.shape != problem.values.shape:
        raise ValueError(
            f"reference shape {reference.shape} does not match the "
            f"problem shape {problem.values.shape}"
        )
    needed = ~problem.observed
    if np.isnan(reference[needed]).any():
        raise ValueError("reference is missing values at cells it must supply")
    values = problem.values.copy()
    # column order mirrors the iterative imputers (ascending missingness);
    # with a fixed reference the order cannot change the outcome
    order = sorted(problem.target_columns, key=lambda c: ((~problem.observed[:, c]).sum(), c))
    for col in order:
        mis = ~problem.observed[:, col]
        values[mis, col] = reference[mis, col]
    remaining = ~problem.observed.copy()
    remaining[:, list(problem.target_columns)] = False
    values[remaining] = reference[remaining]
    return ImputationResult(values, iterations=1)

"""
Entropic optimal-transport matching of features to prototypes.

The solver runs Sinkhorn-Knopp iterations in the log domain, so small
temperatures (kappa = 0.05 and below) never overflow the exponential kernel.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import numpy as np
from scipy.special import logsumexp
from proto_miner import settings
from proto_miner.utils import MarginalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransportPlan:
    """
    Result of a Sinkhorn-Knopp run.

    Attributes
    ----------
    matrix : np.ndarray
        M x O non-negative matching matrix.
    row_marginals, col_marginals : np.ndarray
        Target marginals the plan was scaled to.
    iterations_run : int
        Number of row/column passes performed.
    converged_residual : float
        Largest absolute violation of either marginal.
    """

    matrix: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    iterations_run: int
    converged_residual: float


def _check_marginal(marginal, size: int, name: str) -> np.ndarray:
    marginal = np.asarray(marginal, dtype=np.float64)
    if marginal.shape != (size,):
        raise MarginalError(f"{name} must have length {size}, got shape "
                            f"{marginal.shape}")
    if np.any(marginal < 0) or not np.all(np.isfinite(marginal)):
        raise MarginalError(f"{name} must be non-negative and finite")
    if abs(marginal.sum() - 1.0) > settings.MARGINAL_TOL:
        raise MarginalError(f"{name} must sum to 1, got {marginal.sum()!r}")
    return marginal


def marginal_residual(matrix: np.ndarray, row_marginals: np.ndarray,
                      col_marginals: np.ndarray) -> float:
    """
    Largest absolute deviation of the row or column sums from their targets.
    """
    rows = np.abs(matrix.sum(axis=1) - row_marginals)
    cols = np.abs(matrix.sum(axis=0) - col_marginals)
    return float(max(rows.max(initial=0.0), cols.max(initial=0.0)))


def sinkhorn_match(similarity: np.ndarray, kappa: float,
                   steps: int = settings.SINKHORN_STEPS,
                   row_marginals: np.ndarray | None = None,
                   col_marginals: np.ndarray | None = None) -> TransportPlan:
    """
    Computes ``diag(u) exp(similarity / kappa) diag(v)`` by Sinkhorn-Knopp.

    The kernel exponentiates the similarity directly: larger similarities
    receive more mass. Each step is one row pass followed by one column pass,
    so column sums are exact after the last step and the reported residual
    measures the remaining row violation.

    Parameters
    ----------
    similarity : np.ndarray
        M x O similarity matrix, typically cosine similarities in [-1, 1].
    kappa : float
        Temperature, strictly positive.
    steps : int, optional
        Number of passes, by default `settings.SINKHORN_STEPS`.
    row_marginals : np.ndarray, optional
        Length-M simplex vector, uniform when omitted.
    col_marginals : np.ndarray, optional
        Length-O simplex vector, uniform when omitted.

    Returns
    -------
    TransportPlan
        The scaled plan and its residual.

    Raises
    ------
    MarginalError
        On an empty or non-finite similarity, or non-simplex marginals.
    ValueError
        On a non-positive temperature or step count.

    Example
    -------
    >>> plan = sinkhorn_match(np.zeros((2, 2)), kappa=0.05)
    >>> plan.matrix
    array([[0.25, 0.25],
           [0.25, 0.25]])
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    logger.debug(f"Sinkhorn match on {similarity.shape} with kappa={kappa}, "
                 f"steps={steps}")
    if similarity.ndim != 2 or 0 in similarity.shape:
        raise MarginalError(f"similarity must be a non-empty matrix, got "
                            f"shape {similarity.shape}")
    if not np.all(np.isfinite(similarity)):
        raise MarginalError("similarity must be finite")
    if not kappa > 0:
        raise ValueError("temperature must be positive")
    if steps < 1:
        raise ValueError("sinkhorn steps must be positive")
    n_rows, n_cols = similarity.shape
    if row_marginals is None:
        row_marginals = np.full(n_rows, 1.0 / n_rows)
    if col_marginals is None:
        col_marginals = np.full(n_cols, 1.0 / n_cols)
    row_marginals = _check_marginal(row_marginals, n_rows, "row_marginals")
    col_marginals = _check_marginal(col_marginals, n_cols, "col_marginals")

    log_kernel = similarity / kappa
    with np.errstate(divide="ignore"):
        log_rows = np.log(row_marginals)
        log_cols = np.log(col_marginals)
    log_u = np.zeros(n_rows)
    log_v = np.zeros(n_cols)
    for _ in range(steps):
        log_u = log_rows - logsumexp(log_kernel + log_v[None, :], axis=1)
        log_v = log_cols - logsumexp(log_kernel + log_u[:, None], axis=0)
    matrix = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
    residual = marginal_residual(matrix, row_marginals, col_marginals)
    logger.debug(f"Sinkhorn residual after {steps} steps: {residual}")
    return TransportPlan(matrix=matrix, row_marginals=row_marginals,
                         col_marginals=col_marginals, iterations_run=steps,
                         converged_residual=residual)


def assign_rows(plan: TransportPlan) -> np.ndarray:
    """
    Maps every row of a plan to its argmax column.

    Ties go to the lowest column index.

    Raises
    ------
    MarginalError
        If the plan holds negative or non-finite entries.
    """
    matrix = np.asarray(plan.matrix)
    if matrix.ndim != 2 or not np.all(np.isfinite(matrix)) \
            or np.any(matrix < 0):
        raise MarginalError("transport plan must be a finite non-negative "
                            "matrix")
    return np.argmax(matrix, axis=1)

"""Entropic optimal transport between object prototypes and patches.

Solves the uniform-marginal entropic transport problem with Sinkhorn-Knopp
scaling. The solver works in the log domain, so ``exp(scores / epsilon)`` is
never materialized and small epsilons cannot overflow. A direct-domain
variant is kept for cross-checking on well-conditioned inputs.

Example:
    >>> cfg = SinkhornConfig(epsilon=0.05)
    >>> plan = sinkhorn(torch.tensor([[10.0, 0.0], [0.0, 10.0]], dtype=torch.float64), cfg)
    >>> plan.M.round(decimals=6)
    tensor([[0.5000, 0.0000],
            [0.0000, 0.5000]], dtype=torch.float64)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List

import torch

from .utils import VidsslError

logger = logging.getLogger(__name__)


class TransportError(VidsslError):
    """Invalid transport input (non-finite scores, bad shape or configuration)."""
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    """Sinkhorn solver settings.

    Attributes:
        epsilon: Entropic coefficient (> 0)
        tolerance: Maximum allowed marginal deviation
        max_iterations: Iteration cap
    """
    epsilon: float = 0.05
    tolerance: float = 1e-6
    max_iterations: int = 100

    def __post_init__(self):
        if not self.epsilon > 0:
            raise TransportError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.tolerance > 0:
            raise TransportError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise TransportError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class TransportPlan:
    """Result of a Sinkhorn solve.

    Attributes:
        M: k × n nonnegative plan
        iterations_used: Number of scaling iterations performed
        marginal_error: Max deviation of row sums from 1/k and column sums from 1/n
        converged: Whether marginal_error reached the tolerance
        l1_history: L1 deviation of the row sums after each iteration
    """
    M: torch.Tensor
    iterations_used: int
    marginal_error: float
    converged: bool
    l1_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.M.shape[0]

    @property
    def n(self) -> int:
        return self.M.shape[1]


def marginal_error(M: torch.Tensor) -> float:
    """Max over |row_sum - 1/k| and |col_sum - 1/n|.

    Examples:
        >>> marginal_error(torch.full((2, 3), 1 / 6))
        0.0
    """
    k, n = M.shape
    row_dev = (M.sum(dim=1) - 1.0 / k).abs().max()
    col_dev = (M.sum(dim=0) - 1.0 / n).abs().max()
    return float(torch.maximum(row_dev, col_dev))


def _check_scores(scores) -> torch.Tensor:
    scores = torch.as_tensor(scores)
    if not scores.is_floating_point():
        scores = scores.to(torch.float64)
    if scores.dim() != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise TransportError(f"Scores must be a non-empty k×n matrix, got shape {tuple(scores.shape)}")
    if not torch.isfinite(scores).all():
        raise TransportError("Scores contain non-finite values")
    return scores


def sinkhorn(scores, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp with uniform marginals.

    Computes M = diag(u)·exp(scores/ε)·diag(v) with row sums 1/k and
    column sums 1/n. Each iteration rescales rows, then columns; after the
    column step the column marginals are exact, so the reported error is
    the row deviation.

    Args:
        scores: k × n score matrix (tensor or array-like). The computation
            runs in the tensor's dtype; pass float64 for tight tolerances.
        cfg: Solver settings.

    Returns:
        TransportPlan. If the tolerance is not met within ``max_iterations``
        the plan is still returned with ``converged=False``.

    Raises:
        TransportError: If scores are non-finite or not a non-empty matrix.
    """
    scores = _check_scores(scores)
    k, n = scores.shape
    log_K = scores / cfg.epsilon
    log_K = log_K - log_K.max()
    log_r = torch.full((k,), -math.log(k), dtype=scores.dtype)
    log_c = torch.full((n,), -math.log(n), dtype=scores.dtype)
    log_u = torch.zeros(k, dtype=scores.dtype)
    log_v = torch.zeros(n, dtype=scores.dtype)

    history = []
    error = float("inf")
    iterations = 0
    M = torch.exp(log_K)
    for iterations in range(1, cfg.max_iterations + 1):
        log_u = log_r - torch.logsumexp(log_K + log_v[None, :], dim=1)
        log_v = log_c - torch.logsumexp(log_K + log_u[:, None], dim=0)
        M = torch.exp(log_u[:, None] + log_K + log_v[None, :])
        row_dev = (M.sum(dim=1) - 1.0 / k).abs()
        history.append(float(row_dev.sum()))
        error = marginal_error(M)
        if error <= cfg.tolerance:
            break

    converged = error <= cfg.tolerance
    if converged:
        logger.debug(f"Sinkhorn converged in {iterations} iterations (error {error:.2e})")
    else:
        logger.warning(
            f"Sinkhorn did not converge in {cfg.max_iterations} iterations "
            f"(error {error:.2e} > tolerance {cfg.tolerance:.0e})"
        )
    return TransportPlan(M=M, iterations_used=iterations, marginal_error=error,
                         converged=converged, l1_history=history)


def sinkhorn_direct(scores, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Direct-domain Sinkhorn-Knopp (u ← r / Kv, v ← c / Kᵀu).

    Only usable while exp(scores/ε) and its scalings stay finite.

    Raises:
        TransportError: On non-finite input or when the kernel or scalings overflow.
    """
    scores = _check_scores(scores)
    k, n = scores.shape
    K = torch.exp(scores / cfg.epsilon)
    if not torch.isfinite(K).all() or (K == 0).any():
        raise TransportError(f"exp(scores / {cfg.epsilon}) overflows; use the log-domain solver")
    r = torch.full((k,), 1.0 / k, dtype=scores.dtype)
    c = torch.full((n,), 1.0 / n, dtype=scores.dtype)
    v = torch.ones(n, dtype=scores.dtype)

    history = []
    error = float("inf")
    iterations = 0
    M = K
    for iterations in range(1, cfg.max_iterations + 1):
        u = r / (K @ v)
        v = c / (K.T @ u)
        if not (torch.isfinite(u).all() and torch.isfinite(v).all()):
            raise TransportError(f"Scaling vectors overflowed at iteration {iterations}")
        M = u[:, None] * K * v[None, :]
        history.append(float((M.sum(dim=1) - r).abs().sum()))
        error = marginal_error(M)
        if error <= cfg.tolerance:
            break
    return TransportPlan(M=M, iterations_used=iterations, marginal_error=error,
                         converged=error <= cfg.tolerance, l1_history=history)

"""Tests for Sinkhorn-Knopp transport."""

import logging

import numpy as np
import pytest
import torch

from vidssl.transport import (
    SinkhornConfig,
    TransportError,
    marginal_error,
    sinkhorn,
    sinkhorn_direct,
)


def naive_sinkhorn(scores: np.ndarray, epsilon: float, iterations: int) -> np.ndarray:
    """Reference scaling loop in float64."""
    k, n = scores.shape
    K = np.exp(scores / epsilon)
    u = np.ones(k)
    v = np.ones(n)
    for _ in range(iterations):
        for i in range(k):
            u[i] = (1.0 / k) / sum(K[i, j] * v[j] for j in range(n))
        for j in range(n):
            v[j] = (1.0 / n) / sum(K[i, j] * u[i] for i in range(k))
    return u[:, None] * K * v[None, :]


@pytest.fixture
def scores():
    generator = torch.Generator().manual_seed(0)
    return torch.rand(3, 16, generator=generator, dtype=torch.float64)


@pytest.mark.unit
@pytest.mark.transport
class TestSinkhornConfig:
    """Test cases for solver settings."""

    @pytest.mark.parametrize("kwargs", [
        {"epsilon": 0.0},
        {"epsilon": -1.0},
        {"tolerance": 0.0},
        {"max_iterations": 0},
    ])
    def test_invalid_settings_rejected(self, kwargs):
        with pytest.raises(TransportError):
            SinkhornConfig(**kwargs)


@pytest.mark.unit
@pytest.mark.transport
class TestSinkhorn:
    """Test cases for the log-domain solver."""

    def test_uniform_scores_give_uniform_plan(self):
        plan = sinkhorn(torch.zeros(3, 8, dtype=torch.float64))
        assert torch.allclose(plan.M, torch.full((3, 8), 1 / 24, dtype=torch.float64))
        assert plan.converged
        assert plan.iterations_used == 1

    def test_marginals_within_tolerance(self, scores):
        plan = sinkhorn(scores, SinkhornConfig(epsilon=0.5, tolerance=1e-9, max_iterations=500))
        assert plan.converged
        assert plan.marginal_error <= 1e-9
        assert torch.allclose(plan.M.sum(dim=1), torch.full((3,), 1 / 3, dtype=torch.float64), atol=1e-9)
        assert torch.allclose(plan.M.sum(dim=0), torch.full((16,), 1 / 16, dtype=torch.float64), atol=1e-12)
        assert (plan.M >= 0).all()
        assert plan.M.sum().item() == pytest.approx(1.0, abs=1e-9)

    def test_matches_naive_loop(self, scores):
        plan = sinkhorn(scores, SinkhornConfig(epsilon=0.5, tolerance=1e-300, max_iterations=20))
        expected = naive_sinkhorn(scores.numpy(), 0.5, 20)
        assert plan.iterations_used == 20
        np.testing.assert_allclose(plan.M.numpy(), expected, rtol=1e-10, atol=1e-14)

    def test_matches_direct_solver(self, scores):
        cfg = SinkhornConfig(epsilon=0.5, tolerance=1e-12, max_iterations=300)
        a, b = sinkhorn(scores, cfg), sinkhorn_direct(scores, cfg)
        assert torch.allclose(a.M, b.M, atol=1e-12)

    def test_small_epsilon_stays_finite(self):
        big = torch.tensor([[100.0, 0.0, 50.0], [0.0, 100.0, 50.0]], dtype=torch.float64)
        plan = sinkhorn(big, SinkhornConfig(epsilon=0.01, max_iterations=200))
        assert torch.isfinite(plan.M).all()
        assert torch.allclose(plan.M.sum(dim=0), torch.full((3,), 1 / 3, dtype=torch.float64), atol=1e-12)

    def test_dominant_diagonal(self):
        plan = sinkhorn(torch.tensor([[10.0, 0.0], [0.0, 10.0]], dtype=torch.float64))
        assert torch.allclose(plan.M, torch.tensor([[0.5, 0.0], [0.0, 0.5]], dtype=torch.float64), atol=1e-9)

    def test_l1_history_non_increasing(self, scores):
        plan = sinkhorn(scores * 4, SinkhornConfig(epsilon=0.3, tolerance=1e-300, max_iterations=60))
        history = plan.l1_history
        assert len(history) == 60
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))

    def test_column_permutation_equivariance(self, scores):
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
        cfg = SinkhornConfig(epsilon=0.5, tolerance=1e-12, max_iterations=300)
        assert torch.allclose(sinkhorn(scores[:, perm], cfg).M, sinkhorn(scores, cfg).M[:, perm], atol=1e-12)

    @pytest.mark.parametrize("shift", [7.3, -250.0])
    def test_constant_shift_leaves_plan_unchanged(self, scores, shift):
        cfg = SinkhornConfig(epsilon=0.5, tolerance=1e-12, max_iterations=300)
        base = sinkhorn(scores, cfg)
        shifted = sinkhorn(scores + shift, cfg)
        torch.testing.assert_close(shifted.M, base.M, rtol=0, atol=1e-9)

    def test_row_and_column_offsets_leave_plan_unchanged(self, scores):
        cfg = SinkhornConfig(epsilon=0.5, tolerance=1e-12, max_iterations=300)
        rows = torch.tensor([[1.5], [-2.0], [0.25]], dtype=torch.float64)
        cols = torch.linspace(-1.0, 1.0, 16, dtype=torch.float64)[None, :]
        torch.testing.assert_close(sinkhorn(scores + rows + cols, cfg).M, sinkhorn(scores, cfg).M,
                                   rtol=0, atol=1e-9)

    def test_huge_epsilon_gives_uniform_plan(self, scores):
        plan = sinkhorn(scores, SinkhornConfig(epsilon=1e6))
        assert plan.converged
        torch.testing.assert_close(plan.M, torch.full((3, 16), 1 / 48, dtype=torch.float64),
                                   rtol=0, atol=1e-8)

    def test_single_object_row(self):
        plan = sinkhorn(torch.rand(1, 5, dtype=torch.float64))
        assert torch.allclose(plan.M, torch.full((1, 5), 0.2, dtype=torch.float64))

    def test_non_convergence_is_reported(self, scores, caplog):
        with caplog.at_level(logging.WARNING, logger="vidssl.transport"):
            plan = sinkhorn(scores, SinkhornConfig(epsilon=0.05, tolerance=1e-12, max_iterations=1))
        assert not plan.converged
        assert plan.iterations_used == 1
        assert plan.marginal_error > 1e-12
        assert "did not converge" in caplog.text

    def test_converged_flag_is_consistent(self, scores):
        plan = sinkhorn(scores, SinkhornConfig(epsilon=0.05))
        assert plan.converged == (plan.marginal_error <= 1e-6)
        assert plan.marginal_error == pytest.approx(marginal_error(plan.M))

    def test_accepts_array_like(self):
        plan = sinkhorn([[0.0, 1.0], [1.0, 0.0]], SinkhornConfig(epsilon=1.0))
        assert plan.M.dtype == torch.float64
        assert (plan.k, plan.n) == (2, 2)

    @pytest.mark.parametrize("bad", [
        torch.tensor([[0.0, float("nan")]]),
        torch.tensor([[float("inf"), 0.0]]),
        torch.zeros(0, 3),
        torch.zeros(3),
    ])
    def test_invalid_scores_rejected(self, bad):
        with pytest.raises(TransportError):
            sinkhorn(bad)


@pytest.mark.unit
@pytest.mark.transport
class TestSinkhornDirect:
    """Test cases for the direct-domain cross-check solver."""

    def test_overflow_raises(self):
        with pytest.raises(TransportError, match="overflows"):
            sinkhorn_direct(torch.tensor([[100.0, 0.0]], dtype=torch.float64), SinkhornConfig(epsilon=0.05))

    def test_marginal_error_of_uniform_plan(self):
        assert marginal_error(torch.full((2, 3), 1 / 6)) == pytest.approx(0.0, abs=1e-7)


def vectorized_sinkhorn(scores: np.ndarray, epsilon: float, iterations: int) -> np.ndarray:
    k, n = scores.shape
    K = np.exp(scores / epsilon)
    v = np.ones(n)
    for _ in range(iterations):
        u = (1.0 / k) / (K @ v)
        v = (1.0 / n) / (K.T @ u)
    return u[:, None] * K * v[None, :]


@pytest.mark.slow
@pytest.mark.transport
class TestSinkhornAtScale:
    """Seeded random instances against the float64 oracle."""

    def test_random_instances(self):
        rng = np.random.default_rng(0)
        cfg = SinkhornConfig(epsilon=0.05, tolerance=1e-6, max_iterations=1000)
        converged = 0
        for _ in range(1000):
            k, n = int(rng.integers(1, 9)), int(rng.integers(1, 65))
            scores = rng.uniform(-1.0, 1.0, size=(k, n))
            plan = sinkhorn(torch.from_numpy(scores), cfg)
            if not plan.converged:
                continue
            converged += 1
            assert plan.marginal_error <= 1e-6
            expected = vectorized_sinkhorn(scores, cfg.epsilon, plan.iterations_used)
            np.testing.assert_allclose(plan.M.numpy(), expected, rtol=0, atol=1e-6)
        assert converged > 0

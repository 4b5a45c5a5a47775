"""Probabilistic objectness over query embeddings.

A multivariate Gaussian (mean + full covariance) is maintained over the
decoder query embeddings that were matched to ground truth, updated by
exponential moving average once per training step. The objectness of an
embedding q is exp(-d2) where d2 is its squared Mahalanobis distance under
the current statistics, so q at the mean scores exactly 1 and the score
decays monotonically with distance.

Training alternates: (1) losses are computed against a frozen snapshot of the
statistics, (2) the statistics are updated from this step's matched
embeddings. No gradient ever flows into the statistics; the objectness loss
(sum of squared distances of matched embeddings) pulls the embeddings toward
the mean instead.

Statistics are kept in float64 regardless of the model dtype: they go through
a Cholesky solve every forward pass and accumulate over thousands of steps.
"""

import torch


class StatsError(RuntimeError):
    """Covariance factorization failed even after regularization."""


class GaussianStats:
    """Running mean/covariance of matched query embeddings with EMA blending."""

    def __init__(self, dim: int, momentum: float = 0.1, cov_reg: float = 1e-6,
                 diagonal: bool = False):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        self.dim = dim
        self.momentum = momentum
        self.cov_reg = cov_reg
        self.diagonal = diagonal
        self.mean = torch.zeros(dim, dtype=torch.float64)
        self.cov = torch.eye(dim, dtype=torch.float64)
        self.step_count = 0
        self._chol = None  # cached factor of (cov + reg * I)

    def _factor(self) -> torch.Tensor:
        if self._chol is None:
            reg = self.cov + self.cov_reg * torch.eye(self.dim, dtype=torch.float64)
            try:
                self._chol = torch.linalg.cholesky(reg)
            except torch.linalg.LinAlgError as exc:
                raise StatsError(f"covariance not positive-definite: {exc}") from None
        return self._chol

    def ema_update(self, matched: torch.Tensor):
        """Blend in the batch mean/covariance of matched embeddings.

        matched: (m, dim). Updates are skipped for m < 2 (batch covariance
        undefined). The first real update overwrites the statistics instead of
        blending with the arbitrary initialization. Biased (1/m) covariance.
        """
        if matched.ndim != 2 or matched.shape[1] != self.dim:
            raise ValueError(f"expected (m, {self.dim}) embeddings, got {tuple(matched.shape)}")
        if matched.shape[0] < 2:
            return self
        x = matched.detach().to(torch.float64)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite embeddings in EMA update")
        batch_mean = x.mean(dim=0)
        centered = x - batch_mean
        if self.diagonal:
            batch_cov = torch.diag((centered * centered).mean(dim=0))
        else:
            batch_cov = centered.T @ centered / x.shape[0]
        if self.step_count == 0:
            self.mean = batch_mean
            self.cov = batch_cov
        else:
            rho = self.momentum
            self.mean = (1.0 - rho) * self.mean + rho * batch_mean
            self.cov = (1.0 - rho) * self.cov + rho * batch_cov
        self.step_count += 1
        self._chol = None
        return self

    def _mahalanobis_sq64(self, q: torch.Tensor) -> torch.Tensor:
        factor = self._factor()
        diff = (q.to(torch.float64) - self.mean).reshape(-1, self.dim)
        sol = torch.cholesky_solve(diff.T, factor)
        d2 = (diff.T * sol).sum(dim=0)
        return d2.reshape(q.shape[:-1])

    def mahalanobis_sq(self, q: torch.Tensor) -> torch.Tensor:
        """(q - mean)^T (cov + reg I)^-1 (q - mean), differentiable wrt q.

        q: (dim,) or (..., dim). Solved via the Cholesky factor, no explicit
        inverse. Returned in q's dtype.
        """
        return self._mahalanobis_sq64(q).to(q.dtype)

    def objectness_score(self, q: torch.Tensor) -> torch.Tensor:
        """exp(-mahalanobis_sq): in (0, 1], equal to 1 iff q is the mean.

        Computed in float64 and floored at the target dtype's smallest normal
        so distant embeddings underflow to a positive value, not to 0.
        """
        score = torch.exp(-self._mahalanobis_sq64(q))
        return score.clamp(min=torch.finfo(q.dtype).tiny).to(q.dtype)

    def objectness_loss(self, matched: torch.Tensor) -> torch.Tensor:
        """Sum of squared Mahalanobis distances of matched embeddings.

        Empty matched set contributes 0. Gradient flows to the embeddings
        only; the statistics are constants here.
        """
        if matched.numel() == 0:
            return matched.new_zeros(())
        return self.mahalanobis_sq(matched).sum()

    def state_tensors(self):
        """Name -> float64 array view for checkpointing."""
        return {"mean": self.mean, "cov": self.cov}

    def load_state(self, mean, cov, step_count: int):
        self.mean = torch.as_tensor(mean, dtype=torch.float64).clone()
        self.cov = torch.as_tensor(cov, dtype=torch.float64).clone()
        self.step_count = int(step_count)
        self._chol = None
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.cov).all()):
            raise ValueError("non-finite Gaussian statistics")
        self._factor()
        return self


def factorized_class_prob(class_probs: torch.Tensor, obj_score: torch.Tensor) -> torch.Tensor:
    """Scale per-class sigmoid probabilities by the objectness probability.

    class_probs: (..., C+1) independent sigmoid outputs; obj_score scalar or
    broadcastable (...,). The argmax over positive entries is unchanged.
    """
    return class_probs * obj_score.unsqueeze(-1)

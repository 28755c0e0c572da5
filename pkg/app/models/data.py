from functools import cached_property
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Dataset(BaseModel):
    """Feature matrix with integer class labels (classification) or real targets (regression)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = Field(default=0, description="0 for real-valued targets")

    @model_validator(mode="after")
    def _check_rows(self) -> "Dataset":
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features and labels disagree on the number of rows")
        if self.num_classes > 0 and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError("labels out of range")
        return self

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def is_classification(self) -> bool:
        return self.num_classes > 0

    def take(self, indices: np.ndarray) -> "Dataset":
        # a row subset keeps every invariant checked at construction
        return Dataset.model_construct(
            features=self.features[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
        )


class PartitionSpec(BaseModel):
    """How a dataset is split across K clients."""

    scheme: Literal["iid", "dirichlet"] = "iid"
    concentration: float = Field(default=0.3, gt=0.0)
    clients: int = Field(default=100, ge=1)
    seed: int = 0
    max_retries: int = Field(default=100, ge=1)


class QuadraticProblem(BaseModel):
    """
    Distributed least squares: client k owns F_k(w) = 1/2 ||A_k w - b_k||^2 / n_k.

    The global objective is the plain average of the client objectives
    (all clients hold the same number of rows). The minimizer and smoothness
    constant are computed in closed form at construction time.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrices: list[np.ndarray]
    targets: list[np.ndarray]
    w_star: np.ndarray
    smoothness: float
    client_smoothness: float
    heterogeneity: float = 0.0
    seed: Optional[int] = None

    @property
    def dim(self) -> int:
        return int(self.w_star.shape[0])

    @property
    def num_clients(self) -> int:
        return len(self.matrices)

    def client_objective(self, k: int, w: np.ndarray) -> float:
        r = self.matrices[k] @ w - self.targets[k]
        return 0.5 * float(r @ r) / r.shape[0]

    def objective(self, w: np.ndarray) -> float:
        return float(np.mean([self.client_objective(k, w) for k in range(self.num_clients)]))

    def gradient(self, w: np.ndarray) -> np.ndarray:
        total = np.zeros_like(w, dtype=np.float64)
        for a, b in zip(self.matrices, self.targets):
            total += a.T @ (a @ w - b) / a.shape[0]
        return total / self.num_clients

    def stochastic_gradient(self, w: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Gradient of the global objective on rows of the stacked data (unbiased for uniform rows)."""
        a = self.stacked_matrix[rows]
        b = self.stacked_targets[rows]
        return a.T @ (a @ w - b) / len(rows)

    @cached_property
    def stacked_matrix(self) -> np.ndarray:
        return np.vstack(self.matrices)

    @cached_property
    def stacked_targets(self) -> np.ndarray:
        return np.concatenate(self.targets)

    @cached_property
    def optimum(self) -> float:
        return self.objective(self.w_star)

    @cached_property
    def hessian(self) -> np.ndarray:
        return sum(a.T @ a / a.shape[0] for a in self.matrices) / self.num_clients

    def gap(self, w: np.ndarray) -> float:
        """F(w) - F(w*), exact for a quadratic since the gradient vanishes at w*."""
        e = np.asarray(w, dtype=np.float64).reshape(-1) - self.w_star
        return 0.5 * float(e @ self.hessian @ e)

    def gradient_bound(self, radius: float) -> float:
        """Largest single-row gradient norm over the ball of this radius around w*."""
        a = self.stacked_matrix
        residual = np.abs(a @ self.w_star - self.stacked_targets)
        row_norms = np.linalg.norm(a, axis=1)
        return float(np.max(row_norms * (row_norms * radius + residual)))

import logging
import math
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from app.exceptions import PartitionError
from app.models.data import Dataset, PartitionSpec, QuadraticProblem
from app.models.federation import ClientRecord
from app.services.rng import substream

logger = logging.getLogger(__name__)


def synth_classification(classes: int, dims: int, n: int, separation: float, seed: int) -> Dataset:
    """
    Gaussian blobs with unit covariance, one per class, means `separation` apart.

    Class means sit at separation/sqrt(2) along distinct coordinate axes when
    dims >= classes, otherwise along random unit directions.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dims < 1:
        raise ValueError("need at least 1 feature")
    if n < classes:
        raise ValueError(f"n={n} is smaller than the number of classes ({classes})")

    rng = substream(seed, "data")
    radius = separation / math.sqrt(2.0)
    if classes <= dims:
        means = np.zeros((classes, dims))
        means[np.arange(classes), np.arange(classes)] = radius
    else:
        directions = rng.normal(size=(classes, dims))
        means = radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + rng.normal(size=(n, dims))
    return Dataset(features=features, labels=labels.astype(np.int64), num_classes=classes)


def synth_quadratic(
    clients: int,
    dim: int,
    heterogeneity: float,
    seed: int,
    rows_per_client: int = 50,
    noise: float = 0.1,
) -> QuadraticProblem:
    """
    Distributed least squares with a closed-form minimizer.

    With heterogeneity 0 every client holds the same A and b; otherwise each
    client's design matrix and generating weights are perturbed by Gaussian
    noise of that standard deviation.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if clients < 1 or rows_per_client < 1:
        raise ValueError("need at least one client and one row per client")

    rng = substream(seed, "data")
    w_true = rng.choice([-1.0, 1.0], size=dim) * rng.uniform(0.5, 1.5, size=dim)
    shared_a = rng.normal(size=(rows_per_client, dim))
    shared_noise = noise * rng.normal(size=rows_per_client)

    matrices, targets = [], []
    for _ in range(clients):
        a = shared_a + heterogeneity * rng.normal(size=shared_a.shape)
        w_k = w_true + heterogeneity * rng.normal(size=dim)
        matrices.append(a)
        targets.append(a @ w_k + shared_noise)

    hessian = sum(a.T @ a / a.shape[0] for a in matrices) / clients
    rhs = sum(a.T @ b / a.shape[0] for a, b in zip(matrices, targets)) / clients
    w_star = np.linalg.solve(hessian, rhs)
    smoothness = float(np.max(np.linalg.eigvalsh(hessian)))
    client_smoothness = max(float(np.max(np.linalg.eigvalsh(a.T @ a / a.shape[0]))) for a in matrices)

    return QuadraticProblem(
        matrices=matrices,
        targets=targets,
        w_star=w_star,
        smoothness=smoothness,
        client_smoothness=client_smoothness,
        heterogeneity=heterogeneity,
        seed=seed,
    )


def quadratic_clients(problem: QuadraticProblem) -> List[ClientRecord]:
    """One regression shard per client of the quadratic problem."""
    return [
        ClientRecord(id=k, shard=Dataset(features=a, labels=b, num_classes=0))
        for k, (a, b) in enumerate(zip(problem.matrices, problem.targets))
    ]


def _dirichlet_counts(n_c: int, proportions: np.ndarray) -> np.ndarray:
    counts = np.floor(proportions * n_c).astype(np.int64)
    remainder = n_c - int(counts.sum())
    if remainder > 0:
        frac = proportions * n_c - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _dirichlet_split(labels: np.ndarray, spec: PartitionSpec, rng: np.random.Generator) -> List[List[int]]:
    shards: List[List[int]] = [[] for _ in range(spec.clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        proportions = rng.dirichlet(np.full(spec.clients, spec.concentration))
        if not np.all(np.isfinite(proportions)):
            # tiny concentrations can underflow to an all-zero draw
            proportions = np.zeros(spec.clients)
            proportions[rng.integers(spec.clients)] = 1.0
        start = 0
        for k, take in enumerate(_dirichlet_counts(len(idx), proportions)):
            shards[k].extend(idx[start : start + take].tolist())
            start += take
    return shards


def partition(ds: Dataset, spec: PartitionSpec) -> List[ClientRecord]:
    """
    Split a dataset into disjoint client shards covering it.

    Raises:
        PartitionError: If some client would get no examples (iid with n < K,
            or every Dirichlet draw within `max_retries` leaves a shard empty).
    """
    rng = substream(spec.seed, "partition")
    n = ds.size
    if n < spec.clients:
        raise PartitionError(f"cannot give {spec.clients} clients at least one of {n} examples")

    if spec.scheme == "iid":
        shards = [np.sort(part) for part in np.array_split(rng.permutation(n), spec.clients)]
    else:
        if not ds.is_classification:
            raise PartitionError("dirichlet partitioning needs class labels")
        shards = None
        for attempt in range(spec.max_retries):
            candidate = _dirichlet_split(ds.labels, spec, rng)
            if all(candidate):
                shards = [np.sort(np.asarray(s, dtype=np.int64)) for s in candidate]
                break
            empty = sum(1 for s in candidate if not s)
            logger.warning(f"Dirichlet draw {attempt + 1} left {empty} empty shards, resampling")
        if shards is None:
            raise PartitionError(f"every client still needs data after {spec.max_retries} Dirichlet draws")

    clients = [ClientRecord(id=k, shard=ds.take(idx)) for k, idx in enumerate(shards)]
    logger.info(
        f"Partitioned {n} examples over {spec.clients} clients ({spec.scheme}), "
        f"shard sizes {min(c.n_k for c in clients)}..{max(c.n_k for c in clients)}"
    )
    return clients


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = min(max(1, round(test_fraction * ds.size)), ds.size - 1)
    perm = substream(seed, "data", 1).permutation(ds.size)
    return ds.take(np.sort(perm[n_test:])), ds.take(np.sort(perm[:n_test]))


def load_csv(path: Union[str, Path]) -> Dataset:
    """
    Read a comma-separated dataset with a header row; the last column is the integer label.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If a row is malformed or a label is not a non-negative integer.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if table.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    labels = table[:, -1]
    if np.any(labels < 0) or np.any(labels != np.round(labels)):
        raise ValueError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features=table[:, :-1], labels=labels, num_classes=num_classes)


def label_entropy(clients: List[ClientRecord], num_classes: int) -> float:
    """Mean Shannon entropy (nats) of the per-client label histograms."""
    entropies = []
    for client in clients:
        counts = np.bincount(client.shard.labels.astype(np.int64), minlength=num_classes)
        p = counts[counts > 0] / counts.sum()
        entropies.append(float(-np.sum(p * np.log(p))))
    return float(np.mean(entropies)) if entropies else 0.0

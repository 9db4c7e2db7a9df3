"""Dataset partitioning and client-dependent label corruption.

A run first splits the training set across K clients (IID, or non-IID where
each client holds a random subset of the label space), then corrupts each
client's labels through a per-client row-stochastic transition matrix:
entry (i, j) is the probability that a true label i is recorded as j.

The stock construction is symmetric noise at level u: the diagonal keeps
1 - u and the remaining mass is spread evenly over the other L - 1 labels.
A fraction `rho` of the clients is noisy; each noisy client draws its level
u from Uniform(tau, 1), so `tau` is the lower bound of per-client noise.
Arbitrary transition matrices are accepted by `corrupt` for extensions.

Ground-truth labels and corruption flags are carried along strictly for
evaluation; training code reads only `features` and `noisy_labels`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .losses import label_prior

ROW_SUM_ATOL = 1e-9


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients.

    mode: "iid" (class-stratified equal shares) or "noniid" (each client
    holds each class independently with probability `class_prob`, and every
    class's samples are split evenly among the clients holding it).
    """

    mode: str
    num_clients: int
    class_prob: float = 1.0

    def __post_init__(self):
        if self.mode not in ("iid", "noniid"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")
        if not 0.0 < self.class_prob <= 1.0:
            raise ConfigError("class_prob must lie in (0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    """Fraction of noisy clients and the lower bound of their noise levels."""

    rho: float
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau must lie in [0, 1)")


@dataclass(frozen=True)
class ClientDataset:
    """One client's local data; true labels and flags are for metrics only."""

    features: np.ndarray
    noisy_labels: np.ndarray
    true_labels: np.ndarray
    corrupted: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.noisy_labels) == len(self.true_labels) == len(self.corrupted) == n):
            raise ConfigError("client dataset arrays must have equal length")

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class NoiseAssignment:
    """Per-client noise levels and transition matrices for one federation."""

    levels: np.ndarray  # (K,) floats; 0 for clean clients
    noisy: np.ndarray  # (K,) bools
    transitions: list[np.ndarray]  # K row-stochastic (L, L) matrices


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def partition_indices(
    labels: np.ndarray, spec: PartitionSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    """Disjoint index sets covering the dataset, one per client."""
    labels = np.asarray(labels)
    n = len(labels)
    if spec.num_clients > n:
        raise ConfigError(f"cannot split {n} samples across {spec.num_clients} clients")
    classes = np.unique(labels)

    if spec.mode == "iid":
        membership = np.ones((spec.num_clients, len(classes)), dtype=bool)
    else:
        membership = _draw_membership(rng, spec.num_clients, len(classes), spec.class_prob)

    while True:
        parts: list[list[np.ndarray]] = [[] for _ in range(spec.num_clients)]
        for col, cls in enumerate(classes):
            holders = np.flatnonzero(membership[:, col])
            idx = rng.permutation(np.flatnonzero(labels == cls))
            for slot, client in enumerate(holders):
                parts[client].append(idx[slot :: len(holders)])
        sizes = [sum(len(chunk) for chunk in p) for p in parts]
        if min(sizes) > 0:
            break
        # A holder drew an empty share (more holders than samples of a class);
        # redraw the membership matrix from the same stream.
        membership = _draw_membership(rng, spec.num_clients, len(classes), spec.class_prob)

    return [np.sort(np.concatenate(p)) for p in parts]


def _draw_membership(rng, num_clients: int, num_classes: int, p: float) -> np.ndarray:
    """Bernoulli(p) class membership with every row and column non-empty."""
    membership = rng.random((num_clients, num_classes)) < p
    for k in range(num_clients):
        while not membership[k].any():
            membership[k] = rng.random(num_classes) < p
    for c in range(num_classes):
        while not membership[:, c].any():
            membership[:, c] = rng.random(num_clients) < p
    return membership


def partition(
    features: np.ndarray, labels: np.ndarray, spec: PartitionSpec, rng: np.random.Generator
) -> list[ClientDataset]:
    """Split a dataset into per-client datasets, labels not yet corrupted."""
    labels = np.asarray(labels)
    out = []
    for idx in partition_indices(labels, spec, rng):
        y = labels[idx].copy()
        out.append(
            ClientDataset(
                features=features[idx],
                noisy_labels=y,
                true_labels=y.copy(),
                corrupted=np.zeros(len(idx), dtype=bool),
            )
        )
    return out


def symmetric_transition(level: float, num_classes: int) -> np.ndarray:
    """Uniform-flip matrix: diagonal 1 - level, off-diagonal level / (L - 1)."""
    if not 0.0 <= level < 1.0:
        raise ConfigError("noise level must lie in [0, 1)")
    t = np.full((num_classes, num_classes), level / (num_classes - 1))
    np.fill_diagonal(t, 1.0 - level)
    return t


def build_noise(
    spec: NoiseSpec, num_clients: int, num_classes: int, rng: np.random.Generator
) -> NoiseAssignment:
    """Pick round(rho*K) noisy clients and draw their levels from U(tau, 1)."""
    num_noisy = _round_half_up(spec.rho * num_clients)
    noisy_ids = np.sort(rng.choice(num_clients, size=num_noisy, replace=False))
    levels = np.zeros(num_clients)
    levels[noisy_ids] = rng.uniform(spec.tau, 1.0, size=num_noisy)
    noisy = np.zeros(num_clients, dtype=bool)
    noisy[noisy_ids] = True
    transitions = [
        symmetric_transition(levels[k], num_classes) if noisy[k] else np.eye(num_classes)
        for k in range(num_clients)
    ]
    return NoiseAssignment(levels=levels, noisy=noisy, transitions=transitions)


def validate_transition(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ConfigError("transition matrix must be square")
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError("transition entries must lie in [0, 1]")
    if np.max(np.abs(t.sum(axis=1) - 1.0)) > ROW_SUM_ATOL:
        raise ConfigError("transition matrix rows must sum to 1")
    return t


def corrupt(
    client: ClientDataset, transition: np.ndarray, rng: np.random.Generator
) -> ClientDataset:
    """Resample each label independently from the transition row of its true class."""
    t = validate_transition(transition)
    true = client.true_labels
    noisy = true.copy()
    for cls in np.unique(true):
        idx = np.flatnonzero(true == cls)
        noisy[idx] = rng.choice(len(t), size=len(idx), p=t[cls])
    return ClientDataset(
        features=client.features,
        noisy_labels=noisy,
        true_labels=true,
        corrupted=noisy != true,
    )


def build_federation_data(
    features: np.ndarray,
    labels: np.ndarray,
    part_spec: PartitionSpec,
    noise_spec: NoiseSpec,
    num_classes: int,
    partition_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    corrupt_rngs: list[np.random.Generator] | None = None,
) -> tuple[list[ClientDataset], NoiseAssignment]:
    """Partition then corrupt: the standard preprocessing for one trial."""
    clients = partition(features, labels, part_spec, partition_rng)
    assignment = build_noise(noise_spec, part_spec.num_clients, num_classes, noise_rng)
    corrupted = []
    for k, client in enumerate(clients):
        rng = corrupt_rngs[k] if corrupt_rngs is not None else noise_rng
        corrupted.append(corrupt(client, assignment.transitions[k], rng))
    return corrupted, assignment


def client_priors(clients: list[ClientDataset], num_classes: int) -> list[np.ndarray]:
    """Per-client label priors from each client's own noisy labels."""
    return [label_prior(c.noisy_labels, num_classes) for c in clients]


def noise_assignment_record(
    assignment: NoiseAssignment, clients: list[ClientDataset]
) -> dict:
    """JSON-ready audit record of who got which noise."""
    return {
        "clients": [
            {
                "client": k,
                "noisy": bool(assignment.noisy[k]),
                "noise_level": float(assignment.levels[k]),
                "num_samples": len(clients[k]),
                "num_corrupted": int(clients[k].corrupted.sum()),
                "corrupted_flags": clients[k].corrupted.astype(int).tolist(),
            }
            for k in range(len(clients))
        ]
    }


def write_noise_sidecar(
    path: str | Path, assignment: NoiseAssignment, clients: list[ClientDataset]
) -> None:
    Path(path).write_text(
        json.dumps(noise_assignment_record(assignment, clients), indent=2) + "\n"
    )

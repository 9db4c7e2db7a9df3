"""Federated rounds: client sampling, method dispatch, damped aggregation.

Each round samples ``max(round(fraction * K), 1)`` clients without
replacement, runs the configured local update on each, and aggregates

    new_global = (1 - gamma) * old_global
                 + gamma * sum_k (weight_k / total_weight) * client_k

where a client's weight is its (epoch-averaged) selected-sample count for
sieve-style methods and its local sample count for FedAvg/FedProx. Results
are merged in ascending client-id order so floating-point summation is
reproducible; each (round, client) pair draws from its own derived seed
stream, so a worker pool of any size produces bit-identical results.

The ``local_sieve`` method is the no-communication baseline: every client
trains a persistent private model with the single-model sieve and nothing
is ever aggregated; evaluation then averages over client models.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .client import (
    ClientState,
    ClientUpdateResult,
    LocalHyper,
    client_update,
    fedavg_update,
    sieve_update,
)
from .errors import ConfigError
from .nn import Architecture
from .seeding import STREAM_CLIENT, STREAM_SAMPLING, derive_rng

logger = logging.getLogger(__name__)

METHODS = ("fedfixer", "fedavg", "fedprox", "global_sieve", "local_sieve")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    fraction: float
    rounds: int
    gamma: float = 1.0
    method: str = "fedfixer"
    prox_mu: float = 0.01

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1:
            raise ConfigError("num_clients and rounds must be positive")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")

    @property
    def clients_per_round(self) -> int:
        return max(int(np.floor(self.fraction * self.num_clients + 0.5)), 1)


@dataclass
class RoundRecord:
    round_index: int
    participants: list[int]
    client_weights: dict[int, float]
    params: np.ndarray
    duration_sec: float


def aggregate(
    current: np.ndarray, results: list[tuple[float, np.ndarray]], gamma: float
) -> np.ndarray:
    """Damped weighted mean of client parameter vectors."""
    total = sum(weight for weight, _ in results)
    if total <= 0:
        logger.warning("aggregate: total weight is 0, keeping previous parameters")
        return np.array(current, copy=True)
    mixed = np.zeros_like(np.asarray(current, dtype=np.float64))
    for weight, params in results:
        if params.shape != mixed.shape:
            raise ConfigError("client parameter vectors disagree in length")
        mixed += (weight / total) * params
    return (1.0 - gamma) * np.asarray(current) + gamma * mixed


def sample_participants(
    rng: np.random.Generator, num_clients: int, fraction: float
) -> np.ndarray:
    m = max(int(np.floor(fraction * num_clients + 0.5)), 1)
    return np.sort(rng.choice(num_clients, size=m, replace=False))


def baseline_update(
    method: str,
    arch: Architecture,
    state: ClientState,
    params: np.ndarray,
    hyper: LocalHyper,
    round_index: int,
    rng: np.random.Generator,
    prox_mu: float = 0.01,
) -> ClientUpdateResult:
    """Local update for the non-dual-model methods."""
    if method == "fedavg":
        return fedavg_update(arch, state, params, hyper, round_index, rng)
    if method == "fedprox":
        return fedavg_update(arch, state, params, hyper, round_index, rng, prox_mu=prox_mu)
    if method == "global_sieve":
        return sieve_update(arch, state, params, hyper, round_index, rng)
    if method == "local_sieve":
        return sieve_update(
            arch, state, params, hyper, round_index, rng, start_from=state.local_model
        )
    raise ConfigError(f"unknown baseline method {method!r}")


def _dispatch(
    config: FederationConfig,
    arch: Architecture,
    state: ClientState,
    params: np.ndarray,
    hyper: LocalHyper,
    round_index: int,
    rng: np.random.Generator,
) -> ClientUpdateResult:
    if config.method == "fedfixer":
        return client_update(arch, state, params, hyper, round_index, rng)
    return baseline_update(
        config.method, arch, state, params, hyper, round_index, rng, prox_mu=config.prox_mu
    )


@dataclass
class FederationRun:
    final_params: np.ndarray
    records: list[RoundRecord]
    client_masks: dict[int, np.ndarray]  # latest selector mask per client
    local_models: dict[int, np.ndarray] | None  # local_sieve only


def run_federation(
    arch: Architecture,
    states: list[ClientState],
    config: FederationConfig,
    hyper: LocalHyper,
    initial_params: np.ndarray,
    seed: int,
    threads: int = 1,
    on_round=None,
    keep_round_params: bool = True,
) -> FederationRun:
    """Run all rounds; `on_round(record, eval_params, round_masks)` fires
    after each one.

    `eval_params` is the aggregated parameter vector, or the dict of
    per-client models for the no-aggregation baseline; `round_masks` maps
    each participant to its fresh selector mask.
    """
    if len(states) != config.num_clients:
        raise ConfigError("state list does not match config.num_clients")
    no_agg = config.method == "local_sieve"
    params = np.array(initial_params, dtype=np.float64, copy=True)
    local_models: dict[int, np.ndarray] = {}
    if no_agg:
        local_models = {s.client_id: params.copy() for s in states}

    records: list[RoundRecord] = []
    client_masks: dict[int, np.ndarray] = {}
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(config.rounds):
            started = time.perf_counter()
            ids = sample_participants(
                derive_rng(seed, STREAM_SAMPLING, t), config.num_clients, config.fraction
            )

            def one(k: int) -> ClientUpdateResult:
                return _dispatch(
                    config,
                    arch,
                    states[k],
                    params,
                    hyper,
                    t,
                    derive_rng(seed, STREAM_CLIENT, t, k),
                )

            if pool is not None:
                results = dict(zip(ids, pool.map(one, ids)))
            else:
                results = {k: one(k) for k in ids}

            # Merge in ascending client id; state mutation stays on this thread.
            weights: dict[int, float] = {}
            for k in sorted(results):
                res = results[k]
                weights[int(k)] = res.selected_mean
                client_masks[int(k)] = res.clean_mask
                if hyper.persist_theta and res.theta is not None:
                    states[k].theta = res.theta
                if no_agg:
                    local_models[int(k)] = res.new_global
            if not no_agg:
                params = aggregate(
                    params,
                    [(weights[k], results[k].new_global) for k in sorted(results)],
                    config.gamma,
                )

            record = RoundRecord(
                round_index=t,
                participants=[int(k) for k in ids],
                client_weights=weights,
                params=params if keep_round_params else np.empty(0),
                duration_sec=time.perf_counter() - started,
            )
            records.append(record)
            if on_round is not None:
                round_masks = {int(k): results[k].clean_mask for k in sorted(results)}
                on_round(record, local_models if no_agg else params, round_masks)
    finally:
        if pool is not None:
            pool.shutdown()

    return FederationRun(
        final_params=params,
        records=records,
        client_masks=client_masks,
        local_models=local_models if no_agg else None,
    )

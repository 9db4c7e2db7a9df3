"""Local training: the dual-model update and the baseline updates.

One call to `client_update` performs a full local round on one client:

1. clone the personal model from the incoming global parameters,
2. for each of E epochs, walk the (reshuffled) batches; during warm-up
   rounds every sample is used, afterwards each of the two models runs the
   low-loss selector (plain CE) over the batch,
3. per batch, update the personal model on the sub-batch selected by the
   global model while pulling it toward the global parameters
   (`personal -= personal_lr * (grad + dr_weight * (personal - global))`),
   then pull the global parameters toward the fresh personal ones
   (`global -= global_lr * dr_weight * (global - personal)`), and finally
   take a gradient step of the global model on the sub-batch selected by
   the personal model. Update losses are CE + CR; selection is CE only.
4. report the epoch-averaged count of personally-selected samples, which
   becomes the client's aggregation weight.

Ablation toggles: `use_cr` (CR weight forced to 0), `use_dr` (both coupling
terms dropped; the global model learns only through its gradient step),
`use_au` (each model trains on its own selection instead of its peer's),
`use_pm` (no personal model at all; the global model sieves and updates
itself -- also the single-model sieve baseline).

If a selector returns an empty sub-batch, the corresponding gradient term
is skipped for that batch; coupling terms still apply.

`ClientState` is never mutated here; persistence of the personal model
across rounds (`persist_theta`) is handled by the caller from the returned
result. All updates are pure given (state, params, rng), so clients may run
in parallel within a round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .losses import label_prior, select_clean_from_logits
from .nn import Architecture, check_finite, ce_loss_and_grad, combined_loss_and_grad
from .noise import ClientDataset

ABLATION_VARIANTS = ("no_cr", "no_dr", "no_au", "no_pm")


@dataclass(frozen=True)
class LocalHyper:
    """Local-solver hyperparameters shared by all methods.

    cr_weight / dr_weight are the confidence- and distance-regularizer
    strengths; global_lr / personal_lr the two SGD step sizes; selection is
    disabled through round `warmup_rounds` inclusive.
    """

    epochs: int = 5
    batch_size: int = 32
    cr_weight: float = 2.0
    dr_weight: float = 15.0
    global_lr: float = 0.1
    personal_lr: float = 0.05
    warmup_rounds: int = 10
    use_cr: bool = True
    use_dr: bool = True
    use_au: bool = True
    use_pm: bool = True
    persist_theta: bool = False
    shuffle_batches: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if min(self.cr_weight, self.dr_weight, self.global_lr, self.personal_lr) < 0:
            raise ConfigError("weights and learning rates must be non-negative")


@dataclass
class ClientState:
    """One client's id, local data, label prior, and persistent model slots."""

    client_id: int
    data: ClientDataset
    prior: np.ndarray
    theta: np.ndarray | None = None  # kept across rounds only with persist_theta
    local_model: np.ndarray | None = None  # used by the no-aggregation baseline


def make_client_states(clients: list[ClientDataset], num_classes: int) -> list[ClientState]:
    return [
        ClientState(client_id=k, data=c, prior=label_prior(c.noisy_labels, num_classes))
        for k, c in enumerate(clients)
    ]


@dataclass
class ClientUpdateResult:
    new_global: np.ndarray
    selected_mean: float  # epoch-averaged count of selected samples
    clean_mask: np.ndarray  # final-epoch selector output per local sample
    theta: np.ndarray | None = None


def _batches(n: int, batch_size: int, epochs: int, shuffle: bool, rng: np.random.Generator):
    """Yield (epoch, index_array) pairs; last short batch is kept."""
    for epoch in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            yield epoch, order[start : start + batch_size]


def client_update(
    arch: Architecture,
    state: ClientState,
    global_params: np.ndarray,
    hyper: LocalHyper,
    round_index: int,
    rng: np.random.Generator,
) -> ClientUpdateResult:
    """Dual-model local round; see the module docstring for the exact steps."""
    if not hyper.use_pm:
        return sieve_update(arch, state, global_params, hyper, round_index, rng)

    data = state.data
    features, labels = data.features, data.noisy_labels
    n = len(data)
    beta = hyper.cr_weight if hyper.use_cr else 0.0
    lam = hyper.dr_weight if hyper.use_dr else 0.0
    where = f"round {round_index}, client {state.client_id}"

    w = np.array(global_params, dtype=np.float64, copy=True)
    if hyper.persist_theta and state.theta is not None:
        theta = state.theta.copy()
    else:
        theta = w.copy()

    warm = round_index <= hyper.warmup_rounds
    epoch_counts = np.zeros(hyper.epochs)
    clean_mask = np.ones(n, dtype=bool)

    for epoch, idx in _batches(n, hyper.batch_size, hyper.epochs, hyper.shuffle_batches, rng):
        xb, yb = features[idx], labels[idx]
        if warm:
            sel_w = sel_theta = np.ones(len(idx), dtype=bool)
        else:
            sel_w = select_clean_from_logits(arch.forward(w, xb), yb)
            sel_theta = select_clean_from_logits(arch.forward(theta, xb), yb)

        theta_batch = sel_w if hyper.use_au else sel_theta
        global_batch = sel_theta if hyper.use_au else sel_w

        step = lam * (theta - w) if hyper.use_dr else 0.0
        if theta_batch.any():
            losses, grad = combined_loss_and_grad(
                arch, theta, xb[theta_batch], yb[theta_batch], state.prior, beta
            )
            check_finite(losses, where)
            step = step + grad
        theta = theta - hyper.personal_lr * step

        if hyper.use_dr:
            w = w - hyper.global_lr * lam * (w - theta)
        if global_batch.any():
            losses, grad = combined_loss_and_grad(
                arch, w, xb[global_batch], yb[global_batch], state.prior, beta
            )
            check_finite(losses, where)
            w = w - hyper.global_lr * grad

        epoch_counts[epoch] += int(sel_theta.sum())
        if epoch == hyper.epochs - 1:
            clean_mask[idx] = sel_theta

    return ClientUpdateResult(
        new_global=w,
        selected_mean=float(epoch_counts.mean()),
        clean_mask=clean_mask,
        theta=theta,
    )


def sieve_update(
    arch: Architecture,
    state: ClientState,
    params: np.ndarray,
    hyper: LocalHyper,
    round_index: int,
    rng: np.random.Generator,
    start_from: np.ndarray | None = None,
) -> ClientUpdateResult:
    """Single-model sieve: select with own CE, update on CE + CR.

    Covers the `use_pm == False` ablation and both sieve baselines;
    `start_from` lets the no-aggregation baseline resume its own model.
    """
    data = state.data
    features, labels = data.features, data.noisy_labels
    n = len(data)
    beta = hyper.cr_weight if hyper.use_cr else 0.0
    where = f"round {round_index}, client {state.client_id}"

    w = np.array(params if start_from is None else start_from, dtype=np.float64, copy=True)
    warm = round_index <= hyper.warmup_rounds
    epoch_counts = np.zeros(hyper.epochs)
    clean_mask = np.ones(n, dtype=bool)

    for epoch, idx in _batches(n, hyper.batch_size, hyper.epochs, hyper.shuffle_batches, rng):
        xb, yb = features[idx], labels[idx]
        if warm:
            sel = np.ones(len(idx), dtype=bool)
        else:
            sel = select_clean_from_logits(arch.forward(w, xb), yb)
        if sel.any():
            losses, grad = combined_loss_and_grad(
                arch, w, xb[sel], yb[sel], state.prior, beta
            )
            check_finite(losses, where)
            w = w - hyper.global_lr * grad
        epoch_counts[epoch] += int(sel.sum())
        if epoch == hyper.epochs - 1:
            clean_mask[idx] = sel

    return ClientUpdateResult(
        new_global=w, selected_mean=float(epoch_counts.mean()), clean_mask=clean_mask
    )


def fedavg_update(
    arch: Architecture,
    state: ClientState,
    params: np.ndarray,
    hyper: LocalHyper,
    round_index: int,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
) -> ClientUpdateResult:
    """Plain local SGD on CE over all samples; weight is the local sample count.

    With prox_mu > 0 each batch loss gains (mu/2)*||w - w_in||^2, i.e. the
    proximal variant; its gradient contribution is mu * (w - w_in).
    """
    data = state.data
    features, labels = data.features, data.noisy_labels
    n = len(data)
    anchor = np.array(params, dtype=np.float64, copy=True)
    w = anchor.copy()
    where = f"round {round_index}, client {state.client_id}"

    for _, idx in _batches(n, hyper.batch_size, hyper.epochs, hyper.shuffle_batches, rng):
        losses, grad = ce_loss_and_grad(arch, w, features[idx], labels[idx])
        check_finite(losses, where)
        if prox_mu:
            grad = grad + prox_mu * (w - anchor)
        w = w - hyper.global_lr * grad

    return ClientUpdateResult(
        new_global=w, selected_mean=float(n), clean_mask=np.ones(n, dtype=bool)
    )


def ablation_hyper(base: LocalHyper, variant: str) -> LocalHyper:
    """Hyperparameters with exactly one component disabled."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    toggles = {"use_cr", "use_dr", "use_au", "use_pm"}
    if any(not getattr(base, t) for t in toggles):
        raise ConfigError("ablation variants require all components enabled in the base")
    return replace(base, **{"use_" + variant.removeprefix("no_"): False})


def run_ablation_variant(
    arch: Architecture,
    state: ClientState,
    global_params: np.ndarray,
    base_hyper: LocalHyper,
    variant: str,
    round_index: int,
    rng: np.random.Generator,
) -> ClientUpdateResult:
    return client_update(
        arch, state, global_params, ablation_hyper(base_hyper, variant), round_index, rng
    )

"""Configuration-driven experiment runner.

A single JSON document describes an experiment: dataset, partition, noise,
federation method, local hyperparameters, trial count, and master seed.
Unknown keys anywhere in the document are configuration errors. Everything
stochastic is derived from the master seed through per-trial, per-purpose
streams, so a stored config reproduces its results byte for byte, and two
methods run from otherwise-identical configs share the same data,
partitions, noise, and initialization (paired comparisons for free).

Outputs per run directory (every file name carries the config hash; mixing
configs in one directory is rejected):

    config.<hash>.json            resolved config copy
    trial<N>.<hash>.rounds.csv    per-round accuracy and selection summary
    trial<N>.<hash>.detection.csv per (round, client) precision/recall/F
    trial<N>.<hash>.rounds.jsonl  optional per-round records
    trial<N>.<hash>.noise.json    optional noise-assignment audit
    trial<N>.<hash>.params.f64    final global parameters, little-endian float64
    summary.<hash>.json           across-trial mean/std report
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import data as data_mod
from .client import LocalHyper, make_client_states
from .errors import ConfigError, NumericsError
from .metrics import FscoreSummary, accuracy, fscore_summary, scores_from_clean_mask
from .nn import MLP, Architecture, LeNet, init_params
from .noise import NoiseSpec, PartitionSpec, build_federation_data, write_noise_sidecar
from .seeding import (
    STREAM_CORRUPT,
    STREAM_DATASET,
    STREAM_INIT,
    STREAM_NOISE,
    STREAM_PARTITION,
    STREAM_TRIAL,
    child_seed,
    derive_rng,
)
from .server import FederationConfig, run_federation

logger = logging.getLogger(__name__)

_REQUIRED = object()


def _take(raw: dict, section: str, fields: dict[str, Any]) -> dict:
    """Pull known fields out of a config section; reject unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    out = dict(fields)
    out.update(raw)
    missing = [k for k, v in out.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"{section}: missing required keys {sorted(missing)}")
    return out


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # "synthetic" | "mnist"
    # synthetic
    classes: int = 3
    dim: int = 16
    separation: float = 4.0
    scale: float = 1.0
    train_size: int = 4000
    test_size: int = 2000
    # mnist
    dir: str = "data/mnist"
    train_limit: int = 0  # 0 = use everything
    test_limit: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "mnist"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'mnist', got {self.kind!r}")

    @staticmethod
    def from_dict(raw: dict) -> "DatasetConfig":
        return DatasetConfig(**_take(raw, "dataset", {
            "kind": _REQUIRED, "classes": 3, "dim": 16, "separation": 4.0,
            "scale": 1.0, "train_size": 4000, "test_size": 2000,
            "dir": "data/mnist", "train_limit": 0, "test_limit": 0,
        }))


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"  # "mlp" | "lenet"
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.kind not in ("mlp", "lenet"):
            raise ConfigError(f"model.kind must be 'mlp' or 'lenet', got {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        return ModelConfig(**_take(raw, "model", {"kind": "mlp", "hidden": (64,)}))

    def build(self, input_dim: int, num_classes: int) -> Architecture:
        if self.kind == "mlp":
            return MLP(input_dim, self.hidden, num_classes)
        side = int(round(np.sqrt(input_dim)))
        if side * side != input_dim:
            raise ConfigError("lenet needs square single-channel images")
        return LeNet(image_shape=(side, side), num_classes=num_classes)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    partition: PartitionSpec
    noise: NoiseSpec
    federation: FederationConfig
    local: LocalHyper
    model: ModelConfig = ModelConfig()
    trials: int = 1
    seed: int = 0
    eval_every: int = 1
    log_rounds: bool = False
    export_noise: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if self.partition.num_clients != self.federation.num_clients:
            raise ConfigError("partition and federation disagree on the client count")

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        top = _take(raw, "config", {
            "name": _REQUIRED, "dataset": _REQUIRED, "partition": _REQUIRED,
            "noise": _REQUIRED, "federation": _REQUIRED, "local": _REQUIRED,
            "model": {}, "trials": 1, "seed": 0, "eval_every": 1,
            "log_rounds": False, "export_noise": False,
        })
        fed = _take(top["federation"], "federation", {
            "clients": _REQUIRED, "fraction": _REQUIRED, "rounds": _REQUIRED,
            "gamma": 1.0, "method": "fedfixer", "prox_mu": 0.01,
        })
        part = _take(top["partition"], "partition", {"mode": _REQUIRED, "class_prob": 1.0})
        noise = _take(top["noise"], "noise", {"rho": _REQUIRED, "tau": _REQUIRED})
        local = _take(top["local"], "local", {
            "epochs": 5, "batch_size": 32, "cr_weight": 2.0, "dr_weight": 15.0,
            "global_lr": 0.1, "personal_lr": 0.05, "warmup_rounds": 10,
            "use_cr": True, "use_dr": True, "use_au": True, "use_pm": True,
            "persist_theta": False, "shuffle_batches": True,
        })
        return ExperimentConfig(
            name=str(top["name"]),
            dataset=DatasetConfig.from_dict(top["dataset"]),
            partition=PartitionSpec(
                mode=part["mode"],
                num_clients=int(fed["clients"]),
                class_prob=float(part["class_prob"]),
            ),
            noise=NoiseSpec(rho=float(noise["rho"]), tau=float(noise["tau"])),
            federation=FederationConfig(
                num_clients=int(fed["clients"]),
                fraction=float(fed["fraction"]),
                rounds=int(fed["rounds"]),
                gamma=float(fed["gamma"]),
                method=str(fed["method"]),
                prox_mu=float(fed["prox_mu"]),
            ),
            local=LocalHyper(**local),
            model=ModelConfig.from_dict(top["model"]),
            trials=int(top["trials"]),
            seed=int(top["seed"]),
            eval_every=int(top["eval_every"]),
            log_rounds=bool(top["log_rounds"]),
            export_noise=bool(top["export_noise"]),
        )

    def to_dict(self) -> dict:
        d = self.dataset
        dataset: dict[str, Any] = {"kind": d.kind}
        if d.kind == "synthetic":
            dataset.update(classes=d.classes, dim=d.dim, separation=d.separation,
                           scale=d.scale, train_size=d.train_size, test_size=d.test_size)
        else:
            dataset.update(dir=d.dir, train_limit=d.train_limit, test_limit=d.test_limit)
        return {
            "name": self.name,
            "dataset": dataset,
            "partition": {"mode": self.partition.mode, "class_prob": self.partition.class_prob},
            "noise": {"rho": self.noise.rho, "tau": self.noise.tau},
            "federation": {
                "clients": self.federation.num_clients,
                "fraction": self.federation.fraction,
                "rounds": self.federation.rounds,
                "gamma": self.federation.gamma,
                "method": self.federation.method,
                "prox_mu": self.federation.prox_mu,
            },
            "local": dataclasses.asdict(self.local),
            "model": {"kind": self.model.kind, "hidden": list(self.model.hidden)},
            "trials": self.trials,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "log_rounds": self.log_rounds,
            "export_noise": self.export_noise,
        }

    def with_updates(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# Presets

PRESETS: dict[str, dict] = {
    "mnist_iid_rho1_tau05_fedfixer": {
        "name": "mnist_iid_rho1_tau05_fedfixer",
        "dataset": {"kind": "mnist", "dir": "data/mnist", "train_limit": 10000},
        "partition": {"mode": "iid"},
        "noise": {"rho": 1.0, "tau": 0.5},
        "federation": {"clients": 20, "fraction": 0.1, "rounds": 100,
                       "gamma": 1.0, "method": "fedfixer"},
        "local": {"epochs": 5, "batch_size": 32, "cr_weight": 2.0, "dr_weight": 15.0,
                  "global_lr": 0.1, "personal_lr": 0.05, "warmup_rounds": 10},
        "model": {"kind": "mlp", "hidden": [64]},
        "trials": 3,
        "seed": 0,
    },
    "mnist_iid_rho1_tau05_fedavg": {},  # filled below
    "synthetic_noniid_p05_fedfixer": {
        "name": "synthetic_noniid_p05_fedfixer",
        "dataset": {"kind": "synthetic", "classes": 3, "dim": 16, "separation": 4.0,
                    "train_size": 4000, "test_size": 2000},
        "partition": {"mode": "noniid", "class_prob": 0.5},
        "noise": {"rho": 1.0, "tau": 0.3},
        "federation": {"clients": 20, "fraction": 0.1, "rounds": 60,
                       "gamma": 1.0, "method": "fedfixer"},
        "local": {"epochs": 5, "batch_size": 32, "cr_weight": 2.0, "dr_weight": 15.0,
                  "global_lr": 0.1, "personal_lr": 0.1, "warmup_rounds": 10},
        "model": {"kind": "mlp", "hidden": [32]},
        "trials": 3,
        "seed": 0,
    },
    "synthetic_smoke": {
        "name": "synthetic_smoke",
        "dataset": {"kind": "synthetic", "classes": 3, "dim": 8, "separation": 4.0,
                    "train_size": 600, "test_size": 300},
        "partition": {"mode": "iid"},
        "noise": {"rho": 1.0, "tau": 0.3},
        "federation": {"clients": 4, "fraction": 0.5, "rounds": 8,
                       "gamma": 1.0, "method": "fedfixer"},
        "local": {"epochs": 2, "batch_size": 32, "warmup_rounds": 2,
                  "global_lr": 0.1, "personal_lr": 0.1},
        "model": {"kind": "mlp", "hidden": [16]},
        "trials": 1,
        "seed": 0,
    },
}
PRESETS["mnist_iid_rho1_tau05_fedavg"] = json.loads(
    json.dumps(PRESETS["mnist_iid_rho1_tau05_fedfixer"])
)
PRESETS["mnist_iid_rho1_tau05_fedavg"]["name"] = "mnist_iid_rho1_tau05_fedavg"
PRESETS["mnist_iid_rho1_tau05_fedavg"]["federation"]["method"] = "fedavg"


def preset_config(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; see `presets list`")
    return ExperimentConfig.from_dict(PRESETS[name])


# --------------------------------------------------------------------------
# Running trials


@dataclass
class TrialResult:
    trial: int
    final_accuracy: float
    round_rows: list[dict]
    detection_rows: list[dict]
    final_detection: dict[int, tuple[float, float, float]]
    final_f_summary: FscoreSummary | None
    final_params: np.ndarray
    failed: str | None = None


def _load_trial_data(config: ExperimentConfig, trial: int):
    d = config.dataset
    if d.kind == "synthetic":
        spec = data_mod.SyntheticSpec(
            num_classes=d.classes, dim=d.dim, separation=d.separation, scale=d.scale,
            train_size=d.train_size, test_size=d.test_size,
            seed=child_seed(config.seed, STREAM_DATASET, trial),
        )
        return data_mod.gen_synthetic(spec)
    train = data_mod.load_mnist(d.dir, "train")
    test = data_mod.load_mnist(d.dir, "test")
    rng = derive_rng(config.seed, STREAM_DATASET, trial)
    if d.train_limit:
        train = data_mod.subsample(train, d.train_limit, rng)
    if d.test_limit:
        test = data_mod.subsample(test, d.test_limit, rng)
    return train, test


def run_trial(
    config: ExperimentConfig,
    trial: int,
    train: data_mod.RawDataset,
    test: data_mod.RawDataset,
    threads: int = 1,
    jsonl_path: Path | None = None,
    noise_path: Path | None = None,
) -> TrialResult:
    """One seeded end-to-end run on prepared train/test data."""
    num_classes = max(train.num_classes, test.num_classes)
    arch = config.model.build(train.features.shape[1], num_classes)
    method = config.federation.method
    has_selector = method not in ("fedavg", "fedprox")

    clients, assignment = build_federation_data(
        train.features, train.labels, config.partition, config.noise, num_classes,
        partition_rng=derive_rng(config.seed, STREAM_PARTITION, trial),
        noise_rng=derive_rng(config.seed, STREAM_NOISE, trial),
        corrupt_rngs=[
            derive_rng(config.seed, STREAM_CORRUPT, trial, k)
            for k in range(config.partition.num_clients)
        ],
    )
    if noise_path is not None:
        write_noise_sidecar(noise_path, assignment, clients)
    states = make_client_states(clients, num_classes)
    initial = init_params(arch, derive_rng(config.seed, STREAM_INIT, trial))

    round_rows: list[dict] = []
    detection_rows: list[dict] = []
    jsonl = open(jsonl_path, "w") if jsonl_path is not None else None

    def on_round(record, eval_params, round_masks):
        t = record.round_index
        evaluate = (t % config.eval_every == 0) or t == config.federation.rounds - 1
        f_this_round = []
        if has_selector:
            for k in record.participants:
                s = scores_from_clean_mask(round_masks[k], states[k].data.corrupted)
                detection_rows.append({
                    "round": t, "client": k,
                    "precision": s.precision, "recall": s.recall, "f_score": s.f_score,
                })
                f_this_round.append(s.f_score)
        if evaluate:
            if isinstance(eval_params, dict):  # no-aggregation baseline
                acc = float(np.mean([
                    accuracy(arch, p, test.features, test.labels)
                    for p in eval_params.values()
                ]))
            else:
                acc = accuracy(arch, eval_params, test.features, test.labels)
            round_rows.append({
                "round": t,
                "accuracy": acc,
                "selected_total": sum(record.client_weights.values()),
                "mean_f": float(np.mean(f_this_round)) if f_this_round else "",
            })
        if jsonl is not None:
            jsonl.write(json.dumps({
                "round": t,
                "participants": record.participants,
                "weights": {str(k): v for k, v in record.client_weights.items()},
                "duration_sec": record.duration_sec,
            }) + "\n")

    try:
        run = run_federation(
            arch, states, config.federation, config.local, initial,
            seed=child_seed(config.seed, STREAM_TRIAL, trial),
            threads=threads, on_round=on_round, keep_round_params=False,
        )
    finally:
        if jsonl is not None:
            jsonl.close()

    final_detection: dict[int, tuple[float, float, float]] = {}
    if has_selector:
        for k, mask in sorted(run.client_masks.items()):
            s = scores_from_clean_mask(mask, states[k].data.corrupted)
            final_detection[k] = (s.precision, s.recall, s.f_score)
    f_summary = (
        fscore_summary([f for _, _, f in final_detection.values()])
        if final_detection else None
    )

    return TrialResult(
        trial=trial,
        final_accuracy=round_rows[-1]["accuracy"] if round_rows else float("nan"),
        round_rows=round_rows,
        detection_rows=detection_rows,
        final_detection=final_detection,
        final_f_summary=f_summary,
        final_params=run.final_params,
    )


# --------------------------------------------------------------------------
# File outputs


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    lines += [",".join(_fmt(row[c]) for c in columns) for row in rows]
    path.write_text("\n".join(lines) + "\n")


_HASH_RE = re.compile(r"^[a-z0-9_.\-]+\.([0-9a-f]{12})\.[a-z0-9.]+$")


def _check_directory_hash(out_dir: Path, expected: str) -> None:
    for entry in out_dir.iterdir():
        match = _HASH_RE.match(entry.name)
        if match and match.group(1) != expected:
            raise ConfigError(
                f"output directory {out_dir} already holds results for config "
                f"{match.group(1)}; refusing to mix configs"
            )


@dataclass
class RunArtifact:
    config: ExperimentConfig
    out_dir: Path | None
    summary: dict
    trials: list[TrialResult]


def summarize_trials(trials: list[TrialResult]) -> dict:
    """Across-trial aggregate; recomputable from the per-trial values."""
    ok = [t for t in trials if t.failed is None]
    accs = [t.final_accuracy for t in ok]
    f_means = [t.final_f_summary.mean for t in ok if t.final_f_summary is not None]
    summary: dict[str, Any] = {
        "trials": [
            {
                "trial": t.trial,
                "status": "failed" if t.failed else "ok",
                **({"error": t.failed} if t.failed else {}),
                **(
                    {
                        "final_accuracy": t.final_accuracy,
                        "final_f_mean": t.final_f_summary.mean if t.final_f_summary else None,
                    }
                    if not t.failed
                    else {}
                ),
            }
            for t in trials
        ],
    }
    if accs:
        summary["accuracy_mean"] = float(np.mean(accs))
        summary["accuracy_std"] = float(np.std(accs))
    if f_means:
        summary["f_mean"] = float(np.mean(f_means))
        summary["f_std"] = float(np.std(f_means))
    return summary


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path | None = None, threads: int = 1
) -> RunArtifact:
    """Execute all trials of a config, optionally persisting artifacts."""
    chash = config_hash(config)
    out_path: Path | None = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        _check_directory_hash(out_path, chash)
        (out_path / f"config.{chash}.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    trials: list[TrialResult] = []
    for trial in range(config.trials):
        train, test = _load_trial_data(config, trial)
        jsonl = noise_file = None
        if out_path is not None:
            if config.log_rounds:
                jsonl = out_path / f"trial{trial}.{chash}.rounds.jsonl"
            if config.export_noise:
                noise_file = out_path / f"trial{trial}.{chash}.noise.json"
        try:
            result = run_trial(
                config, trial, train, test, threads=threads,
                jsonl_path=jsonl, noise_path=noise_file,
            )
        except NumericsError as exc:
            logger.error("trial %d aborted: %s", trial, exc)
            result = TrialResult(
                trial=trial, final_accuracy=float("nan"), round_rows=[],
                detection_rows=[], final_detection={}, final_f_summary=None,
                final_params=np.empty(0), failed=str(exc),
            )
        trials.append(result)
        if out_path is not None and result.failed is None:
            _write_csv(
                out_path / f"trial{trial}.{chash}.rounds.csv",
                result.round_rows,
                ["round", "accuracy", "selected_total", "mean_f"],
            )
            _write_csv(
                out_path / f"trial{trial}.{chash}.detection.csv",
                result.detection_rows,
                ["round", "client", "precision", "recall", "f_score"],
            )
            (out_path / f"trial{trial}.{chash}.params.f64").write_bytes(
                result.final_params.astype("<f8").tobytes()
            )

    summary = {"name": config.name, "config_hash": chash, **summarize_trials(trials)}
    if out_path is not None:
        (out_path / f"summary.{chash}.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
    return RunArtifact(config=config, out_dir=out_path, summary=summary, trials=trials)


def compare_methods(
    config: ExperimentConfig,
    methods: list[str],
    out_dir: str | Path | None = None,
    threads: int = 1,
) -> list[dict]:
    """Run several methods from one config with paired seeds; one row each."""
    if not methods:
        raise ConfigError("methods list must not be empty")
    rows = []
    for method in methods:
        mconf = config.with_updates(
            name=f"{config.name}__{method}",
            federation=dataclasses.replace(config.federation, method=method),
        )
        sub_dir = Path(out_dir) / method if out_dir is not None else None
        artifact = run_experiment(mconf, out_dir=sub_dir, threads=threads)
        rows.append({
            "method": method,
            "accuracy_mean": artifact.summary.get("accuracy_mean", float("nan")),
            "accuracy_std": artifact.summary.get("accuracy_std", float("nan")),
            "f_mean": artifact.summary.get("f_mean"),
        })
    return rows


def format_comparison(rows: list[dict]) -> str:
    header = f"{'method':<14} {'accuracy':>18} {'detection F':>12}"
    lines = [header, "-" * len(header)]
    for row in rows:
        acc = f"{row['accuracy_mean']:.4f} ± {row['accuracy_std']:.4f}"
        f_mean = f"{row['f_mean']:.4f}" if row.get("f_mean") is not None else "-"
        lines.append(f"{row['method']:<14} {acc:>18} {f_mean:>12}")
    return "\n".join(lines)

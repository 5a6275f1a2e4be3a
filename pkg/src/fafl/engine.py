"""Synchronous federated rounds with sealed transport, metrics and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import channel
from .channel import ChannelMeter, MsgType
from .data import (
    LabeledDataset, PartitionSpec, generate_synthetic, load_csv_dataset, partition_noniid,
    train_holdout_split,
)
from .errors import ChannelError, ConfigError
from .mechanisms import (
    ClientProfile, ClientUpdate, Contribution, MechanismConfig, RoundState, make_adversarial_update,
    make_mechanism, MECHANISMS,
)
from .model import Arch, ParamVector, TrainConfig, evaluate, init_model, local_train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "csv"
    classes: int = 3
    features: int = 8
    samples: int = 3000
    separation: float = 3.0
    path: str = ""
    label_column: str = "label"
    group_column: str = ""
    holdout_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "linear"  # "linear" or "mlp"
    hidden: int = 16


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float = 0.4
    max_labels: int = 1


@dataclass(frozen=True)
class NetworkModel:
    base_latency_ms: float = 5.0
    bandwidth_bytes_per_ms: float = 1000.0


@dataclass(frozen=True)
class ExperimentConfig:
    clients: int = 10
    rounds: int = 100
    mechanism: str = "fedavg"
    adversaries: int = 0
    encrypt: bool = True
    eval_every: int = 1
    seed: int = 0
    workers: int = 1
    record_timing: bool = True
    master_secret: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mech: MechanismConfig = field(default_factory=MechanismConfig)
    network: NetworkModel = field(default_factory=NetworkModel)

    def validate(self) -> "ExperimentConfig":
        def need(ok: bool, message: str, field: str) -> None:
            if not ok:
                raise ConfigError(message, field)

        need(self.clients >= 1, "clients must be >= 1", "clients")
        need(self.rounds >= 1, "rounds must be >= 1", "rounds")
        need(self.mechanism in MECHANISMS,
             f"unknown mechanism {self.mechanism!r}; choose from {', '.join(MECHANISMS)}",
             "mechanism")
        need(0 <= self.adversaries < self.clients,
             "adversaries must satisfy 0 <= adversaries < clients", "adversaries")
        need(self.eval_every >= 1, "eval_every must be >= 1", "eval_every")
        need(self.workers >= 1, "workers must be >= 1", "workers")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer", "seed")
        d = self.data
        need(d.source in ("synthetic", "csv"), "data.source must be 'synthetic' or 'csv'",
             "data.source")
        if d.source == "csv":
            need(bool(d.path), "data.path is required when data.source = 'csv'", "data.path")
        else:
            need(d.classes >= 2, "data.classes must be >= 2", "data.classes")
            need(d.features >= 1, "data.features must be >= 1", "data.features")
            need(d.samples >= d.classes, "data.samples must be >= data.classes", "data.samples")
            need(d.separation >= 0, "data.separation must be >= 0", "data.separation")
            need(self.partition.max_labels <= d.classes,
                 "partition.max_labels exceeds the class count", "partition.max_labels")
        need(0.0 < d.holdout_fraction < 1.0, "data.holdout_fraction must lie in (0,1)",
             "data.holdout_fraction")
        need(self.model.kind in ("linear", "mlp"), "model.kind must be 'linear' or 'mlp'",
             "model.kind")
        need(self.model.kind != "mlp" or self.model.hidden >= 1,
             "model.hidden must be >= 1 for an mlp", "model.hidden")
        need(0.0 <= self.partition.alpha <= 1.0, "alpha must lie in [0,1]", "partition.alpha")
        need(self.partition.max_labels >= 1, "partition.max_labels must be >= 1",
             "partition.max_labels")
        try:
            # the selection size only constrains the bandit scheduler
            self.mech.validate(self.clients if self.mechanism == "ltf" else None)
        except ConfigError as exc:
            raise ConfigError(f"mechanism.{exc}", f"mechanism.{exc.field}") from None
        need(self.network.bandwidth_bytes_per_ms > 0,
             "network.bandwidth_bytes_per_ms must be > 0", "network.bandwidth_bytes_per_ms")
        need(self.network.base_latency_ms >= 0, "network.base_latency_ms must be >= 0",
             "network.base_latency_ms")
        return self

    def to_dict(self, *, include_secret: bool = False) -> dict:
        d = dataclasses.asdict(self)
        d["train"].pop("seed", None)
        if not include_secret:
            d.pop("master_secret", None)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    nested = {
        "data": DataConfig, "model": ModelConfig, "partition": PartitionConfig,
        "train": TrainConfig, "mech": MechanismConfig, "network": NetworkModel,
    }
    for key, cls in nested.items():
        if key in d:
            d[key] = cls(**d[key])
    return ExperimentConfig(**d)


def config_hash(config: ExperimentConfig) -> str:
    """16-hex-char digest of every field that can influence the metric series."""
    d = config.to_dict()
    d.pop("workers", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def scheme_label(mechanism: str, adversaries: int = 0) -> str:
    base = MECHANISMS[mechanism].label
    if mechanism == "reputation":
        return f"{base} A = {adversaries}"
    return base if adversaries == 0 else f"{base} A = {adversaries}"


def parse_scheme(text: str) -> tuple[str, int]:
    """``"reputation@1"`` -> ("reputation", 1); a bare name means no adversaries."""
    name, _, adv = text.strip().partition("@")
    if name not in MECHANISMS:
        raise ConfigError(f"unknown mechanism {name!r}; choose from {', '.join(MECHANISMS)}")
    try:
        a = int(adv) if adv else 0
    except ValueError:
        raise ConfigError(f"bad adversary count in scheme {text!r}") from None
    return name, a


def format_scheme(mechanism: str, adversaries: int) -> str:
    return mechanism if adversaries == 0 else f"{mechanism}@{adversaries}"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricRecord:
    round: int
    accuracy: float | None
    mean_loss: float | None
    group_losses: dict[int, float]
    bytes_up: int
    bytes_down: int
    messages: int
    simulated_latency_ms: float
    crypto_time_ms: float
    selected: tuple[bool, ...]
    reputations: tuple[float, ...] = ()
    payouts: tuple[float, ...] = ()
    dropped: tuple[int, ...] = ()


METRIC_COLUMNS = (
    "round", "accuracy", "mean_loss", "group_losses", "bytes_up", "bytes_down", "messages",
    "simulated_latency_ms", "selected", "reputations", "payouts", "dropped",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


@dataclass
class MetricSeries:
    records: list[MetricRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def accuracies(self) -> list[tuple[int, float]]:
        return [(r.round, r.accuracy) for r in self.records if r.accuracy is not None]

    @property
    def final_accuracy(self) -> float:
        acc = self.accuracies()
        return acc[-1][1] if acc else float("nan")

    def mean_last_accuracy(self, n: int = 10) -> float:
        acc = [a for _, a in self.accuracies()[-n:]]
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes_up + r.bytes_down for r in self.records)

    @property
    def total_latency_ms(self) -> float:
        return float(sum(r.simulated_latency_ms for r in self.records))

    @property
    def crypto_time_ms(self) -> float:
        return float(sum(r.crypto_time_ms for r in self.records))

    def to_csv(self, path: str | Path | None = None) -> str:
        """Deterministic per-round metrics; wall-clock timing lives in :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.records:
            w.writerow([
                r.round, _fmt(r.accuracy), _fmt(r.mean_loss),
                ";".join(f"{g}:{v!r}" for g, v in sorted(r.group_losses.items())),
                r.bytes_up, r.bytes_down, r.messages, _fmt(r.simulated_latency_ms),
                "".join("1" if s else "0" for s in r.selected),
                ";".join(repr(float(x)) for x in r.reputations),
                ";".join(repr(float(x)) for x in r.payouts),
                ";".join(str(x) for x in r.dropped),
            ])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def timing_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("round", "crypto_time_ms"))
        for r in self.records:
            w.writerow((r.round, _fmt(r.crypto_time_ms)))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            d = dataclasses.asdict(r)
            d["group_losses"] = {str(k): v for k, v in r.group_losses.items()}
            recs.append(d)
        return {"config": self.config, "records": recs}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSeries":
        recs = []
        for r in d["records"]:
            r = dict(r)
            r["group_losses"] = {int(k): float(v) for k, v in r["group_losses"].items()}
            for key in ("selected", "reputations", "payouts", "dropped"):
                r[key] = tuple(r[key])
            recs.append(MetricRecord(**r))
        return cls(recs, d.get("config", {}))


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def simulate_latency(nbytes: float, network: NetworkModel) -> float:
    if nbytes < 0:
        raise ConfigError("byte count must be >= 0")
    if not network.bandwidth_bytes_per_ms > 0:
        raise ConfigError("bandwidth must be > 0")
    return network.base_latency_ms + nbytes / network.bandwidth_bytes_per_ms


def round_latency(legs: Iterable[tuple[int, int]], network: NetworkModel) -> float:
    """Synchronous barrier: slowest (down + up) client leg plus one server hop."""
    slowest = max(
        (simulate_latency(d, network) + simulate_latency(u, network) for d, u in legs),
        default=0.0,
    )
    return slowest + simulate_latency(0, network)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

Tamper = Callable[[int, int, bytes], bytes]


@dataclass
class _Leg:
    client: int
    down_bytes: int
    up_wire: bytes
    local_loss: float
    feedback_loss: float
    group_losses: dict[int, float]
    n_samples: int
    meter: ChannelMeter


def _client_seed(seed: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, client]).generate_state(1, np.uint64)[0])


def build_dataset(config: ExperimentConfig) -> LabeledDataset:
    d = config.data
    if d.source == "csv":
        return load_csv_dataset(d.path, d.label_column, d.group_column or None)
    return generate_synthetic(d.classes, d.features, d.samples, d.separation, config.seed)


class Simulation:
    """One experiment: data, clients, mechanism state and sealed channels.

    ``tamper(round, client, wire)`` may rewrite an uplink frame in transit;
    ``trace`` (a list) receives ("train", t, k) / ("aggregate", t) events.
    Clients listed in ``free_riders`` upload the model they received unchanged.
    """

    def __init__(self, config: ExperimentConfig, *, tamper: Tamper | None = None,
                 trace: list | None = None, free_riders: Iterable[int] = ()):
        self.config = config.validate()
        self.tamper = tamper
        self.trace = trace
        self.free_riders = frozenset(int(k) for k in free_riders)
        pool = build_dataset(config)
        if config.data.source == "csv" and config.partition.max_labels > pool.num_classes:
            raise ConfigError("partition.max_labels exceeds the class count")
        self.train_pool, self.holdout = train_holdout_split(
            pool, config.data.holdout_fraction, config.seed
        )
        K = config.clients
        if K == 1:
            self.shards = [self.train_pool]
        else:
            spec = PartitionSpec(config.partition.alpha, config.partition.max_labels, K,
                                 config.seed)
            self.shards = partition_noniid(self.train_pool, spec)
        C = pool.num_classes
        D = pool.num_features
        self.arch = Arch.linear(D, C) if config.model.kind == "linear" else Arch.mlp(
            D, config.model.hidden, C)
        w0 = init_model(self.arch, config.seed)
        self.mechanism = make_mechanism(config.mechanism, config.mech)
        adversarial = set(range(K - config.adversaries, K))
        self.profiles = [
            ClientProfile(k, reputation=config.mech.initial_reputation, adversarial=k in adversarial)
            for k in range(K)
        ]
        self.state = RoundState.initial(w0, K, pool.num_groups)
        self.state.budget_remaining = config.mech.budget
        self.train_cfgs = [
            dataclasses.replace(config.train, seed=_client_seed(config.seed, k)) for k in range(K)
        ]
        self.server_keys: list[channel.ChannelKey] = []
        self.client_keys: list[channel.ChannelKey] = []
        if config.encrypt:
            secret = self._master_secret()
            for k in range(K):
                sk = channel.derive_channel_key(secret, k)
                self.server_keys.append(sk)
                self.client_keys.append(sk.endpoint())
        self.series = MetricSeries(config=config.to_dict())
        self.nonce_log: list[tuple[int, bytes]] | None = None

    def _master_secret(self) -> bytes:
        value = self.config.master_secret or os.environ.get(channel.SECRET_ENV)
        if value:
            return channel.load_master_secret(value)
        log.info("no master secret configured; using an ephemeral random secret")
        return os.urandom(32)

    # -- client leg ---------------------------------------------------------

    def _client_leg(self, k: int, w_bytes: bytes, t: int, options: dict) -> _Leg:
        meter = ChannelMeter()
        if self.config.encrypt:
            frame = channel.seal(self.server_keys[k], MsgType.BROADCAST, t, channel.SERVER_ID,
                                 w_bytes, meter)
            wire = frame.to_bytes()
            self._log_nonce(k, frame.nonce)
            payload = channel.open_frame(self.client_keys[k], wire, meter)
        else:
            wire = payload = w_bytes
        w = channel.deserialize_params(payload)
        shard = self.shards[k]
        if self.trace is not None:
            self.trace.append(("train", t, k))
        received = evaluate(w, shard)
        if k in self.free_riders:
            w_new, loss = w, received.mean_loss
        elif self.profiles[k].adversarial:
            w_new, _, loss = make_adversarial_update(shard, w, self.train_cfgs[k], t)
        else:
            w_new, _, loss = local_train(w, shard, self.train_cfgs[k], t, **options)
        up = channel.serialize_params(w_new)
        if self.config.encrypt:
            frame = channel.seal(self.client_keys[k], MsgType.UPDATE, t, k, up, meter)
            self._log_nonce(k, frame.nonce)
            up = frame.to_bytes()
        return _Leg(k, len(wire), up, loss, received.mean_loss, received.per_group_loss,
                    shard.n, meter)

    def _log_nonce(self, k: int, nonce: bytes) -> None:
        if self.nonce_log is not None:
            self.nonce_log.append((k, nonce))

    def _receive(self, leg: _Leg, t: int, meter: ChannelMeter) -> ParamVector:
        wire = leg.up_wire
        k = leg.client
        if not self.config.encrypt:
            return channel.deserialize_params(wire)
        frame = channel.EncryptedFrame.from_bytes(wire)
        payload = channel.open_frame(self.server_keys[k], frame, meter)
        if frame.msg_type != MsgType.UPDATE or frame.round != t or frame.sender != k:
            raise ChannelError(f"unexpected frame (type={frame.msg_type}, round={frame.round}, "
                               f"sender={frame.sender})")
        return channel.deserialize_params(payload)

    # -- round --------------------------------------------------------------

    def run_round(self, executor: ThreadPoolExecutor | None = None) -> MetricRecord:
        cfg = self.config
        state, profiles, mech = self.state, self.profiles, self.mechanism
        t = state.t
        indicators = mech.select(state, profiles)
        state.indicators = indicators
        selected = [int(k) for k in np.flatnonzero(indicators)]
        w_bytes = channel.serialize_params(state.w_global)
        opts = {k: mech.local_options(state, profiles[k]) for k in selected}

        def leg(k):
            return self._client_leg(k, w_bytes, t, opts[k])

        legs = list(executor.map(leg, selected)) if executor else [leg(k) for k in selected]

        # -- barrier: everything below is single-threaded server work
        meter = ChannelMeter()
        for lg in legs:
            meter.seal_time += lg.meter.seal_time
            meter.open_time += lg.meter.open_time
        updates, dropped = [], []
        bytes_up = bytes_down = messages = 0
        leg_sizes = []
        for lg in legs:
            if self.tamper is not None:
                lg.up_wire = self.tamper(t, lg.client, lg.up_wire)
            bytes_down += lg.down_bytes
            bytes_up += len(lg.up_wire)
            messages += 2
            leg_sizes.append((lg.down_bytes, len(lg.up_wire)))
            try:
                w_new = self._receive(lg, t, meter)
            except ChannelError as exc:
                log.warning("round %d: dropped update from client %d (%s)", t, lg.client, exc)
                dropped.append(lg.client)
                continue
            updates.append(ClientUpdate(
                lg.client, w_new, w_new.values - state.w_global.values, lg.local_loss,
                lg.feedback_loss, lg.group_losses, lg.n_samples,
            ))

        contributions: dict[int, Contribution] = {}
        if mech.needs_contributions and updates:
            base = evaluate(state.w_global, self.holdout)
            for u in updates:
                ev = evaluate(u.w_new, self.holdout)
                contributions[u.client_id] = Contribution(
                    ev.accuracy - base.accuracy, base.mean_loss - ev.mean_loss
                )

        if self.trace is not None:
            self.trace.append(("aggregate", t))
        if updates:
            new_values = mech.aggregate(state, updates, profiles)
        else:
            log.warning("round %d: no verified updates; global model carried over", t)
            new_values = state.w_global.values.copy()
        extras = mech.feedback(state, updates, profiles, contributions)

        for k in selected:
            profiles[k].selection_count += 1
        for u in updates:
            c = contributions.get(u.client_id)
            profiles[u.client_id].context = np.array(
                [u.n_samples, u.local_loss, c.score if c else 0.0])

        old = state.w_global
        state.w_global = ParamVector(new_values, old.arch)
        state.global_delta = state.w_global.values - old.values
        state.t = t + 1

        acc = loss = None
        groups: dict[int, float] = {}
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.rounds:
            ev = evaluate(state.w_global, self.holdout)
            acc, loss, groups = ev.accuracy, ev.mean_loss, ev.per_group_loss
        crypto_ms = 1000.0 * (meter.seal_time + meter.open_time) if cfg.record_timing else 0.0
        payouts = extras.get("payouts")
        record = MetricRecord(
            round=t,
            accuracy=acc,
            mean_loss=loss,
            group_losses=groups,
            bytes_up=bytes_up,
            bytes_down=bytes_down,
            messages=messages,
            simulated_latency_ms=round_latency(leg_sizes, cfg.network),
            crypto_time_ms=crypto_ms,
            selected=tuple(bool(x) for x in indicators),
            reputations=tuple(p.reputation for p in profiles)
            if cfg.mechanism == "reputation" else (),
            payouts=tuple(float(x) for x in payouts) if payouts is not None else (),
            dropped=tuple(dropped),
        )
        self.series.records.append(record)
        return record

    def run(self, rounds: int | None = None) -> MetricSeries:
        rounds = self.config.rounds if rounds is None else rounds
        workers = self.config.workers
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                for _ in range(rounds):
                    self.run_round(ex)
        else:
            for _ in range(rounds):
                self.run_round()
        return self.series


def run_experiment(config: ExperimentConfig, **kwargs) -> MetricSeries:
    return Simulation(config, **kwargs).run()


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    cells: dict[tuple[str, float, int], MetricSeries]
    configs: dict[tuple[str, float, int], ExperimentConfig]
    computed: int = 0
    cached: int = 0


def sweep_configs(
    base: ExperimentConfig, alphas: Sequence[float], schemes: Sequence[str], seeds: Sequence[int]
) -> dict[tuple[str, float, int], ExperimentConfig]:
    if not alphas or not schemes or not seeds:
        raise ConfigError("sweep grids must be non-empty")
    out = {}
    for scheme in schemes:
        mech, adv = parse_scheme(scheme)
        for alpha in alphas:
            for seed in seeds:
                cfg = base.replace(
                    mechanism=mech, adversaries=adv, seed=int(seed),
                    partition=dataclasses.replace(base.partition, alpha=float(alpha)),
                ).validate()
                out[(format_scheme(mech, adv), float(alpha), int(seed))] = cfg
    return out


def _load_cell(path: Path) -> MetricSeries | None:
    try:
        blob = json.loads(path.read_text(encoding="utf-8"))
        return MetricSeries.from_dict(blob["series"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        log.warning("cache cell %s unreadable (%s); recomputing", path.name, exc)
        return None


def write_cell(path: Path, scheme: str, config: ExperimentConfig, series: MetricSeries) -> None:
    blob = {"scheme": scheme, "config": config.to_dict(), "series": series.to_dict()}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(blob, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def run_sweep(
    base: ExperimentConfig,
    alphas: Sequence[float],
    schemes: Sequence[str],
    seeds: Sequence[int],
    cache_dir: str | Path | None = None,
    resume: bool = True,
) -> SweepResult:
    """Cross product of alpha x scheme x seed; completed cells are read back from ``cache_dir``."""
    configs = sweep_configs(base, alphas, schemes, seeds)
    result = SweepResult({}, configs)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for key, cfg in configs.items():
        path = cache / f"{config_hash(cfg)}.json" if cache is not None else None
        series = None
        if path is not None and resume and path.exists():
            series = _load_cell(path)
            if series is not None:
                result.cached += 1
        if series is None:
            series = run_experiment(cfg)
            result.computed += 1
            if path is not None:
                write_cell(path, key[0], cfg, series)
        result.cells[key] = series
    return result

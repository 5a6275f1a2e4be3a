import dataclasses
import json
import logging

import numpy as np
import pytest

from fafl import engine
from fafl.engine import (
    DataConfig, ExperimentConfig, MetricSeries, NetworkModel, PartitionConfig, Simulation,
    config_hash, parse_scheme, round_latency, run_experiment, run_sweep, scheme_label,
    simulate_latency,
)
from fafl.errors import ConfigError
from fafl.mechanisms import MechanismConfig
from fafl.model import TrainConfig, local_train

SMALL = DataConfig(samples=600)


def small(**kw):
    base = dict(clients=4, rounds=3, data=SMALL, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_paper_defaults():
    cfg = ExperimentConfig().validate()
    assert (cfg.clients, cfg.train.local_epochs, cfg.train.batch_size) == (10, 1, 64)
    assert (cfg.train.learning_rate, cfg.train.decay) == (0.01, 0.992)
    assert cfg.partition.alpha == 0.4 and cfg.encrypt


@pytest.mark.parametrize("change,field", [
    ({"rounds": 0}, "rounds"), ({"clients": 0}, "clients"), ({"adversaries": 4}, "adversaries"),
    ({"eval_every": 0}, "eval_every"), ({"mechanism": "nope"}, "mechanism"),
    ({"partition": PartitionConfig(alpha=1.5)}, "partition.alpha"),
    ({"network": NetworkModel(bandwidth_bytes_per_ms=0)}, "network.bandwidth_bytes_per_ms"),
    ({"mech": MechanismConfig(beta=0)}, "mechanism.beta"),
])
def test_invalid_config_rejected_before_work(change, field, monkeypatch):
    calls = []
    monkeypatch.setattr(engine, "build_dataset", lambda c: calls.append(c))
    with pytest.raises(ConfigError) as exc:
        run_experiment(small(**change))
    assert exc.value.field == field
    assert not calls


def test_latency_model():
    net = NetworkModel(5.0, 1000.0)
    assert simulate_latency(2000, net) == 7.0
    assert simulate_latency(0, net) == 5.0
    with pytest.raises(ConfigError):
        simulate_latency(10, NetworkModel(5.0, 0.0))
    with pytest.raises(ConfigError):
        simulate_latency(-1, net)
    # slowest leg (1000 down + 3000 up) plus the server hop
    assert round_latency([(1000, 1000), (1000, 3000)], net) == (6 + 8) + 5


def test_single_client_equals_local_training():
    cfg = small(clients=1, rounds=1, encrypt=False)
    sim = Simulation(cfg)
    w0 = sim.state.w_global
    sim.run()
    expected, _, _ = local_train(w0, sim.train_pool, sim.train_cfgs[0], 0)
    assert np.array_equal(sim.state.w_global.values, expected.values)


def _trajectory(cfg, **kw):
    sim = Simulation(cfg, **kw)
    out = []
    for _ in range(cfg.rounds):
        sim.run_round()
        out.append(sim.state.w_global.values.copy())
    return sim, out


@pytest.mark.parametrize("mechanism", ["fedavg", "reputation", "bgl", "afl", "incentive", "ltf"])
def test_encryption_is_transparent(mechanism):
    kw = dict(mechanism=mechanism, mech=MechanismConfig(select=2), record_timing=False)
    enc_sim, enc = _trajectory(small(encrypt=True, **kw))
    pln_sim, pln = _trajectory(small(encrypt=False, **kw))
    assert all(np.array_equal(a, b) for a, b in zip(enc, pln))
    for re, rp in zip(enc_sim.series.records, pln_sim.series.records):
        assert re.messages == rp.messages
        assert (re.bytes_up + re.bytes_down) - (rp.bytes_up + rp.bytes_down) == 46 * re.messages
        assert re.simulated_latency_ms > rp.simulated_latency_ms
        assert (re.accuracy, re.mean_loss) == (rp.accuracy, rp.mean_loss)


def test_per_round_bytes_ledger():
    cfg = small(clients=10, rounds=4)
    series = run_experiment(cfg)
    P = 8 * 3 + 3
    for r in series.records:
        assert r.messages == 20
        assert r.bytes_up == r.bytes_down == 10 * (46 + 16 + 8 * P)


def test_three_clients_hand_fixed_deltas(monkeypatch):
    fixed = {}

    def fake_train(w, shard, cfg, round, **kw):
        k = next(k for k, s in fixed["shards"].items() if s is shard)
        delta = np.full(len(w), float(k + 1))
        return w.with_values(w.values + delta), delta, 0.0

    monkeypatch.setattr(engine, "local_train", fake_train)
    sim = Simulation(small(clients=3, rounds=1))
    fixed["shards"] = dict(enumerate(sim.shards))
    w0 = sim.state.w_global.values.copy()
    sim.run_round()
    # mean of deltas 1, 2, 3 is 2 in every coordinate
    np.testing.assert_allclose(sim.state.w_global.values, w0 + 2.0, atol=1e-15)


@pytest.mark.parametrize("mechanism", ["fedavg", "reputation", "ltf", "incentive"])
def test_worker_count_determinism(mechanism):
    cfg = small(mechanism=mechanism, adversaries=1, mech=MechanismConfig(select=2), rounds=4)
    ref = run_experiment(cfg).to_csv()
    for workers in (1, 8):
        for _ in range(2):
            assert run_experiment(cfg.replace(workers=workers)).to_csv() == ref


def test_barrier_ordering():
    trace = []
    Simulation(small(workers=4, rounds=5), trace=trace).run()
    agg = {t: i for i, e in enumerate(trace) if e[0] == "aggregate" for t in [e[1]]}
    for i, e in enumerate(trace):
        if e[0] == "train":
            t = e[1]
            assert i < agg[t]
            if t > 0:
                assert i > agg[t - 1]


def test_dropped_updates(caplog):
    def corrupt(t, k, wire):
        if k == t % 4:
            b = bytearray(wire)
            b[-1] ^= 1
            return bytes(b)
        return wire

    with caplog.at_level(logging.WARNING):
        series = Simulation(small(rounds=8), tamper=corrupt).run()
    assert [r.dropped for r in series.records] == [(t % 4,) for t in range(8)]
    assert "dropped update" in caplog.text
    acc = [r.accuracy for r in series.records]
    assert all(np.isfinite(acc)) and acc[-1] > acc[0]


def test_all_updates_dropped_carries_weights_over():
    sim = Simulation(small(rounds=1), tamper=lambda t, k, w: w[:-1] + bytes([w[-1] ^ 1]))
    w0 = sim.state.w_global.values.copy()
    rec = sim.run_round()
    assert rec.dropped == (0, 1, 2, 3)
    assert np.array_equal(sim.state.w_global.values, w0)


def test_nonce_uniqueness_per_key():
    sim = Simulation(small(rounds=20))
    sim.nonce_log = []
    sim.run()
    assert len(sim.nonce_log) == 20 * 4 * 2
    assert len(set(sim.nonce_log)) == len(sim.nonce_log)


def test_adversary_off_is_identical():
    a = run_experiment(small(mechanism="reputation", record_timing=False)).to_csv()
    b = run_experiment(small(mechanism="reputation", adversaries=0,
                             record_timing=False)).to_csv()
    assert a == b
    c = run_experiment(small(mechanism="reputation", adversaries=1, record_timing=False)).to_csv()
    assert c != a


def test_adversaries_are_highest_ids():
    sim = Simulation(small(adversaries=2))
    assert [p.adversarial for p in sim.profiles] == [False, False, True, True]


def test_free_rider_uploads_received_model():
    sim = Simulation(small(mechanism="incentive", rounds=3), free_riders=[1])
    sim.run()
    pay = np.array([r.payouts for r in sim.series.records])
    assert pay.shape == (3, 4)
    assert np.all(pay[:, 1] == 0.0)


def test_eval_every():
    series = run_experiment(small(rounds=5, eval_every=2))
    assert [r.accuracy is not None for r in series.records] == [False, True, False, True, True]


def test_metric_series_round_trip():
    series = run_experiment(small(mechanism="reputation"))
    back = MetricSeries.from_dict(json.loads(json.dumps(series.to_dict())))
    assert back.to_csv() == series.to_csv()
    assert back.records == series.records
    assert 0 <= series.final_accuracy <= 1 and series.total_bytes > 0


def test_config_hash_ignores_workers():
    cfg = small()
    h = config_hash(cfg)
    assert len(h) == 16 and int(h, 16) >= 0
    assert config_hash(cfg.replace(workers=7)) == h
    assert config_hash(cfg.replace(seed=4)) != h


def test_scheme_names():
    assert parse_scheme("reputation@1") == ("reputation", 1)
    assert parse_scheme("fedavg") == ("fedavg", 0)
    assert scheme_label("fedavg") == "AES-FL"
    assert scheme_label("ltf") == "LTF Constraint"
    assert scheme_label("reputation", 0) == "Reputation A = 0"
    assert scheme_label("reputation", 1) == "Reputation A = 1"
    with pytest.raises(ConfigError):
        parse_scheme("krum")
    with pytest.raises(ConfigError):
        parse_scheme("reputation@x")


def test_sweep_cross_product_and_cache(tmp_path, caplog):
    base = small(rounds=2, clients=3, data=DataConfig(samples=300), record_timing=False)
    schemes = ["fedavg", "ltf", "reputation", "reputation@1"]
    base = base.replace(mech=MechanismConfig(select=2))
    res = run_sweep(base, [0.2, 0.4, 0.7], schemes, [0, 1, 2], tmp_path)
    assert len(res.cells) == 36 and res.computed == 36
    assert len(list(tmp_path.glob("*.json"))) == 36
    again = run_sweep(base, [0.2, 0.4, 0.7], schemes, [0, 1, 2], tmp_path)
    assert again.computed == 0 and again.cached == 36
    # single-run equivalence
    key = ("reputation@1", 0.4, 1)
    single = run_experiment(res.configs[key])
    assert single.to_csv() == res.cells[key].to_csv()
    # corrupt one cell: it is recomputed with a warning
    victim = tmp_path / f"{config_hash(res.configs[key])}.json"
    victim.write_text("{not json")
    with caplog.at_level(logging.WARNING):
        third = run_sweep(base, [0.2, 0.4, 0.7], schemes, [0, 1, 2], tmp_path)
    assert third.computed == 1 and "recomputing" in caplog.text
    assert third.cells[key].to_csv() == single.to_csv()


def test_sweep_needs_grids():
    with pytest.raises(ConfigError):
        run_sweep(small(), [], ["fedavg"], [0])

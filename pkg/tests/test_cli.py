import subprocess
import sys

import pytest

from fafl import cli
from fafl.channel import SECRET_ENV

FAST = ["--clients", "5", "--no-timing"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_run_smoke(tmp_path, capsys):
    code, out, err = run(["run", "--mechanism", "fedavg", "--rounds", "5", "--seed", "1",
                          "--out", str(tmp_path / "o")], capsys)
    assert code == 0, err
    metrics = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 6 and metrics[0].startswith("round,accuracy")
    assert (tmp_path / "o" / "timing.csv").exists()
    assert "final accuracy" in out


def test_alpha_out_of_range(capsys):
    code, _, err = run(["run", "--alpha", "1.5"], capsys)
    assert code == 1
    assert err.strip() == "FAFL-E-CONFIG: alpha must lie in [0,1]"


def test_unknown_flag(capsys):
    code, _, err = run(["run", "--bogus"], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert lines[0].startswith("usage:")
    assert lines[-1].startswith("FAFL-E-USAGE: ")
    code, _, err = run([], capsys)
    assert code == 1 and err.strip().splitlines()[-1].startswith("FAFL-E-USAGE")


CONFIG = """
clients = 6
rounds = 9
seed = 4
encrypt = true
workers = 1
adversaries = 0
record_timing = true

[partition]
alpha = 0.1
max_labels = 1

[mechanism]
name = "bgl"
"""


@pytest.mark.parametrize("flag,value,check", [
    ("--mechanism", "afl", lambda c: c.mechanism == "afl"),
    ("--alpha", "0.9", lambda c: c.partition.alpha == 0.9),
    ("--noniid-classes", "2", lambda c: c.partition.max_labels == 2),
    ("--rounds", "2", lambda c: c.rounds == 2),
    ("--seed", "77", lambda c: c.seed == 77),
    ("--no-encrypt", None, lambda c: c.encrypt is False),
    ("--clients", "4", lambda c: c.clients == 4),
    ("--workers", "3", lambda c: c.workers == 3),
    ("--adversaries", "1", lambda c: c.adversaries == 1),
    ("--no-timing", None, lambda c: c.record_timing is False),
])
def test_flags_override_file(tmp_path, flag, value, check):
    p = tmp_path / "c.toml"
    p.write_text(CONFIG)
    parser = cli.build_parser()
    base = cli._resolve(parser.parse_args(["run", "--config", str(p)]))
    assert base.clients == 6 and base.mechanism == "bgl" and not check(base)
    argv = ["run", "--config", str(p), flag] + ([value] if value is not None else [])
    assert check(cli._resolve(parser.parse_args(argv)))


def test_sweep_flags_override_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(CONFIG)
    args = cli.build_parser().parse_args(["sweep", "--config", str(p), "--rounds", "3",
                                          "--noniid-classes", "2"])
    cfg = cli._resolve(args)
    assert (cfg.rounds, cfg.partition.max_labels, cfg.clients) == (3, 2, 6)


def test_sweep_then_report(tmp_path, capsys):
    out = tmp_path / "sw"
    argv = ["sweep", "--rounds", "2", "--alphas", "0.2,0.7", "--mechanisms",
            "fedavg,ltf,reputation,reputation@1", "--seeds", "0,1", "--out-dir", str(out)] + FAST
    code, text, err = run(argv, capsys)
    assert code == 0, err
    assert "16 cells (16 computed, 0 cached)" in text
    code, text, _ = run(argv + ["--resume"], capsys)
    assert "(0 computed, 16 cached)" in text
    csv_path, svg_path = tmp_path / "r.csv", tmp_path / "r.svg"
    code, _, err = run(["report", "--in-dir", str(out), "--csv", str(csv_path),
                        "--svg", str(svg_path)], capsys)
    assert code == 0, err
    rows = csv_path.read_bytes().split(b"\r\n")[1:-1]
    assert len(rows) == len(list(out.glob("*.json"))) == 16
    assert svg_path.read_text().startswith("<?xml")


def test_identical_invocations_give_identical_csv(tmp_path, capsys):
    outputs = []
    for i in range(2):
        d = tmp_path / f"s{i}"
        assert run(["sweep", "--rounds", "2", "--alphas", "0.4", "--mechanisms", "fedavg,ltf",
                    "--seeds", "5", "--out-dir", str(d)] + FAST, capsys)[0] == 0
        assert run(["report", "--in-dir", str(d), "--csv", str(d / "r.csv")], capsys)[0] == 0
        outputs.append((d / "r.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_runtime_error_exit_2(tmp_path, capsys):
    code, _, err = run(["report", "--in-dir", str(tmp_path)], capsys)
    assert code == 2
    assert len(err.strip().splitlines()) == 1 and err.startswith("FAFL-E-RUNTIME: ")
    code, _, err = run(["report", "--in-dir", str(tmp_path / "nope")], capsys)
    assert code == 2 and err.startswith("FAFL-E-REPORT: ")


def test_csv_source_missing_file_is_runtime_error(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text(f'[data]\nsource = "csv"\npath = "{tmp_path / "absent.csv"}"\n')
    code, _, err = run(["run", "--config", str(p), "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and err.startswith("FAFL-E-INGEST: ")


def test_validate_config(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text(CONFIG)
    code, out, _ = run(["validate-config", str(p)], capsys)
    assert code == 0 and 'name = "bgl"' in out
    p.write_text("clients = -1\n")
    code, _, err = run(["validate-config", str(p)], capsys)
    assert code == 1 and err.strip() == f"FAFL-E-CONFIG: {p}:1: clients must be >= 1"
    code, _, err = run(["validate-config"], capsys)
    assert code == 1 and err.startswith("FAFL-E-USAGE")


def test_bad_master_secret_from_environment(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv(SECRET_ENV, "not-hex")
    code, _, err = run(["run", "--rounds", "1", "--out", str(tmp_path / "o")] + FAST, capsys)
    assert code == 1 and err.startswith("FAFL-E-CONFIG: ")
    monkeypatch.setenv(SECRET_ENV, "11" * 32)
    assert run(["run", "--rounds", "1", "--out", str(tmp_path / "o")] + FAST, capsys)[0] == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fafl", "validate-config", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "validate-config" in proc.stdout

import numpy as np
import pytest

import gnnsim.cli as cli
from gnnsim.errors import InvariantViolation
from gnnsim.graph import load_edge_list, load_partition
from gnnsim.metrics import RESULT_HEADER


BASE = """
graph = sbm
blocks = 60,60
p_in = 0.2
p_out = 0.01
servers = 2
partitioner = greedy
layers = 2
fanout = 3
dim = 8
hidden = 8
classes = 4
batch = 16
epochs = 1
seed = 3
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(BASE, encoding="ascii")
    return str(path)


def test_gen_graph_writes_loadable_edge_list(tmp_path, config_file):
    out = tmp_path / "g.edges"
    assert cli.main(["gen-graph", "--config", config_file, "--out", str(out)]) == 0
    g = load_edge_list(out)
    assert g.n_vertices == 120


def test_gen_graph_binary_cache(tmp_path, config_file):
    out = tmp_path / "g.csr"
    assert cli.main(["gen-graph", "--config", config_file, "--out", str(out)]) == 0
    from gnnsim.graph import load_csr
    assert load_csr(out).n_vertices == 120


def test_partition_subcommand(tmp_path, config_file):
    out = tmp_path / "parts.txt"
    assert cli.main(["partition", "--config", config_file, "--out", str(out)]) == 0
    p = load_partition(out)
    assert p.n_vertices == 120
    assert p.n_servers == 2


def test_train_emits_results_csv(tmp_path, config_file):
    out = tmp_path / "res.csv"
    assert cli.main(["train", "--config", config_file, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == RESULT_HEADER
    assert len(lines) == 2
    assert lines[1].split(",")[1] == "micrograph"


def test_locality_subcommand(tmp_path, config_file):
    out = tmp_path / "loc.csv"
    rc = cli.main(["locality", "--config", config_file, "--out", str(out),
                   "--partitioners", "hash,greedy", "--servers-list", "2",
                   "--iterations", "1"])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3


def test_merge_study_subcommand(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(BASE + "epochs = 4\nsync_overhead = 50\nbatch = 8\n",
                    encoding="ascii")
    out = tmp_path / "merge.csv"
    assert cli.main(["merge-study", "--config", str(path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == cli.MERGE_HEADER
    assert any("accepted" in line or "rejected" in line for line in lines[1:])


def test_compare_two_runs_byte_identical(tmp_path, config_file):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert cli.main(["compare", "--config", config_file, "--out", str(a)]) == 0
    assert cli.main(["compare", "--config", config_file, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_override_changes_output(tmp_path, config_file):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    cli.main(["train", "--config", config_file, "--out", str(a)])
    cli.main(["train", "--config", config_file, "--seed", "99", "--out", str(b)])
    assert a.read_text() != b.read_text()


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("strategy = nonsense\n", encoding="ascii")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_invariant_violation_exit_code(monkeypatch, config_file):
    def boom(cfg):
        raise InvariantViolation("replicas diverged")

    monkeypatch.setattr(cli, "run_strategy", boom)
    assert cli.main(["train", "--config", config_file]) == 3

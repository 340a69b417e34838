import csv
import json

import numpy as np
import pytest
import torch

from qvrp import config as cfgmod
from qvrp.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from qvrp.cli import main
from qvrp.instances import AICHI_EIGHT
from qvrp.orchestrator import groups_from_json

from test_policy import small_policy

TINY_TRAIN = dict(
    model=dict(d=16, d_ff=32, n_heads=2, encoder_quantum_heads=1),
    train=dict(num_epochs=2, batch_size=4, eval_size=4, learning_rate=1e-3,
               instances=dict(n_nodes=4, n_trucks=1, n_demands=3)),
)


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write(root / "train.json", TINY_TRAIN)
    assert main(["train", "--config", cfg, "--seed", "1", "--workers", "1", "--out", str(root / "run")]) == 0
    return root / "run"


@pytest.fixture(scope="module")
def instance_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("inst")
    cfg = write(root / "gen.json", dict(spec=dict(n_nodes=8, n_groups=6, total_boxes=30, seed=2)))
    assert main(["gen-instance", "--config", cfg, "--out", str(root)]) == 0
    return root / "instance.json"


def test_checkpoint_round_trip(tmp_path):
    p = small_policy(0, encoder_quantum_heads=1)
    save_checkpoint(tmp_path / "c", p, clip=2.5, n_nodes=4, n_trucks=1, extra=dict(note="x"))
    back, manifest = load_checkpoint(tmp_path / "c")
    for (k, a), (k2, b) in zip(p.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    assert manifest["clip"] == 2.5 and manifest["n_nodes"] == 4 and manifest["extra"] == {"note": "x"}


def test_corrupt_checkpoint_is_rejected(tmp_path):
    p = small_policy(0)
    save_checkpoint(tmp_path / "c", p, clip=1.0, n_nodes=4, n_trucks=1)
    blob = tmp_path / "c" / "tensors.f64"
    data = bytearray(blob.read_bytes())
    data[0] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "d", p, clip=1.0, n_nodes=4, n_trucks=1)
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    man["policy_config"]["d"] = 32
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d")


def test_train_outputs(trained):
    rows = list(csv.DictReader((trained / "metrics.csv").open()))
    assert len(rows) == 2
    assert (trained / "checkpoint" / "manifest.json").exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["seed"] == 1 and cfg["train"]["seed"] == 1
    _, manifest = load_checkpoint(trained / "checkpoint")
    assert manifest["n_nodes"] == 4 and manifest["n_trucks"] == 1


def test_train_rerun_is_byte_identical(trained, tmp_path):
    cfg = write(tmp_path / "train.json", TINY_TRAIN)
    assert main(["train", "--config", cfg, "--seed", "1", "--workers", "1", "--out", str(tmp_path / "run")]) == 0
    for name in ("metrics.csv", "config.json", "checkpoint/tensors.f64", "checkpoint/manifest.json"):
        assert (trained / name).read_bytes() == (tmp_path / "run" / name).read_bytes(), name


def solve(tmp_path, checkpoint, instance, out="solve", extra=()):
    return main(["solve", "--checkpoint", str(checkpoint), "--instance", str(instance), "--seed", "0",
                 "--workers", "1", "--out", str(tmp_path / out), *extra])


def test_solve_reports_and_rerun_is_byte_identical(trained, instance_file, tmp_path):
    assert solve(tmp_path, trained / "checkpoint", instance_file, "a") == 0
    assert solve(tmp_path, trained / "checkpoint", instance_file, "b") == 0
    for name in ("report.json", "routes.csv", "demand_share.csv", "iterations.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["fulfillment_fraction"] == pytest.approx(1.0)
    header = (tmp_path / "a" / "routes.csv").read_text().splitlines()[0]
    assert header == "Truck,Departure Time,Departure Node"


def test_exit_code_config_error(tmp_path):
    bad = write(tmp_path / "bad.json", dict(model=dict(d="big")))
    assert main(["train", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    unknown = write(tmp_path / "unknown.json", dict(colour="red"))
    assert main(["gen-instance", "--config", unknown, "--out", str(tmp_path / "y")]) == 2
    assert main(["train", "--preset", "nope", "--out", str(tmp_path / "z")]) == 2
    assert main(["benchmark-qonn", "--workers", "0"]) == 2


def test_exit_code_incompatible_artifact(trained, instance_file, tmp_path):
    assert solve(tmp_path, tmp_path / "nothing", instance_file) == 3
    cfg = write(tmp_path / "solve.json", dict(search=dict(n_prime=6)))
    assert solve(tmp_path, trained / "checkpoint", instance_file, extra=("--config", cfg)) == 3
    tiny = write(tmp_path / "tiny.json", dict(nodes=[dict(id=0), dict(id=1)],
                                              time_matrix=[[0, 60], [60, 0]], trucks=[dict(capacity=10.0)],
                                              horizon_s=1000.0, demand=[]))
    assert solve(tmp_path, trained / "checkpoint", tiny) == 3


def test_exit_code_runtime_abort(trained, tmp_path):
    # demand exists but no drive fits inside the horizon
    doc = dict(nodes=[dict(id=i, x=i / 4, y=0.0) for i in range(4)],
               time_matrix=[[0 if i == j else 600 for j in range(4)] for i in range(4)],
               trucks=[dict(capacity=10.0)], horizon_s=100.0,
               demand=[dict(kind="direct", nodes=[1, 2], volume=1.0)])
    assert solve(tmp_path, trained / "checkpoint", write(tmp_path / "stuck.json", doc)) == 4


def test_quantum_preset_layout():
    run = cfgmod.load("train", None, cfgmod.TRAIN_PRESETS["quantum-rank2"])
    m = run.model
    assert (m.d, m.n_heads, m.head_dim) == (64, 8, 8)
    assert m.encoder_quantum_heads == 8 and m.encoder_quantum_projections == ("query", "key")
    assert m.decoder_quantum_heads == 0
    assert run.train.instances.rank3_fraction == 0.0 and run.train.instances.n_nodes == 8
    for name in cfgmod.TRAIN_PRESETS:
        cfgmod.load("train", None, cfgmod.TRAIN_PRESETS[name])


def test_schema_rejects_unknown_and_mistyped_keys():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("train", dict(train=dict(epochs=3)))
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("solve", dict(search=dict(n_prime=2.5)))
    run = cfgmod.parse("solve", dict(shifts=[[0, 100]]))
    assert run.shifts == ((0.0, 100.0),)
    assert cfgmod.schema("train")["additionalProperties"] is False


def test_default_benchmark_counts(tmp_path):
    assert main(["benchmark-qonn", "--workers", "1", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "benchmark.json").read_text())
    assert summary["circuits"] == 210 and summary["measurements"] == 105_000
    with (tmp_path / "benchmark.csv").open() as fh:
        # one row per output component: 10 trials times 4 + 5 + ... + 10 qubits
        assert sum(1 for _ in csv.DictReader(fh)) == 490


def test_gen_instance_names_and_round_trip(tmp_path):
    assert main(["gen-instance", "--preset", "eight-node", "--seed", "5", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "instance.json").read_text())
    assert [n["name"] for n in doc["nodes"]] == AICHI_EIGHT
    groups = groups_from_json(doc["box_groups"])
    assert len(groups) == 20 and sum(g.count for g in groups) == 200
    from qvrp.env import Instance
    inst = Instance.from_dict(doc)
    assert inst.n == 8 and inst.names == AICHI_EIGHT

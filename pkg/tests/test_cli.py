import json
import struct

import numpy as np
import pytest

from kprnn.archive import FORMAT_VERSION, load_archive, save_archive
from kprnn.cells import CellSpec
from kprnn.cli import config_hash, main
from kprnn.datasets import write_csv_sequences
from kprnn.train import SequenceDataset, build_model, make_separable_sequences


@pytest.fixture
def toy(tmp_path):
    data = make_separable_sequences(64, 16, 8, 2, 0.5, seed=0)
    write_csv_sequences(tmp_path / "toy.csv", data)
    cfg = {"seed": 0, "n_classes": 2,
           "cell": {"family": "rnn", "input_size": 8, "hidden_size": 64, "operator": "kron"},
           "dataset": {"path": "toy.csv", "format": "csv"},
           "train": {"lr": 0.02, "batch_size": 16, "epochs": 20}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestPlan:
    def test_154x164(self, capsys):
        code, out, _ = run(capsys, "plan", 154, 164, "--json")
        plan = json.loads(out)
        assert code == 0 and plan["compression"] >= 49.8
        _, out, _ = run(capsys, "plan", 154, 164, "--strategy", "greedy")
        assert "49.81x" in out and "(14, 4)" in out

    def test_256(self, capsys):
        _, out, _ = run(capsys, "plan", 256, 256)
        assert "128.00x" in out and "(16, 16) (x) (16, 16)" in out

    def test_prime_warns(self, capsys):
        code, _, err = run(capsys, "plan", 7, 7)
        assert code == 0 and "degenerate" in err

    def test_non_integer_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["plan", "1.5", "8"])
        assert info.value.code == 2


class TestTrainEval:
    def test_train_then_eval_matches(self, toy, capsys):
        code, out, _ = run(capsys, "train", "--config", toy / "cfg.json", "--out", toy / "run")
        assert code == 0
        lines = (toy / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=") and lines[1] == "# seed=0"
        assert lines[2] == "epoch,loss,accuracy" and len(lines) == 3 + 21
        final_acc = float(lines[-1].split(",")[2])
        assert final_acc == 100.0
        saved = json.loads((toy / "run" / "config.json").read_text())
        assert saved["config_hash"] == lines[0].split("=")[1] and saved["seed"] == 0
        model, manifest = load_archive(toy / "run" / "model.kpa")
        assert manifest["metadata"]["seed"] == 0
        assert manifest["metadata"]["config_hash"] == lines[0].split("=")[1]
        assert manifest["spec"]["operator"] == "kron"
        code, out, _ = run(capsys, "eval", toy / "run" / "model.kpa", "--data", toy / "toy.csv")
        assert code == 0 and out.strip() == f"accuracy: {final_acc:.2f}"

    def test_same_seed_byte_identical(self, toy, capsys):
        for d in ("a", "b"):
            assert run(capsys, "train", "--config", toy / "cfg.json", "--out", toy / d)[0] == 0
        a, b = toy / "a", toy / "b"
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "model.kpa").read_bytes() == (b / "model.kpa").read_bytes()

    def test_overrides_change_hash(self, toy, capsys):
        run(capsys, "train", "--config", toy / "cfg.json", "--out", toy / "a")
        run(capsys, "train", "--config", toy / "cfg.json", "--out", toy / "a2", "--seed", "5",
            "--operator", "lowrank")
        h1 = (toy / "a" / "metrics.csv").read_text().splitlines()[0]
        h2, s2 = (toy / "a2" / "metrics.csv").read_text().splitlines()[:2]
        assert h1 != h2 and s2 == "# seed=5"
        _, manifest = load_archive(toy / "a2" / "model.kpa")
        assert manifest["spec"]["operator"] == "lowrank"

    def test_bad_config_path(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", tmp_path / "missing.json")
        assert code == 2 and "not found" in err

    def test_bad_dataset_path(self, toy, capsys):
        cfg = json.loads((toy / "cfg.json").read_text())
        cfg["dataset"]["path"] = "nope.csv"
        (toy / "bad.json").write_text(json.dumps(cfg))
        assert run(capsys, "train", "--config", toy / "bad.json")[0] == 2

    def test_shape_mismatch(self, toy, capsys):
        cfg = json.loads((toy / "cfg.json").read_text())
        cfg["cell"]["input_size"] = 5
        (toy / "bad.json").write_text(json.dumps(cfg))
        code, _, err = run(capsys, "train", "--config", toy / "bad.json", "--out", toy / "x")
        assert code == 1 and "features" in err

    def test_eval_errors(self, toy, capsys):
        model = build_model(CellSpec("rnn", 8, 4), 2)
        save_archive(toy / "m.kpa", model)
        (toy / "empty.csv").write_text("sequence_id,step,label,f0\n")
        code, _, err = run(capsys, "eval", toy / "m.kpa", "--data", toy / "empty.csv")
        assert code == 1 and "empty" in err
        assert run(capsys, "eval", toy / "none.kpa", "--data", toy / "toy.csv")[0] == 2
        data = bytearray((toy / "m.kpa").read_bytes())
        struct.pack_into("<I", data, 8, FORMAT_VERSION + 7)
        (toy / "v.kpa").write_bytes(bytes(data))
        code, _, err = run(capsys, "eval", toy / "v.kpa", "--data", toy / "toy.csv")
        assert code == 1 and "version" in err

    def test_dense_and_kron_equivalent_models(self, toy, capsys):
        kron = build_model(CellSpec("lstm", 8, 8, operator="kron"), 2, seed=3)
        dense = kron.clone()
        dense.cells = [c.dense_equivalent() for c in kron.cells]
        save_archive(toy / "k.kpa", kron)
        save_archive(toy / "d.kpa", dense)
        outs = [run(capsys, "eval", toy / f"{n}.kpa", "--data", toy / "toy.csv", "--json")[1]
                for n in ("k", "d")]
        a, b = (json.loads(o) for o in outs)
        assert a["accuracy"] == b["accuracy"]
        assert a["loss"] == pytest.approx(b["loss"], rel=1e-12)

    def test_idx_config(self, tmp_path, capsys):
        from kprnn.datasets import write_idx
        rng = np.random.default_rng(0)
        write_idx(tmp_path / "x.idx", rng.integers(0, 256, (20, 6, 6), dtype=np.uint8))
        write_idx(tmp_path / "y.idx", (np.arange(20) % 2).astype(np.uint8))
        cfg = {"cell": {"family": "gru", "input_size": 6, "hidden_size": 6, "operator": "sparse"},
               "dataset": {"path": "x.idx", "labels_path": "y.idx", "format": "idx"},
               "train": {"epochs": 1}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run(capsys, "train", "--config", tmp_path / "c.json", "--out", tmp_path / "o")[0] == 0
        code, out, _ = run(capsys, "eval", tmp_path / "o" / "model.kpa", "--data", tmp_path / "x.idx",
                           "--format", "idx", "--labels", tmp_path / "y.idx")
        assert code == 0 and out.startswith("accuracy: ")


class TestAnalyze:
    def test_kron_model_records(self, tmp_path, capsys):
        model = build_model(CellSpec("lstm", 8, 8, operator="kron"), 2, bidirectional=True, seed=0)
        save_archive(tmp_path / "m.kpa", model, metadata={"seed": 9, "config_hash": "h"})
        code, out, _ = run(capsys, "analyze", tmp_path / "m.kpa", "--out", tmp_path / "s.jsonl")
        records = [json.loads(line) for line in out.splitlines()]
        assert code == 0 and [r["label"] for r in records] == ["fwd.op", "bwd.op"]
        for r in records:
            assert r["seed"] == 9 and r["config_hash"] == "h"
            assert r["condition_number"] is not None
            assert all(f["full_rank"] and f["condition_number"] for f in r["factors"])
        assert (tmp_path / "s.jsonl").read_text() == out

    def test_rank_one_lowrank(self, tmp_path, capsys):
        model = build_model(CellSpec("rnn", 4, 6, operator="lowrank", rank=1), 2, seed=0)
        save_archive(tmp_path / "m.kpa", model)
        _, out, _ = run(capsys, "analyze", tmp_path / "m.kpa")
        assert json.loads(out)["numerical_rank"] == 1

    def test_per_gate_blocks(self, tmp_path, capsys):
        model = build_model(CellSpec("gru", 4, 4, operator="kron", per_gate=True), 2, seed=0)
        save_archive(tmp_path / "m.kpa", model)
        _, out, _ = run(capsys, "analyze", tmp_path / "m.kpa")
        assert [json.loads(line)["label"] for line in out.splitlines()] == \
            ["fwd.op.0", "fwd.op.1", "fwd.op.2"]

    def test_corrupt(self, tmp_path, capsys):
        (tmp_path / "bad.kpa").write_bytes(b"KPRNNARC" + b"\x00" * 4)
        assert run(capsys, "analyze", tmp_path / "bad.kpa")[0] == 1


class TestBench:
    def test_factors_chain(self, tmp_path, capsys):
        code, out, _ = run(capsys, "bench", "--factors", 8, "--out", tmp_path)
        rows = [json.loads(line) for line in (tmp_path / "results.jsonl").read_text().splitlines()]
        chain = next(r for r in rows if r["label"] == "chain-8")
        assert code == 0 and chain["config"]["ratio_to_dense"] > 1
        assert all("seed" in r and "config_hash" in r for r in rows)
        table = (tmp_path / "table.txt").read_text().splitlines()
        assert table[0] == f"# config_hash={rows[0]['config_hash']}" and table[1] == "# seed=0"
        assert table[2].startswith("label")

    def test_aa(self, tmp_path, capsys):
        code, out, _ = run(capsys, "bench", "--aa", "--out", tmp_path)
        assert code == 0 and "within_3_mad" in json.loads(out)

    def test_default_cells_use_benchmark_presets(self, tmp_path, capsys):
        run(capsys, "bench", "--suite", "cells", "--out", tmp_path)
        labels = {json.loads(line)["label"].split("/")[0]
                  for line in (tmp_path / "results.jsonl").read_text().splitlines()}
        assert labels == {"mnist-lstm", "usps-fastrnn", "kws-lstm", "har1-bilstm"}

    def test_bad_sizes(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["bench", "--sizes", "12by4", "--out", str(tmp_path)])
        assert info.value.code == 2


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [2]}) == config_hash({"b": [2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_empty_dataset_object():
    assert len(SequenceDataset(np.zeros((0, 3, 2)), [])) == 0

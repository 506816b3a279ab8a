import json
import subprocess
import sys

import numpy as np
import pytest

from vbtensor import overlay as vt
from vbtensor.bench import bench, bench_backward_gate, bench_op
from vbtensor.cli import main as cli_main
from vbtensor.parity import check_parity
from vbtensor.train import TrainConfig, train_reversal


class TestTrainReversal:
    def test_zero_steps_emits_header_only(self):
        recs = train_reversal(TrainConfig(steps=0))
        assert len(recs) == 1
        assert recs[0]["record"] == "header"
        assert recs[0]["task"] == "reversal"

    def test_metric_record_schema(self):
        recs = train_reversal(TrainConfig(steps=2, batch=4, seq_len=4,
                                          d_model=16, n_heads=2, vocab=8))
        for rec in recs[1:]:
            assert set(rec.keys()) == {"step", "loss", "token_acc",
                                       "wallclock_ms"}

    def test_same_seed_identical_loss_streams(self):
        cfg = dict(steps=5, batch=4, seq_len=4, d_model=16, n_heads=2, vocab=8,
                   seed=7)
        r1 = train_reversal(TrainConfig(**cfg))
        r2 = train_reversal(TrainConfig(**cfg))
        assert [r["loss"] for r in r1[1:]] == [r["loss"] for r in r2[1:]]

    def test_loss_decreases_quickly(self):
        recs = train_reversal(TrainConfig(steps=60))
        losses = [r["loss"] for r in recs[1:]]
        assert all(np.isfinite(losses))
        assert losses[-1] < 0.7 * losses[0]

    def test_checkpoint_saved(self, tmp_path):
        from vbtensor.interop import load_safetensors
        path = str(tmp_path / "ckpt.safetensors")
        train_reversal(TrainConfig(steps=2, batch=4, seq_len=4, d_model=16,
                                   n_heads=2, vocab=8, checkpoint=path))
        tensors, meta = load_safetensors(path)
        assert "tok_emb" in tensors
        assert meta["task"] == "reversal"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(d_model=10, n_heads=4).validate()
        with pytest.raises(ValueError):
            TrainConfig(task="minigpt").validate()

    def test_virt_device_training_loop(self, fresh_runtime):
        """Routing through the virtual device exercises streams + allocator."""
        recs = train_reversal(TrainConfig(steps=6, batch=4, seq_len=4,
                                          d_model=16, n_heads=2, vocab=8,
                                          device="virt:0"))
        losses = [r["loss"] for r in recs[1:]]
        assert len(losses) == 6
        assert all(np.isfinite(losses))
        stats = vt.memory_stats(0)
        assert stats["allocated_bytes"]["allocated_total"] > 0

    def test_virt_training_hazard_free(self, fresh_runtime):
        """The whole stack (engine, allocator, markers, D2H syncs) must keep
        correct happens-before under the detector during a training loop."""
        fresh_runtime.device(0).hazard_check_mode(True)
        recs = train_reversal(TrainConfig(steps=8, batch=4, seq_len=4,
                                          d_model=16, n_heads=2, vocab=8,
                                          device="virt:0"))
        fresh_runtime.device(0).synchronize()
        assert all(np.isfinite([r["loss"] for r in recs[1:]]))
        assert fresh_runtime.device(0).hazard_reports() == []

    def test_virt_matches_host_run(self, fresh_runtime):
        cfg = dict(steps=4, batch=4, seq_len=4, d_model=16, n_heads=2,
                   vocab=8, seed=11)
        host = train_reversal(TrainConfig(**cfg, device="host"))
        virt = train_reversal(TrainConfig(**cfg, device="virt:0"))
        h = np.array([r["loss"] for r in host[1:]])
        v = np.array([r["loss"] for r in virt[1:]])
        assert np.max(np.abs(h - v)) <= 1e-12


class TestRuntimeEnv:
    def test_env_vars_configure_runtime(self, monkeypatch):
        from vbtensor.runtime import reset_runtime
        monkeypatch.setenv("VBT_VIRT_DEVICES", "2")
        monkeypatch.setenv("VBT_VIRT_SEED", "5")
        monkeypatch.setenv("VBT_VIRT_CAPACITY", str(16 << 20))
        rt = reset_runtime()
        assert rt.num_devices == 2
        assert rt.seed == 5
        assert rt.devices[0].capacity_bytes == 16 << 20
        monkeypatch.delenv("VBT_VIRT_DEVICES")
        monkeypatch.delenv("VBT_VIRT_SEED")
        monkeypatch.delenv("VBT_VIRT_CAPACITY")
        rt = reset_runtime()
        assert rt.num_devices == 4  # defaults restored
        assert rt.seed == 0


class TestBench:
    def test_op_add_report_schema(self):
        report = bench_op("add", shape=(1024,), reps=5, warmup=2, seed=0)
        for field in ("region", "mean_ms", "var_ms2", "reps", "warmup",
                      "backend_active"):
            assert field in report
        assert report["region"] == "op:add"
        assert report["warmup"] == 2
        if "lanes" in report:
            assert "fallback" in report["lanes"]

    def test_backward_gate_exactly_one_winner_per_round(self):
        report = bench_backward_gate(k_threads=4, rounds=5, seed=0)
        assert report["success_per_round"] == [1] * 5
        assert report["rejected_per_round"] == [3] * 5

    def test_backward_gate_deterministic_counts(self):
        r1 = bench_backward_gate(k_threads=3, rounds=3, seed=1)
        r2 = bench_backward_gate(k_threads=3, rounds=3, seed=1)
        assert r1["rejected_per_round"] == r2["rejected_per_round"]

    def test_unknown_region(self):
        from vbtensor.errors import VbtError
        with pytest.raises(VbtError):
            bench("nonsense")


class TestParity:
    def test_shipped_manifest_passes(self):
        report = check_parity()
        assert report["ok"], f"missing: {report['missing']}"

    def test_bogus_symbol_detected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps(
            ["vbtensor.overlay.add", "vbtensor.overlay.not_a_symbol"]))
        report = check_parity(manifest)
        assert not report["ok"]
        assert report["missing"] == ["vbtensor.overlay.not_a_symbol"]

    def test_empty_manifest_vacuous_pass(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text("[]")
        assert check_parity(manifest)["ok"]


class TestCli:
    def test_selftest_exit_zero(self, capsys):
        assert cli_main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_ops_lists_operators(self, capsys):
        assert cli_main(["ops"]) == 0
        out = capsys.readouterr().out
        assert "vt::add" in out
        assert "vt::attention" in out

    def test_train_reversal_jsonl(self, capsys):
        rc = cli_main(["train-reversal", "--steps", "2", "--batch", "4",
                       "--seq-len", "4", "--d-model", "16", "--n-heads", "2",
                       "--vocab", "8"])
        assert rc == 0
        lines = [json.loads(line) for line in
                 capsys.readouterr().out.strip().splitlines()]
        assert lines[0]["record"] == "header"
        assert {"step", "loss", "token_acc", "wallclock_ms"} <= set(lines[1])

    def test_parity_subcommand(self, capsys):
        assert cli_main(["parity"]) == 0

    def test_snapshot_dump_schema(self, capsys):
        assert cli_main(["snapshot-dump", "--device", "0"]) == 0
        snap = json.loads(capsys.readouterr().out)
        assert set(snap.keys()) == {"device", "segments"}

    def test_hazard_dump(self, capsys):
        assert cli_main(["snapshot-dump", "--device", "0", "--hazards"]) == 0
        assert isinstance(json.loads(capsys.readouterr().out), list)

    def test_allreduce_demo(self, capsys):
        rc = cli_main(["allreduce-demo", "--world", "3", "--elems", "7"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.strip().endswith("PASS")

    def test_bench_subcommand(self, capsys):
        rc = cli_main(["bench", "--region", "op:add", "--shape", "256",
                       "--reps", "3", "--warmup", "1"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["region"] == "op:add"

    def test_entrypoint_subprocess(self):
        proc = subprocess.run(
            [sys.executable, "-m", "vbtensor.cli", "parity"],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr

"""Acceptance suite: one test per criterion, at its stated tolerance.

Each test prints a single line:  ACCEPT <criterion>: PASS (<details>)
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines live.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

import vbtensor.overlay as vt
from vbtensor.bench import bench_backward_gate
from vbtensor.dtypes import DType
from vbtensor.fabric import get_fabric
from vbtensor.interop import load_safetensors, save_safetensors
from vbtensor.iterator import OperandSpec, build_iter, for_each
from vbtensor.parity import check_parity
from vbtensor.runtime import reset_runtime
from vbtensor.storage import as_strided, make_tensor
from vbtensor.train import TrainConfig, train_reversal

from oracles.gather import broadcast_oracle, gather
from oracles.gradcheck import gradcheck
from oracles.stream_traces import run_stream_trace
from oracles.trace_runner import run_trace


def report(name: str, detail: str) -> None:
    print(f"\nACCEPT {name}: PASS ({detail})")


class TestGradcheckSuite:
    def test_all_differentiable_ops(self):
        """All 18 ops + fused attention vs central FD, F64, rel err <= 1e-5."""
        t0 = time.perf_counter()
        rng = np.random.default_rng(20250809)

        def weighted(expr_fn, shape):
            w = rng.standard_normal(shape)

            def fn(*ts):
                out = expr_fn(*ts)
                return vt.sum(vt.mul(out, vt.tensor(w, dtype=DType.F64)))
            return fn

        a23 = rng.standard_normal((2, 3))
        b23 = rng.standard_normal((2, 3))
        pos = np.abs(rng.standard_normal((2, 3))) + 0.5
        away = rng.standard_normal((2, 3))
        away += np.where(away >= 0, 0.3, -0.3)  # keep relu off its kink
        idx = vt.tensor([2, 0], dtype=DType.I64)
        targets = vt.tensor([1, 0, 3], dtype=DType.I64)
        attn_shape = (1, 1, 3, 2)

        cases = {
            "add": (weighted(lambda a, b: vt.add(a, b), (2, 3)), [a23, b23]),
            "sub": (weighted(lambda a, b: vt.sub(a, b), (2, 3)), [a23, b23]),
            "mul": (weighted(lambda a, b: vt.mul(a, b), (2, 3)), [a23, b23]),
            "div": (weighted(lambda a, b: vt.div(a, b), (2, 3)),
                    [a23, pos]),
            "neg": (weighted(lambda a: vt.neg(a), (2, 3)), [a23]),
            "exp": (weighted(lambda a: vt.exp(a), (2, 3)), [a23]),
            "log": (weighted(lambda a: vt.log(a), (2, 3)), [pos]),
            "tanh": (weighted(lambda a: vt.tanh(a), (2, 3)), [a23]),
            "relu": (weighted(lambda a: vt.relu(a), (2, 3)), [away]),
            "matmul": (weighted(lambda a, b: vt.matmul(a, b), (2, 2)),
                       [rng.standard_normal((2, 3)),
                        rng.standard_normal((3, 2))]),
            "softmax": (weighted(lambda a: vt.softmax(a, 1), (2, 3)), [a23]),
            "log_softmax": (weighted(lambda a: vt.log_softmax(a, 1), (2, 3)),
                            [a23]),
            "sum": (weighted(lambda a: vt.sum(a, [0]), (3,)), [a23]),
            "mean": (weighted(lambda a: vt.mean(a, [1]), (2,)), [a23]),
            "reshape": (weighted(lambda a: vt.reshape(a, [6]), (6,)), [a23]),
            "transpose": (weighted(lambda a: vt.transpose(a, 0, 1), (3, 2)),
                          [a23]),
            "index_select": (weighted(lambda a: vt.index_select(a, 0, idx),
                                      (2, 3)),
                             [rng.standard_normal((4, 3))]),
            "embedding": (weighted(lambda a: vt.embedding(a, idx), (2, 3)),
                          [rng.standard_normal((4, 3))]),
            "cross_entropy": (lambda a: vt.cross_entropy(a, targets),
                              [rng.standard_normal((3, 4))]),
            "attention": (weighted(
                lambda q, k, v: vt.attention(q, k, v, causal=True),
                attn_shape),
                [rng.standard_normal(attn_shape) for _ in range(3)]),
            "attention_noncausal": (weighted(
                lambda q, k, v: vt.attention(q, k, v, causal=False),
                attn_shape),
                [rng.standard_normal(attn_shape) for _ in range(3)]),
        }
        worst = {}
        for name, (fn, arrays) in cases.items():
            worst[name] = gradcheck(fn, arrays, rel=1e-5, h=1e-6)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0, f"gradcheck suite took {elapsed:.1f}s"
        peak = max(worst.values())
        report("gradcheck-suite",
               f"{len(cases)} ops, worst rel err {peak:.2e}, {elapsed:.1f}s")


class TestViewIteratorOracle:
    def test_1000_randomized_cases(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(11)
        n_view, n_bcast = 0, 0
        for case in range(1000):
            if case % 2 == 0:
                # Strided-view reads must equal the gather oracle exactly.
                ndim = int(rng.integers(1, 5))
                sizes = rng.integers(0, 6, ndim).tolist()
                strides = rng.integers(0, 4, ndim).tolist()
                offset = int(rng.integers(0, 4))
                span = offset + (sum((s - 1) * st for s, st
                                     in zip(sizes, strides)) + 1
                                 if all(s > 0 for s in sizes) else 0)
                base = vt.tensor(rng.standard_normal(max(span, 1) + 2),
                                 dtype=DType.F64)
                view = as_strided(base, sizes, strides, offset)
                flat = base.storage.typed(np.float64)
                expect = gather(flat, sizes, strides, offset)
                assert np.array_equal(view.ndview(), expect)
                # Traversal through the iterator visits the same elements.
                dst = make_tensor(sizes, DType.F64)
                plan = build_iter([OperandSpec(dst, is_output=True),
                                   OperandSpec(view)])
                dbase = dst.storage.typed(np.float64)
                for_each(plan, lambda offs: dbase.__setitem__(
                    offs[0], flat[offs[1]]))
                assert np.array_equal(dst.ndview(), expect)
                n_view += 1
            else:
                # Broadcast add must match per-element oracle arithmetic.
                nd_a = int(rng.integers(0, 4))
                nd_b = int(rng.integers(0, 4))
                shape_a = tuple(int(x) for x in rng.integers(1, 5, nd_a))
                shape_b = tuple(int(x) for x in rng.integers(1, 5, nd_b))
                expect_shape = broadcast_oracle(shape_a, shape_b)
                a_np = rng.standard_normal(shape_a)
                b_np = rng.standard_normal(shape_b)
                a = vt.tensor(a_np, dtype=DType.F64)
                b = vt.tensor(b_np, dtype=DType.F64)
                if expect_shape is None:
                    with pytest.raises(Exception):
                        vt.add(a, b)
                else:
                    got = vt.add(a, b).numpy()
                    expect = np.empty(expect_shape)
                    for pos in np.ndindex(*expect_shape) if expect_shape \
                            else [()]:
                        ai = tuple(
                            0 if shape_a[k - (len(expect_shape)
                                              - len(shape_a))] == 1 else p
                            for k, p in enumerate(pos)
                            if k >= len(expect_shape) - len(shape_a))
                        bi = tuple(
                            0 if shape_b[k - (len(expect_shape)
                                              - len(shape_b))] == 1 else p
                            for k, p in enumerate(pos)
                            if k >= len(expect_shape) - len(shape_b))
                        expect[pos] = a_np[ai] + b_np[bi]
                    assert np.array_equal(got, expect)
                n_bcast += 1
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"view/iterator oracle took {elapsed:.1f}s"
        report("view-iterator-oracle",
               f"{n_view} view + {n_bcast} broadcast cases, {elapsed:.1f}s")


class TestAllocatorOracle:
    def test_100_randomized_traces(self):
        t0 = time.perf_counter()
        total_ops = 0
        # 99 mixed-size traces plus one full 10^4-op trace; stats, snapshots,
        # conservation and cap invariants are checked at every step.
        rng = np.random.default_rng(5)
        lengths = [int(rng.integers(100, 1500)) for _ in range(99)] + [10_000]
        for seed, n_ops in enumerate(lengths):
            total_ops += run_trace(seed * 13 + 1, n_ops=n_ops,
                                   capacity=32 << 20)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0, f"allocator oracle took {elapsed:.1f}s"
        report("allocator-oracle-equivalence",
               f"100 traces, {total_ops} ops, {elapsed:.1f}s")


class TestStreamOrderSafety:
    def test_100_seeds_zero_reports(self):
        t0 = time.perf_counter()
        for seed in range(100):
            reports = run_stream_trace(seed, n_ops=60)
            assert reports == [], f"seed {seed}: {reports[:2]}"
        elapsed = time.perf_counter() - t0
        report("stream-order-safety",
               f"100 scheduler seeds, zero hazard reports, {elapsed:.1f}s")

    def test_detector_sensitivity_negative(self):
        reports = run_stream_trace(3, n_ops=60, sabotage=True)
        assert len(reports) >= 1
        report("stream-order-safety-negative",
               f"one dropped event-wait -> {len(reports)} report(s)")


class TestGraphCaptureReplay:
    def test_replay_three_times_bitwise(self, fresh_runtime):
        rt = fresh_runtime
        dev = rt.device(0)
        alloc = rt.allocator(0)
        stream = dev.create_stream()
        rng = np.random.default_rng(0)
        a_np, b_np = rng.standard_normal(64), rng.standard_normal(64)
        a = vt.tensor(a_np, dtype=DType.F64, device="virt:0")
        b = vt.tensor(b_np, dtype=DType.F64, device="virt:0")
        dev.synchronize()
        pool = alloc.graph_pool_create()
        dev.begin_capture(stream, pool)
        with vt.stream(stream):
            tmp = vt.mul(a, b)
            out = vt.add(tmp, a)
        graph = dev.end_capture(stream)
        addr = (out.storage.block.segment.handle, out.storage.block.offset)
        expected = (a_np * b_np + a_np).tobytes()
        for i in range(3):
            dev.replay(graph, stream)
            dev.synchronize()
            assert out.ndview().tobytes() == expected, f"replay {i} differs"
            block = out.storage.block
            assert (block.segment.handle, block.offset) == addr
        report("graph-capture-replay",
               "3 replays bitwise-identical, pool addresses stable")


class TestBackwardGate:
    def test_k4_100_rounds(self):
        t0 = time.perf_counter()
        result = bench_backward_gate(k_threads=4, rounds=100, seed=0)
        assert result["success_per_round"] == [1] * 100
        assert result["rejected_per_round"] == [3] * 100
        report("backward-gate",
               f"100 rounds, 1 winner + 3 gate-busy each, "
               f"{time.perf_counter() - t0:.1f}s")


class TestRingAllreduce:
    def test_all_world_sizes(self):
        t0 = time.perf_counter()
        checked = []
        for n in (2, 3, 4, 5):
            for elems in (n * 64, n * 64 + 3):  # even and uneven chunking
                rt = reset_runtime(num_devices=n, seed=0)
                for dev in rt.devices:
                    dev.trace_enabled = True
                fabric = get_fabric(fresh=True)
                for r in range(n):
                    fabric.enable_peer(r, (r + 1) % n)
                rng = np.random.default_rng(n * 1000 + elems)
                f_data = [rng.standard_normal(elems) for _ in range(n)]
                i_data = [rng.integers(-10**6, 10**6, elems)
                          for _ in range(n)]
                f_bufs = [vt.tensor(f_data[r], dtype=DType.F64,
                                    device=f"virt:{r}") for r in range(n)]
                i_bufs = [vt.tensor(i_data[r], dtype=DType.I64,
                                    device=f"virt:{r}") for r in range(n)]
                fabric.ring_allreduce(f_bufs)
                fabric.ring_allreduce(i_bufs)
                f_expect = np.sum(np.stack(f_data), axis=0)
                i_expect = np.sum(np.stack(i_data), axis=0)
                scale = max(1.0, float(np.max(np.abs(f_expect))))
                for r in range(n):
                    assert np.max(np.abs(f_bufs[r].numpy() - f_expect)) \
                        <= 1e-12 * scale
                    assert np.array_equal(i_bufs[r].numpy(), i_expect)
                for r in range(n):
                    p2p = [e for e in rt.devices[r].trace
                           if e[2].startswith("copy:P2P")]
                    assert len(p2p) == 2 * 2 * (n - 1)  # two collectives
                checked.append((n, elems))
        reset_runtime()
        report("ring-allreduce",
               f"N in 2..5 even+uneven, I64 exact, F64 <= 1e-12, "
               f"2(N-1) steps/rank, {time.perf_counter() - t0:.1f}s")


class TestSafetensors:
    GOLDEN = Path(__file__).parent / "fixtures" / "golden_small.safetensors"
    SHA = "336f0f901bb608a8f408805f37da2cfb48f56e60d0ceb2b13c756c6c926e448a"

    def test_golden_byte_exact_roundtrip(self, tmp_path):
        raw = self.GOLDEN.read_bytes()
        assert hashlib.sha256(raw).hexdigest() == self.SHA
        loaded, meta = load_safetensors(self.GOLDEN)
        out = tmp_path / "resaved.safetensors"
        save_safetensors(out, loaded, metadata=meta)
        assert out.read_bytes() == raw

        rng = np.random.default_rng(77)
        tensors = {f"p{i}": vt.tensor(rng.standard_normal((4, 3)),
                                      dtype=DType.F64) for i in range(3)}
        p1 = tmp_path / "a.st"
        save_safetensors(p1, tensors, metadata={"k": "v"})
        l1, m1 = load_safetensors(p1)
        p2 = tmp_path / "b.st"
        save_safetensors(p2, l1, metadata=m1)
        assert p1.read_bytes() == p2.read_bytes()
        report("safetensors", "golden fixture byte-exact, "
               "save.load.save idempotent")


class TestTrainingSanity:
    def test_full_gate_99pct_within_2000_steps(self):
        t0 = time.perf_counter()
        streak = []

        def reached(rec):
            streak.append(rec["token_acc"] >= 0.99)
            return len(streak) >= 3 and all(streak[-3:])

        recs = train_reversal(TrainConfig(steps=2000, seed=0), stop=reached)
        accs = [r["token_acc"] for r in recs[1:]]
        best = max(accs)
        assert best >= 0.99, f"token accuracy peaked at {best:.4f}"
        report("training-gate",
               f"token acc {best:.4f} at step {len(accs)} "
               f"(within 2000), {time.perf_counter() - t0:.0f}s")

    def test_ci_proxy_200_steps_smoothed_loss_halves(self):
        t0 = time.perf_counter()
        recs = train_reversal(TrainConfig(steps=200, seed=0))
        losses = [r["loss"] for r in recs[1:]]
        assert all(np.isfinite(losses))

        def smooth(vals):
            out = []
            acc = vals[0]
            for v in vals:
                acc = 0.9 * acc + 0.1 * v
                out.append(acc)
            return out

        sm = smooth(losses)
        elapsed = time.perf_counter() - t0
        assert elapsed < 300.0, f"200-step proxy took {elapsed:.0f}s"
        assert sm[-1] <= 0.5 * sm[0], (
            f"smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")
        report("training-ci-proxy",
               f"smoothed loss {sm[0]:.3f} -> {sm[-1]:.3f} "
               f"({1 - sm[-1] / sm[0]:.0%} drop) in 200 steps, {elapsed:.0f}s")

    def test_determinism_same_seed(self):
        cfg = dict(steps=8, batch=8, seq_len=8, d_model=32, n_heads=2,
                   vocab=8, seed=3)
        r1 = train_reversal(TrainConfig(**cfg))
        r2 = train_reversal(TrainConfig(**cfg))
        assert [r["loss"] for r in r1[1:]] == [r["loss"] for r in r2[1:]]
        report("training-determinism", "identical loss streams for one seed")


class TestParityGate:
    def test_shipped_manifest(self):
        result = check_parity()
        assert result["ok"], f"missing symbols: {result['missing']}"
        report("parity-gate",
               f"{len(result['present'])}/{result['checked']} symbols present")


SECONDARY_SO = Path(__file__).parent.parent / "sample_plugin" / "build" / \
    "vbt_sample_plugin.so"


@pytest.mark.skipif(not SECONDARY_SO.exists(),
                    reason="secondary sample plugin not built "
                           "(primary suite runs without it)")
class TestSecondaryPlugin:
    def test_axpby_matches_host_composition(self):
        from vbtensor.dispatch import registry
        from vbtensor.plugin import get_host, load_plugin
        host = get_host()
        if not any(m.path == str(SECONDARY_SO) for m in host.manifests):
            load_plugin(SECONDARY_SO)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            ndim = int(rng.integers(1, 4))
            shape = tuple(int(s) for s in rng.integers(1, 6, ndim))
            a, b = float(rng.standard_normal()), float(rng.standard_normal())
            x = vt.tensor(rng.standard_normal(shape), dtype=DType.F64)
            y = vt.tensor(rng.standard_normal(shape), dtype=DType.F64)
            expect = vt.add(vt.mul(x, a), vt.mul(y, b)).numpy()
            out = registry.call_boxed("plug::axpby", [x, y, a, b])[0]
            worst = max(worst, float(np.max(np.abs(out.numpy() - expect))))
            assert worst <= 1e-12
        report("secondary-plugin-axpby",
               f"100 shapes, max abs err {worst:.2e}")

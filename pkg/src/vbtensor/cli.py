"""Command-line surface: vbt <subcommand>.

Subcommands: selftest, ops, train-reversal, bench, allreduce-demo, parity,
snapshot-dump. Global flags: --plugin <path> (repeatable), --seed <n>.
Metrics and snapshots print as JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import overlay as vt
from .bench import bench
from .dtypes import DType
from .errors import VbtError
from .fabric import get_fabric
from .parity import DEFAULT_MANIFEST, check_parity
from .runtime import reset_runtime
from .train import TrainConfig, train_reversal


def _cmd_selftest(args) -> int:
    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001
            failures += 1
            print(f"FAIL {name}: {exc}")

    def gradcheck_mul():
        x = vt.tensor([1.0, 2.0, 3.0], dtype=DType.F64, requires_grad=True)
        vt.sum(vt.mul(x, x)).backward()
        if not np.allclose(x.grad.numpy(), [2.0, 4.0, 6.0]):
            raise VbtError(f"bad grad {x.grad.numpy()}")

    def view_oracle():
        base = vt.tensor(np.arange(6.0), dtype=DType.F64)
        from .storage import as_strided
        view = as_strided(base, (2, 2), (3, 1), 0)
        expect = np.array([[0.0, 1.0], [3.0, 4.0]])
        if not np.array_equal(view.numpy(), expect):
            raise VbtError("strided view mismatch")

    def allocator_roundtrip():
        reset_runtime()
        a = vt.zeros((256,), dtype=DType.F32, device="virt:0")
        stats = vt.memory_stats(0)
        if stats["allocated_bytes"]["current"] != 1024:
            raise VbtError(f"unexpected stats {stats['allocated_bytes']}")
        del a

    def safetensors_roundtrip():
        import tempfile
        from .interop import load_safetensors, save_safetensors
        w = vt.tensor([1.0], dtype=DType.F32)
        with tempfile.NamedTemporaryFile(suffix=".safetensors") as f:
            save_safetensors(f.name, {"w": w})
            loaded, _ = load_safetensors(f.name)
            if not np.array_equal(loaded["w"].numpy(), [1.0]):
                raise VbtError("roundtrip mismatch")

    def allreduce_pair():
        reset_runtime()
        fabric = get_fabric(fresh=True)
        fabric.enable_peer(0, 1)
        a = vt.tensor([1.0, 2.0], dtype=DType.F64, device="virt:0")
        b = vt.tensor([10.0, 20.0], dtype=DType.F64, device="virt:1")
        fabric.ring_allreduce([a, b])
        if not (np.array_equal(a.numpy(), [11.0, 22.0])
                and np.array_equal(b.numpy(), [11.0, 22.0])):
            raise VbtError("allreduce mismatch")

    check("gradcheck:mul", gradcheck_mul)
    check("view:strided-gather", view_oracle)
    check("allocator:roundtrip", allocator_roundtrip)
    check("safetensors:roundtrip", safetensors_roundtrip)
    check("fabric:allreduce-n2", allreduce_pair)
    return 1 if failures else 0


def _cmd_ops(args) -> int:
    from .dispatch import registry
    for name in registry.op_names():
        snap = registry.lookup(name)
        schema = snap.schema
        keys = ",".join(sorted(k.value for k in snap.base_kernels))
        wrappers = []
        if snap.has_override_wrapper:
            wrappers.append("override")
        if snap.has_autograd_wrapper:
            wrappers.append("autograd")
        print(f"{name}  in={schema.num_tensor_inputs} "
              f"out={schema.num_tensor_outputs} keys=[{keys}] "
              f"wrappers=[{','.join(wrappers)}] gen={snap.generation}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig(
        vocab=args.vocab, seq_len=args.seq_len, d_model=args.d_model,
        n_heads=args.n_heads, batch=args.batch, lr=args.lr, steps=args.steps,
        seed=args.seed, device=args.device, causal=args.causal,
        checkpoint=args.checkpoint,
    )
    train_reversal(cfg, emit=lambda rec: print(json.dumps(rec), flush=True))
    return 0


def _cmd_bench(args) -> int:
    kwargs = {"seed": args.seed}
    if args.region.startswith("op:"):
        kwargs.update(shape=tuple(args.shape), reps=args.reps,
                      warmup=args.warmup, device=args.device)
    else:
        kwargs.update(k_threads=args.threads, rounds=args.rounds)
    print(json.dumps(bench(args.region, **kwargs), indent=2))
    return 0


def _cmd_allreduce_demo(args) -> int:
    if args.world < 2:
        print("allreduce-demo needs --world >= 2", file=sys.stderr)
        return 2
    reset_runtime(num_devices=max(args.world, 2))
    dtype = DType.F64 if args.dtype == "f64" else DType.I64
    rng = np.random.default_rng(args.seed)
    fabric = get_fabric(fresh=True)
    buffers = []
    originals = []
    for r in range(args.world):
        fabric.enable_peer(r, (r + 1) % args.world)
        if dtype is DType.F64:
            data = rng.standard_normal(args.elems)
        else:
            data = rng.integers(-1000, 1000, args.elems)
        originals.append(data)
        buffers.append(vt.tensor(data, dtype=dtype, device=f"virt:{r}"))
    fabric.ring_allreduce(buffers)
    expected = np.sum(np.stack(originals), axis=0)
    ok = True
    for r, buf in enumerate(buffers):
        got = buf.numpy()
        if dtype is DType.I64:
            ok = ok and np.array_equal(got, expected)
        else:
            ok = ok and bool(np.max(np.abs(got - expected)) <= 1e-12
                             * max(1.0, float(np.max(np.abs(expected)))))
    print(json.dumps(fabric.snapshot(), indent=2))
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_parity(args) -> int:
    report = check_parity(args.manifest)
    for sym in report["missing"]:
        print(f"MISSING {sym}")
    print(f"parity: {len(report['present'])}/{report['checked']} present")
    return 0 if report["ok"] else 1


def _cmd_snapshot_dump(args) -> int:
    if args.hazards:
        print(json.dumps(vt.hazard_reports(args.device), indent=2))
    else:
        print(json.dumps(vt.memory_snapshot(args.device), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vbt",
        description="Desk-scale eager tensor runtime with a virtual async device")
    p.add_argument("--plugin", action="append", default=[],
                   help="load a plugin shared library (repeatable)")
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("selftest", help="quick built-in smoke battery")
    sub.add_parser("ops", help="list registered operators")

    t = sub.add_parser("train-reversal", help="sequence-reversal training run")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--vocab", type=int, default=16)
    t.add_argument("--seq-len", type=int, default=16)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--device", default="host")
    t.add_argument("--causal", action="store_true")
    t.add_argument("--checkpoint", default=None)

    b = sub.add_parser("bench", help="timing benchmarks")
    b.add_argument("--region", required=True,
                   help="op:<name> or backward_gate")
    b.add_argument("--shape", type=int, nargs="+", default=[4096])
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--device", default="host")
    b.add_argument("--threads", type=int, default=4)
    b.add_argument("--rounds", type=int, default=100)

    a = sub.add_parser("allreduce-demo", help="ring allreduce demo + oracle")
    a.add_argument("--world", type=int, default=4)
    a.add_argument("--elems", type=int, default=1024)
    a.add_argument("--dtype", choices=["f64", "i64"], default="f64")

    pr = sub.add_parser("parity", help="import-only API parity gate")
    pr.add_argument("--manifest", default=str(DEFAULT_MANIFEST))

    s = sub.add_parser("snapshot-dump", help="allocator snapshot JSON")
    s.add_argument("--device", type=int, default=0)
    s.add_argument("--hazards", action="store_true",
                   help="dump hazard reports instead")
    return p


_COMMANDS = {
    "selftest": _cmd_selftest,
    "ops": _cmd_ops,
    "train-reversal": _cmd_train,
    "bench": _cmd_bench,
    "allreduce-demo": _cmd_allreduce_demo,
    "parity": _cmd_parity,
    "snapshot-dump": _cmd_snapshot_dump,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    vt.manual_seed(args.seed)
    if args.plugin:
        from .plugin import load_plugin
        for path in args.plugin:
            manifest = load_plugin(path)
            print(f"loaded plugin {manifest.path} "
                  f"(abi {manifest.abi_major}.{manifest.abi_minor}, "
                  f"ops: {', '.join(manifest.registered_ops)})",
                  file=sys.stderr)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

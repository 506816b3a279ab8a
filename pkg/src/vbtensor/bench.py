"""Benchmark regions: single ops (both kernel lanes) and the backward gate.

Benchmarks seed RNGs, run equal warmup for every measured variant, and
synchronize the virtual device around the timed region so reported time is
execution time rather than enqueue latency. The backward_gate region runs K
independent tiny graphs from K threads per round and reports gate-busy
rejections, exhibiting the global serialization point deliberately kept in
the engine.
"""

from __future__ import annotations

import statistics
import threading
import time

import numpy as np

from . import _backend, overlay as vt
from .autograd import GateBusyError, record_forward
from .dtypes import DType, parse_device
from .errors import VbtError
from .runtime import get_runtime


def _time_region(fn, reps: int, warmup: int, sync) -> dict:
    for _ in range(warmup):
        fn()
    sync()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        sync()
        samples.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": statistics.fmean(samples),
        "var_ms2": statistics.pvariance(samples) if len(samples) > 1 else 0.0,
        "min_ms": min(samples),
        "max_ms": max(samples),
    }


def bench_op(name: str, *, shape=(4096,), reps: int = 100, warmup: int = 10,
             seed: int = 0, device: str = "host") -> dict:
    vt.manual_seed(seed)
    dev = parse_device(device)
    a = vt.randn(shape, dtype=DType.F64, device=dev)
    b = vt.randn(shape, dtype=DType.F64, device=dev)

    unary = {"neg", "exp", "log", "tanh", "relu"}

    def run():
        if name in unary:
            getattr(vt, name)(a)
        elif name == "matmul":
            vt.matmul(a, b)
        else:
            getattr(vt, name)(a, b)

    def sync():
        if dev.is_virt:
            get_runtime().device(dev.index).synchronize()

    report = {
        "region": f"op:{name}", "shape": list(shape), "reps": reps,
        "warmup": warmup, "seed": seed, "device": str(dev),
        "backend_active": _backend.active_name(),
    }
    report.update(_time_region(run, reps, warmup, sync))

    # Lane comparison on the raw kernel call (compiled core vs numpy lane).
    if name in ("add", "sub", "mul", "div") and dev.is_host:
        specs = (a.kernel_spec(), b.kernel_spec())
        out = vt.zeros_like(a)
        out_spec = out.kernel_spec()
        lanes = {}
        lane_names = ["fallback"] + (["compiled"] if _backend.has_compiled() else [])
        for lane_name in lane_names:
            lane = _backend.get_lane(lane_name)

            def lane_run():
                lane.binary(name, out_spec, specs[0], specs[1])

            lanes[lane_name] = _time_region(lane_run, reps, warmup, lambda: None)
        report["lanes"] = lanes
    return report


def bench_backward_gate(*, k_threads: int = 4, rounds: int = 100,
                        seed: int = 0) -> dict:
    vt.manual_seed(seed)
    rejected_counts = []
    succeeded_counts = []

    for _ in range(rounds):
        barrier = threading.Barrier(k_threads)
        rejected = []
        succeeded = []
        lock = threading.Lock()
        roots = []
        for _ in range(k_threads):
            x = vt.randn(4, dtype=DType.F64, requires_grad=True)
            y = vt.mul(x, x)

            def blocking_backward(saved, aux, grads, _b=barrier):
                _b.wait(timeout=30)
                return [grads[0]]

            # Re-hang the node so the winner's backward blocks until every
            # loser has been rejected: exactly one success per round.
            record_forward("bench::gate_probe", [y], [y], blocking_backward, [])
            roots.append(vt.sum(y))

        def worker(root):
            try:
                root.backward()
                with lock:
                    succeeded.append(1)
            except GateBusyError:
                with lock:
                    rejected.append(1)
                barrier.wait(timeout=30)

        threads = [threading.Thread(target=worker, args=(r,))
                   for r in roots]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60)
        rejected_counts.append(len(rejected))
        succeeded_counts.append(len(succeeded))

    return {
        "region": "backward_gate", "k_threads": k_threads, "rounds": rounds,
        "seed": seed,
        "success_per_round": succeeded_counts,
        "rejected_per_round": rejected_counts,
        "total_rejected": int(np.sum(rejected_counts)),
        "total_succeeded": int(np.sum(succeeded_counts)),
    }


def bench(region: str, **kwargs) -> dict:
    if region == "backward_gate":
        allowed = {k: v for k, v in kwargs.items()
                   if k in ("k_threads", "rounds", "seed")}
        return bench_backward_gate(**allowed)
    if region.startswith("op:"):
        return bench_op(region[3:], **kwargs)
    raise VbtError(f"unknown bench region {region!r}")

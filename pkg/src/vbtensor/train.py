"""Sequence-reversal training harness.

A 2-layer transformer (embedding + position table, pre-norm attention and MLP
blocks, untied output projection) trained with Adam on synthetic data: uniform
random tokens whose target is the reversed sequence, teacher forcing with
cross-entropy over all positions. Attention is bidirectional by default (a
causal mask makes the leading half of the reversed target unpredictable).

Metrics stream as JSON lines: a header record, then one record per step with
{step, loss, token_acc, wallclock_ms}. The final checkpoint goes to
safetensors when a path is given.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import overlay as vt
from .autograd import no_grad
from .dtypes import DType, parse_device
from .interop import save_safetensors
from .storage import Tensor


@dataclass
class TrainConfig:
    task: str = "reversal"
    vocab: int = 16
    seq_len: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    batch: int = 32
    lr: float = 1e-3
    steps: int = 2000
    seed: int = 0
    device: str = "host"
    causal: bool = False
    dtype: str = "F64"
    eps: float = 1e-5
    checkpoint: Optional[str] = None

    def validate(self) -> None:
        if self.task != "reversal":
            raise ValueError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly into heads")
        for name in ("vocab", "seq_len", "d_model", "n_layers", "n_heads",
                     "batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class ReversalModel:
    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.device = parse_device(cfg.device)
        self.dtype = DType[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        D, V, T = cfg.d_model, cfg.vocab, cfg.seq_len
        H = cfg.n_heads

        def param(shape, scale=0.02):
            data = rng.standard_normal(shape) * scale
            t = vt.tensor(data, dtype=self.dtype, device=self.device)
            t.requires_grad = True
            return t

        def zeros_param(shape):
            t = vt.zeros(shape, dtype=self.dtype, device=self.device)
            t.requires_grad = True
            return t

        def ones_param(shape):
            t = vt.ones(shape, dtype=self.dtype, device=self.device)
            t.requires_grad = True
            return t

        self.params: dict[str, Tensor] = {"tok_emb": param((V, D)),
                                          "pos_emb": param((T, D))}
        for i in range(cfg.n_layers):
            p = self.params
            p[f"l{i}.ln1.g"] = ones_param((D,))
            p[f"l{i}.ln1.b"] = zeros_param((D,))
            p[f"l{i}.wq"] = param((D, D))
            p[f"l{i}.wk"] = param((D, D))
            p[f"l{i}.wv"] = param((D, D))
            p[f"l{i}.wo"] = param((D, D))
            p[f"l{i}.ln2.g"] = ones_param((D,))
            p[f"l{i}.ln2.b"] = zeros_param((D,))
            p[f"l{i}.w1"] = param((D, 4 * D))
            p[f"l{i}.b1"] = zeros_param((4 * D,))
            p[f"l{i}.w2"] = param((4 * D, D))
            p[f"l{i}.b2"] = zeros_param((D,))
        self.params["lnf.g"] = ones_param((D,))
        self.params["lnf.b"] = zeros_param((D,))
        self.params["w_out"] = param((D, V))
        self._heads = H

    def _ln(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        y = vt.layer_norm(x, [self.cfg.d_model], eps=self.cfg.eps)
        return vt.add(vt.mul(y, g), b)

    def forward(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        B, T, D, H = cfg.batch, cfg.seq_len, cfg.d_model, self._heads
        hd = D // H
        p = self.params
        x = vt.add(vt.embedding(p["tok_emb"], tokens), p["pos_emb"])
        for i in range(cfg.n_layers):
            h = self._ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            hm = vt.reshape(h, [B * T, D])

            def split_heads(m):
                return vt.transpose(vt.reshape(m, [B, T, H, hd]), 1, 2)

            q = split_heads(vt.matmul(hm, p[f"l{i}.wq"]))
            k = split_heads(vt.matmul(hm, p[f"l{i}.wk"]))
            v = split_heads(vt.matmul(hm, p[f"l{i}.wv"]))
            att = vt.attention(q, k, v, causal=cfg.causal)
            att = vt.reshape(vt.transpose(att, 1, 2), [B * T, D])
            proj = vt.reshape(vt.matmul(att, p[f"l{i}.wo"]), [B, T, D])
            x = vt.add(x, proj)

            h2 = self._ln(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            h2m = vt.reshape(h2, [B * T, D])
            mid = vt.relu(vt.add(vt.matmul(h2m, p[f"l{i}.w1"]), p[f"l{i}.b1"]))
            mlp = vt.reshape(vt.add(vt.matmul(mid, p[f"l{i}.w2"]),
                                    p[f"l{i}.b2"]), [B, T, D])
            x = vt.add(x, mlp)
        xf = self._ln(x, p["lnf.g"], p["lnf.b"])
        logits = vt.matmul(vt.reshape(xf, [B * T, D]), p["w_out"])
        return logits  # (B*T, vocab)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.state = {
            name: (vt.zeros_like(p), vt.zeros_like(p))
            for name, p in params.items()
        }

    def step(self) -> None:
        self.step_count += 1
        with no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                m, v = self.state[name]
                vt.adam_step(p, p.grad, m, v, step=self.step_count,
                             lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                             eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.autograd_meta is not None:
                p.autograd_meta.grad = None


def make_batch(rng: np.random.Generator, cfg: TrainConfig):
    tokens = rng.integers(0, cfg.vocab, size=(cfg.batch, cfg.seq_len),
                          dtype=np.int64)
    targets = tokens[:, ::-1].copy()
    return tokens, targets


def train_reversal(cfg: TrainConfig,
                   emit: Optional[Callable[[dict], None]] = None,
                   stop: Optional[Callable[[dict], bool]] = None) -> list[dict]:
    """Run the harness; returns the metric records it emitted.

    ``stop`` is consulted after each step record and ends the run early when
    it returns True (the checkpoint, if any, is still written).
    """
    cfg.validate()
    records: list[dict] = []

    def _emit(rec: dict) -> None:
        records.append(rec)
        if emit is not None:
            emit(rec)

    header = {"record": "header", **asdict(cfg)}
    _emit(header)
    if cfg.steps == 0:
        return records

    model = ReversalModel(cfg)
    optim = Adam(model.params, lr=cfg.lr)
    data_rng = np.random.default_rng(cfg.seed + 1)
    device = parse_device(cfg.device)

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        tokens_np, targets_np = make_batch(data_rng, cfg)
        tokens = vt.tensor(tokens_np, dtype=DType.I64, device=device)
        targets = vt.tensor(targets_np.reshape(-1), dtype=DType.I64,
                            device=device)
        logits = model.forward(tokens)
        loss = vt.cross_entropy(logits, targets)
        optim.zero_grad()
        loss.backward()
        optim.step()
        with no_grad():
            logits_np = vt.to_numpy(logits)
            acc = float((logits_np.argmax(axis=1)
                         == targets_np.reshape(-1)).mean())
            loss_val = float(vt.to_numpy(loss)[()])
        rec = {
            "step": step,
            "loss": loss_val,
            "token_acc": acc,
            "wallclock_ms": (time.perf_counter() - t0) * 1e3,
        }
        _emit(rec)
        if stop is not None and stop(rec):
            break

    if cfg.checkpoint:
        with no_grad():
            host_params = {}
            for name, p in model.params.items():
                if p.device.is_host:
                    host_params[name] = p.detach()
                else:
                    host_params[name] = vt.from_numpy(vt.to_numpy(p), p.dtype)
            save_safetensors(cfg.checkpoint, host_params,
                             metadata={"task": cfg.task,
                                       "steps": str(cfg.steps)})
    return records

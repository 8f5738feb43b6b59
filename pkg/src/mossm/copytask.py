"""Selective-copying probe for the selective scan.

A sequence holds ``n_data`` data tokens scattered among noise tokens, followed
by ``n_data`` marker tokens. At each marker the model has to emit the next
data token in order, so it must decide what to keep in its state while
reading the context. A time-invariant recurrence cannot filter the noise by
content; the input-dependent step size is what makes the task solvable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .losses import IGNORE, cross_entropy
from .network import LayerNorm, Linear, Module
from .optim import AdamW
from .ssm import init_ssm_params, selective_scan_tape

__all__ = ["CopyTaskConfig", "make_copy_batch", "CopyModel", "learning_rate", "train_copy_task"]


@dataclass
class CopyTaskConfig:
    n_data: int = 16          # tokens to copy
    context: int = 48         # positions holding data or noise
    vocab: int = 8            # distinct data tokens
    d_model: int = 32
    expand: int = 2
    state_size: int = 8
    conv: int = 4
    layers: int = 2
    batch: int = 10
    lr: float = 8e-3
    weight_decay: float = 0.0
    beta2: float = 0.95
    warmup: int = 200         # linear warmup steps
    cosine: bool = True       # cosine decay to zero over ``steps``
    steps: int = 5000
    eval_every: int = 250
    eval_batch: int = 128
    target_acc: float = 0.95
    seed: int = 0

    @property
    def length(self) -> int:
        return self.context + self.n_data

    @property
    def tokens(self) -> int:
        return self.vocab + 2   # noise, data..., marker

    @property
    def marker(self) -> int:
        return self.vocab + 1


def make_copy_batch(cfg: CopyTaskConfig, rng):
    """Token ids (B, L) and targets (B, L); targets are IGNORE off the marker positions."""
    B, L = cfg.batch, cfg.length
    tokens = np.zeros((B, L), dtype=np.int64)
    targets = np.full((B, L), IGNORE, dtype=np.int64)
    for b in range(B):
        pos = np.sort(rng.choice(cfg.context, cfg.n_data, replace=False))
        data = rng.integers(1, cfg.vocab + 1, cfg.n_data)
        tokens[b, pos] = data
        tokens[b, cfg.context:] = cfg.marker
        targets[b, cfg.context:] = data - 1
    return tokens, targets


class CausalDWConv(Module):
    """Depthwise conv that only reads the current and earlier positions."""

    def __init__(self, c, k, rng):
        self.k = k
        self.weight = T.parameter(rng.standard_normal((2 * k - 1, c)) / np.sqrt(k))
        self.bias = T.parameter(np.zeros(c), no_decay=True)
        self.mask = np.zeros((2 * k - 1, 1))
        self.mask[: k] = 1.0   # taps at offsets -(k-1)..0

    def __call__(self, x):
        return T.depthwise_conv1d(x, T.mul(self.weight, self.mask), self.bias)


class MambaLayer(Module):
    def __init__(self, cfg: CopyTaskConfig, rng):
        e = cfg.d_model * cfg.expand
        self.norm = LayerNorm(cfg.d_model)
        self.in_u = Linear(cfg.d_model, e, rng)
        self.in_z = Linear(cfg.d_model, e, rng)
        self.conv = CausalDWConv(e, cfg.conv, rng)
        p = init_ssm_params(e, cfg.state_size, rng)
        self.A_log = T.parameter(p.A_log, no_decay=True)
        self.W_delta = T.parameter(p.W_delta)
        self.delta_bias = T.parameter(p.delta_bias, no_decay=True)
        self.W_B = T.parameter(p.W_B)
        self.W_C = T.parameter(p.W_C)
        self.D = T.parameter(p.D, no_decay=True)
        self.out = Linear(e, cfg.d_model, rng, scale=0.5)

    def __call__(self, x):
        h = self.norm(x)
        u = T.silu(self.conv(self.in_u(h)))
        y = selective_scan_tape(u, self.A_log, self.W_delta, self.delta_bias, self.W_B, self.W_C, self.D,
                                block=None)
        return x + self.out(T.mul(y, T.silu(self.in_z(h))))


class CopyModel(Module):
    def __init__(self, cfg: CopyTaskConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.embed = T.parameter(rng.standard_normal((cfg.tokens, cfg.d_model)))
        self.layers = [MambaLayer(cfg, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab, rng)

    def __call__(self, tokens):
        onehot = np.eye(self.cfg.tokens)[tokens]
        x = T.matmul(onehot, self.embed)
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm(x))


def _accuracy(model, cfg, rng):
    tokens, targets = make_copy_batch(_with_batch(cfg, cfg.eval_batch), rng)
    with T.no_tape():
        logits = model(tokens).data
    m = targets != IGNORE
    return float((logits.argmax(-1)[m] == targets[m]).mean())


def _with_batch(cfg, b):
    return replace(cfg, batch=b)


def learning_rate(cfg: CopyTaskConfig, step: int) -> float:
    """Step size for the 1-based ``step``."""
    lr = cfg.lr
    if cfg.warmup and step <= cfg.warmup:
        return lr * step / cfg.warmup
    if cfg.cosine:
        frac = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
        lr *= 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))
    return lr


def train_copy_task(cfg: CopyTaskConfig | None = None, log=None, time_limit: float | None = None) -> dict:
    """Train until held-out token accuracy reaches ``target_acc`` or steps run out.

    Returns a dict with the final accuracy, the step it was reached, the
    accuracy history and the wall-clock seconds.
    """
    cfg = cfg or CopyTaskConfig()
    model = CopyModel(cfg)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                betas=(0.9, cfg.beta2), clip_norm=1.0)
    rng = np.random.default_rng([cfg.seed, 1])
    eval_rng_seed = [cfg.seed, 2]
    t0 = time.perf_counter()
    history = []
    acc, step = 0.0, 0
    for step in range(1, cfg.steps + 1):
        tokens, targets = make_copy_batch(cfg, rng)
        opt.lr = learning_rate(cfg, step)
        opt.zero_grad()
        with T.Tape() as tape:
            logits = model(tokens)
            loss = cross_entropy(T.reshape(logits, (-1, cfg.vocab)), targets.ravel())
        tape.backward(loss)
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = _accuracy(model, cfg, np.random.default_rng(eval_rng_seed))
            history.append((step, float(loss.data), acc))
            if log is not None:
                log(f"step {step} loss {float(loss.data):.4f} acc {acc:.4f} ({time.perf_counter() - t0:.0f}s)")
            if acc >= cfg.target_acc:
                break
            if time_limit is not None and time.perf_counter() - t0 > time_limit:
                break
    return {"accuracy": acc, "steps": step, "history": history, "seconds": time.perf_counter() - t0,
            "reached": acc >= cfg.target_acc}

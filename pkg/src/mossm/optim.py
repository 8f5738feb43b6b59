"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW", "adamw_step"]


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place update of ``param``, ``m`` and ``v``; ``step`` counts from 1."""
    b1, b2 = betas
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Parameters flagged ``no_decay`` (biases, norms, SSM constants) skip weight decay."""

    def __init__(self, named_params, lr: float = 3.2e-4, weight_decay: float = 0.005,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in self.params if p.grad is not None)))

    def step(self):
        self.step_count += 1
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            wd = 0.0 if p.no_decay else self.weight_decay
            adamw_step(p.data, g, self.m[name], self.v[name], self.step_count,
                       self.lr, wd, self.betas, self.eps)

    def state_arrays(self) -> dict:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["step"] = np.array(self.step_count)
        return out

    def load_state_arrays(self, arrays: dict):
        for k in self.m:
            self.m[k][...] = arrays[f"m/{k}"]
            self.v[k][...] = arrays[f"v/{k}"]
        self.step_count = int(arrays["step"])

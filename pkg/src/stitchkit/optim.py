"""AdamW and the learning-rate schedules used across training code."""

from dataclasses import dataclass

import numpy as np


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-3, betas=(0.9, 0.999),
                 eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


@dataclass
class ScheduleSpec:
    """Descriptor for schedule_lr.

    kind: "cosine" | "polynomial" | "warmup_composite"
    warmup_composite linearly interpolates from `original_final_rate` to the
    polynomial value over the first `warmup_epochs`, then follows the plain
    polynomial schedule.
    """

    kind: str
    base_lr: float
    power: float = 0.9
    warmup_epochs: int = 0
    original_final_rate: float = 0.0

    def to_dict(self):
        return {
            "kind": self.kind,
            "base_lr": self.base_lr,
            "power": self.power,
            "warmup_epochs": self.warmup_epochs,
            "original_final_rate": self.original_final_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def polynomial_final_rate(base_lr, total_epochs, power=0.9):
    """Last non-zero rate of a polynomial schedule over total_epochs."""
    return base_lr * (1.0 - (total_epochs - 1) / total_epochs) ** power


def schedule_lr(spec, epoch, total_epochs):
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {total_epochs})")
    if spec.kind == "cosine":
        return spec.base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))
    if spec.kind == "polynomial":
        return spec.base_lr * (1.0 - epoch / total_epochs) ** spec.power
    if spec.kind == "warmup_composite":
        poly = spec.base_lr * (1.0 - epoch / total_epochs) ** spec.power
        if epoch < spec.warmup_epochs:
            frac = epoch / spec.warmup_epochs
            return spec.original_final_rate + frac * (poly - spec.original_final_rate)
        return poly
    raise ValueError(f"unknown schedule kind {spec.kind!r}")

"""Plackett-Luce permutation policy over patch orderings.

The policy keeps one logit per grid slot. A permutation is drawn by
perturbing the logits with Gumbel noise and sorting in descending order,
which is distributed as sequential sampling without replacement from the
softmax of the logits. Log-probabilities and their closed-form gradient
are computed in float64 numpy; the logits are updated with AdamW.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import check_permutation

_EPS = np.finfo(np.float64).eps


def plackett_luce_log_prob(z: np.ndarray, perm: np.ndarray) -> float:
    """log P(perm | z) under the Plackett-Luce model.

    P factorizes over ranks: the item at rank k is chosen from the not yet
    placed items with probability exp(z) normalized over the suffix, so
    log P = sum_k [z[perm[k]] - logsumexp(z[perm[k:]])].
    """
    z = np.asarray(z, dtype=np.float64)
    perm = check_permutation(perm)
    zp = z[perm]
    suffix_lse = np.logaddexp.accumulate(zp[::-1])[::-1]
    return float(np.sum(zp - suffix_lse))


def plackett_luce_grad(z: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Gradient of log P(perm | z) with respect to z.

    For the item placed at rank k, d logP / d z = 1 - sum_{i <= k}
    softmax-weight of that item in the rank-i suffix. Exponents are
    never positive, so the O(n^2) evaluation is overflow-safe.
    """
    z = np.asarray(z, dtype=np.float64)
    perm = check_permutation(perm)
    n = len(z)
    zp = z[perm]
    suffix_lse = np.logaddexp.accumulate(zp[::-1])[::-1]
    expo = zp[None, :] - suffix_lse[:, None]
    valid = np.triu(np.ones((n, n), dtype=bool))
    grad_ranked = 1.0 - np.where(valid, np.exp(np.where(valid, expo, 0.0)), 0.0).sum(axis=0)
    grad = np.empty_like(z)
    grad[perm] = grad_ranked
    return grad


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(n)
    u = np.clip(u, _EPS, 1.0 - _EPS)
    return -np.log(-np.log(u))


def ml_permutation(z: np.ndarray) -> np.ndarray:
    """Most likely permutation: logits in descending order, ties by slot index."""
    z = np.asarray(z, dtype=np.float64)
    return np.argsort(-z, kind="stable").astype(np.int64)


def sample_permutation(
    z: np.ndarray, tau: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw a permutation by Gumbel perturbation at temperature tau.

    tau = 0 returns the most likely permutation; tau = 1 samples the
    Plackett-Luce distribution at z exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    if tau == 0.0:
        return ml_permutation(z)
    keys = z + tau * gumbel_noise(len(z), rng)
    return np.argsort(-keys, kind="stable").astype(np.int64)


@dataclass
class SampleRecord:
    """One policy draw: the permutation, its log-probability at the current

    logits (always evaluated at temperature 1), and how it was produced."""

    perm: np.ndarray
    log_prob: float
    tau: float
    seed: int | None


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.03
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One decoupled weight-decay Adam step; returns the new params."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return params - self.lr * (
            m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params
        )


@dataclass
class OrderPolicy:
    """Learnable ordering: logits z plus their optimizer state."""

    z: np.ndarray
    optimizer: AdamWState = field(default_factory=AdamWState)

    @classmethod
    def from_prior(cls, prior: np.ndarray, lr: float = 1e-4, weight_decay: float = 0.03):
        """Logits set to a descending unit ramp along the prior order, so the
        initial most likely permutation reproduces the prior exactly."""
        prior = check_permutation(prior)
        n = len(prior)
        z = np.zeros(n, dtype=np.float64)
        if n > 1:
            z[prior] = -np.arange(n, dtype=np.float64) / (n - 1)
        return cls(z=z, optimizer=AdamWState(lr=lr, weight_decay=weight_decay))

    @property
    def n(self) -> int:
        return len(self.z)

    def sample(self, tau: float, seed: int | None = None) -> SampleRecord:
        rng = np.random.default_rng(seed)
        perm = sample_permutation(self.z, tau, rng)
        return SampleRecord(
            perm=perm,
            log_prob=plackett_luce_log_prob(self.z, perm),
            tau=float(tau),
            seed=seed,
        )

    def log_prob(self, perm: np.ndarray) -> float:
        return plackett_luce_log_prob(self.z, perm)

    def grad_log_prob(self, perm: np.ndarray) -> np.ndarray:
        return plackett_luce_grad(self.z, perm)

    def ml_permutation(self) -> np.ndarray:
        return ml_permutation(self.z)

    def apply_loss_grad(self, grad: np.ndarray) -> None:
        """Descend on a loss gradient with respect to z."""
        self.z = self.optimizer.update(self.z, np.asarray(grad, dtype=np.float64))

    # -- snapshots ---------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        opt = self.optimizer
        doc = {
            "meta": {"n": self.n, **(meta or {})},
            "z": [float(v) for v in self.z],
            "optimizer": {
                "lr": opt.lr,
                "beta1": opt.beta1,
                "beta2": opt.beta2,
                "eps": opt.eps,
                "weight_decay": opt.weight_decay,
                "step": opt.step,
                "m": None if opt.m is None else [float(v) for v in opt.m],
                "v": None if opt.v is None else [float(v) for v in opt.v],
            },
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "OrderPolicy":
        doc = json.loads(Path(path).read_text())
        o = doc["optimizer"]
        opt = AdamWState(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            step=o["step"],
            m=None if o["m"] is None else np.asarray(o["m"], dtype=np.float64),
            v=None if o["v"] is None else np.asarray(o["v"], dtype=np.float64),
        )
        return cls(z=np.asarray(doc["z"], dtype=np.float64), optimizer=opt)

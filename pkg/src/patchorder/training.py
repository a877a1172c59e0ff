"""Joint training of a backbone and an ordering policy.

Three phases: warmup trains the backbone on the prior order; a policy window
samples one permutation per batch, steps the backbone on cross-entropy, and
steps the logits by REINFORCE with an EMA baseline; afterwards the most
likely permutation is frozen and only the backbone keeps training. Baseline
regimes (fixed order, static random, per-batch random, replayed snapshot)
share the same loop with the policy disabled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbones import ToyBackbone, as_feature_tensor
from .data import GridDataset
from .grids import (
    check_permutation,
    invert,
    linearize,
    permutation_digest,
    random_permutation,
)
from .policy import OrderPolicy

MODES = ("reorder", "fixed", "static_random", "per_batch_random", "replay_learned")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumSchedule:
    """Triangle temperature over a policy window inside a longer run."""

    warmup: int = 15  # epochs before the policy window opens
    policy_window: int = 30  # epochs of REINFORCE
    tau_peak: float = 0.2

    def __post_init__(self):
        if self.warmup < 0 or self.policy_window < 0 or self.tau_peak < 0:
            raise ValueError("schedule values must be nonnegative")

    def temperature_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be nonnegative")
        n, m = self.warmup, self.policy_window
        if m == 0 or epoch < n or epoch >= n + m:
            return 0.0
        mid = n + m / 2.0
        return max(0.0, self.tau_peak * (1.0 - abs(epoch - mid) / (m / 2.0)))

    def phase(self, epoch: int) -> str:
        if epoch < self.warmup:
            return "warmup"
        if epoch < self.warmup + self.policy_window:
            return "policy"
        return "frozen"

    def policy_active(self, epoch: int) -> bool:
        return self.phase(epoch) == "policy" and self.temperature_at(epoch) > 0.0


@dataclass
class EmaBaseline:
    beta: float = 0.99
    b: float = 0.0

    def update(self, r: float) -> float:
        self.b = self.beta * self.b + (1.0 - self.beta) * r
        return self.b


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "reorder"
    base_order: str = "row_major"
    epochs: int = 60
    warmup: int = 15
    policy_window: int = 30
    tau_peak: float = 0.2
    batch_size: int = 128
    lr_backbone: float = 1e-4
    lr_backbone_policy_phase: float = 1e-5
    lr_policy: float = 1e-4
    policy_weight_decay: float = 0.03
    baseline_beta: float = 0.99
    weight_decay: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "reorder" and self.warmup + self.policy_window > self.epochs:
            raise ValueError(
                f"curriculum needs warmup+policy_window <= epochs "
                f"({self.warmup}+{self.policy_window} > {self.epochs})"
            )

    def schedule(self) -> CurriculumSchedule:
        if self.mode == "reorder":
            return CurriculumSchedule(self.warmup, self.policy_window, self.tau_peak)
        return CurriculumSchedule(self.epochs, 0, 0.0)


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    tau: float
    ce_loss: float
    reward: float
    baseline: float | None
    advantage: float | None
    perm_hash: str
    gumbel_seed: int | None
    policy_updated: bool


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    tau: float
    ce_loss: float
    reward: float
    baseline: float | None
    advantage_mean: float | None
    val_acc: float
    perm_hash: str
    z_digest: str | None


@dataclass
class TrainResult:
    backbone: ToyBackbone
    policy: OrderPolicy | None
    eval_perm: np.ndarray
    epochs: list[EpochRecord] = field(default_factory=list)
    batches: list[BatchRecord] = field(default_factory=list)


def _digest_floats(a: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()[:16]


def evaluate(
    backbone: ToyBackbone,
    dataset: GridDataset,
    perm: np.ndarray | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy under a fixed permutation (no sampling)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        probs = backbone.forward(dataset.features[lo : lo + batch_size], perm)
        hits += int((probs.argmax(axis=1) == dataset.labels[lo : lo + batch_size]).sum())
    return hits / len(dataset)


def train_model(
    backbone: ToyBackbone,
    train_set: GridDataset,
    val_set: GridDataset,
    config: TrainConfig,
    prior: np.ndarray | None = None,
    policy_file: str | None = None,
    snapshot_dir: str | None = None,
) -> TrainResult:
    """Run one training regime end to end and return the full trace.

    `prior` seeds the policy (reorder) or is the fixed order (fixed mode);
    it defaults to the config's base order. `policy_file` is required by
    replay_learned. One permutation is drawn per batch, always.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    grid = backbone.grid
    n = grid.n
    rng = np.random.default_rng(config.seed)
    sched = config.schedule()

    prior = linearize(config.base_order, grid) if prior is None else check_permutation(prior)
    policy: OrderPolicy | None = None
    fixed_perm = prior
    if config.mode == "reorder":
        policy = OrderPolicy.from_prior(
            prior, lr=config.lr_policy, weight_decay=config.policy_weight_decay
        )
    elif config.mode == "static_random":
        fixed_perm = random_permutation(n, rng)
    elif config.mode == "replay_learned":
        if policy_file is None:
            raise ValueError("replay_learned needs a policy snapshot file")
        fixed_perm = OrderPolicy.load(policy_file).ml_permutation()

    baseline = EmaBaseline(beta=config.baseline_beta)
    opt = torch.optim.AdamW(
        backbone.parameters(),
        lr=config.lr_backbone,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    result = TrainResult(backbone=backbone, policy=policy, eval_perm=fixed_perm)
    sdir = Path(snapshot_dir) if snapshot_dir else None
    if sdir:
        sdir.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        phase = sched.phase(epoch) if config.mode == "reorder" else config.mode
        tau = sched.temperature_at(epoch)
        active = config.mode == "reorder" and sched.policy_active(epoch)
        for group in opt.param_groups:
            group["lr"] = (
                config.lr_backbone_policy_phase
                if (config.mode == "reorder" and phase == "policy")
                else config.lr_backbone
            )

        order = rng.permutation(len(train_set))
        losses, rewards, advantages = [], [], []
        epoch_perm = fixed_perm
        for bi, lo in enumerate(range(0, len(train_set), config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            feats = as_feature_tensor(train_set.features[idx])
            labels = torch.as_tensor(train_set.labels[idx])

            seed = None
            if config.mode == "per_batch_random":
                perm = random_permutation(n, rng)
            elif config.mode == "reorder":
                if active:
                    seed = int(rng.integers(0, 2**63))
                    draw = policy.sample(tau, seed)
                    perm = draw.perm
                else:
                    perm = policy.ml_permutation()
            else:
                perm = fixed_perm
            epoch_perm = perm

            loss_t = backbone.mean_ce(feats, labels, perm)
            if not torch.isfinite(loss_t):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bi} "
                    f"(perm {permutation_digest(perm)})"
                )
            opt.zero_grad()
            loss_t.backward()
            opt.step()

            loss = float(loss_t.detach())
            r = -loss
            b_val = adv = None
            if config.mode == "reorder":
                # the EMA sees every batch reward so the policy window opens
                # with a calibrated baseline; policy steps stay gated
                b_val = baseline.update(r)
            if active:
                adv = r - b_val
                policy.apply_loss_grad(-adv * policy.grad_log_prob(perm))
                advantages.append(adv)
            losses.append(loss)
            rewards.append(r)
            result.batches.append(
                BatchRecord(
                    epoch=epoch,
                    batch=bi,
                    tau=tau,
                    ce_loss=loss,
                    reward=r,
                    baseline=b_val,
                    advantage=adv,
                    perm_hash=permutation_digest(perm),
                    gumbel_seed=seed,
                    policy_updated=active,
                )
            )

        eval_perm = policy.ml_permutation() if policy is not None else fixed_perm
        val_acc = evaluate(backbone, val_set, eval_perm)
        result.epochs.append(
            EpochRecord(
                epoch=epoch,
                phase=phase,
                tau=tau,
                ce_loss=float(np.mean(losses)),
                reward=float(np.mean(rewards)),
                baseline=baseline.b if config.mode == "reorder" else None,
                advantage_mean=float(np.mean(advantages)) if advantages else None,
                val_acc=val_acc,
                perm_hash=permutation_digest(epoch_perm),
                z_digest=_digest_floats(policy.z) if policy is not None else None,
            )
        )
        if sdir and policy is not None and phase == "policy":
            policy.save(
                sdir / f"policy_epoch_{epoch:03d}.json",
                meta={"epoch": epoch, "prior": config.base_order},
            )

    result.eval_perm = policy.ml_permutation() if policy is not None else fixed_perm
    return result


def run_curriculum(backbone, train_set, val_set, config, **kw) -> TrainResult:
    return train_model(backbone, train_set, val_set, replace(config, mode="reorder"), **kw)


def run_baseline_mode(mode, backbone, train_set, val_set, config, **kw) -> TrainResult:
    return train_model(backbone, train_set, val_set, replace(config, mode=mode), **kw)


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_epoch_csv(records: list[EpochRecord], path) -> None:
    lines = ["epoch,phase,tau,ce_loss,reward,baseline,advantage_mean,val_acc,perm_hash"]
    for r in records:
        lines.append(
            ",".join(
                _cell(v)
                for v in (
                    r.epoch,
                    r.phase,
                    r.tau,
                    r.ce_loss,
                    r.reward,
                    r.baseline,
                    r.advantage_mean,
                    r.val_acc,
                    r.perm_hash,
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_batch_csv(records: list[BatchRecord], path) -> None:
    lines = ["epoch,batch,tau,ce_loss,reward,baseline,advantage,perm_hash,gumbel_seed,policy_updated"]
    for r in records:
        lines.append(
            ",".join(
                _cell(v)
                for v in (
                    r.epoch,
                    r.batch,
                    r.tau,
                    r.ce_loss,
                    r.reward,
                    r.baseline,
                    r.advantage,
                    r.perm_hash,
                    r.gumbel_seed,
                    r.policy_updated,
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Rank-alignment bandit: a backbone-free policy convergence check
# ---------------------------------------------------------------------------

def rank_alignment_reward(perm: np.ndarray, target: np.ndarray) -> float:
    """-(mean absolute rank displacement) of perm against a target order."""
    perm = check_permutation(perm)
    target_rank = invert(target)
    n = len(perm)
    return -float(np.abs(np.arange(n) - target_rank[perm]).sum()) / n


def run_rank_bandit(
    target: np.ndarray,
    steps: int = 2000,
    seed: int = 0,
    lr: float = 0.05,
    tau: float = 1.0,
    beta: float = 0.99,
) -> tuple[OrderPolicy, int | None]:
    """REINFORCE on the rank-alignment reward from a uniform-prior start.

    Returns the trained policy and the first step index after which the ML
    permutation matched the target (None if it never did).
    """
    target = check_permutation(target)
    n = len(target)
    rng = np.random.default_rng(seed)
    policy = OrderPolicy.from_prior(np.arange(n), lr=lr, weight_decay=0.0)
    policy.z[:] = 0.0  # uninformative start: every ordering equally likely
    baseline = EmaBaseline(beta=beta)
    first_hit = None
    for step in range(steps):
        draw = policy.sample(tau, int(rng.integers(0, 2**63)))
        r = rank_alignment_reward(draw.perm, target)
        b = baseline.update(r)
        adv = r - b
        policy.apply_loss_grad(-adv * policy.grad_log_prob(draw.perm))
        if first_hit is None and np.array_equal(policy.ml_permutation(), target):
            first_hit = step + 1
    return policy, first_hit

import dataclasses
import itertools
import math

import numpy as np
import pytest
import torch

from patchorder.backbones import ToyBackbone
from patchorder.data import SynthSpec, generate
from patchorder.grids import GridSpec, center_slots, invert, linearize, permutation_digest
from patchorder.policy import OrderPolicy, plackett_luce_grad, plackett_luce_log_prob
from patchorder.training import (
    MODES,
    CurriculumSchedule,
    EmaBaseline,
    TrainConfig,
    TrainingError,
    evaluate,
    rank_alignment_reward,
    run_baseline_mode,
    run_curriculum,
    run_rank_bandit,
    train_model,
    write_batch_csv,
    write_epoch_csv,
)


def tiny_setup(mode="fixed", kind="windowed_attention", **cfg_kw):
    spec = SynthSpec(
        family="quadrant",
        grid=GridSpec(4, 4),
        classes=4,
        noise_std=0.3,
        n_train=64,
        n_val=32,
        seed=0,
    )
    train, val = generate(spec)
    base = dict(
        mode=mode,
        epochs=8,
        warmup=2,
        policy_window=4,
        tau_peak=0.2,
        batch_size=32,
        lr_backbone=3e-3,
        lr_backbone_policy_phase=3e-3,
        lr_policy=0.02,
        baseline_beta=0.9,
        seed=0,
    )
    base.update(cfg_kw)
    config = TrainConfig(**base)
    model = ToyBackbone(kind=kind, grid=spec.grid, num_classes=4, d=16, seed=0)
    return model, train, val, config


# -- schedule -------------------------------------------------------------------


def test_temperature_triangle_reference_points():
    sched = CurriculumSchedule(warmup=15, policy_window=30, tau_peak=0.2)
    assert sched.temperature_at(15) == 0.0
    assert sched.temperature_at(30) == pytest.approx(0.2)
    assert sched.temperature_at(45) == 0.0


def test_temperature_is_zero_outside_window_and_peaks_mid():
    sched = CurriculumSchedule(warmup=4, policy_window=6, tau_peak=0.3)
    for e in range(4):
        assert sched.temperature_at(e) == 0.0
    for e in range(10, 20):
        assert sched.temperature_at(e) == 0.0
    mid = 4 + 3
    assert sched.temperature_at(mid) == pytest.approx(0.3)
    ramp = [sched.temperature_at(e) for e in range(4, 10)]
    assert all(t >= 0 for t in ramp)
    assert max(ramp) == pytest.approx(0.3)
    # symmetric triangle
    assert sched.temperature_at(6) == pytest.approx(sched.temperature_at(8))


def test_schedule_with_no_policy_window():
    sched = CurriculumSchedule(warmup=3, policy_window=0, tau_peak=0.5)
    assert all(sched.temperature_at(e) == 0.0 for e in range(10))
    assert not any(sched.policy_active(e) for e in range(10))


def test_phases_partition_training():
    sched = CurriculumSchedule(warmup=2, policy_window=3, tau_peak=0.1)
    phases = [sched.phase(e) for e in range(7)]
    assert phases == ["warmup", "warmup", "policy", "policy", "policy", "frozen", "frozen"]
    active = [sched.policy_active(e) for e in range(7)]
    # active exactly where the triangle is strictly positive
    assert active == [sched.temperature_at(e) > 0 for e in range(7)]


# -- baseline ---------------------------------------------------------------------


def test_ema_baseline_matches_recurrence_exactly():
    beta = 0.9
    baseline = EmaBaseline(beta=beta)
    b = 0.0
    for r in [-1.5, -0.3, 2.0, 0.7, -0.1]:
        b = beta * b + (1 - beta) * r
        assert baseline.update(r) == b
        assert baseline.b == b


def test_ema_baseline_converges_to_constant_reward():
    baseline = EmaBaseline(beta=0.5)
    for _ in range(60):
        baseline.update(4.0)
    assert baseline.b == pytest.approx(4.0)


# -- REINFORCE estimator -----------------------------------------------------------


def test_score_function_estimator_is_unbiased():
    # exact expected gradient over all 3! permutations vs Monte Carlo
    z = np.array([0.4, -0.2, 0.1])
    rewards = {
        (0, 1, 2): 1.0,
        (0, 2, 1): -0.5,
        (1, 0, 2): 0.25,
        (1, 2, 0): 2.0,
        (2, 0, 1): -1.0,
        (2, 1, 0): 0.0,
    }
    b = sum(
        math.exp(plackett_luce_log_prob(z, np.array(p))) * r
        for p, r in rewards.items()
    )  # optimal constant baseline: the mean reward
    exact = np.zeros(3)
    for p, r in rewards.items():
        prob = math.exp(plackett_luce_log_prob(z, np.array(p)))
        exact += prob * (r - b) * plackett_luce_grad(z, np.array(p))

    policy = OrderPolicy.from_prior(np.arange(3))
    policy.z = z.copy()
    draws = 20_000
    samples = np.zeros((draws, 3))
    for i in range(draws):
        rec = policy.sample(tau=1.0, seed=i)
        r = rewards[tuple(rec.perm.tolist())]
        samples[i] = (r - b) * policy.grad_log_prob(rec.perm)
    mc = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(draws)
    assert (np.abs(mc - exact) <= 3 * se + 1e-12).all()


# -- config -------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="sgd")
    with pytest.raises(ValueError):
        TrainConfig(mode="reorder", epochs=10, warmup=8, policy_window=8)
    # outside reorder mode the curriculum is disabled entirely
    cfg = TrainConfig(mode="fixed", epochs=10, warmup=20, policy_window=20)
    assert cfg.schedule().policy_window == 0
    assert all(cfg.schedule().temperature_at(e) == 0.0 for e in range(25))
    assert MODES[0] == "reorder"


# -- training loop --------------------------------------------------------------------


def test_fixed_mode_trains_and_records():
    model, train, val, config = tiny_setup(mode="fixed")
    result = train_model(model, train, val, config)
    assert len(result.epochs) == 8
    assert len(result.batches) == 8 * 2  # 64 examples / batch 32
    hashes = {b.perm_hash for b in result.batches}
    assert hashes == {permutation_digest(np.arange(16))}
    assert result.policy is None
    assert np.array_equal(result.eval_perm, np.arange(16))
    assert not any(b.policy_updated for b in result.batches)
    assert all(b.baseline is None for b in result.batches)
    first, last = result.epochs[0], result.epochs[-1]
    assert last.ce_loss < first.ce_loss
    assert 0.0 <= last.val_acc <= 1.0


def test_fixed_mode_respects_base_order():
    model, train, val, config = tiny_setup(mode="fixed", base_order="spiral")
    result = train_model(model, train, val, config)
    expected = linearize("spiral", GridSpec(4, 4))
    assert np.array_equal(result.eval_perm, expected)
    assert {b.perm_hash for b in result.batches} == {permutation_digest(expected)}


def test_static_random_uses_one_seeded_permutation():
    model, train, val, config = tiny_setup(mode="static_random")
    result = train_model(model, train, val, config)
    assert len({b.perm_hash for b in result.batches}) == 1
    model2, train2, val2, config2 = tiny_setup(mode="static_random")
    result2 = train_model(model2, train2, val2, config2)
    assert result.batches[0].perm_hash == result2.batches[0].perm_hash
    model3, _, _, config3 = tiny_setup(mode="static_random", seed=9)
    result3 = train_model(model3, train, val, config3)
    assert result3.batches[0].perm_hash != result.batches[0].perm_hash


def test_per_batch_random_redraws_every_batch():
    model, train, val, config = tiny_setup(mode="per_batch_random")
    result = train_model(model, train, val, config)
    hashes = [b.perm_hash for b in result.batches]
    assert len(set(hashes)) > len(hashes) // 2  # collisions are vanishingly rare


def test_reorder_mode_policy_lifecycle(tmp_path):
    model, train, val, config = tiny_setup(mode="reorder")
    result = train_model(model, train, val, config, snapshot_dir=tmp_path)
    assert result.policy is not None
    sched = config.schedule()

    # logits bit-identical through warmup and through the frozen tail
    digests = [e.z_digest for e in result.epochs]
    warm = {digests[e] for e in range(config.epochs) if sched.phase(e) == "warmup"}
    frozen = {digests[e] for e in range(config.epochs) if sched.phase(e) == "frozen"}
    assert len(warm) == 1
    assert len(frozen) == 1
    # updates happen only while the triangle is open
    for b in result.batches:
        assert b.policy_updated == sched.policy_active(b.epoch)
        if b.policy_updated:
            assert b.gumbel_seed is not None
            assert b.advantage is not None
        else:
            assert b.advantage is None
    # the EMA ingests rewards from epoch zero
    assert result.batches[0].baseline is not None
    # snapshots cover exactly the policy phase
    snaps = sorted(tmp_path.glob("policy_epoch_*.json"))
    policy_epochs = [e for e in range(config.epochs) if sched.phase(e) == "policy"]
    assert [int(s.stem.split("_")[-1]) for s in snaps] == policy_epochs
    assert np.array_equal(result.eval_perm, result.policy.ml_permutation())


def test_replay_learned_mode(tmp_path):
    model, train, val, config = tiny_setup(mode="reorder")
    first = train_model(model, train, val, config, snapshot_dir=tmp_path)
    snap = sorted(tmp_path.glob("policy_epoch_*.json"))[-1]

    model2, _, _, config2 = tiny_setup(mode="replay_learned")
    result = train_model(model2, train, val, config2, policy_file=str(snap))
    expected = OrderPolicy.load(snap).ml_permutation()
    assert np.array_equal(result.eval_perm, expected)
    assert {b.perm_hash for b in result.batches} == {permutation_digest(expected)}

    model3, _, _, config3 = tiny_setup(mode="replay_learned")
    with pytest.raises(ValueError):
        train_model(model3, train, val, config3)


def test_one_permutation_per_batch_record():
    model, train, val, config = tiny_setup(mode="reorder")
    result = train_model(model, train, val, config)
    per_epoch = {}
    for b in result.batches:
        per_epoch.setdefault(b.epoch, []).append(b)
    for epoch, batch in per_epoch.items():
        assert [b.batch for b in batch] == list(range(len(batch)))
        for b in batch:
            assert len(b.perm_hash) == 12


def test_non_finite_loss_raises_training_error():
    model, train, val, config = tiny_setup(mode="fixed")
    bad = train.features.copy()
    bad[0] = np.nan
    poisoned = dataclasses.replace(train, features=bad)
    with pytest.raises(TrainingError):
        train_model(model, poisoned, val, config)


def test_run_helpers_override_mode():
    model, train, val, config = tiny_setup(mode="fixed", epochs=7, warmup=2, policy_window=4)
    result = run_curriculum(model, train, val, config)
    assert result.policy is not None
    model2, _, _, _ = tiny_setup()
    result2 = run_baseline_mode("static_random", model2, train, val, config)
    assert result2.policy is None


def test_evaluate_matches_manual_argmax():
    model, train, val, config = tiny_setup()
    acc = evaluate(model, val, batch_size=7)
    probs = model.forward(val.features)
    manual = float((probs.argmax(axis=1) == val.labels).mean())
    assert acc == pytest.approx(manual)
    with pytest.raises(ValueError):
        evaluate(model, dataclasses.replace(val, features=val.features[:0], labels=val.labels[:0]))


def test_center_blob_signal_lives_in_center():
    # noise-free center_blob is separable from the central block alone, so a
    # trained model must collapse to chance once those slots are blanked
    spec = SynthSpec(
        family="center_blob",
        grid=GridSpec(4, 4),
        classes=4,
        noise_std=0.0,
        n_train=96,
        n_val=64,
        seed=3,
    )
    train, val = generate(spec)
    config = TrainConfig(
        mode="fixed",
        epochs=10,
        warmup=0,
        policy_window=0,
        tau_peak=0.0,
        batch_size=32,
        lr_backbone=3e-3,
        lr_backbone_policy_phase=3e-3,
        lr_policy=0.02,
        baseline_beta=0.9,
        seed=0,
    )
    model = ToyBackbone(kind="full_attention", grid=spec.grid, num_classes=4, d=16, seed=0)
    train_model(model, train, val, config)
    assert evaluate(model, val) >= 0.95

    blanked = val.features.copy()
    blanked[:, center_slots(spec.grid), :] = 0.0
    chance_acc = evaluate(model, dataclasses.replace(val, features=blanked))
    assert chance_acc <= 1.0 / 4 + 0.1


# -- csv traces -------------------------------------------------------------------------


def test_csv_writers_roundtrip(tmp_path):
    model, train, val, config = tiny_setup(mode="reorder")
    result = train_model(model, train, val, config)
    epoch_path = tmp_path / "trace.csv"
    batch_path = tmp_path / "batches.csv"
    write_epoch_csv(result.epochs, epoch_path)
    write_batch_csv(result.batches, batch_path)

    lines = epoch_path.read_text().strip().split("\n")
    assert lines[0] == "epoch,phase,tau,ce_loss,reward,baseline,advantage_mean,val_acc,perm_hash"
    assert len(lines) == 1 + len(result.epochs)
    warm_row = lines[1].split(",")
    assert warm_row[1] == "warmup"
    assert warm_row[6] == ""  # no advantage before the policy window

    blines = batch_path.read_text().strip().split("\n")
    assert len(blines) == 1 + len(result.batches)
    assert blines[0].startswith("epoch,batch,tau,ce_loss,reward")
    # float cells parse back exactly
    row = blines[1].split(",")
    assert float(row[3]) == result.batches[0].ce_loss


# -- bandit ------------------------------------------------------------------------------


def test_rank_alignment_reward_values():
    target = np.array([0, 1, 2, 3])
    assert rank_alignment_reward(target, target) == 0.0
    assert rank_alignment_reward(np.array([1, 0, 2, 3]), target) == pytest.approx(-0.5)
    # maximal displacement: full reversal of 4 slots is (3+1+1+3)/4
    assert rank_alignment_reward(np.array([3, 2, 1, 0]), target) == pytest.approx(-2.0)
    shuffled = np.array([2, 0, 3, 1])
    assert rank_alignment_reward(shuffled, shuffled) == 0.0


def test_rank_bandit_learns_small_target():
    target = np.array([2, 0, 3, 1])
    policy, first_hit = run_rank_bandit(target, steps=600, seed=0, lr=0.05, beta=0.9)
    assert first_hit is not None
    assert np.array_equal(policy.ml_permutation(), target)

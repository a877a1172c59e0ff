"""Command-line front end.

Subcommands: orders (permutation files + SVG trajectories), prior
(compression ranking), train (curriculum or baseline regimes), eval
(deterministic accuracy), analyze (policy evolution and shift stats).
Every value flag can also come from a key=value config file; flags win.
Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import backbones, compression, data, grids, training
from .backbones import positional_shift
from .policy import OrderPolicy, ml_permutation


class CLIError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _parse_grid(text: str) -> grids.GridSpec:
    try:
        h, w = text.lower().split("x")
        return grids.GridSpec(int(h), int(w))
    except (ValueError, TypeError) as e:
        raise CLIError(f"bad grid {text!r}, expected HxW") from e


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_config_file(path) -> dict:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CLIError(f"bad config line: {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = _parse_value(raw.strip())
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise CLIError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_config(resolved: dict, out: Path) -> None:
    lines = [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(resolved: dict) -> Path:
    if not resolved.get("out"):
        raise CLIError("--out is required")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Dataset plumbing shared by prior/train/eval
# ---------------------------------------------------------------------------

_DATA_DEFAULTS = {
    "dataset": "",
    "val_dataset": "",
    "synth": "",
    "grid": "8x8",
    "classes": 4,
    "noise_std": 0.25,
    "train_size": 2048,
    "val_size": 512,
    "data_seed": 0,
    "hflip": False,
}


def _add_data_flags(p: _Parser) -> None:
    p.add_argument("--dataset", help="dataset file (see data module format)")
    p.add_argument("--val-dataset", dest="val_dataset", help="validation dataset file")
    p.add_argument("--synth", help="generate a synthetic family instead of loading")
    p.add_argument("--grid", help="HxW for synthetic data")
    p.add_argument("--classes", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--hflip", action="store_const", const=True)


def _load_data(resolved: dict) -> tuple[data.GridDataset, data.GridDataset | None]:
    if resolved["synth"]:
        spec = data.SynthSpec(
            family=resolved["synth"],
            grid=_parse_grid(resolved["grid"]),
            classes=resolved["classes"],
            noise_std=resolved["noise_std"],
            n_train=resolved["train_size"],
            n_val=resolved["val_size"],
            seed=resolved["data_seed"],
            hflip=resolved["hflip"],
        )
        return data.generate(spec)
    if not resolved["dataset"]:
        raise CLIError("need --dataset FILE or --synth FAMILY")
    train = data.load_dataset(resolved["dataset"])
    val = data.load_dataset(resolved["val_dataset"]) if resolved["val_dataset"] else None
    return train, val


# ---------------------------------------------------------------------------
# orders
# ---------------------------------------------------------------------------

def _svg_trajectory(points, grid: grids.GridSpec, cell: int = 20) -> str:
    w, h = grid.width * cell, grid.height * cell
    xy = [(c * cell + cell / 2, r * cell + cell / 2) for r, c in points]
    path = " ".join(f"{x},{y}" for x, y in xy)
    sx, sy = xy[0]
    ex, ey = xy[-1]
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}">\n'
        f'<rect width="{w}" height="{h}" fill="white"/>\n'
        f'<polyline points="{path}" fill="none" stroke="#555" stroke-width="2"/>\n'
        f'<circle cx="{sx}" cy="{sy}" r="4" fill="#c22"/>\n'
        f'<circle cx="{ex}" cy="{ey}" r="4" fill="#111"/>\n'
        "</svg>\n"
    )


def cmd_orders(args) -> int:
    defaults = {"grid": "8x8", "orders": ",".join(grids.SCAN_ORDERS), "out": ""}
    resolved = _resolve(args, defaults)
    out = _out_dir(resolved)
    grid = _parse_grid(resolved["grid"])
    names = [o.strip() for o in resolved["orders"].split(",") if o.strip()]
    for name in names:
        perm = grids.linearize(name, grid)
        grids.save_permutation(out / f"{name}.json", perm, grid=grid, order=name)
        points = grids.trajectory_points(name, grid)
        (out / f"{name}.svg").write_text(_svg_trajectory(points, grid))
    _write_config(resolved, out)
    print(f"wrote {len(names)} orders for {grid.height}x{grid.width} to {out}")
    return 0


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

def cmd_prior(args) -> int:
    defaults = {
        **_DATA_DEFAULTS,
        "k": compression.DEFAULT_K,
        "orders": ",".join(grids.SCAN_ORDERS),
        "sample": compression.DEFAULT_SAMPLE,
        "out": "",
    }
    resolved = _resolve(args, defaults)
    out = _out_dir(resolved)
    train, _ = _load_data(resolved)
    names = tuple(o.strip() for o in resolved["orders"].split(",") if o.strip())
    report, prior = compression.rank_orderings(
        train, orders=names, K=resolved["k"], sample_size=resolved["sample"]
    )
    report.save_csv(out / "compression_report.csv")
    grids.save_permutation(
        out / "prior.json",
        prior,
        grid=train.grid,
        order=report.prior_order,
        extra={
            "ratio": report.ratio(report.prior_order, "unigram"),
            "K": report.K,
            "compressor_id": report.compressor_id,
            "sample_size": report.sample_size,
        },
    )
    _write_config(resolved, out)
    print(f"prior: {report.prior_order} (least compressible of {len(names)})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    **_DATA_DEFAULTS,
    "backbone": "windowed_attention",
    "d": 32,
    "depth": 2,
    "window": 3,
    "segment_len": 0,  # 0 = kind default
    "state_dim": 4,
    "mode": "reorder",
    "order": "row_major",
    "prior_file": "",
    "policy_file": "",
    "epochs": 60,
    "warmup": 15,
    "policy_window": 30,
    "tau_peak": 0.2,
    "batch_size": 128,
    "lr_backbone": 1e-4,
    "lr_backbone_policy_phase": 1e-5,
    "lr_policy": 1e-4,
    "baseline_beta": 0.99,
    "weight_decay": 0.03,
    "policy_weight_decay": 0.03,
    "seed": 0,
    "out": "",
}


def _add_train_flags(p: _Parser) -> None:
    _add_data_flags(p)
    p.add_argument("--backbone", choices=backbones.KINDS)
    p.add_argument("--d", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--segment-len", dest="segment_len", type=int)
    p.add_argument("--state-dim", dest="state_dim", type=int)
    p.add_argument("--mode", choices=training.MODES)
    p.add_argument("--order", choices=grids.SCAN_ORDERS)
    p.add_argument("--prior-file", dest="prior_file")
    p.add_argument("--policy-file", dest="policy_file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--policy-window", dest="policy_window", type=int)
    p.add_argument("--tau-peak", dest="tau_peak", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-backbone", dest="lr_backbone", type=float)
    p.add_argument(
        "--lr-backbone-policy-phase", dest="lr_backbone_policy_phase", type=float
    )
    p.add_argument("--lr-policy", dest="lr_policy", type=float)
    p.add_argument("--baseline-beta", dest="baseline_beta", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--policy-weight-decay", dest="policy_weight_decay", type=float)


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    out = _out_dir(resolved)
    train_set, val_set = _load_data(resolved)
    if val_set is None:
        raise CLIError("training needs a validation set (--val-dataset or --synth)")

    model = backbones.ToyBackbone(
        kind=resolved["backbone"],
        grid=train_set.grid,
        num_classes=train_set.num_classes,
        d=resolved["d"],
        depth=resolved["depth"],
        window=resolved["window"],
        segment_len=resolved["segment_len"] or None,
        state_dim=resolved["state_dim"],
        seed=resolved["seed"],
    )
    config = training.TrainConfig(
        mode=resolved["mode"],
        base_order=resolved["order"],
        epochs=resolved["epochs"],
        warmup=resolved["warmup"],
        policy_window=resolved["policy_window"],
        tau_peak=resolved["tau_peak"],
        batch_size=resolved["batch_size"],
        lr_backbone=resolved["lr_backbone"],
        lr_backbone_policy_phase=resolved["lr_backbone_policy_phase"],
        lr_policy=resolved["lr_policy"],
        policy_weight_decay=resolved["policy_weight_decay"],
        baseline_beta=resolved["baseline_beta"],
        weight_decay=resolved["weight_decay"],
        seed=resolved["seed"],
    )
    prior = None
    if resolved["prior_file"]:
        prior, _ = grids.load_permutation(resolved["prior_file"])
    result = training.train_model(
        model,
        train_set,
        val_set,
        config,
        prior=prior,
        policy_file=resolved["policy_file"] or None,
        snapshot_dir=out / "snapshots",
    )
    model.save(out / "checkpoint.json")
    if result.policy is not None:
        result.policy.save(
            out / "policy_final.json",
            meta={"epoch": config.epochs, "prior": config.base_order},
        )
    grids.save_permutation(
        out / "final_perm.json", result.eval_perm, grid=train_set.grid
    )
    training.write_epoch_csv(result.epochs, out / "trace.csv")
    training.write_batch_csv(result.batches, out / "batches.csv")
    _write_config(resolved, out)
    last = result.epochs[-1]
    print(f"final val_acc={last.val_acc:.4f} perm={last.perm_hash} mode={config.mode}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    defaults = {
        **_DATA_DEFAULTS,
        "checkpoint": "",
        "policy_file": "",
        "order": "row_major",
        "out": "",
    }
    resolved = _resolve(args, defaults)
    if not resolved["checkpoint"]:
        raise CLIError("--checkpoint is required")
    model = backbones.ToyBackbone.load(resolved["checkpoint"])
    train_set, val_set = _load_data(resolved)
    dataset = val_set if val_set is not None else train_set
    if dataset.grid.n != model.n:
        raise CLIError(
            f"dataset grid {dataset.grid.height}x{dataset.grid.width} does not "
            f"match checkpoint patch count {model.n}"
        )
    base = grids.linearize(resolved["order"], model.grid)
    report = {"base_order": resolved["order"], "base_acc": training.evaluate(model, dataset, base)}
    if resolved["policy_file"]:
        policy = OrderPolicy.load(resolved["policy_file"])
        if policy.n != model.n:
            raise CLIError("policy length does not match checkpoint patch count")
        report["ml_acc"] = training.evaluate(model, dataset, policy.ml_permutation())
    print(json.dumps(report, sort_keys=True))
    if resolved["out"]:
        out = _out_dir(resolved)
        (out / "eval.json").write_text(json.dumps(report, sort_keys=True) + "\n")
        _write_config(resolved, out)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    defaults = {"trace": "", "grid": "", "out": "", "track": 4}
    resolved = _resolve(args, defaults)
    if not resolved["trace"]:
        raise CLIError("--trace DIR is required")
    snapdir = Path(resolved["trace"])
    snaps = sorted(snapdir.glob("policy_epoch_*.json")) or sorted(
        (snapdir / "snapshots").glob("policy_epoch_*.json")
    )
    if not snaps:
        raise CLIError(f"no policy snapshots under {snapdir}")
    out = _out_dir(resolved)

    rows = []
    for path in snaps:
        doc = json.loads(path.read_text())
        rows.append((doc["meta"].get("epoch", -1), np.asarray(doc["z"], dtype=np.float64)))
    rows.sort(key=lambda t: t[0])
    n = len(rows[0][1])
    grid = _parse_grid(resolved["grid"]) if resolved["grid"] else _square_grid(n)
    if grid.n != n:
        raise CLIError(f"grid {grid.height}x{grid.width} does not match logit count {n}")

    logit_lines = ["epoch," + ",".join(f"slot{j}" for j in range(n))]
    for epoch, z in rows:
        logit_lines.append(f"{epoch}," + ",".join(repr(float(v)) for v in z))
    (out / "logits.csv").write_text("\n".join(logit_lines) + "\n")

    center = grids.center_slots(grid)
    tracked = center[: resolved["track"]]
    track_lines = ["epoch," + ",".join(f"pos_of_slot{int(j)}" for j in tracked)]
    shift_lines = ["epoch,center_mean_shift"]
    for epoch, z in rows:
        perm = ml_permutation(z)
        pos = grids.invert(perm)
        track_lines.append(f"{epoch}," + ",".join(str(int(pos[j])) for j in tracked))
        shift_lines.append(f"{epoch},{positional_shift(perm, center)!r}")
    (out / "tracked.csv").write_text("\n".join(track_lines) + "\n")
    (out / "shifts.csv").write_text("\n".join(shift_lines) + "\n")
    _write_config(resolved, out)
    print(f"analyzed {len(rows)} snapshots (n={n})")
    return 0


def _square_grid(n: int) -> grids.GridSpec:
    side = int(round(n**0.5))
    if side * side != n:
        raise CLIError(f"cannot infer grid for n={n}; pass --grid HxW")
    return grids.GridSpec(side, side)


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="patchorder", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    shared = {"--config": {}, "--seed": {"type": int}, "--out": {}}

    def add_shared(sp):
        for flag, kw in shared.items():
            sp.add_argument(flag, **kw)

    sp = sub.add_parser("orders", help="write permutation files and SVG trajectories")
    sp.add_argument("--grid")
    sp.add_argument("--orders")
    add_shared(sp)
    sp.set_defaults(run=cmd_orders)

    sp = sub.add_parser("prior", help="rank scan orders by compressibility")
    _add_data_flags(sp)
    sp.add_argument("--k", type=int)
    sp.add_argument("--orders")
    sp.add_argument("--sample", type=int)
    add_shared(sp)
    sp.set_defaults(run=cmd_prior)

    sp = sub.add_parser("train", help="train a backbone under an ordering regime")
    _add_train_flags(sp)
    add_shared(sp)
    sp.set_defaults(run=cmd_train)

    sp = sub.add_parser("eval", help="deterministic accuracy of a checkpoint")
    _add_data_flags(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--policy-file", dest="policy_file")
    sp.add_argument("--order", choices=grids.SCAN_ORDERS)
    add_shared(sp)
    sp.set_defaults(run=cmd_eval)

    sp = sub.add_parser("analyze", help="policy evolution and shift statistics")
    sp.add_argument("--trace")
    sp.add_argument("--grid")
    sp.add_argument("--track", type=int)
    add_shared(sp)
    sp.set_defaults(run=cmd_analyze)

    return p


def run(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
        return args.run(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (training.TrainingError, FloatingPointError, OverflowError) as e:
        print(f"failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())

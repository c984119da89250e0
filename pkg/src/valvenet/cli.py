"""Command-line entry point wiring synthesis, training, evaluation,
prediction, tracking and clinical metrics.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Relative --data / --out paths resolve against the VALVENET_DATA_ROOT and
VALVENET_OUT_ROOT environment variables when those are set. Every run echoes
its effective configuration into the output location for provenance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import synth as synth_mod
from . import tracker as tracker_mod
from . import train as train_mod
from .core import ViewLabel, load_sequence, read_manifest, save_sequence
from .errors import ConfigError, MissingFile, ValvenetError, WrongView
from .predict import PRESENCE_THRESHOLD_PX, predict_record
from .train import TrainConfig, load_checkpoint


def _resolve(path: str, env_var: str) -> Path:
    p = Path(path)
    root = os.environ.get(env_var)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _resolve_data(path: str) -> Path:
    return _resolve(path, "VALVENET_DATA_ROOT")


def _resolve_out(path: str) -> Path:
    return _resolve(path, "VALVENET_OUT_ROOT")


def _echo_config(out_dir: Path, args: argparse.Namespace, name: str = "run_config.json") -> None:
    payload = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func"
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _sequence_paths(data: Path, split: str) -> list[tuple[Path, str]]:
    """(absolute path, relative name) for a sequence file or a dataset split."""
    if data.is_file():
        return [(data, data.name)]
    if (data / "manifest.json").is_file():
        manifest = read_manifest(data)
        return [(data / rel, rel) for rel in manifest[split]]
    if data.is_dir():
        found = sorted(p for p in data.rglob("*.json") if p.name != "manifest.json")
        if not found:
            raise MissingFile(f"no sequence files under {data}")
        return [(p, str(p.relative_to(data))) for p in found]
    raise MissingFile(f"no such file or dataset: {data}")


# --- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _resolve_out(args.out)
    base = synth_mod.PhantomConfig(
        image_size=(args.size, args.size), frames_per_cycle=args.frames
    )
    synth_mod.generate_dataset(
        out, args.subjects, args.seed, base=base, val_fraction=args.val_fraction
    )
    _echo_config(out, args)
    manifest = read_manifest(out)
    print(
        f"wrote {len(manifest['sequences'])} sequences for {args.subjects} subjects "
        f"to {out} (train {len(manifest['train'])} / val {len(manifest['val'])})"
    )
    return 0


# --- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg_path = _resolve_data(args.config)
    if not cfg_path.is_file():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        config = TrainConfig.from_json(cfg_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    overrides = {}
    if args.data is not None:
        overrides["data_dir"] = str(_resolve_data(args.data))
    if args.out is not None:
        overrides["out_dir"] = str(_resolve_out(args.out))
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = replace(config, **overrides)
    checkpoint = train_mod.train(config)
    print(f"final checkpoint: {checkpoint}")
    return 0


# --- predict --------------------------------------------------------------------

def cmd_predict(args) -> int:
    out = _resolve_out(args.out)
    model, _, _ = load_checkpoint(_resolve_data(args.checkpoint))
    pairs = _sequence_paths(_resolve_data(args.data), args.split)
    out.mkdir(parents=True, exist_ok=True)
    for src, rel in pairs:
        record = load_sequence(src)
        predicted = predict_record(
            model,
            record,
            presence_threshold=args.presence_threshold,
            resample=not args.no_resample,
        )
        save_sequence(predicted, out / rel)
    _echo_config(out, args)
    print(f"predicted {len(pairs)} sequences into {out}")
    return 0


# --- eval -----------------------------------------------------------------------

def _eval_pairs(args) -> tuple[list[tuple[list, list]], str]:
    """Collect (pred landmark list, gt landmark list) pairs per sequence."""
    gt_root = _resolve_data(args.gt if args.gt else args.data)
    gt_paths = _sequence_paths(gt_root, args.split)
    pairs = []
    if args.checkpoint:
        model, _, _ = load_checkpoint(_resolve_data(args.checkpoint))
        for src, _rel in gt_paths:
            record = load_sequence(src)
            predicted = predict_record(model, record, presence_threshold=args.presence_threshold)
            pairs.append((predicted.landmarks, record.landmarks))
        return pairs, args.label or "network"
    pred_root = _resolve_data(args.pred)
    for src, rel in gt_paths:
        record = load_sequence(src)
        pred_path = pred_root if pred_root.is_file() else pred_root / rel
        if not pred_path.is_file():
            raise MissingFile(f"no prediction for {rel} under {pred_root}")
        predicted = load_sequence(pred_path, strict_view=False)
        if predicted.n_frames != record.n_frames:
            raise ValvenetError(f"{rel}: frame count differs between pred and gt")
        pairs.append((predicted.landmarks, record.landmarks))
    return pairs, args.label or "prediction"


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred")
    if args.checkpoint and not args.data:
        raise ConfigError("--checkpoint mode needs --data")
    if args.pred and not args.gt:
        raise ConfigError("--pred mode needs --gt")
    pairs, label = _eval_pairs(args)
    all_samples: dict[int, list] = {}
    all_missing: dict[int, int] = {}
    for pred_lms, gt_lms in pairs:
        samples, missing, _spurious = metrics_mod.paired_error_samples(pred_lms, gt_lms)
        for lid, vals in samples.items():
            all_samples.setdefault(lid, []).extend(vals.tolist())
        for lid, n in missing.items():
            all_missing[lid] = all_missing.get(lid, 0) + n
    table = metrics_mod.summarize_errors(
        {k: np.asarray(v) for k, v in all_samples.items()}, label=label
    )
    table.excluded = all_missing
    print(table.format_text())
    if table.mean:
        overall = float(np.mean([table.mean[k] for k in table.mean]))
        print(f"mean over landmarks: {overall:.3f} px")
    if all_missing:
        print(f"frames with missing predictions: {all_missing}")
    if args.out:
        out = _resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "error_table.csv")
        _echo_config(out, args)
    return 0


# --- metrics --------------------------------------------------------------------

def cmd_metrics(args) -> int:
    data = _resolve_data(args.data)
    seq_paths = _sequence_paths(data, args.split)
    pred_root = _resolve_data(args.pred) if args.pred else None
    rows = []
    for src, rel in seq_paths:
        record = load_sequence(src)
        source = None
        if pred_root is not None:
            pred_path = pred_root if pred_root.is_file() else pred_root / rel
            source = load_sequence(pred_path, strict_view=False).landmarks
        if args.mapse and record.view is not ViewLabel.CH4:
            raise WrongView(
                f"{rel}: MAPSE/TAPSE require the CH4 view, got {record.view.value}"
            )
        rows.extend(metrics_mod.strain_table_rows(record, source))
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metrics_csv(rows, out)
    _echo_config(out.parent, args, name=f"{out.stem}.run_config.json")
    print(f"wrote {len(rows)} metric rows to {out}")
    return 0


# --- track ----------------------------------------------------------------------

def cmd_track(args) -> int:
    if args.init == "pred" and not args.checkpoint:
        raise ConfigError("--init pred needs --checkpoint")
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = tracker_mod.TrackConfig(
        window=args.window,
        pyramid_levels=args.levels,
        max_iters=args.max_iters,
        epsilon=args.epsilon,
    )
    model = None
    if args.init == "pred":
        model, _, _ = load_checkpoint(_resolve_data(args.checkpoint))
    all_samples: dict[int, list] = {}
    all_lost: dict[int, int] = {}
    for src, rel in _sequence_paths(_resolve_data(args.data), args.split):
        record = load_sequence(src)
        if args.init == "pred":
            init = predict_record(model, record).landmarks[0]
        else:
            init = record.landmarks[0]
        tracked = tracker_mod.lk_track(record.frames, init, cfg)
        save_sequence(replace(record, landmarks=tracked, strict_view=False), out / rel)
        table = tracker_mod.tracking_error_table(tracked, record.landmarks)
        for lid in table.mean:
            all_samples.setdefault(lid, [])
        samples, lost, _ = metrics_mod.paired_error_samples(tracked, record.landmarks)
        for lid, vals in samples.items():
            all_samples.setdefault(lid, []).extend(vals.tolist())
        for lid, n in lost.items():
            all_lost[lid] = all_lost.get(lid, 0) + n
    table = metrics_mod.summarize_errors(
        {k: np.asarray(v) for k, v in all_samples.items() if v}, label="tracker"
    )
    table.excluded = all_lost
    print(table.format_text())
    lost_total = sum(all_lost.values())
    print(f"lost-point frames: {lost_total}")
    table.to_csv(out / "error_table.csv")
    _echo_config(out, args)
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="valvenet",
        description="Valve landmark regression toolkit: synthesis, training, "
        "evaluation, prediction, tracking and clinical metrics.",
    )
    sub = parser.add_subparsers(dest="cmd", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64, help="square image size in px")
    p.add_argument("--frames", type=int, default=30, help="frames per cycle")
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the landmark regressor")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--data", help="override data_dir")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--iterations", type=int, help="override iteration count")
    p.add_argument("--seed", type=int, help="override seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the network on stored sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence JSON or dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", required=True)
    p.add_argument("--presence-threshold", type=float, default=PRESENCE_THRESHOLD_PX)
    p.add_argument(
        "--no-resample",
        action="store_true",
        help="require frames to match the network input size exactly",
    )
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-landmark pixel-error table")
    p.add_argument("--checkpoint", help="evaluate a trained model on --data")
    p.add_argument("--data", help="ground-truth dataset for --checkpoint mode")
    p.add_argument("--pred", help="predicted/second annotation file or directory")
    p.add_argument("--gt", help="reference annotation file or directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--label", help="method label for the table")
    p.add_argument("--presence-threshold", type=float, default=PRESENCE_THRESHOLD_PX)
    p.add_argument("--out", help="optional output directory for the CSV table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="strain / MAPSE / TAPSE CSV export")
    p.add_argument("--data", required=True, help="sequence JSON or dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--pred", help="take landmarks from predictions instead of annotations")
    p.add_argument("--mapse", action="store_true", help="require MAPSE/TAPSE (CH4 only)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("track", help="Lucas-Kanade baseline tracking")
    p.add_argument("--data", required=True, help="sequence JSON or dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--init", default="gt", choices=("gt", "pred"))
    p.add_argument("--checkpoint", help="needed when --init pred")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--max-iters", type=int, default=30)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.set_defaults(func=cmd_track)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ValvenetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

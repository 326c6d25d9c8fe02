"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 missing file,
4 checkpoint/skeleton mismatch, 5 invalid data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DatasetError,
    JointCountError,
    PinholeCamera,
    PoseDataset,
    atomic_write,
    load_dataset,
    save_splits,
    split_by_subject,
    synth_toy_dataset,
)
from .denoiser import build_denoiser, count_parameters
from .diffusion import sample_items
from .evaluation import evaluate
from .schedule import make_schedule
from .skeleton import SkeletonError
from .training import train

log = logging.getLogger("graphdiff")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH, EXIT_DATA = 0, 1, 2, 3, 4, 5
REFERENCE_PARAMS = 3.22e6
NUM_WORKERS_ENV = "GRAPHDIFF_NUM_WORKERS"


class MismatchError(RuntimeError):
    pass


def _configure_threads() -> int:
    raw = os.environ.get(NUM_WORKERS_ENV, "0")
    try:
        workers = max(int(raw), 0)
    except ValueError:
        raise C.ConfigError(f"{NUM_WORKERS_ENV} must be an integer, got {raw!r}") from None
    # 0 pins a single thread so results are bitwise reproducible
    torch.set_num_threads(workers or 1)
    return workers


def _prepare(args) -> dict:
    cfg = C.resolve_config(args.config, list(args.set or []))
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key, attr in args._flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            C.set_key(cfg, key, value)
    log.info("resolved config:\n%s", C.dump(cfg))
    if args.out:
        atomic_write(Path(args.out) / "resolved_config.yaml", C.dump(cfg))
    return cfg


def _load_model(cfg: dict):
    if not cfg["checkpoint"]:
        raise C.ConfigError("a checkpoint path is required (--checkpoint or checkpoint: in config)")
    model, schedule, meta = load_checkpoint(cfg["checkpoint"])
    return model, schedule, meta


def _check_skeleton(model, dataset: PoseDataset):
    if model.skeleton != dataset.skeleton:
        raise MismatchError(
            f"checkpoint skeleton {model.skeleton.name!r} ({model.skeleton.num_joints} joints) does not match "
            f"dataset skeleton {dataset.skeleton.name!r} ({dataset.skeleton.num_joints} joints)"
        )


def cmd_synth_data(args) -> int:
    cfg = _prepare(args)
    if not args.out:
        raise C.ConfigError("synth-data needs --out DIR")
    norm = C.normalization_spec(cfg)
    camera = PinholeCamera(cx=norm.image_width / 2, cy=norm.image_height / 2,
                           width=norm.image_width, height=norm.image_height)
    ds = synth_toy_dataset(int(cfg["seed"]), int(cfg["synth"]["size"]), C.denoiser_config(cfg).skeleton, camera,
                           float(cfg["synth"]["noise_sigma"]), pose_scale_mm=norm.pose_scale_mm)
    test_subjects = cfg["synth"]["test_subjects"] or []
    if test_subjects:
        test, trainset = split_by_subject(ds, test_subjects)
        save_splits(args.out, {"train": trainset, "test": test})
    else:
        save_splits(args.out, {"train": ds})
    print(f"wrote {len(ds)} items to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _prepare(args)
    if not args.out:
        raise C.ConfigError("train needs --out DIR")
    if not cfg["data"]["path"]:
        raise C.ConfigError("train needs data.path")
    workers = _configure_threads()
    dcfg = C.denoiser_config(cfg)
    ds = load_dataset(cfg["data"]["path"], dcfg.skeleton, cfg["data"]["split"])
    dtype = getattr(torch, cfg["train"]["dtype"])
    log.info("training on %d items (workers=%d)", len(ds), workers)

    def report(row):
        log.info("epoch %d loss %.5f l1 %.5f l2 %.5f lr %.3g", row["epoch"], row["loss"], row["l1"], row["l2"], row["lr"])

    result = train(ds, dcfg, C.train_config(cfg), C.loss_config(cfg), out_dir=args.out, dtype=dtype, on_epoch=report)
    if result.history:
        print(f"final loss {result.history[-1]['loss']:.6f} after {len(result.history)} epochs")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _prepare(args)
    _configure_threads()
    model, schedule, _ = _load_model(cfg)
    if not cfg["input"]:
        raise C.ConfigError("sample needs --input DATASET_DIR")
    out = cfg["output"] or args.out
    if not out:
        raise C.ConfigError("sample needs --output DIR (or --out)")
    ds = load_dataset(cfg["input"], model.skeleton, cfg["data"]["split"])
    _check_skeleton(model, ds)
    scfg = C.sampler_config(cfg)
    dtype = next(model.parameters()).dtype
    y = torch.from_numpy(ds.keypoints).to(dtype)
    hyps = sample_items(model, y, schedule, scfg, skeleton=model.skeleton)
    hyps_mm = hyps.double().numpy() * ds.normalization.pose_scale_mm
    mean_mm = hyps_mm.mean(axis=1)
    n = scfg.num_hypotheses
    pred = PoseDataset(ds.keypoints, mean_mm, ds.action_ids, ds.subject_ids, ds.skeleton,
                       ds.action_names, ds.subject_names, ds.normalization)
    hyp = PoseDataset(np.repeat(ds.keypoints, n, axis=0), hyps_mm.reshape(-1, *mean_mm.shape[1:]),
                      np.repeat(ds.action_ids, n), np.repeat(ds.subject_ids, n), ds.skeleton,
                      ds.action_names, ds.subject_names, ds.normalization)
    save_splits(out, {"pred": pred, "hypotheses": hyp})
    print(f"wrote {len(ds)} mean poses and {len(ds) * n} hypotheses to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    _configure_threads()
    if not cfg["data"]["path"]:
        raise C.ConfigError("eval needs data.path")
    oracle = bool(cfg["eval"]["oracle"]) or args.gt_oracle
    split = cfg["data"]["eval_split"] or cfg["data"]["split"]
    if oracle:
        dcfg = C.denoiser_config(cfg)
        ds = load_dataset(cfg["data"]["path"], dcfg.skeleton, split)
        s = cfg["schedule"]
        schedule = make_schedule(s["kind"], int(s["total_steps"]), float(s["s"]), s["beta_start"], s["beta_end"])
        model = None
    else:
        model, schedule, _ = _load_model(cfg)
        ds = load_dataset(cfg["data"]["path"], model.skeleton, split)
        _check_skeleton(model, ds)
    report = evaluate(model, ds, schedule, C.sampler_config(cfg), aggregate=cfg["eval"]["aggregate"],
                      procrustes_scale=bool(cfg["eval"]["procrustes_scale"]), oracle=oracle)
    table = report.to_table()
    print(table, end="")
    if args.out:
        atomic_write(Path(args.out) / "report.csv", report.to_csv())
        atomic_write(Path(args.out) / "report.txt", table)
    return EXIT_OK


def cmd_inspect_schedule(args) -> int:
    cfg = _prepare(args)
    s = cfg["schedule"]
    schedule = make_schedule(s["kind"], int(s["total_steps"]), float(s["s"]), s["beta_start"], s["beta_end"])
    text = schedule.to_csv()
    if args.out:
        atomic_write(Path(args.out) / "schedule.csv", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_model_info(args) -> int:
    cfg = _prepare(args)
    if cfg["checkpoint"]:
        model, _, meta = _load_model(cfg)
    else:
        model = build_denoiser(C.denoiser_config(cfg), int(cfg["seed"]))
    n = count_parameters(model)
    mc = model.config
    lines = [
        f"skeleton: {mc.skeleton.name} ({mc.skeleton.num_joints} joints)",
        f"model_dim: {mc.model_dim}",
        f"num_blocks: {mc.num_blocks}",
        f"time_embed_dim: {mc.time_embed_dim}",
        f"parameters: {n}",
        f"reference: {int(REFERENCE_PARAMS)} ({(n / REFERENCE_PARAMS - 1) * 100:+.1f}%)",
    ]
    print("\n".join(lines))
    if args.out:
        atomic_write(Path(args.out) / "model_info.txt", "\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphdiff", description="Graph diffusion 2D-to-3D pose lifting")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, flag_keys=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML/JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="top-level seed")
        p.set_defaults(func=func, _flag_keys=flag_keys or {})
        return p

    add("synth-data", cmd_synth_data, "generate a synthetic pose dataset")
    p = add("train", cmd_train, "train a denoiser", {"data.path": "data"})
    p.add_argument("--data", help="dataset directory")
    p = add("sample", cmd_sample, "sample 3D poses for 2D detections", {
        "checkpoint": "checkpoint", "input": "input", "output": "output",
        "sampler.num_hypotheses": "num_hypotheses", "sampler.mode": "mode",
        "sampler.ddim_steps": "ddim_steps", "sampler.ddim_eta": "eta",
    })
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="dataset directory with 2D detections")
    p.add_argument("--output", help="directory for the predicted poses")
    p.add_argument("-n", "--num-hypotheses", dest="num_hypotheses", type=int)
    p.add_argument("--mode", choices=["ddpm", "ddim"])
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.add_argument("--eta", type=float)
    p = add("eval", cmd_eval, "evaluate MPJPE / P-MPJPE", {
        "checkpoint": "checkpoint", "data.path": "data",
        "sampler.num_hypotheses": "num_hypotheses", "sampler.mode": "mode", "sampler.ddim_steps": "ddim_steps",
    })
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("-n", "--num-hypotheses", dest="num_hypotheses", type=int)
    p.add_argument("--mode", choices=["ddpm", "ddim"])
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.add_argument("--gt-oracle", action="store_true", help="replace the model by a ground-truth noise oracle")
    add("inspect-schedule", cmd_inspect_schedule, "dump the noise schedule as CSV")
    p = add("model-info", cmd_model_info, "report the parameter count", {"checkpoint": "checkpoint"})
    p.add_argument("--checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, MismatchError, JointCountError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DatasetError, SkeletonError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

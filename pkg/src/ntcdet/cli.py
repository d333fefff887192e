"""Command line interface: gen | train | eval | bench.

Commands refuse to overwrite existing outputs unless --force is given and exit
nonzero on any error. NTCDET_THREADS caps per-clip parallelism during eval.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .bench import bench_kernels, bench_stream
from .boxes import nms
from .config import ConfigError, ExperimentConfig
from .detector.model import make_flow_source
from .detector.stream import StreamSession
from .detector.train import load_model, train
from .evalkit import EvalError, evaluate
from .synthvid import Dataset, PlacementError, render_dataset


class CliError(RuntimeError):
    pass


def _load_config(path):
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    return ExperimentConfig.load(path)


def _refuse_overwrite(path, force):
    if os.path.exists(path) and not force:
        raise CliError(f"output already exists: {path} (use --force to overwrite)")


def _apply_model_overrides(cfg: ExperimentConfig, args):
    updates = {}
    if getattr(args, "no_ntca", False):
        updates["ntca_enabled"] = False
    if getattr(args, "no_iof_align", False):
        updates["iof_align"] = False
    if getattr(args, "no_temp_agg", False):
        updates["temp_agg"] = False
    if getattr(args, "no_aux", False):
        updates["aux_loss"] = False
    if getattr(args, "t_ctxt", None) is not None:
        updates["t_ctxt"] = args.t_ctxt
    if getattr(args, "layers", None) is not None:
        updates["layers"] = args.layers
    if getattr(args, "aggregation", None) is not None:
        updates["aggregation"] = args.aggregation
    if updates:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **updates))
    return cfg


def cmd_gen(args):
    cfg = _load_config(args.config)
    out = args.out or cfg.dataset
    _refuse_overwrite(os.path.join(out, "manifest.json"), args.force)
    clip_cfg = cfg.data.clip
    if args.seed is not None:
        clip_cfg = dataclasses.replace(clip_cfg, seed=args.seed)
    manifest = render_dataset(clip_cfg, cfg.data.n_train, cfg.data.n_test, out)
    ds = Dataset(out)
    print(f"wrote {len(ds.clip_ids('train'))} train + {len(ds.clip_ids('test'))} test clips "
          f"({ds.height}x{ds.width}, {ds.fps} fps) to {out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg = _apply_model_overrides(_load_config(args.config), args)
    dataset_dir = args.dataset or cfg.dataset
    if not os.path.exists(os.path.join(dataset_dir, "manifest.json")):
        raise CliError(f"dataset not found at {dataset_dir} (run `ntcdet gen` first)")
    dataset = Dataset(dataset_dir)
    out_dir = args.out or cfg.out_dir
    seeds = [args.seed] if args.seed is not None else list(cfg.train.seeds)
    paths = []
    for seed in seeds:
        tag = f"model_seed{seed}"
        ckpt = os.path.join(out_dir, f"{tag}.ntcd")
        _refuse_overwrite(ckpt, args.force)
        path, log = train(dataset, cfg, seed, out_dir, tag=tag)
        print(f"seed {seed}: {len(log)} log records, final loss {log[-1]['total']:.4f} -> {path}")
        paths.append(path)
    return 0


def _clip_records(model, cfg, clip, nms_iou=0.5):
    src = make_flow_source(cfg, motion=clip.motion)
    sess = StreamSession(model, src)
    det_records = []
    prop_records = []
    for t in range(clip.frames.shape[0]):
        dets = sess.push(clip.frames[t])
        props = sess.cache[t].boxlist
        for box, score in zip(props.boxes, props.scores):
            prop_records.append({"clip_id": clip.clip_id, "frame_index": t,
                                 "box": [float(v) for v in box], "score": float(score)})
        keep = nms(dets.boxes, dets.scores, nms_iou)
        for i in keep:
            det_records.append({"clip_id": clip.clip_id, "frame_index": t,
                                "box": [float(v) for v in dets.boxes[i]],
                                "score": float(dets.scores[i])})
    return det_records, prop_records


def _eval_clip_worker(payload):
    ckpt_path, dataset_dir, clip_id = payload
    model, cfg, _ = load_model(ckpt_path)
    dataset = Dataset(dataset_dir)
    dets, props = _clip_records(model, cfg, dataset.clip(clip_id))
    return clip_id, dets, props


def run_inference(ckpt_path, dataset: Dataset, split="test"):
    """Stream every clip of the split; returns (detections, proposals) records."""
    clip_ids = dataset.clip_ids(split)
    threads = int(os.environ.get("NTCDET_THREADS", "1"))
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for clip_id, dets, props in pool.map(
                    _eval_clip_worker,
                    [(ckpt_path, dataset.root, cid) for cid in clip_ids]):
                results[clip_id] = (dets, props)
    else:
        model, cfg, _ = load_model(ckpt_path)
        for cid in clip_ids:
            results[cid] = _clip_records(model, cfg, dataset.clip(cid))
    det_records = []
    prop_records = []
    for cid in sorted(results):
        dets, props = results[cid]
        det_records.extend(dets)
        prop_records.extend(props)
    return det_records, prop_records


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _eval_one(ckpt_path, dataset, out_dir, tag=""):
    prefix = f"{tag}_" if tag else ""
    dets, props = run_inference(ckpt_path, dataset)
    _write_jsonl(os.path.join(out_dir, f"{prefix}detections.jsonl"), dets)
    _write_jsonl(os.path.join(out_dir, f"{prefix}proposals.jsonl"), props)
    report = evaluate(dets, dataset, proposals=props)
    with open(os.path.join(out_dir, f"{prefix}report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    return report


def cmd_eval(args):
    cfg = _load_config(args.config)
    dataset_dir = args.dataset or cfg.dataset
    dataset = Dataset(dataset_dir)
    out_dir = args.out or os.path.join(cfg.out_dir, "eval")
    _refuse_overwrite(os.path.join(out_dir, "report.json") if not args.ablate
                      else os.path.join(out_dir, "ablation.json"), args.force)
    os.makedirs(out_dir, exist_ok=True)
    if args.ablate:
        if not os.path.isdir(args.checkpoint):
            raise CliError("--ablate expects --checkpoint to be a directory of .ntcd files")
        rows = []
        for name in sorted(os.listdir(args.checkpoint)):
            if not name.endswith(".ntcd"):
                continue
            path = os.path.join(args.checkpoint, name)
            _, _, meta = load_model(path)
            report = _eval_one(path, dataset, out_dir, tag=os.path.splitext(name)[0])
            head = meta["head_config"]
            rows.append({"arm": os.path.splitext(name)[0],
                         "ntca_enabled": head["ntca_enabled"],
                         "iof_align": head["iof_align"], "temp_agg": head["temp_agg"],
                         **report.to_dict()})
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(rows, fh, sort_keys=True, indent=1)
        for row in rows:
            print(f"{row['arm']}: Pr90={row['pr90']:.3f} FP90={row['fp90']:.2f} "
                  f"AP50={row['ap50']:.3f} R@16={row['r_at_16']:.3f}")
    else:
        report = _eval_one(args.checkpoint, dataset, out_dir)
        print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    return 0


def cmd_bench(args):
    dataset = Dataset(args.dataset) if args.dataset else None
    out = {"kernels": bench_kernels()}
    if args.checkpoint:
        if dataset is None:
            raise CliError("bench with a checkpoint needs --dataset")
        model, _, _ = load_model(args.checkpoint)
        out["stream"] = bench_stream(model, dataset, max_frames=args.frames)
        if not out["stream"]["outputs_identical"]:
            raise CliError("cached and from-scratch outputs differ")
    if args.out:
        _refuse_overwrite(args.out, args.force)
        with open(args.out, "w") as fh:
            json.dump(out, fh, sort_keys=True, indent=1)
    print(json.dumps(out, sort_keys=True, indent=1))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ntcdet",
                                description="temporal-context lesion detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--config", help="experiment config JSON")
    g.add_argument("--out", help="dataset directory (default: config.dataset)")
    g.add_argument("--seed", type=int, help="override the dataset base seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train model(s)")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--dataset", help="dataset directory (default: config.dataset)")
    t.add_argument("--out", help="output directory (default: config.out_dir)")
    t.add_argument("--seed", type=int, help="train a single seed instead of config.train.seeds")
    t.add_argument("--no-ntca", action="store_true", help="basic detector (no temporal context)")
    t.add_argument("--no-iof-align", action="store_true", help="contexts from undeformed grids")
    t.add_argument("--no-temp-agg", action="store_true", help="temporal average instead of attention")
    t.add_argument("--no-aux", action="store_true", help="disable auxiliary losses")
    t.add_argument("--t-ctxt", type=int, dest="t_ctxt")
    t.add_argument("--layers", type=int)
    t.add_argument("--aggregation", choices=["roi", "feature", "both"])
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run streaming inference and compute metrics")
    e.add_argument("--checkpoint", required=True,
                   help="checkpoint path (or directory with --ablate)")
    e.add_argument("--config", help="experiment config JSON")
    e.add_argument("--dataset", help="dataset directory (default: config.dataset)")
    e.add_argument("--out", help="output directory")
    e.add_argument("--ablate", action="store_true",
                   help="evaluate every checkpoint in a directory and emit a comparison table")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="latency benchmarks (stream cache + kernels)")
    b.add_argument("--checkpoint")
    b.add_argument("--dataset")
    b.add_argument("--frames", type=int, default=500)
    b.add_argument("--out", help="write the report JSON here")
    b.add_argument("--force", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, EvalError, PlacementError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

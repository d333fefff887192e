"""Iteration-based training on random clip windows, with resumable checkpoints."""

import json
import os

import numpy as np

from .. import numcore as nc
from ..config import ExperimentConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import compute_losses
from .model import UltraDet, make_flow_source, window_ids


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def lr_at(it, train_cfg):
    """Step decay x0.1 at the configured fractions of the run."""
    lr = train_cfg.lr
    for frac in train_cfg.decay_at:
        if it >= int(frac * train_cfg.iterations):
            lr *= 0.1
    return lr


def _gt_by_frame(clip, frame_ids):
    out = {}
    for fid in set(frame_ids):
        out[fid] = clip.boxes_at(fid, kind="lesion")
    return out


def train(dataset, config: ExperimentConfig, seed, out_dir, tag="model", resume=None):
    """Train one model; returns (checkpoint_path, log_records).

    Deterministic for a fixed seed. Aborts on non-finite loss, keeping the
    last finite checkpoint. `resume` replays the exact rng schedule of an
    uninterrupted run.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg = config.model
    tcfg = config.train
    rng = np.random.default_rng(seed)
    model = UltraDet(cfg, rng)
    opt = nc.AdamW(model.named_params(), lr=tcfg.lr, betas=tcfg.betas,
                   weight_decay=tcfg.weight_decay)
    start_iter = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
        opt.load_state_arrays(arrays, meta["optimizer_step"])
        rng.bit_generator.state = meta["rng_state"]
        start_iter = int(meta["iteration"])

    clip_ids = dataset.clip_ids("train")
    if not clip_ids:
        raise ValueError("dataset has no training clips")
    clips = [dataset.clip(cid) for cid in clip_ids]
    flow_sources = [make_flow_source(cfg, motion=c.motion) for c in clips]

    ckpt_path = os.path.join(out_dir, f"{tag}.ntcd")
    log_path = os.path.join(out_dir, f"{tag}.log.jsonl")
    log = []
    last_saved = None

    def save(it):
        arrays = dict(model.state_arrays())
        arrays.update(opt.state_arrays())
        meta = {
            "iteration": it,
            "seed": int(seed),
            "rng_state": rng.bit_generator.state,
            "optimizer_step": opt.step_count,
            "head_config": cfg.to_dict(),
            "train_config": tcfg.to_dict(),
        }
        save_checkpoint(ckpt_path, arrays, meta)
        return ckpt_path

    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log_fh:
        for it in range(start_iter, tcfg.iterations):
            ci = int(rng.integers(len(clips)))
            clip = clips[ci]
            t = int(rng.integers(clip.frames.shape[0]))
            ids = window_ids(t, cfg.t_prev)
            frames = [clip.frames[i] for i in ids]
            with nc.Tape() as tape:
                out = model.forward_window(frames, ids, flow_sources[ci])
                report, total = compute_losses(out, _gt_by_frame(clip, ids), cfg)
                if not np.isfinite(total.data).all():
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {it}", checkpoint_path=last_saved)
                tape.backward(total)
            opt.step(lr=lr_at(it, tcfg))
            opt.zero_grad()
            if (it + 1) % tcfg.log_interval == 0 or it == start_iter:
                rec = {"iteration": it, "l_cls": report.l_cls, "l_reg": report.l_reg,
                       "l_aux": report.l_aux, "total": report.total}
                log.append(rec)
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if (it + 1) % tcfg.checkpoint_interval == 0:
                last_saved = save(it + 1)
    last_saved = save(tcfg.iterations)
    return ckpt_path, log


def load_model(ckpt_path):
    """Rebuild the model (standard precision) from a checkpoint."""
    from ..config import HeadConfig

    arrays, meta = load_checkpoint(ckpt_path)
    cfg = HeadConfig.from_dict(meta["head_config"])
    model = UltraDet(cfg, np.random.default_rng(0))
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return model, cfg, meta

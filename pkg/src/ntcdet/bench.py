"""Benchmarks: streaming cache vs from-scratch recompute, and compiled-kernel
vs numpy-fallback microbenchmarks."""

import time

import numpy as np

from . import _kernels as K
from .detector.model import make_flow_source, window_ids
from .detector.stream import StreamSession
from .synthvid import Dataset


def _percentile(values, q):
    return float(np.percentile(np.asarray(values), q))


def _summary(times):
    arr = np.asarray(times)
    return {
        "frames": int(arr.size),
        "mean_ms": float(arr.mean() * 1e3),
        "median_ms": float(np.median(arr) * 1e3),
        "p95_ms": _percentile(arr, 95) * 1e3,
        "fps": float(1.0 / arr.mean()),
    }


def bench_stream(model, dataset: Dataset, split="test", max_frames=500):
    """Per-frame latency of cached streaming vs window recompute; asserts equality."""
    cached_times = []
    scratch_times = []
    mismatches = 0
    done = 0
    for clip_id in dataset.clip_ids(split):
        if done >= max_frames:
            break
        clip = dataset.clip(clip_id)
        sess = StreamSession(model, make_flow_source(model.cfg, motion=clip.motion))
        scratch_src = make_flow_source(model.cfg, motion=clip.motion)
        for t in range(clip.frames.shape[0]):
            if done >= max_frames:
                break
            t0 = time.perf_counter()
            dets_c = sess.push(clip.frames[t])
            cached_times.append(time.perf_counter() - t0)
            ids = window_ids(t, model.cfg.t_prev)
            frames = [clip.frames[i] for i in ids]
            t0 = time.perf_counter()
            out = model.forward_window(frames, ids, scratch_src)
            scratch_times.append(time.perf_counter() - t0)
            if not (np.array_equal(dets_c.boxes, out.detections.boxes)
                    and np.array_equal(dets_c.scores, out.detections.scores)):
                mismatches += 1
            done += 1
    cached = _summary(cached_times)
    scratch = _summary(scratch_times)
    return {
        "cached": cached,
        "scratch": scratch,
        "speedup": scratch["mean_ms"] / cached["mean_ms"],
        "outputs_identical": mismatches == 0,
        "mismatched_frames": mismatches,
        "t_prev": model.cfg.t_prev,
    }


def _time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        best = min(best, dt)
    return best


def bench_kernels(repeats=5):
    """Compare the available kernel backends on the hot operations."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 64, 64)).astype(np.float32)
    w = rng.standard_normal((32, 32, 3, 3)).astype(np.float32)
    b = np.zeros(32, dtype=np.float32)
    pts = (rng.random((4096, 2)) * 15).astype(np.float32)
    f = rng.standard_normal((32, 16, 16)).astype(np.float32)
    it = rng.random((64, 64)).astype(np.float32)
    itau = rng.random((64, 64)).astype(np.float32)
    cys = cxs = np.arange(2, 64, 4, dtype=np.int64)
    disp = [(dx, dy) for dy in range(-2, 3) for dx in range(-2, 3)]
    disp.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    dxs = np.asarray([d[0] for d in disp], dtype=np.int64)
    dys = np.asarray([d[1] for d in disp], dtype=np.int64)

    results = {"active_backend": K.BACKEND, "backends": {}}
    for name in K.available_backends():
        impl = K.get_backend(name)
        results["backends"][name] = {
            "conv2d_forward_ms": _time_call(lambda: impl.conv2d_forward(x, w, b, 1, 1), repeats) * 1e3,
            "grid_sample_ms": _time_call(lambda: impl.grid_sample_forward(f, pts), repeats) * 1e3,
            "block_match_ms": _time_call(
                lambda: impl.block_match(it, itau, cys, cxs, dxs, dys, 9), repeats) * 1e3,
        }
    if set(results["backends"]) >= {"cython", "python"}:
        c = results["backends"]["cython"]
        p = results["backends"]["python"]
        results["speedup_cython_over_python"] = {
            k.replace("_ms", ""): p[k] / c[k] for k in c
        }
    return results

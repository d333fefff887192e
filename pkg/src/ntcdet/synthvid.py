"""Deterministic ultrasound-like clip generator with exact ground truth.

Clips show a speckled background advected by a per-frame affine motion,
persistent dark-ellipse lesions, and transient artifacts that look exactly
like lesions while visible but fade in/out within a short run of frames, so
the region shows plain background in adjacent frames. The affine motion model
is emitted alongside the frames and drives the analytic flow provider.

Dataset layout: manifest.json at the root; per clip a directory with
frames.f32 (raw little-endian float32, [T][H][W]), labels.jsonl (one record
per visible track per frame: frame_index, track_id, kind, box) and
motion.json (per-frame affine parameters plus per-track drift velocities).
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels as K


class PlacementError(RuntimeError):
    pass


@dataclass
class ClipConfig:
    height: int = 64
    width: int = 64
    frames: int = 60
    fps: float = 30.0
    lesion_count: tuple = (1, 2)
    artifact_count: tuple = (1, 2)
    max_artifact_span: int = 6
    speckle: float = 0.05
    background_range: tuple = (0.35, 0.85)
    depth_range: tuple = (0.5, 0.75)
    axis_range: tuple = (3.5, 6.5)
    edge_softness: tuple = (4.0, 8.0)
    texture_blur: float = 1.5
    motion_translation: float = 0.5
    motion_rotation_deg: float = 0.2
    motion_scale: float = 0.002
    track_drift: float = 0.05
    integer_motion: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError(f"frame dims must be divisible by 4, got {self.height}x{self.width}")
        for name in ("lesion_count", "artifact_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range invalid: {(lo, hi)}")
        if self.frames < 1 or self.max_artifact_span < 1:
            raise ValueError("frames and max_artifact_span must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for name in ("lesion_count", "artifact_count", "background_range",
                     "depth_range", "axis_range", "edge_softness"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass
class MotionModel:
    """Per-frame affine background motion x_{k+1} = A_k x_k + b_k, plus track drift."""

    frame_transforms: np.ndarray  # [n_frames-1, 2, 3]
    track_velocities: np.ndarray  # [n_tracks, 2]

    def __post_init__(self):
        self.frame_transforms = np.asarray(self.frame_transforms, dtype=np.float64)
        self.track_velocities = np.asarray(self.track_velocities, dtype=np.float64).reshape(-1, 2)
        if self.frame_transforms.ndim != 3 or self.frame_transforms.shape[1:] != (2, 3):
            raise ValueError(f"frame_transforms must be [K,2,3], got {self.frame_transforms.shape}")
        for m in self.frame_transforms:
            if abs(np.linalg.det(m[:, :2])) <= 0.1:
                raise ValueError("affine transform too close to singular (|det| <= 0.1)")

    def n_frames(self):
        return self.frame_transforms.shape[0] + 1

    def _mat3(self, k):
        m = np.eye(3)
        m[:2, :] = self.frame_transforms[k]
        return m

    def composite(self, start, stop):
        """3x3 matrix mapping frame-`start` positions to frame-`stop` positions."""
        if not (0 <= min(start, stop) and max(start, stop) <= self.n_frames() - 1):
            raise ValueError(f"frames [{start},{stop}] outside motion model range")
        m = np.eye(3)
        if stop >= start:
            for k in range(start, stop):
                m = self._mat3(k) @ m
            return m
        for k in range(stop, start):
            m = self._mat3(k) @ m
        return np.linalg.inv(m)

    def point_correspondence(self, pts, t, tau):
        """Positions at frame tau of the scene points sitting at `pts` in frame t."""
        m = self.composite(t, tau)
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ m[:2, :2].T + m[:2, 2]

    def to_json_dict(self):
        return {
            "frame_transforms": self.frame_transforms.tolist(),
            "track_velocities": self.track_velocities.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(np.asarray(d["frame_transforms"]), np.asarray(d["track_velocities"]))


@dataclass
class TrackLabel:
    track_id: int
    kind: str  # "lesion" | "artifact"
    boxes: dict = field(default_factory=dict)  # frame_index -> (x1, y1, x2, y2)

    def visible_frames(self):
        return sorted(self.boxes)

    def runs(self):
        """Maximal runs of consecutive visible frames."""
        frames = self.visible_frames()
        runs = []
        for f in frames:
            if runs and f == runs[-1][1] + 1:
                runs[-1][1] = f
            else:
                runs.append([f, f])
        return [(a, b) for a, b in runs]


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # [T, H, W] float32 in [0, 1]
    tracks: list
    motion: MotionModel
    fps: float

    def boxes_at(self, frame_index, kind=None):
        out = []
        for tr in self.tracks:
            if kind is not None and tr.kind != kind:
                continue
            box = tr.boxes.get(frame_index)
            if box is not None:
                out.append(box)
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)


def _sample_motion(config, rng, n_tracks):
    n = config.frames
    center = np.array([(config.width - 1) / 2.0, (config.height - 1) / 2.0])
    amp = rng.uniform(0.2, 1.0, size=2) * config.motion_translation
    period = rng.uniform(20.0, 40.0, size=2)
    phase = rng.uniform(0.0, 2 * math.pi, size=2)
    rot_amp = math.radians(config.motion_rotation_deg) * rng.uniform(0.2, 1.0)
    rot_period = rng.uniform(25.0, 45.0)
    rot_phase = rng.uniform(0.0, 2 * math.pi)
    scale_amp = config.motion_scale * rng.uniform(0.2, 1.0)
    transforms = np.zeros((max(n - 1, 0), 2, 3))
    for k in range(n - 1):
        v = amp * np.sin(2 * math.pi * k / period + phase)
        if config.integer_motion:
            v = np.floor(v + 0.5)
            rot = 0.0
            s = 1.0
        else:
            rot = rot_amp * math.sin(2 * math.pi * k / rot_period + rot_phase)
            s = 1.0 + scale_amp * math.sin(2 * math.pi * k / rot_period)
        c, si = math.cos(rot), math.sin(rot)
        lin = np.array([[s * c, -s * si], [s * si, s * c]])
        offs = center - lin @ center + v
        transforms[k, :, :2] = lin
        transforms[k, :, 2] = offs
    vel = (rng.uniform(-1.0, 1.0, size=(max(n_tracks, 1), 2)) * config.track_drift)[:n_tracks or 1]
    if n_tracks == 0:
        vel = np.zeros((0, 2))
    if config.integer_motion:
        vel = np.zeros_like(vel)
    return MotionModel(transforms, vel)


def _place_tracks(config, rng, n_tracks, motion_budget=6.0):
    placed = []
    for _ in range(n_tracks):
        a = rng.uniform(*config.axis_range)
        b = rng.uniform(*config.axis_range)
        angle = rng.uniform(0.0, math.pi)
        margin = max(a, b) + motion_budget + 2.0
        if margin * 2 >= min(config.width, config.height):
            raise PlacementError("frame too small for the configured track sizes")
        for _ in range(300):
            cx = rng.uniform(margin, config.width - margin)
            cy = rng.uniform(margin, config.height - margin)
            ok = True
            for other in placed:
                dist = math.hypot(cx - other["cx"], cy - other["cy"])
                if dist < max(a, b) + max(other["a"], other["b"]) + 3.0:
                    ok = False
                    break
            if ok:
                break
        else:
            raise PlacementError(f"could not place {n_tracks} non-overlapping tracks")
        placed.append({
            "cx": cx, "cy": cy, "a": a, "b": b, "angle": angle,
            "depth": rng.uniform(*config.depth_range),
            "edge": rng.uniform(*config.edge_softness),
        })
    return placed


def _ellipse_mask(xs, ys, cx, cy, a, b, angle, edge):
    x = xs - cx
    y = ys - cy
    c, s = math.cos(angle), math.sin(angle)
    xr = (x * c + y * s) / a
    yr = (-x * s + y * c) / b
    r = np.sqrt(xr * xr + yr * yr)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * edge, -30.0, 30.0)))


def _ellipse_box(cx, cy, a, b, angle):
    ex = math.sqrt((a * math.cos(angle)) ** 2 + (b * math.sin(angle)) ** 2)
    ey = math.sqrt((a * math.sin(angle)) ** 2 + (b * math.cos(angle)) ** 2)
    return (cx - ex, cy - ey, cx + ex, cy + ey)


def generate_clip(config: ClipConfig, seed):
    """Render one clip; pure function of (config, seed)."""
    seed_seq = seed if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng([int(s) for s in seed_seq])
    n_lesions = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    n_artifacts = int(rng.integers(config.artifact_count[0], config.artifact_count[1] + 1))
    n_tracks = n_lesions + n_artifacts
    motion = _sample_motion(config, rng, n_tracks)
    geo = _place_tracks(config, rng, n_tracks)

    # artifact visibility runs and fade envelopes
    envelopes = np.ones((n_tracks, config.frames))
    for j in range(n_lesions, n_tracks):
        span = int(rng.integers(3, config.max_artifact_span + 1))
        span = min(span, max(config.frames - 4, 1))
        start = int(rng.integers(2, max(config.frames - span - 1, 3)))
        e = np.zeros(config.frames)
        f = np.arange(start, min(start + span, config.frames))
        e[f] = np.sin(math.pi * (f - start + 0.5) / span)
        envelopes[j] = e

    margin = 16
    ch, cw = config.height + 2 * margin, config.width + 2 * margin
    tex = rng.uniform(0.0, 1.0, size=(ch, cw))
    tex = gaussian_filter(tex, config.texture_blur)
    lo, hi = config.background_range
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9) * (hi - lo) + lo
    tex = np.ascontiguousarray(tex[None], dtype=np.float64)

    gx, gy = np.meshgrid(np.arange(config.width, dtype=np.float64),
                         np.arange(config.height, dtype=np.float64))
    pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    speckle_fields = rng.standard_normal((config.frames, config.height, config.width)) \
        if config.speckle > 0 else None

    frames = np.zeros((config.frames, config.height, config.width), dtype=np.float32)
    tracks = [TrackLabel(j, "lesion" if j < n_lesions else "artifact") for j in range(n_tracks)]
    for k in range(config.frames):
        canvas_pts = motion.point_correspondence(pix, k, 0) + margin
        frame = K.grid_sample_forward(tex, np.ascontiguousarray(canvas_pts))[0]
        frame = frame.reshape(config.height, config.width)
        for j, g in enumerate(geo):
            e = envelopes[j, k]
            if e <= 1e-6:
                continue
            center = motion.point_correspondence(
                np.array([[g["cx"], g["cy"]]]), 0, k)[0] + motion.track_velocities[j] * k
            mask = _ellipse_mask(gx, gy, center[0], center[1], g["a"], g["b"], g["angle"], g["edge"])
            frame = frame * (1.0 - g["depth"] * e * mask)
            if e >= 0.5:
                box = _ellipse_box(center[0], center[1], g["a"], g["b"], g["angle"])
                x1 = max(box[0], 0.0)
                y1 = max(box[1], 0.0)
                x2 = min(box[2], float(config.width))
                y2 = min(box[3], float(config.height))
                if x2 > x1 and y2 > y1:
                    tracks[j].boxes[k] = (x1, y1, x2, y2)
        if speckle_fields is not None:
            frame = frame * (1.0 + config.speckle * speckle_fields[k])
        frames[k] = np.clip(frame, 0.0, 1.0).astype(np.float32)

    for tr in tracks:
        if tr.kind == "lesion" and len(tr.boxes) < 0.8 * config.frames:
            raise PlacementError(f"lesion track {tr.track_id} visible in only {len(tr.boxes)} frames")
        if tr.kind == "artifact":
            for a, b in tr.runs():
                if b - a + 1 > config.max_artifact_span:
                    raise PlacementError("artifact run exceeds max_artifact_span")
    return frames, tracks, motion


# ------------------------------------------------------------------ dataset IO


def _write_clip(clip_dir, clip_id, frames, tracks, motion, fps):
    os.makedirs(clip_dir, exist_ok=True)
    with open(os.path.join(clip_dir, "frames.f32"), "wb") as fh:
        fh.write(frames.astype("<f4").tobytes())
    with open(os.path.join(clip_dir, "labels.jsonl"), "w") as fh:
        for tr in tracks:
            for f in tr.visible_frames():
                rec = {"frame_index": f, "track_id": tr.track_id, "kind": tr.kind,
                       "box": [float(v) for v in tr.boxes[f]]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(clip_dir, "motion.json"), "w") as fh:
        json.dump(motion.to_json_dict(), fh, sort_keys=True)


def render_dataset(config: ClipConfig, n_train, n_test, out_dir):
    """Write a train/test split of generated clips plus a manifest; returns manifest path."""
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory of out_dir does not exist: {parent}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for split, count in (("train", n_train), ("test", n_test)):
        split_idx = 0 if split == "train" else 1
        for i in range(count):
            clip_id = f"{split}_{i:04d}"
            seed = [config.seed, split_idx, i]
            frames, tracks, motion = generate_clip(config, seed)
            _write_clip(os.path.join(out_dir, clip_id), clip_id, frames, tracks, motion, config.fps)
            entries.append({"id": clip_id, "split": split, "seed": seed,
                            "n_frames": int(frames.shape[0]), "dir": clip_id})
    manifest = {
        "fps": config.fps,
        "frame_size": [config.height, config.width],
        "config": asdict(config),
        "clips": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return path


class Dataset:
    """Loaded view of a rendered dataset directory."""

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.fps = float(self.manifest["fps"])
        self.height, self.width = self.manifest["frame_size"]
        self._entries = {e["id"]: e for e in self.manifest["clips"]}
        self._cache = {}

    def clip_ids(self, split=None):
        return [e["id"] for e in self.manifest["clips"] if split is None or e["split"] == split]

    def clip(self, clip_id) -> Clip:
        if clip_id in self._cache:
            return self._cache[clip_id]
        if clip_id not in self._entries:
            raise KeyError(f"unknown clip id {clip_id!r}")
        entry = self._entries[clip_id]
        clip_dir = os.path.join(self.root, entry["dir"])
        n = entry["n_frames"]
        raw = np.fromfile(os.path.join(clip_dir, "frames.f32"), dtype="<f4")
        frames = raw.reshape(n, self.height, self.width)
        tracks = {}
        with open(os.path.join(clip_dir, "labels.jsonl")) as fh:
            for line in fh:
                rec = json.loads(line)
                tr = tracks.setdefault(rec["track_id"], TrackLabel(rec["track_id"], rec["kind"]))
                tr.boxes[rec["frame_index"]] = tuple(rec["box"])
        with open(os.path.join(clip_dir, "motion.json")) as fh:
            motion = MotionModel.from_json_dict(json.load(fh))
        clip = Clip(clip_id, frames, [tracks[k] for k in sorted(tracks)], motion, self.fps)
        self._cache[clip_id] = clip
        return clip

    def ground_truth_records(self, split="test", kind="lesion"):
        """Flat gt records {clip_id, frame_index, box} for the evaluation kit."""
        records = []
        for cid in self.clip_ids(split):
            clip = self.clip(cid)
            for tr in clip.tracks:
                if tr.kind != kind:
                    continue
                for f, box in sorted(tr.boxes.items()):
                    records.append({"clip_id": cid, "frame_index": f, "box": list(box)})
        return records

    def clip_frame_counts(self, split="test"):
        return {e["id"]: e["n_frames"] for e in self.manifest["clips"]
                if split is None or e["split"] == split}

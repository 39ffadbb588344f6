"""Synthetic moving-shapes clips and the raw video file format.

Clips are float64 arrays of shape (T, H, W, C) with values in [0, 1],
channel-last RGB.  Each clip shows one or two anti-aliased shapes drifting
over a static gradient background along one of eight compass directions;
the direction of the dominant (first) shape is the class label.

Values are snapped to the float32 grid at generation time so that writing
and re-reading a clip through the raw format is bitwise exact.

File format ``RVSQVID1``: 8-byte magic, then T, H, W, C as little-endian
uint32, then T*H*W*C float32 samples, frame-major, rows within a frame,
channels fastest.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RVSQVID1"

DIRECTIONS = ("e", "ne", "n", "nw", "w", "sw", "s", "se")

# unit velocity for each class, (dx, dy) with y growing downwards
_VELOCITY = {
    0: (1.0, 0.0), 1: (1.0, -1.0), 2: (0.0, -1.0), 3: (-1.0, -1.0),
    4: (-1.0, 0.0), 5: (-1.0, 1.0), 6: (0.0, 1.0), 7: (1.0, 1.0),
}


@dataclass
class Clip:
    """One labeled video clip."""
    video: np.ndarray  # (T, H, W, C) float64 in [0, 1]
    label: int         # 0..7, motion direction of the dominant shape


def _disc(yy, xx, cy, cx, r):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(r - d + 0.5, 0.0, 1.0)  # soft 1px edge


def _square(yy, xx, cy, cx, r):
    d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    return np.clip(r - d + 0.5, 0.0, 1.0)


def gen_clip(rng: np.random.Generator, n_frames: int = 21, height: int = 32,
             width: int = 32, channels: int = 3) -> Clip:
    """Generate one clip with a fresh label, geometry and palette."""
    label = int(rng.integers(8))
    vx, vy = _VELOCITY[label]
    norm = np.hypot(vx, vy)
    speed = rng.uniform(0.5, 0.9)
    vx, vy = vx / norm * speed, vy / norm * speed

    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")

    # static, low-contrast background gradient
    gdir = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(gdir) * xx / width + np.sin(gdir) * yy / height)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    bg = 0.25 + 0.3 * ramp
    bg_rgb = bg[..., None] * rng.uniform(0.6, 1.0, size=channels)

    def start_box(v, extent, r):
        # start range keeping the whole trajectory inside the frame
        travel = v * (n_frames - 1)
        lo = r + 1 + max(0.0, -travel)
        hi = extent - 2 - r - max(0.0, travel)
        return (lo, hi) if hi > lo else ((lo + hi) / 2, (lo + hi) / 2 + 1e-6)

    # dominant shape, plus sometimes a slow distractor
    shapes = []
    r = rng.uniform(3.0, 5.0)
    by = start_box(vy, height, r)
    bx = start_box(vx, width, r)
    shapes.append(dict(
        fn=_disc if rng.random() < 0.5 else _square,
        cy=rng.uniform(*by), cx=rng.uniform(*bx), vx=vx, vy=vy, r=r,
        color=rng.uniform(0.55, 1.0, size=channels),
    ))
    if rng.random() < 0.35:
        jitter = rng.uniform(0, 2 * np.pi)
        dvx, dvy = 0.25 * np.cos(jitter), 0.25 * np.sin(jitter)
        dr = rng.uniform(2.0, 3.0)
        shapes.append(dict(
            fn=_disc, cy=rng.uniform(*start_box(dvy, height, dr)),
            cx=rng.uniform(*start_box(dvx, width, dr)),
            vx=dvx, vy=dvy, r=dr,
            color=rng.uniform(0.0, 0.45, size=channels),
        ))

    frames = np.empty((n_frames, height, width, channels))
    for t in range(n_frames):
        img = bg_rgb.copy()
        for s in shapes:
            mask = s["fn"](yy, xx, s["cy"] + s["vy"] * t,
                           s["cx"] + s["vx"] * t, s["r"])[..., None]
            img = img * (1 - mask) + mask * s["color"]
        frames[t] = img
    frames = np.clip(frames, 0.0, 1.0)
    # snap to the f32 grid so raw round-trips are bitwise
    frames = frames.astype(np.float32).astype(np.float64)
    return Clip(video=frames, label=label)


def gen_moving_shapes(n_clips: int, n_frames: int = 21, height: int = 32,
                      width: int = 32, channels: int = 3,
                      seed: int = 0) -> list[Clip]:
    """Deterministic batch of clips for a given seed."""
    rng = np.random.default_rng(seed)
    return [gen_clip(rng, n_frames, height, width, channels)
            for _ in range(n_clips)]


def write_raw(path: str | os.PathLike, video: np.ndarray) -> None:
    video = np.asarray(video)
    if video.ndim != 4:
        raise ValueError(f"expected (T,H,W,C) video, got shape {video.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *video.shape))
        fh.write(np.ascontiguousarray(video, dtype="<f4").tobytes())


def read_raw(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        t, h, w, c = struct.unpack("<4I", fh.read(16))
        payload = fh.read()
    expected = t * h * w * c * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, "
                         f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c)
    return arr.astype(np.float64)


def write_dataset(out_dir: str | os.PathLike, clips: list[Clip],
                  splits: dict[str, float] | None = None,
                  seed: int = 0) -> str:
    """Write clips plus a JSON manifest; returns the manifest path.

    Split assignment is deterministic in the seed and independent of the
    clip order on disk.
    """
    splits = splits or {"train": 0.7, "val": 0.1, "test": 0.2}
    os.makedirs(out_dir, exist_ok=True)
    names = list(splits)
    bounds = np.cumsum([splits[n] for n in names])
    if abs(bounds[-1] - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    u = rng.random(len(clips))
    entries = []
    for i, clip in enumerate(clips):
        fname = f"clip_{i:05d}.rvv"
        write_raw(os.path.join(out_dir, fname), clip.video)
        split = names[int(np.searchsorted(bounds, u[i], side="right"))]
        entries.append({"path": fname, "label": int(clip.label), "split": split})
    manifest = os.path.join(out_dir, "manifest.json")
    with open(manifest, "w") as fh:
        json.dump({"clips": entries}, fh, indent=1)
    return manifest


def load_dataset(manifest_path: str | os.PathLike,
                 split: str | None = None) -> list[tuple[np.ndarray, int]]:
    """Load (video, label) pairs, optionally restricted to one split."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.fspath(manifest_path))
    out = []
    for entry in manifest["clips"]:
        if split is not None and entry["split"] != split:
            continue
        out.append((read_raw(os.path.join(base, entry["path"])),
                    int(entry["label"])))
    return out

"""Scenes, network inputs, random crops, synthetic scenes and the dataset loader.

Images are (3, H, W) float32 arrays in [0, 1]; masks are (1, H, W) float32
arrays holding 0 or 1. Crop rectangles are (x, y, width, height) in scene
pixel units with x to the right, and sizes are given as (width, height).
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .numerics import sampling_matrix

TRAIN_BALL_DIAMETER = (15.0, 45.0)
DEFAULT_CROP_SIZE = (256, 128)


@dataclass
class Scene:
    image_a: np.ndarray
    image_b: np.ndarray
    mask: np.ndarray
    arena_id: str
    game_id: str
    frame_delay_ms: int = 40
    scene_id: str = ""

    def __post_init__(self):
        if self.image_a.shape[0] != 3 or self.image_a.ndim != 3:
            raise ValueError(f"scene {self.scene_id}: image_a must be (3, H, W), got {self.image_a.shape}")
        if self.image_b.shape != self.image_a.shape:
            raise ValueError(
                f"scene {self.scene_id}: image pair extents differ: {self.image_a.shape[1:]} vs {self.image_b.shape[1:]}"
            )
        if self.mask.shape != (1,) + self.image_a.shape[1:]:
            raise ValueError(
                f"scene {self.scene_id}: mask extents {self.mask.shape[1:]} differ from image extents {self.image_a.shape[1:]}"
            )
        if not self.mask.any():
            raise ValueError(f"scene {self.scene_id}: mask has no foreground pixel")

    @property
    def size(self):
        """(width, height)"""
        return self.image_a.shape[2], self.image_a.shape[1]


@dataclass(frozen=True)
class CropSpec:
    x: float
    y: float
    width: float
    height: float
    scale: float
    mirror: bool = False

    @property
    def rect(self):
        return (self.x, self.y, self.width, self.height)

    def output_size(self):
        return (int(round(self.width * self.scale)), int(round(self.height * self.scale)))

    def inside(self, scene_size, tol=1e-6):
        W, H = scene_size
        return (self.x >= -tol and self.y >= -tol
                and self.x + self.width <= W + tol and self.y + self.height <= H + tol)


def identity_crop(scene):
    W, H = scene.size
    return CropSpec(0.0, 0.0, float(W), float(H), 1.0, False)


def make_input(scene, use_diff=True):
    """Stack RGB of the image of interest with |a - b| per channel when ``use_diff``."""
    a = np.asarray(scene.image_a, dtype=np.float32)
    if not use_diff:
        return a.copy()
    return np.concatenate([a, np.abs(a - np.asarray(scene.image_b, dtype=np.float32))], axis=0)


def ball_bbox(mask):
    """(x0, y0, x1, y1) pixel-edge bounds of the foreground, x1/y1 exclusive."""
    m = np.asarray(mask).reshape(mask.shape[-2:]) > 0
    ys = np.flatnonzero(m.any(axis=1))
    xs = np.flatnonzero(m.any(axis=0))
    if ys.size == 0:
        raise ValueError("mask has no foreground pixel")
    return float(xs[0]), float(ys[0]), float(xs[-1] + 1), float(ys[-1] + 1)


def ball_diameter(mask):
    x0, y0, x1, y1 = ball_bbox(mask)
    return max(x1 - x0, y1 - y0)


def sample_training_crop(scene, target_size, rng, diameter_range=TRAIN_BALL_DIAMETER):
    """Random scale/crop/mirror keeping the ball inside and its size within ``diameter_range``."""
    tw, th = target_size
    W, H = scene.size
    x0, y0, x1, y1 = ball_bbox(scene.mask)
    d = max(x1 - x0, y1 - y0)
    lo = max(diameter_range[0] / d, tw / W, th / H)
    hi = min(diameter_range[1] / d, tw / (x1 - x0), th / (y1 - y0))
    if lo > hi:
        raise ValueError(
            f"scene {scene.scene_id}: no feasible {tw}x{th} crop for a {d:.0f}px ball in a {W}x{H} scene "
            f"(scale must lie in [{lo:.3f}, {hi:.3f}])"
        )
    s = float(rng.uniform(lo, hi))
    rw, rh = tw / s, th / s
    x = float(rng.uniform(max(0.0, x1 - rw), max(0.0, min(W - rw, x0))))
    y = float(rng.uniform(max(0.0, y1 - rh), max(0.0, min(H - rh, y0))))
    mirror = bool(rng.random() < 0.5)
    return CropSpec(x, y, rw, rh, s, mirror)


def _axis_coords(start, length, n_out):
    return start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5


def _resample(img, spec, target_size):
    tw, th = target_size
    ry = sampling_matrix(_axis_coords(spec.y, spec.height, th), img.shape[1])
    rx = sampling_matrix(_axis_coords(spec.x, spec.width, tw), img.shape[2])
    return ry @ img.astype(np.float32) @ rx.T


def _resample_nearest(mask, spec, target_size):
    tw, th = target_size
    H, W = mask.shape[1:]
    iy = np.clip(np.floor(_axis_coords(spec.y, spec.height, th) + 0.5).astype(int), 0, H - 1)
    ix = np.clip(np.floor(_axis_coords(spec.x, spec.width, tw) + 0.5).astype(int), 0, W - 1)
    return mask[:, iy[:, None], ix[None, :]]


def crop_images(scene, spec, target_size):
    """Cropped (image_a, image_b, mask) triple, mirrored if flagged."""
    if not spec.inside(scene.size):
        raise ValueError(f"crop {spec.rect} lies outside the {scene.size[0]}x{scene.size[1]} scene")
    a = _resample(scene.image_a, spec, target_size)
    b = _resample(scene.image_b, spec, target_size)
    m = (_resample_nearest(scene.mask, spec, target_size) >= 0.5).astype(np.float32)
    if spec.mirror:
        a, b, m = a[:, :, ::-1], b[:, :, ::-1], m[:, :, ::-1]
    return np.ascontiguousarray(a), np.ascontiguousarray(b), np.ascontiguousarray(m)


def apply_crop(scene, spec, target_size, use_diff=True):
    """Network input (C, th, tw) and binary mask (1, th, tw) for one random-crop."""
    a, b, m = crop_images(scene, spec, target_size)
    inp = a if not use_diff else np.concatenate([a, np.abs(a - b)], axis=0)
    return inp, m


def crop_iou(a, b):
    if a.rect == b.rect:
        return 1.0
    ix = max(0.0, min(a.x + a.width, b.x + b.width) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.height, b.y + b.height) - max(a.y, b.y))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return min(1.0, inter / union) if union > 0 else 0.0


MAX_TTA_REJECTIONS = 1000


def sample_tta_crop(base, scene, iou_min, rng, scale_jitter=0.02):
    """A jittered copy of ``base`` with IoU >= iou_min, rejection-sampled.

    Offsets are uniform within +-(1 - iou_min) * extent / 2 and the rectangle
    size is jittered by up to min(scale_jitter, 1 - iou_min) relative.
    """
    if not 0 < iou_min <= 1:
        raise ValueError(f"iou_min must lie in (0, 1], got {iou_min}")
    if iou_min >= 1:
        return base
    W, H = scene.size
    jitter = min(scale_jitter, 1 - iou_min)
    ax = (1 - iou_min) * base.width / 2
    ay = (1 - iou_min) * base.height / 2
    cx, cy = base.x + base.width / 2, base.y + base.height / 2
    for _ in range(MAX_TTA_REJECTIONS):
        f = float(rng.uniform(1 - jitter, 1 + jitter))
        w, h = base.width * f, base.height * f
        if w > W + 1e-9 or h > H + 1e-9:
            continue
        x = cx + float(rng.uniform(-ax, ax)) - w / 2
        y = cy + float(rng.uniform(-ay, ay)) - h / 2
        x = min(max(x, 0.0), W - w)
        y = min(max(y, 0.0), H - h)
        cand = CropSpec(x, y, w, h, base.scale / f, base.mirror)
        if crop_iou(base, cand) >= iou_min:
            return cand
    raise RuntimeError(f"no crop with IoU >= {iou_min} found after {MAX_TTA_REJECTIONS} attempts")


# --- synthetic scenes ---------------------------------------------------------

@dataclass
class SynthParams:
    width: int = 192
    height: int = 128
    ball_radius: tuple = (8.0, 13.0)
    ball_speed: tuple = (3.0, 8.0)
    n_static_discs: int = 3
    n_moving_blobs: int = 2
    blob_speed: tuple = (2.0, 6.0)
    texture: bool = True
    luminance: tuple = (0.3, 0.7)
    contrast: tuple = (0.12, 0.25)
    noise: float = 0.02
    arena_id: str = "arena-00"
    game_id: str = "arena-00-g0"
    frame_delay_ms: int = 40
    # fixed per arena when set; drawn per scene otherwise
    background_rgb: tuple = None
    ball_rgb_shift: tuple = None
    ball_center: tuple = None
    ball_velocity: tuple = None

    def __post_init__(self):
        for name in ("ball_radius", "ball_speed", "blob_speed", "luminance", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty or negative")
        if min(self.width, self.height) < 4 * self.ball_radius[1]:
            raise ValueError("scene too small for the requested ball radius")


def _disc_alpha(xx, yy, cx, cy, r):
    # 1 inside, 0 outside, linear over a one-pixel rim
    return np.clip(r + 0.5 - np.hypot(xx - cx, yy - cy), 0.0, 1.0)


def _blob_alpha(xx, yy, cx, cy, rx, ry, angle):
    c, s = math.cos(angle), math.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    # superellipse: boxy, clearly non-circular
    d = (np.abs(u) ** 4 + np.abs(v) ** 4) ** 0.25
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)


def _background(params, rng, xx, yy, base_rgb):
    img = np.broadcast_to(np.asarray(base_rgb, np.float32)[:, None, None], (3,) + xx.shape).copy()
    if params.texture:
        for _ in range(3):
            fx, fy = rng.uniform(0.01, 0.08, size=2)
            phase = rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(0.02, 0.06)
            tint = rng.uniform(0.7, 1.3, size=3).astype(np.float32)
            wave = np.sin(2 * math.pi * (fx * xx + fy * yy) + phase).astype(np.float32)
            img += amp * tint[:, None, None] * wave
        # court lines
        for _ in range(2):
            if rng.random() < 0.5:
                x0 = rng.uniform(0, params.width)
                img += 0.15 * (np.abs(xx - x0) < 1.0)
            else:
                y0 = rng.uniform(0, params.height)
                img += 0.15 * (np.abs(yy - y0) < 1.0)
    return img


def synth_scene(params, rng):
    """Render one image pair with a moving ball, static ball-like discs and moving blobs."""
    W, H = params.width, params.height
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    lum = rng.uniform(*params.luminance)
    base = params.background_rgb
    if base is None:
        base = np.clip(lum * rng.uniform(0.7, 1.3, size=3), 0.05, 0.95)
    base = np.asarray(base, np.float32)
    contrast = rng.uniform(*params.contrast)
    shift = params.ball_rgb_shift
    if shift is None:
        shift = rng.normal(size=3)
        shift /= np.linalg.norm(shift)
    ball_rgb = np.clip(base + contrast * np.asarray(shift, np.float32), 0, 1)

    bg = _background(params, rng, xx, yy, base)

    r = rng.uniform(*params.ball_radius)
    if params.ball_center is not None:
        cx, cy = params.ball_center
    else:
        cx = rng.uniform(r, W - r)
        cy = rng.uniform(r, H - r)
    if params.ball_velocity is not None:
        vx, vy = params.ball_velocity
    else:
        speed = rng.uniform(*params.ball_speed)
        ang = rng.uniform(0, 2 * math.pi)
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)

    static = []
    for _ in range(params.n_static_discs):
        sr = rng.uniform(*params.ball_radius)
        for _ in range(50):
            sx, sy = rng.uniform(sr, W - sr), rng.uniform(sr, H - sr)
            if math.hypot(sx - cx, sy - cy) > r + sr + 2 * max(abs(vx), abs(vy)) + 4:
                break
        static.append((sx, sy, sr))

    blobs = []
    for _ in range(params.n_moving_blobs):
        bspeed = rng.uniform(*params.blob_speed)
        bang = rng.uniform(0, 2 * math.pi)
        blobs.append(dict(
            cx=rng.uniform(0, W), cy=rng.uniform(0, H),
            rx=rng.uniform(6, 16), ry=rng.uniform(10, 24), angle=rng.uniform(0, math.pi),
            vx=bspeed * math.cos(bang), vy=bspeed * math.sin(bang),
            rgb=np.clip(base + rng.uniform(-0.3, 0.3, size=3), 0, 1).astype(np.float32),
        ))

    def render(dt):
        img = bg.copy()
        for sx, sy, sr in static:
            a = _disc_alpha(xx, yy, sx, sy, sr)
            img = img * (1 - a) + ball_rgb[:, None, None] * a
        for b in blobs:
            a = _blob_alpha(xx, yy, b["cx"] - dt * b["vx"], b["cy"] - dt * b["vy"], b["rx"], b["ry"], b["angle"])
            img = img * (1 - a) + b["rgb"][:, None, None] * a
        a = _disc_alpha(xx, yy, cx - dt * vx, cy - dt * vy, r)
        img = img * (1 - a) + ball_rgb[:, None, None] * a
        if params.noise > 0:
            img = img + rng.normal(scale=params.noise, size=img.shape)
        return np.clip(img, 0, 1).astype(np.float32)

    image_a = render(0.0)
    image_b = render(1.0)
    mask = (np.hypot(xx - cx, yy - cy) <= r).astype(np.float32)[None]
    return Scene(image_a, image_b, mask, params.arena_id, params.game_id, params.frame_delay_ms)


def synth_dataset(n_scenes, n_arenas, seed, base_params=None, games_per_arena=2):
    """Scenes spread evenly over ``n_arenas`` synthetic arenas, each with its own palette.

    Scene ``i`` depends only on (seed, i), so subsets can be generated independently.
    """
    base_params = base_params or SynthParams()
    arena_rng = np.random.default_rng([seed, 0])
    arenas = []
    for a in range(n_arenas):
        lum = arena_rng.uniform(*base_params.luminance)
        bg = np.clip(lum * arena_rng.uniform(0.7, 1.3, size=3), 0.05, 0.95)
        arenas.append(tuple(float(v) for v in bg))
    order = np.random.default_rng([seed, 1]).permutation(n_scenes)
    scenes = []
    for i in range(n_scenes):
        a = int(order[i] % n_arenas) if n_arenas else 0
        arena_id = f"arena-{a:02d}"
        game_id = f"{arena_id}-g{i % games_per_arena}"
        delay = 33 if a % 2 else 40
        params = replace(base_params, arena_id=arena_id, game_id=game_id,
                         background_rgb=arenas[a], frame_delay_ms=delay)
        scene = synth_scene(params, np.random.default_rng([seed, 2, i]))
        scene.scene_id = f"s{i:04d}"
        scenes.append(scene)
    return scenes


# --- files --------------------------------------------------------------------

class SceneLoadError(ValueError):
    pass


def _to_png_rgb(img):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    return Image.fromarray(arr, mode="RGB")


def write_dataset(scenes, out_dir, manifest_name="manifest.jsonl"):
    """Write PNG images/masks and a JSON-lines manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifest = os.path.join(out_dir, manifest_name)
    lines = []
    for scene in scenes:
        sid = scene.scene_id
        rel = {k: f"images/{sid}_{k}.png" for k in ("a", "b", "mask")}
        _to_png_rgb(scene.image_a).save(os.path.join(out_dir, rel["a"]), optimize=False)
        _to_png_rgb(scene.image_b).save(os.path.join(out_dir, rel["b"]), optimize=False)
        Image.fromarray((scene.mask[0] > 0).astype(np.uint8) * 255, mode="L").save(
            os.path.join(out_dir, rel["mask"]), optimize=False)
        lines.append(json.dumps(dict(
            scene_id=sid, arena_id=scene.arena_id, game_id=scene.game_id,
            image_a=rel["a"], image_b=rel["b"], mask=rel["mask"],
            frame_delay_ms=int(scene.frame_delay_ms),
        ), sort_keys=True))
    with open(manifest, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return manifest


def _read_rgb(path, sid):
    if not os.path.exists(path):
        raise SceneLoadError(f"scene {sid}: missing file {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_dataset(manifest_path):
    base = os.path.dirname(os.path.abspath(manifest_path))
    scenes = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            sid = rec.get("scene_id", f"line{lineno}")
            a = _read_rgb(os.path.join(base, rec["image_a"]), sid)
            b = _read_rgb(os.path.join(base, rec["image_b"]), sid)
            mpath = os.path.join(base, rec["mask"])
            if not os.path.exists(mpath):
                raise SceneLoadError(f"scene {sid}: missing file {mpath}")
            with Image.open(mpath) as im:
                m = np.asarray(im.convert("L")) > 0
            if a.shape != b.shape:
                raise SceneLoadError(
                    f"scene {sid}: image pair extents differ: {a.shape[2]}x{a.shape[1]} vs {b.shape[2]}x{b.shape[1]}")
            if m.shape != a.shape[1:]:
                raise SceneLoadError(
                    f"scene {sid}: mask extents {m.shape[1]}x{m.shape[0]} differ from image extents {a.shape[2]}x{a.shape[1]}")
            if not m.any():
                raise SceneLoadError(f"scene {sid}: mask has no foreground pixel")
            scenes.append(Scene(a, b, m[None].astype(np.float32), str(rec["arena_id"]), str(rec["game_id"]),
                                int(rec.get("frame_delay_ms", 40)), sid))
    return scenes

"""Greedy top-k heatmap detection and test-time-augmentation heatmap averaging."""

import csv
from dataclasses import dataclass

import numpy as np

from .data import apply_crop, sample_tta_crop
from .numerics import sampling_matrix

DEFAULT_SUPPRESSION_RADIUS = 15


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    score: float
    rank: int


@dataclass
class SceneHeatmap:
    values: np.ndarray    # (H, W) in [0, 1]
    coverage: np.ndarray  # (H, W) number of contributing crops
    frame: object = None  # CropSpec the values came from, None once aggregated


def _as_2d(heatmap):
    h = np.asarray(heatmap)
    if h.ndim == 3 and h.shape[0] == 1:
        h = h[0]
    if h.ndim != 2:
        raise ValueError(f"heatmap must be (H, W) or (1, H, W), got shape {np.shape(heatmap)}")
    return h


def topk_detect(heatmap, k, tau, suppression_radius=DEFAULT_SUPPRESSION_RADIUS):
    """Up to ``k`` greedy maxima >= tau, each suppressing a square of the given radius.

    Ties go to the smallest (y, x) in row-major order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if suppression_radius < 0:
        raise ValueError(f"suppression_radius must be >= 0, got {suppression_radius}")
    work = np.array(_as_2d(heatmap), dtype=np.float64)
    H, W = work.shape
    r = int(suppression_radius)
    out = []
    for rank in range(1, k + 1):
        idx = int(np.argmax(work))
        y, x = divmod(idx, W)
        score = work[y, x]
        if not score >= tau:
            break
        out.append(Detection(x, y, float(score), rank))
        work[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = -np.inf
    return out


def heatmap_to_scene(heatmap, spec, scene_size):
    """Project a crop heatmap back to scene pixels.

    Scene pixels whose centers fall inside the crop rectangle are filled by
    bilinear sampling of the (un-mirrored) crop heatmap; others get coverage 0.
    """
    h = _as_2d(heatmap).astype(np.float32)
    th, tw = h.shape
    if (tw, th) != spec.output_size():
        raise ValueError(f"heatmap extents {tw}x{th} inconsistent with crop output size {spec.output_size()}")
    if spec.mirror:
        h = h[:, ::-1]
    W, H = scene_size
    values = np.zeros((H, W), np.float32)
    coverage = np.zeros((H, W), np.int32)
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    eps = 1e-9
    col = np.flatnonzero((xs >= spec.x - eps) & (xs <= spec.x + spec.width + eps))
    row = np.flatnonzero((ys >= spec.y - eps) & (ys <= spec.y + spec.height + eps))
    if col.size == 0 or row.size == 0:
        return SceneHeatmap(values, coverage, spec)
    sx = tw / spec.width
    sy = th / spec.height
    rx = sampling_matrix((xs[col] - spec.x) * sx - 0.5, tw)
    ry = sampling_matrix((ys[row] - spec.y) * sy - 0.5, th)
    values[np.ix_(row, col)] = ry @ h @ rx.T
    coverage[np.ix_(row, col)] = 1
    return SceneHeatmap(values, coverage, spec)


def aggregate_heatmaps(heatmaps):
    """Per-pixel mean over the crops covering it; uncovered pixels stay 0."""
    if not heatmaps:
        raise ValueError("cannot aggregate an empty list of heatmaps")
    shape = heatmaps[0].values.shape
    total = np.zeros(shape, np.float64)
    count = np.zeros(shape, np.int32)
    for hm in heatmaps:  # fixed order for reproducible sums
        if hm.values.shape != shape:
            raise ValueError(f"heatmap extents differ: {hm.values.shape} vs {shape}")
        total += np.where(hm.coverage > 0, hm.values, 0.0) * hm.coverage
        count += hm.coverage
    values = np.where(count > 0, total / np.maximum(count, 1), 0.0).astype(np.float32)
    return SceneHeatmap(values, count, None)


def predict_crops(predict, scene, specs, target_size, batch_size=8):
    """Run ``predict`` on each crop and return the heatmaps mapped to scene pixels."""
    use_diff = getattr(predict, "input_channels", 6) == 6
    out = []
    for start in range(0, len(specs), batch_size):
        chunk = specs[start:start + batch_size]
        batch = np.stack([apply_crop(scene, s, target_size, use_diff)[0] for s in chunk])
        heat = predict(batch)
        out.extend(heatmap_to_scene(heat[i, 0], s, scene.size) for i, s in enumerate(chunk))
    return out


def tta_specs(scene, base, n_crops, iou_min, rng):
    return [sample_tta_crop(base, scene, iou_min, rng) for _ in range(n_crops)]


def tta_detect(predict, scene, base, n_crops, iou_min, k, tau, radius, rng, target_size=None,
               return_heatmap=False):
    """Average the scene-frame heatmaps of ``n_crops`` jittered crops, then detect."""
    if n_crops < 1:
        raise ValueError(f"n_crops must be >= 1, got {n_crops}")
    target_size = target_size or base.output_size()
    specs = tta_specs(scene, base, n_crops, iou_min, rng)
    merged = aggregate_heatmaps(predict_crops(predict, scene, specs, target_size))
    dets = topk_detect(merged.values, k, tau, radius)
    if return_heatmap:
        return dets, merged, specs
    return dets


def write_detections_csv(path, rows):
    """``rows``: iterable of (scene_id, [Detection, ...])."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "rank", "x", "y", "score"])
        for sid, dets in rows:
            for d in dets:
                w.writerow([sid, d.rank, d.x, d.y, f"{d.score:.6f}"])

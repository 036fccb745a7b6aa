"""Scene-level ROC evaluation, random-crop consistency analyses and a throughput benchmark.

TPR is the fraction of scenes with at least one true detection kept; FPR is
the mean number of false detections kept per scene, so it can exceed 1.
"""

import csv
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .data import sample_training_crop
from .detection import (
    DEFAULT_SUPPRESSION_RADIUS,
    aggregate_heatmaps,
    predict_crops,
    topk_detect,
    tta_specs,
)

TAU_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)

# published frame rates (GTX 1080 Ti, batch 2); printed for context, never compared
REFERENCE_FPS = {
    (3, 512, 1024): 38.39,
    (6, 512, 1024): 24.67,
    (6, 720, 1280): 12.08,
}


@dataclass
class ScoredScene:
    scene_id: str
    detections: list          # Detection list at tau = 0, ordered by rank
    mask: np.ndarray          # (H, W) bool
    fold: int = -1

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim == 3:
            self.mask = self.mask[0]
        self.mask = self.mask > 0.5
        ranks = [d.rank for d in self.detections]
        if ranks != sorted(ranks):
            raise ValueError(f"detections of scene {self.scene_id} are not sorted by rank")


@dataclass(frozen=True)
class RocPoint:
    tau: float
    tpr: float
    fpr: float


def classify_detection(det, mask):
    """True for a hit on ball pixels. Anything off the image cannot be on the ball."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    H, W = m.shape
    if not (0 <= det.y < H and 0 <= det.x < W):
        return False
    return bool(m[det.y, det.x] > 0.5)


def roc_curve(scored, taus=TAU_GRID):
    if not scored:
        raise ValueError("roc_curve needs at least one scene")
    taus = np.asarray(taus, dtype=np.float64)
    if np.any(np.diff(taus) < 0):
        raise ValueError("tau grid must be sorted ascending")
    n = len(scored)
    # a scene counts as detected at tau iff its best TP score is >= tau
    best_tp = np.full(n, -np.inf)
    fp_scores = []
    for i, s in enumerate(scored):
        for d in s.detections:
            if classify_detection(d, s.mask):
                best_tp[i] = max(best_tp[i], d.score)
            else:
                fp_scores.append(d.score)
    fp_scores = np.sort(np.asarray(fp_scores, dtype=np.float64))
    out = []
    for tau in taus:
        tpr = np.count_nonzero(best_tp >= tau) / n
        fp = fp_scores.size - np.searchsorted(fp_scores, tau, side="left")
        out.append(RocPoint(float(tau), float(tpr), float(fp / n)))
    return out


def tpr_at_fpr(curve, max_fpr):
    """Best TPR among operating points whose FPR does not exceed ``max_fpr`` (0 if none)."""
    ok = [p.tpr for p in curve if p.fpr <= max_fpr + 1e-12]
    return max(ok) if ok else 0.0


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))  # ordered, so reductions stay deterministic
    return [fn(it) for it in items]


def evaluation_base_crop(scene, target_size, seed, index):
    rng = np.random.default_rng([seed, 4, index])
    return sample_training_crop(scene, target_size, rng), rng


def score_scenes(predict, scenes, target_size, k=1, radius=DEFAULT_SUPPRESSION_RADIUS, n_crops=1,
                 iou_min=0.9, seed=0, folds=None, workers=1):
    """Top-k candidates at tau=0 for each scene, from ``n_crops`` averaged crops around a base crop.

    The base crop and its jittered copies depend only on (seed, scene position),
    so runs that differ in the model or in ``n_crops`` see the same base crops.
    """
    def one(item):
        i, scene = item
        base, rng = evaluation_base_crop(scene, target_size, seed, i)
        specs = tta_specs(scene, base, n_crops, iou_min, rng)
        merged = aggregate_heatmaps(predict_crops(predict, scene, specs, target_size))
        dets = topk_detect(merged.values, k, 0.0, radius)
        fold = -1 if folds is None else folds.assignment[scene.scene_id]
        return ScoredScene(scene.scene_id, dets, scene.mask, fold)

    return _map(one, list(enumerate(scenes)), workers)


def random_crops(scene, n_crops, target_size, seed, index):
    rng = np.random.default_rng([seed, 5, index])
    return [sample_training_crop(scene, target_size, rng) for _ in range(n_crops)]


def crop_hit_matrix(predict, scenes, n_crops, kmax, tau, target_size, radius=DEFAULT_SUPPRESSION_RADIUS,
                    seed=0, workers=1):
    """Bool array (scenes, crops, kmax): entry [s, c, k-1] is whether top-k of crop c hits the ball."""
    if n_crops < 1:
        raise ValueError(f"n_crops must be >= 1, got {n_crops}")
    if kmax < 1:
        raise ValueError(f"k must be >= 1, got {kmax}")

    def one(item):
        i, scene = item
        specs = random_crops(scene, n_crops, target_size, seed, i)
        rows = np.zeros((n_crops, kmax), bool)
        for c, hm in enumerate(predict_crops(predict, scene, specs, target_size)):
            dets = topk_detect(hm.values, kmax, tau, radius)
            hits = [classify_detection(d, scene.mask) for d in dets] + [False] * (kmax - len(dets))
            rows[c] = np.logical_or.accumulate(hits)
        return rows

    return np.stack(_map(one, list(enumerate(scenes)), workers))


def hit_fractions(matrix, ks):
    """(scenes, len(ks)) fraction of crops whose top-k includes a TP."""
    return np.stack([matrix[:, :, k - 1].mean(axis=1) for k in ks], axis=1)


def rate_curve(matrix):
    """Fraction of scenes with a top-1 hit in at least one of the first n crops, n = 1..crops."""
    return np.logical_or.accumulate(matrix[:, :, 0], axis=1).mean(axis=0)


def crop_hit_distribution(predict, scenes, n_crops, ks, tau, target_size, radius=DEFAULT_SUPPRESSION_RADIUS,
                          seed=0, workers=1):
    ks = sorted(ks)
    m = crop_hit_matrix(predict, scenes, n_crops, ks[-1], tau, target_size, radius, seed, workers)
    frac = hit_fractions(m, ks)
    return [(s.scene_id, k, float(frac[i, j])) for i, s in enumerate(scenes) for j, k in enumerate(ks)]


def detection_rate_vs_ncrops(predict, scenes, max_crops, tau, target_size, radius=DEFAULT_SUPPRESSION_RADIUS,
                             seed=0, workers=1):
    if max_crops < 1:
        raise ValueError(f"max_crops must be >= 1, got {max_crops}")
    m = crop_hit_matrix(predict, scenes, max_crops, 1, tau, target_size, radius, seed, workers)
    return [(n + 1, float(r)) for n, r in enumerate(rate_curve(m))]


@dataclass
class AblationRun:
    label: str
    folds: object             # FoldSpec used to train/evaluate this configuration
    scored: list


def compare_ablations(runs, taus=TAU_GRID):
    """Align ROC curves of several configurations evaluated on the same folds."""
    if not runs:
        raise ValueError("no runs to compare")
    ref = runs[0]
    for r in runs[1:]:
        if r.folds.k != ref.folds.k or r.folds.assignment != ref.folds.assignment:
            raise ValueError(f"fold specs of {r.label!r} and {ref.label!r} differ; ablations need identical folds")
        if [s.scene_id for s in r.scored] != [s.scene_id for s in ref.scored]:
            raise ValueError(f"{r.label!r} and {ref.label!r} were scored on different scenes")
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate run labels: {labels}")
    return {r.label: roc_curve(r.scored, taus) for r in runs}


def per_fold_curves(scored, taus=TAU_GRID):
    folds = sorted({s.fold for s in scored})
    return {f: roc_curve([s for s in scored if s.fold == f], taus) for f in folds}


def hardware_description():
    return f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} cores, numpy {np.__version__}"


@dataclass
class BenchResult:
    shape: tuple              # (C, H, W)
    batch: int
    fps: list                 # one value per repeat
    forward_ms: float         # mean wall time of one batched forward pass
    detect_rule_ms: float     # mean top-k time for the same batch of heatmaps
    hardware: str = ""
    reference_fps: float = None
    latencies_ms: list = field(default_factory=list)

    @property
    def mean_fps(self):
        return float(np.mean(self.fps))

    @property
    def std_fps(self):
        return float(np.std(self.fps))

    @property
    def relative_std(self):
        return self.std_fps / self.mean_fps

    @property
    def detect_fraction(self):
        return self.detect_rule_ms / self.forward_ms


def benchmark_fps(weights, shape, batch=2, n_warmup=2, n_timed=10, repeats=5, k=1,
                  radius=DEFAULT_SUPPRESSION_RADIUS, hardware=None, seed=0):
    """Time forward passes only; the detection rule is timed separately on the produced heatmaps."""
    if n_timed < 10:
        raise ValueError(f"n_timed must be >= 10, got {n_timed}")
    if repeats < 1 or batch < 1:
        raise ValueError("repeats and batch must be >= 1")
    C, H, W = shape
    x = np.random.default_rng(seed).uniform(size=(batch, C, H, W)).astype(np.float32)
    mdl.check_input(weights.config, x)
    heat = None
    for _ in range(n_warmup):
        heat = mdl.forward(weights, x)
    fps, lat = [], []
    for _ in range(repeats):
        t_rep = time.perf_counter()
        for _ in range(n_timed):
            t = time.perf_counter()
            heat = mdl.forward(weights, x)
            lat.append((time.perf_counter() - t) * 1e3)
        fps.append(batch * n_timed / (time.perf_counter() - t_rep))
    t = time.perf_counter()
    for _ in range(n_timed):
        for b in range(batch):
            topk_detect(heat[b, 0], k, 0.0, radius)
    detect_ms = (time.perf_counter() - t) * 1e3 / n_timed
    return BenchResult(tuple(shape), batch, fps, float(np.mean(lat)), detect_ms,
                       hardware or hardware_description(), REFERENCE_FPS.get(tuple(shape)), lat)


# ---- report writers ----

def write_roc_csv(path, curves):
    """``curves``: {label: [RocPoint, ...]}."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "tau", "tpr", "fpr"])
        for label, curve in curves.items():
            for p in curve:
                w.writerow([label, f"{p.tau:.2f}", f"{p.tpr:.6f}", f"{p.fpr:.6f}"])


def write_hits_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "k", "hit_fraction"])
        for sid, k, frac in rows:
            w.writerow([sid, k, f"{frac:.6f}"])


def write_rate_csv(path, curves):
    """``curves``: {label: [(n, rate), ...]}."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "n_crops", "detection_rate"])
        for label, curve in curves.items():
            for n, r in curve:
                w.writerow([label, n, f"{r:.6f}"])


def write_bench_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shape", "batch", "mean_fps", "std_fps", "forward_ms", "detect_rule_ms",
                    "reference_fps", "hardware"])
        for r in results:
            ref = "" if r.reference_fps is None else f"{r.reference_fps:.2f}"
            w.writerow(["x".join(map(str, (r.shape[2], r.shape[1], r.shape[0]))), r.batch,
                        f"{r.mean_fps:.4f}", f"{r.std_fps:.4f}", f"{r.forward_ms:.3f}",
                        f"{r.detect_rule_ms:.4f}", ref, r.hardware])

"""Command-line entry point: generate | train | detect | evaluate | bench.

Every option can also come from a JSON file given with ``--config``; flags on the
command line win over the file, which wins over built-in defaults. The resolved
settings are written to ``config.json`` in each output directory.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from . import evaluation as ev
from . import model as mdl
from . import plotting
from .data import SynthParams, load_dataset, synth_dataset, write_dataset
from .detection import DEFAULT_SUPPRESSION_RADIUS, write_detections_csv
from .training import TrainConfig, make_folds, split_train_val, train, write_run

log = logging.getLogger("ballseg")

DEFAULTS = {
    "common": dict(seed=0, verbose=False),
    "generate": dict(count=200, arenas=10, games_per_arena=2, synth={}),
    "train": dict(folds=5, fold_index=0, use_diff=True, base_channels=8, learning_rate=0.3,
                  decay_factor=2.0, decay_every=40, batch_size=4, epochs=60, crop_size="96x64"),
    "detect": dict(folds=5, fold_index=None, use_diff=True, topk=1, tau=0.5,
                   suppression_radius=DEFAULT_SUPPRESSION_RADIUS, n_crops=1, iou_min=0.9, crop_size="96x64"),
    "evaluate": dict(folds=5, fold_index=0, use_diff=True, topk="1", tau=0.01,
                     suppression_radius=DEFAULT_SUPPRESSION_RADIUS, n_crops="1", iou_min=0.9,
                     crop_size="96x64", hit_crops=50, hit_k="1,2,3", max_crops=20, include_train=False),
    "bench": dict(shape=["1024x512x6"], batch=2, reps=10, repeats=5, warmup=2, base_channels=16,
                  hardware=None),
}


def _size(text):
    """'96x64' -> (96, 64)."""
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ValueError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _shape(text):
    """'1024x512x6' -> (C, H, W)."""
    parts = [int(v) for v in str(text).lower().split("x")]
    if len(parts) != 3:
        raise ValueError(f"expected WIDTHxHEIGHTxCHANNELS, got {text!r}")
    w, h, c = parts
    return c, h, w


def _default_workers():
    env = os.environ.get("BALLSEG_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"BALLSEG_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_parser():
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel workers (env BALLSEG_WORKERS, else CPU count)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--out", required=True, help="output directory")

    eval_opts = argparse.ArgumentParser(add_help=False, argument_default=S)
    eval_opts.add_argument("--manifest", required=True)
    eval_opts.add_argument("--folds", type=int, help="K for arena-disjoint folds")
    eval_opts.add_argument("--use-diff", action=argparse.BooleanOptionalAction,
                           help="feed the frame difference (6 channels); --no-use-diff for RGB only")
    eval_opts.add_argument("--suppression-radius", type=int)
    eval_opts.add_argument("--iou-min", type=float)
    eval_opts.add_argument("--crop-size", help="network input WIDTHxHEIGHT")

    p = argparse.ArgumentParser(prog="ballseg", description="Ball detection by heatmap segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], argument_default=S, help="write a synthetic dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--arenas", type=int)
    g.add_argument("--games-per-arena", type=int)

    t = sub.add_parser("train", parents=[common], argument_default=S, help="train on the non-test folds")
    t.add_argument("--manifest", required=True)
    t.add_argument("--folds", type=int)
    t.add_argument("--fold-index", type=int)
    t.add_argument("--use-diff", action=argparse.BooleanOptionalAction)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    t.add_argument("--decay-factor", type=float)
    t.add_argument("--decay-every", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--crop-size")

    d = sub.add_parser("detect", parents=[common, eval_opts], argument_default=S, help="write detections CSV")
    d.add_argument("--weights", required=True)
    d.add_argument("--fold-index", type=int, help="only scenes of this fold (default: all scenes)")
    d.add_argument("--topk", type=int)
    d.add_argument("--tau", type=float)
    d.add_argument("--n-crops", type=int)

    e = sub.add_parser("evaluate", parents=[common, eval_opts], argument_default=S,
                       help="ROC, crop-consistency and rate-vs-crops report")
    e.add_argument("--weights", required=True, action="append",
                   help="[LABEL=]PATH, repeatable; with --fold-index all, PATH may contain {fold}")
    e.add_argument("--fold-index", help="test fold index, or 'all' to pool every fold")
    e.add_argument("--topk", help="comma-separated k values")
    e.add_argument("--tau", type=float, help="threshold for the crop-hit analyses")
    e.add_argument("--n-crops", help="comma-separated TTA crop counts")
    e.add_argument("--hit-crops", type=int, help="random crops per scene for hits.csv")
    e.add_argument("--hit-k", help="comma-separated k values for hits.csv")
    e.add_argument("--max-crops", type=int, help="largest n in rate_vs_ncrops.csv")
    e.add_argument("--include-train", action=argparse.BooleanOptionalAction,
                   help="also score the training folds (labelled 'train')")

    b = sub.add_parser("bench", parents=[common], argument_default=S, help="forward-pass throughput")
    b.add_argument("--weights", help="weights file (default: random init)")
    b.add_argument("--base-channels", type=int)
    b.add_argument("--shape", action="append", help="WIDTHxHEIGHTxCHANNELS, repeatable")
    b.add_argument("--batch", type=int)
    b.add_argument("--reps", type=int, help="timed passes per repeat (>= 10)")
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--hardware", help="hardware description written to bench.csv")
    return p


def resolve(args):
    """Merge defaults < config file < flags into one plain dict."""
    given = vars(args).copy()
    cmd = given["command"]
    cfg = {}
    if "config" in given:
        with open(given["config"]) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ValueError(f"config file {given['config']} must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    merged = {**DEFAULTS["common"], **DEFAULTS[cmd], **cfg, **given}
    if "workers" not in merged:
        merged["workers"] = _default_workers()
    if merged["workers"] < 1:
        raise ValueError(f"--workers must be >= 1, got {merged['workers']}")
    return merged


def _write_config(out, cfg):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def cmd_generate(cfg):
    synth = dict(cfg["synth"])
    known = {f.name for f in fields(SynthParams)}
    unknown = set(synth) - known
    if unknown:
        raise ValueError(f"unknown synth parameters: {sorted(unknown)}")
    params = SynthParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in synth.items()})
    if cfg["count"] < 0:
        raise ValueError(f"--count must be >= 0, got {cfg['count']}")
    scenes = synth_dataset(cfg["count"], cfg["arenas"], cfg["seed"], params, cfg["games_per_arena"])
    manifest = write_dataset(scenes, cfg["out"])
    _write_config(cfg["out"], cfg)
    log.info("wrote %d scenes to %s", len(scenes), manifest)
    return manifest


def _check_fold_index(index, k):
    if not 0 <= index < k:
        raise ValueError(f"fold index {index} out of range for K={k}")


def cmd_train(cfg):
    scenes = load_dataset(cfg["manifest"])
    _check_fold_index(cfg["fold_index"], cfg["folds"])
    folds = make_folds(scenes, cfg["folds"], cfg["seed"])
    rest = folds.other_scenes(scenes, cfg["fold_index"])
    tr, va = split_train_val(rest, cfg["seed"])
    tcfg = TrainConfig(learning_rate=cfg["learning_rate"], decay_factor=cfg["decay_factor"],
                       decay_every=cfg["decay_every"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       seed=cfg["seed"], use_diff=cfg["use_diff"], crop_size=_size(cfg["crop_size"]),
                       workers=cfg["workers"])
    net = mdl.NetworkConfig(base_channels=cfg["base_channels"], input_channels=6 if cfg["use_diff"] else 3)
    weights, history = train(tr, va, net, tcfg)
    snapshot = dict(cfg, network=net, train=tcfg, train_scenes=[s.scene_id for s in tr],
                    val_scenes=[s.scene_id for s in va], arena_folds=folds.arena_folds)
    write_run(cfg["out"], weights, history, snapshot)
    log.info("best epoch %d, val loss %.5f", history.best_epoch, history.val_loss[history.best_epoch])
    return weights, history


def _load_checked(path, use_diff):
    weights = mdl.load_weights(path)
    want = 6 if use_diff else 3
    if weights.config.input_channels != want:
        raise ValueError(f"input-channel mismatch: {path} has {weights.config.input_channels} input channels "
                         f"but use_diff={use_diff} needs {want}")
    return weights


def cmd_detect(cfg):
    scenes = load_dataset(cfg["manifest"])
    if cfg["fold_index"] is not None:
        _check_fold_index(cfg["fold_index"], cfg["folds"])
        scenes = make_folds(scenes, cfg["folds"], cfg["seed"]).fold_scenes(scenes, cfg["fold_index"])
    weights = _load_checked(cfg["weights"], cfg["use_diff"])
    scored = ev.score_scenes(mdl.predictor(weights), scenes, _size(cfg["crop_size"]), k=cfg["topk"],
                             radius=cfg["suppression_radius"], n_crops=cfg["n_crops"], iou_min=cfg["iou_min"],
                             seed=cfg["seed"], workers=cfg["workers"])
    rows = [(s.scene_id, [d for d in s.detections if d.score >= cfg["tau"]]) for s in scored]
    _write_config(cfg["out"], cfg)
    path = os.path.join(cfg["out"], "detections.csv")
    write_detections_csv(path, rows)
    return path


def _weights_specs(entries):
    out = []
    for i, e in enumerate(entries):
        label, sep, path = e.partition("=")
        out.append((label, path) if sep else (f"model{i}" if len(entries) > 1 else "model", e))
    return out


def cmd_evaluate(cfg):
    scenes = load_dataset(cfg["manifest"])
    K = cfg["folds"]
    folds = make_folds(scenes, K, cfg["seed"])
    if str(cfg["fold_index"]) == "all":
        test_folds = list(range(K))
    else:
        test_folds = [int(cfg["fold_index"])]
        _check_fold_index(test_folds[0], K)
    target = _size(cfg["crop_size"])
    ks, n_list, hit_k = _int_list(cfg["topk"]), _int_list(cfg["n_crops"]), _int_list(cfg["hit_k"])
    radius = cfg["suppression_radius"]
    splits = ["test", "train"] if cfg["include_train"] else ["test"]
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)

    curves, fold_curves, hit_rows, rate_curves, hit_fracs = {}, {}, [], {}, None
    for label, path in _weights_specs(cfg["weights"]):
        models = {f: _load_checked(path.format(fold=f), cfg["use_diff"]) for f in test_folds}
        for split in splits:
            for k in ks:
                for n in n_list:
                    name = f"{label}/{split}/top{k}/crops{n}"
                    scored = []
                    for f in test_folds:
                        part = folds.fold_scenes(scenes, f) if split == "test" else folds.other_scenes(scenes, f)
                        scored += ev.score_scenes(mdl.predictor(models[f]), part, target, k=k, radius=radius,
                                                  n_crops=n, iou_min=cfg["iou_min"], seed=cfg["seed"],
                                                  folds=folds, workers=cfg["workers"])
                    curves[name] = ev.roc_curve(scored)
                    if len(test_folds) > 1:
                        for f, c in ev.per_fold_curves(scored).items():
                            fold_curves[f"{name}/fold{f}"] = c
        # crop-consistency analyses on the test folds
        matrices = []
        for f in test_folds:
            part = folds.fold_scenes(scenes, f)
            m = ev.crop_hit_matrix(mdl.predictor(models[f]), part, max(cfg["hit_crops"], cfg["max_crops"]),
                                   max(hit_k), cfg["tau"], target, radius, cfg["seed"], cfg["workers"])
            matrices.append((part, m))
        ids = [s.scene_id for part, _ in matrices for s in part]
        m_all = np.concatenate([m for _, m in matrices])
        frac = ev.hit_fractions(m_all[:, :cfg["hit_crops"]], hit_k)
        hit_fracs = hit_fracs if hit_fracs is not None else frac
        hit_rows += [(label, sid, k, float(frac[i, j])) for i, sid in enumerate(ids) for j, k in enumerate(hit_k)]
        rate = ev.rate_curve(m_all[:, :cfg["max_crops"]])
        rate_curves[f"{label}/test"] = [(n + 1, float(r)) for n, r in enumerate(rate)]

    ev.write_roc_csv(os.path.join(out, "roc.csv"), curves)
    plotting.roc_figure(os.path.join(out, "roc.svg"), curves)
    if fold_curves:
        ev.write_roc_csv(os.path.join(out, "roc_folds.csv"), fold_curves)
        plotting.roc_figure(os.path.join(out, "roc_folds.svg"), fold_curves, title="ROC per test fold")
    _write_hits(os.path.join(out, "hits.csv"), hit_rows)
    plotting.hits_figure(os.path.join(out, "hits.svg"), hit_fracs, hit_k)
    ev.write_rate_csv(os.path.join(out, "rate_vs_ncrops.csv"), rate_curves)
    plotting.rate_figure(os.path.join(out, "rate_vs_ncrops.svg"), rate_curves)
    _write_config(out, cfg)
    return curves


def _write_hits(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "scene_id", "k", "hit_fraction"])
        for label, sid, k, frac in rows:
            w.writerow([label, sid, k, f"{frac:.6f}"])


def cmd_bench(cfg):
    if cfg["reps"] < 10:
        raise ValueError(f"--reps must be >= 10 timed passes, got {cfg['reps']}")
    shapes = [_shape(s) for s in cfg["shape"]]
    results = []
    for shape in shapes:
        if "weights" in cfg:
            weights = mdl.load_weights(cfg["weights"])
        else:
            weights = mdl.build_network(mdl.NetworkConfig(base_channels=cfg["base_channels"],
                                                          input_channels=shape[0]), cfg["seed"])
        r = ev.benchmark_fps(weights, shape, cfg["batch"], cfg["warmup"], cfg["reps"], cfg["repeats"],
                             hardware=cfg["hardware"], seed=cfg["seed"])
        log.info("%s: %.2f +- %.2f fps, detection rule %.3f ms (%.2f%% of forward); published GPU figure %s",
                 shape, r.mean_fps, r.std_fps, r.detect_rule_ms, 100 * r.detect_fraction, r.reference_fps)
        results.append(r)
    os.makedirs(cfg["out"], exist_ok=True)
    ev.write_bench_csv(os.path.join(cfg["out"], "bench.csv"), results)
    plotting.bench_figure(os.path.join(cfg["out"], "bench.svg"), results)
    _write_config(cfg["out"], cfg)
    return results


COMMANDS = dict(generate=cmd_generate, train=cmd_train, detect=cmd_detect, evaluate=cmd_evaluate, bench=cmd_bench)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[cfg["command"]](cfg)
    except (OSError, ValueError, RuntimeError, KeyError) as err:
        print(f"ballseg {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

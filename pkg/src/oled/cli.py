"""Command line interface: ``oled <command> ...``.

Commands: train, eval, mnist-suite, ablate-cae, segment-eval, mask-preview.
A run is configured by a ``key = value`` file holding every TrainConfig
field plus the data keys in ``RUN_DEFAULTS``; each run directory gets the
fully resolved config back as ``config.txt``.
"""

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .checkpoint import format_config, parse_config_text
from .datasets import (
    build_cifar_protocol,
    build_mnist_protocol,
    build_ucsd_protocol,
    load_cifar,
    load_frame_dir,
    load_mnist,
    read_frame_labels,
    write_pgm,
)
from .errors import ConfigError, OledError
from .masking import apply_mask
from .scoring import (
    SCORE_TYPES,
    aggregate_scores,
    frame_scores,
    score_samples,
    segmentation_eval,
    write_metrics_csv,
    write_scores_csv,
)
from .training import TrainConfig, eval_masks, load_models, train, train_cae_baseline

log = logging.getLogger("oled")

RUN_DEFAULTS = {
    "dataset": "mnist",
    "mnist_images": "",
    "mnist_labels": "",
    "cifar_train": "",
    "cifar_test": "",
    "ucsd_train": "",
    "ucsd_test": "",
    "ucsd_labels": "",
    "inlier_class": "0",
    "model": "oled",
    "out_dir": "runs/run",
}
PATH_KEYS = ("mnist_images", "mnist_labels", "cifar_train", "cifar_test", "ucsd_train", "ucsd_test",
             "ucsd_labels", "out_dir")
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


@dataclass
class RunConfig:
    train: TrainConfig
    data: dict

    @classmethod
    def from_dict(cls, d, base_dir="."):
        data = dict(RUN_DEFAULTS)
        train_kw = {}
        for k, v in d.items():
            if k in RUN_DEFAULTS:
                data[k] = str(v)
            elif k in TRAIN_KEYS:
                train_kw[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        if data["dataset"] not in ("mnist", "cifar", "ucsd"):
            raise ConfigError(f"dataset must be mnist, cifar or ucsd, got {data['dataset']!r}")
        if data["model"] not in ("oled", "cae"):
            raise ConfigError(f"model must be oled or cae, got {data['model']!r}")
        try:
            int(data["inlier_class"])
        except ValueError:
            raise ConfigError(f"inlier_class must be an integer, got {data['inlier_class']!r}") from None
        for k in PATH_KEYS:
            if data[k]:
                data[k] = ",".join(os.path.abspath(os.path.join(base_dir, p.strip()))
                                   for p in data[k].split(","))
        return cls(TrainConfig.from_dict(train_kw), data)

    def to_dict(self):
        return {**self.data, **self.train.to_dict()}

    def replace(self, **data):
        out = dict(self.to_dict(), **{k: v for k, v in data.items() if v is not None})
        return RunConfig.from_dict(out)


def read_run_config(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        d = parse_config_text(f.read())
    return RunConfig.from_dict(d, os.path.dirname(os.path.abspath(path)))


def write_run_config(path, rc):
    with open(path, "w") as f:
        f.write("# resolved run configuration\n")
        f.write(format_config(rc.to_dict()))


def _require(path, what):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path or '(not set)'}")
    return path


def load_split(rc):
    d = rc.data
    seed, cls = rc.train.seed, int(d["inlier_class"])
    if d["dataset"] == "mnist":
        raw = load_mnist(_require(d["mnist_images"], "MNIST image file"),
                         _require(d["mnist_labels"], "MNIST label file"))
        return build_mnist_protocol(raw, cls, seed=seed, val_fraction=rc.train.val_fraction)
    if d["dataset"] == "cifar":
        train_paths = [_require(p, "CIFAR training batch") for p in d["cifar_train"].split(",") if p] or \
            [_require("", "CIFAR training batch")]
        test_paths = [_require(p, "CIFAR test batch") for p in d["cifar_test"].split(",") if p] or \
            [_require("", "CIFAR test batch")]
        return build_cifar_protocol(load_cifar(train_paths), load_cifar(test_paths), cls, seed=seed,
                                    val_fraction=rc.train.val_fraction)
    _, train_frames = load_frame_dir(_require(d["ucsd_train"], "UCSD training frame directory"))
    names, test_frames = load_frame_dir(_require(d["ucsd_test"], "UCSD test frame directory"))
    labels = read_frame_labels(_require(d["ucsd_labels"], "UCSD label file"), names)
    return build_ucsd_protocol(train_frames, test_frames, labels)


def _best_checkpoint(run_dir):
    path = os.path.join(run_dir, "best_epoch.txt")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no best checkpoint record in run directory: {path}")
    with open(path) as f:
        name = parse_config_text(f.read())["checkpoint"]
    return _require(os.path.join(run_dir, "checkpoints", name), "checkpoint")


def _attach_log(run_dir):
    handler = logging.FileHandler(os.path.join(run_dir, "train.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logging.getLogger("oled").addHandler(handler)
    return handler


def run_training(rc):
    """Train one run described by ``rc`` into ``rc.data['out_dir']``."""
    run_dir = rc.data["out_dir"]
    os.makedirs(run_dir, exist_ok=True)
    write_run_config(os.path.join(run_dir, "config.txt"), rc)
    split = load_split(rc)
    meta = dict(split.meta)
    with open(os.path.join(run_dir, "split.txt"), "w") as f:
        f.write(format_config(meta))
    handler = _attach_log(run_dir)
    try:
        fit = train if rc.data["model"] == "oled" else train_cae_baseline
        result = fit(split, rc.train, run_dir, extra_config=rc.data)
    finally:
        logging.getLogger("oled").removeHandler(handler)
        handler.close()
    return result, split


def score_run(run_dir, split=None):
    """Score the test split of a finished run with its best checkpoint."""
    ckpt = _best_checkpoint(run_dir)
    rc = read_run_config(os.path.join(run_dir, "config.txt"))
    models, cfg, kind, _ = load_models(ckpt)
    split = split or load_split(rc)
    if rc.data["dataset"] == "ucsd":
        ss = score_samples(models.R, eval_masks(models, cfg, split.test_x, kind), split.test_x)
        ss = frame_scores(ss, split.patches_per_frame, split.test_y)
    else:
        ss = score_samples(models.R, eval_masks(models, cfg, split.test_x, kind), split.test_x, split.test_y)
    return rc, models, cfg, kind, split, ss


def evaluate_run(run_dir, score_types=SCORE_TYPES, out_dir=None, split=None):
    _, _, _, _, _, ss = score_run(run_dir, split)
    ss, metrics = aggregate_scores(ss, score_types)
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    write_scores_csv(os.path.join(out_dir, "scores.csv"), ss)
    return metrics


def _print_metrics(metrics, prefix=""):
    for m in metrics:
        print(f"{prefix}{m['score_type']:>5}  auc={m['auc']:.4f}  eer={m['eer']:.4f}  "
              f"inliers={m['n_inlier']} outliers={m['n_outlier']}")


def parse_classes(text):
    """``"0..9"``, ``"0-9"`` or ``"1,8"`` to a list of class ids."""
    out = []
    for part in text.split(","):
        part = part.strip()
        for sep in ("..", "-"):
            if sep in part:
                lo, hi = part.split(sep)
                out.extend(range(int(lo), int(hi) + 1))
                break
        else:
            out.append(int(part))
    if not out or any(not 0 <= c <= 9 for c in out):
        raise ConfigError(f"classes must lie in 0-9, got {text!r}")
    return out


def _load_with_overrides(args, **extra):
    rc = read_run_config(args.config)
    over = {"seed": getattr(args, "seed", None), **extra}
    if getattr(args, "cls", None) is not None:
        over["inlier_class"] = args.cls
    if getattr(args, "out", None):
        over["out_dir"] = os.path.abspath(args.out)
    return rc.replace(**over)


def cmd_train(args):
    rc = _load_with_overrides(args)
    result, _ = run_training(rc)
    best = result.records[result.best_epoch - 1]
    print(f"run directory: {rc.data['out_dir']}")
    print(f"best epoch {result.best_epoch}: {best.checkpoint}")
    return 0


def cmd_eval(args):
    types = SCORE_TYPES if args.score_type == "all" else (args.score_type,)
    metrics = evaluate_run(args.run, types, args.out)
    _print_metrics(metrics)
    return 0


def cmd_mnist_suite(args):
    classes = parse_classes(args.classes)
    base = _load_with_overrides(args, dataset="mnist")
    root = base.data["out_dir"]
    table = {}
    for c in classes:
        rc = base.replace(inlier_class=c, out_dir=os.path.join(root, f"class_{c}"))
        run_training(rc)
        metrics = evaluate_run(rc.data["out_dir"])
        table[c] = {m["score_type"]: m["auc"] for m in metrics}
        _print_metrics(metrics, prefix=f"class {c} ")
    avg_col = "average_" + "_".join(map(str, classes))
    path = os.path.join(root, "suite.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["score_type"] + [f"class_{c}" for c in classes] + [avg_col])
        for st in SCORE_TYPES:
            vals = [table[c][st] for c in classes]
            w.writerow([st] + [repr(v) for v in vals] + [repr(float(np.mean(vals)))])
    print(f"AUC table averaged over classes {','.join(map(str, classes))}: {path}")
    return 0


def cmd_ablate_cae(args):
    base = _load_with_overrides(args)
    root = base.data["out_dir"]
    rows = []
    for model in ("oled", "cae"):
        rc = base.replace(model=model, out_dir=os.path.join(root, model))
        run_training(rc)
        for m in evaluate_run(rc.data["out_dir"]):
            rows.append([model, rc.train.seed, m["score_type"], repr(m["auc"]), repr(m["eer"])])
    path = os.path.join(root, "ablation.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "seed", "score_type", "auc", "eer"])
        w.writerows(rows)
    auc = {(r[0], r[2]): float(r[3]) for r in rows}
    for st in SCORE_TYPES:
        print(f"{st:>5}  oled={auc['oled', st]:.4f}  cae={auc['cae', st]:.4f}  "
              f"diff={auc['oled', st] - auc['cae', st]:+.4f}")
    print(f"ablation table: {path}")
    return 0


def cmd_segment_eval(args):
    rc, models, _, kind, split, _ = score_run(args.run)
    if rc.data["dataset"] != "mnist" or kind != "oled":
        raise ConfigError("segment-eval needs an OLED run on MNIST")
    res = segmentation_eval(models.MM, split.test_x, split.test_raw, split.test_y)
    ok = ~np.isnan(res.per_image)
    out = args.out or os.path.join(args.run, "segmentation.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "mean_pixel_auc", "n_images", "n_skipped"])
        for name, sel, value in (("inlier", split.test_y == 0, res.inlier_auc),
                                 ("outlier", split.test_y == 1, res.outlier_auc)):
            w.writerow([name, repr(value), int((sel & ok).sum()), int((sel & ~ok).sum())])
    print(f"inlier pixel AUC {res.inlier_auc:.4f}  outlier pixel AUC {res.outlier_auc:.4f}  "
          f"skipped {res.skipped}: {out}")
    return 0


def to_gray_u8(x):
    """[-1, 1] images (N, C, H, W) to 8-bit gray by channel mean."""
    return np.clip(np.rint((x.mean(axis=1) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def preview_grid(x, x_m, xhat):
    """One row per sample: original | masked (masked pixels mid-gray) | reconstruction."""
    return np.concatenate([np.concatenate(list(to_gray_u8(p)), axis=0) for p in (x, x_m, xhat)], axis=1)


def cmd_mask_preview(args):
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    _, models, cfg, kind, split, _ = score_run(args.run)
    x = split.test_x[:args.n]
    mask = eval_masks(models, cfg, x, kind)
    if not isinstance(mask, np.ndarray):
        mask = mask(x)[0]
    x_m = apply_mask(x, mask)
    grid = preview_grid(x, x_m, models.R(x_m))
    out = args.out or os.path.join(args.run, "mask_preview.pgm")
    write_pgm(out, grid)
    print(f"{len(x)} samples, grid {grid.shape[1]}x{grid.shape[0]}: {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="oled", description="Adversarially masked autoencoder novelty detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def training_args(sp, cls=True):
        sp.add_argument("--config", required=True, help="key = value run configuration")
        if cls:
            sp.add_argument("--class", dest="cls", type=int, help="inlier class (overrides config)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")

    sp = sub.add_parser("train", help="train one run")
    training_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score the test split with the best checkpoint")
    sp.add_argument("--run", required=True)
    sp.add_argument("--score-type", default="all", choices=SCORE_TYPES + ("all",))
    sp.add_argument("--out", help="directory for metrics.csv and scores.csv (default: the run)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("mnist-suite", help="train and evaluate several MNIST classes")
    training_args(sp, cls=False)
    sp.add_argument("--classes", default="0..9")
    sp.set_defaults(func=cmd_mnist_suite)

    sp = sub.add_parser("ablate-cae", help="paired OLED and context-autoencoder runs")
    training_args(sp)
    sp.set_defaults(func=cmd_ablate_cae)

    sp = sub.add_parser("segment-eval", help="pixelwise AUC of the mask generator on MNIST")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_segment_eval)

    sp = sub.add_parser("mask-preview", help="PGM grid of original, masked and reconstructed samples")
    sp.add_argument("--run", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mask_preview)
    return p


def _threads():
    raw = os.environ.get("OLED_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"OLED_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.getLogger("oled").setLevel(logging.INFO)
    if args.verbose:
        logging.basicConfig(format="%(message)s")
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (OledError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

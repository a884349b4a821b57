"""Adversarial training of the reconstructor against the mask module.

Per batch the reconstructor takes one Adam step descending
``L_mask + gamma * L_cont + lam * L_rec`` with the mask module frozen; then
the mask module takes one Adam step ascending ``L_mask + gamma * L_cont``
with the reconstructor frozen.  The rec loss never reaches the mask module.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import format_config, load_checkpoint, load_into, model_entries, save_checkpoint
from .errors import ConfigError, NonFiniteError
from .losses import LossTerms, adversarial_grad, rec_grad, sample_errors
from .masking import MaskGeneratorConfig, MaskModule, ThresholdConfig, apply_mask
from .nn import AdamState, adam_step
from .reconstructor import ReconstructorConfig, build_reconstructor
from .scoring import SCORE_TYPES, aggregate_scores, score_samples

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    t: float = 0.875
    gamma: float = 50.0
    lam: float = 1.0
    lr: float = 5e-4
    b1: float = 0.5
    b2: float = 0.9
    adam_eps: float = 1e-7
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    grad_mode: str = "straight-through"
    threshold_eps: float = 1e-6
    val_fraction: float = 0.05
    r_channels: tuple = (32, 64, 128)
    bottleneck: int = 128
    m_channels: tuple = (16, 32)
    negative_slope: float = 0.2
    out_init_scale: float = 0.1
    cae_square: int = 10

    def __post_init__(self):
        ThresholdConfig(self.t, self.threshold_eps, self.grad_mode)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = ",".join(map(str, v))
        return d

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown training key {k!r}")
            default = kinds[k].default
            if isinstance(default, tuple):
                v = tuple(int(p) for p in str(v).split(",")) if not isinstance(v, tuple) else v
            elif isinstance(default, bool):
                v = str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            kw[k] = v
        return cls(**kw)

    def threshold_config(self):
        return ThresholdConfig(self.t, self.threshold_eps, self.grad_mode)

    def adam(self):
        return AdamState(lr=self.lr, b1=self.b1, b2=self.b2, eps=self.adam_eps)


@dataclass
class EpochRecord:
    epoch: int
    L_mask: float
    L_cont: float
    L_rec: float
    val_auc: dict = field(default_factory=dict)
    checkpoint: str = ""


@dataclass
class Models:
    R: object
    MM: object = None
    adam: dict = field(default_factory=dict)


def seed_streams(seed):
    """Independent generators for reconstructor init, mask init, shuffling and random masks."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def build_models(input_shape, cfg, with_mask=True):
    r_rng, m_rng, _, _ = seed_streams(cfg.seed)
    R = build_reconstructor(ReconstructorConfig(input_shape, cfg.r_channels, cfg.bottleneck,
                                                cfg.negative_slope,
                                                out_init_scale=cfg.out_init_scale), r_rng)
    models = Models(R=R, adam={"R": cfg.adam()})
    if with_mask:
        models.MM = MaskModule.build(MaskGeneratorConfig(input_shape, cfg.m_channels, cfg.negative_slope),
                                     cfg.threshold_config(), m_rng)
        models.adam["M"] = cfg.adam()
    return models


def _check_finite(terms, where):
    vals = (terms.L_mask, terms.L_cont, terms.L_rec)
    if not all(np.isfinite(v) for v in vals):
        raise NonFiniteError(f"non-finite loss in {where}: L_mask={vals[0]} L_cont={vals[1]} L_rec={vals[2]}")


def reconstructor_step(x, mask, R, state, cfg, update=True):
    """One descent step of R on ``L_mask + gamma L_cont + lam L_rec`` for fixed masks."""
    x_m = apply_mask(x, mask)
    xhat_m, tape_m = R.forward(x_m, "train")
    xhat, tape = R.forward(x, "train")
    e_mask, e_cont, e_rec = sample_errors(x, xhat_m, xhat, mask)
    terms = LossTerms(float(e_mask.mean()), float(e_cont.mean()), float(e_rec.mean()), cfg.gamma, cfg.lam)
    _check_finite(terms, "reconstructor step")
    if update:
        _, grads = R.backward(tape_m, adversarial_grad(x, xhat_m, mask, cfg.gamma))
        if cfg.lam != 0:
            _, grads_rec = R.backward(tape, rec_grad(x, xhat, cfg.lam))
            grads = {k: grads[k] + grads_rec[k] for k in grads}
        adam_step(state, R.parameters(), grads)
    return terms


def mask_module_grads(x, R, MM, cfg):
    """Gradients of ``-(L_mask + gamma L_cont)`` for the generator parameters.

    R runs in train mode without touching its running statistics.  Also
    returns the adversarial objective value.
    """
    mask, A, s, tape_a = MM(x, "train")
    x_m = apply_mask(x, mask)
    xhat_m, tape_r = R.forward(x_m, "train", update_stats=False)
    e_mask, e_cont, _ = sample_errors(x, xhat_m, None, mask)
    objective = float(e_mask.mean() + cfg.gamma * e_cont.mean())
    if not np.isfinite(objective):
        raise NonFiniteError(f"non-finite mask objective {objective}")
    g_out = adversarial_grad(x, xhat_m, mask, cfg.gamma)
    g_xm, _ = R.backward(tape_r, g_out)
    _, grads = MM.backward(tape_a, -g_xm, x, A, mask, s)
    return grads, objective


def train_step(x, models, cfg, update_R=True, update_MM=True):
    """One alternating update on batch ``x``; returns the LossTerms seen by R."""
    R, MM = models.R, models.MM
    mask, _, _, _ = MM(x, "train", update_stats=False)
    terms = reconstructor_step(x, mask, R, models.adam["R"], cfg, update=update_R)
    if update_MM:
        grads, _ = mask_module_grads(x, R, MM, cfg)
        adam_step(models.adam["M"], MM.generator.parameters(), grads)
    return terms


def random_square_masks(n, hw, size, rng):
    """Masks with one ``size`` x ``size`` zero square at a uniform valid position."""
    h, w = hw
    if h < size or w < size:
        raise ConfigError(f"image {h}x{w} smaller than the {size}x{size} square")
    tops = rng.integers(0, h - size + 1, size=n)
    lefts = rng.integers(0, w - size + 1, size=n)
    mask = np.ones((n, 1, h, w), dtype=np.float32)
    for i in range(n):
        mask[i, 0, tops[i]:tops[i] + size, lefts[i]:lefts[i] + size] = 0.0
    return mask


def cae_step(x, models, cfg, rng):
    mask = random_square_masks(len(x), x.shape[2:], cfg.cae_square, rng)
    return reconstructor_step(x, mask, models.R, models.adam["R"], cfg)


def eval_masks(models, cfg, x, kind):
    """Mask source used for scoring: learned masks, or fixed seeded squares for the CAE."""
    if kind == "oled":
        return models.MM
    rng = np.random.default_rng([cfg.seed, 7])
    return random_square_masks(len(x), x.shape[2:], cfg.cae_square, rng)


def evaluate(models, cfg, x, y, kind="oled"):
    ss = score_samples(models.R, eval_masks(models, cfg, x, kind), x, y)
    return aggregate_scores(ss)


def write_epoch_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "L_mask", "L_cont", "L_rec"] + [f"val_auc_{s}" for s in SCORE_TYPES])
        for r in records:
            w.writerow([r.epoch, repr(r.L_mask), repr(r.L_cont), repr(r.L_rec)]
                       + [repr(r.val_auc.get(s, float("nan"))) for s in SCORE_TYPES])


@dataclass
class TrainResult:
    records: list
    best_epoch: int
    models: Models
    best_checkpoint: str = ""


def _fit(split, cfg, kind, out_dir=None, extra_config=None):
    x_fit = split.fit
    if len(x_fit) == 0:
        raise ConfigError("empty training split")
    models = build_models(x_fit.shape[1:], cfg, with_mask=(kind == "oled"))
    _, _, shuffle_rng, mask_rng = seed_streams(cfg.seed)
    has_val = len(getattr(split, "val_y", [])) and len(set(np.asarray(split.val_y).tolist())) == 2
    if out_dir:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    records, best, best_state = [], None, None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(x_fit))
        sums = np.zeros(3)
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = x_fit[idx]
            terms = train_step(xb, models, cfg) if kind == "oled" else cae_step(xb, models, cfg, mask_rng)
            sums += (terms.L_mask, terms.L_cont, terms.L_rec)
            n_batches += 1
        means = sums / max(n_batches, 1)
        val_auc = {}
        if has_val:
            _, metrics = evaluate(models, cfg, split.val_x, split.val_y, kind)
            val_auc = {m["score_type"]: m["auc"] for m in metrics}
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), val_auc)
        if out_dir:
            rec.checkpoint = os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}.ckpt")
            snapshot = dict(extra_config or {}, **cfg.to_dict(), model=kind, epoch=epoch,
                            input_shape=",".join(map(str, x_fit.shape[1:])))
            save_checkpoint(rec.checkpoint, model_entries(models.R, models.MM, models.adam), snapshot)
        records.append(rec)
        log.info("epoch %d  L_mask=%.4f L_cont=%.4f L_rec=%.4f val_auc=%s", epoch, *means,
                 {k: round(v, 4) for k, v in val_auc.items()})
        score = val_auc.get("mask", -np.inf) if has_val else epoch
        if best is None or score > best[0]:
            best = (score, epoch)
            # copies: the optimizer updates parameters in place
            best_state = {k: v.copy() for k, v in model_entries(models.R, models.MM).items()}
    load_into(best_state, models.R, models.MM)
    result = TrainResult(records, best[1], models)
    if out_dir:
        write_epoch_csv(os.path.join(out_dir, "epochs.csv"), records)
        result.best_checkpoint = records[best[1] - 1].checkpoint
        with open(os.path.join(out_dir, "best_epoch.txt"), "w") as f:
            f.write(format_config({"epoch": best[1], "checkpoint": os.path.basename(result.best_checkpoint)}))
    return result


def train(split, cfg, out_dir=None, extra_config=None):
    """Adversarially train R and the mask module; keep the best validation epoch.

    The best epoch maximizes validation AUC of the mask score; without a
    two-class validation set the last epoch is kept.
    """
    return _fit(split, cfg, "oled", out_dir, extra_config)


def train_cae_baseline(split, cfg, out_dir=None, extra_config=None):
    """Train R alone on images with one random zeroed square each."""
    return _fit(split, cfg, "cae", out_dir, extra_config)


def load_models(path, input_shape=None):
    """Rebuild models and configuration from a checkpoint file."""
    config, entries = load_checkpoint(path)
    kind = config.get("model", "oled")
    cfg = TrainConfig.from_dict({k: v for k, v in config.items() if k in TrainConfig.__dataclass_fields__})
    if input_shape is None:
        input_shape = tuple(int(v) for v in config["input_shape"].split(","))
    models = build_models(tuple(input_shape), cfg, with_mask=(kind == "oled"))
    load_into(entries, models.R, models.MM)
    return models, cfg, kind, config

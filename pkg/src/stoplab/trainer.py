"""Pretraining loop, AdamW, schedules and ablation sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, InternalError, StopLabError, TrainingDiverged

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "lr", "wd", "norm_A", "norm_m_tilde")
ABLATION_COLUMNS = (
    "variant", "embed_kind", "sigma", "noise_target", "reg", "reg_coeff", "seed", "steps",
    "final_loss", "norm_A", "norm_m_tilde", "acc_last_layer", "acc_last4_concat", "best", "status",
)


# ---------------------------------------------------------------------------
# schedules and optimizer

def schedule(step, total, warmup, lo, hi, kind):
    """Learning-rate or weight-decay value at ``step``.

    ``kind="lr"``: linear ramp 0 -> ``hi`` over ``warmup`` steps, then cosine
    decay to 0 at ``total`` (``lo`` is ignored).  ``kind="wd"``: cosine ramp
    from ``lo`` at step 0 to ``hi`` at ``total``.
    """
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total steps ({total})")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if kind == "lr":
        if step < warmup:
            return hi * step / warmup
        if total == warmup:
            return hi
        progress = (step - warmup) / (total - warmup)
        return hi * 0.5 * (1.0 + math.cos(math.pi * progress))
    if kind == "wd":
        if total == 0:
            return hi
        return hi + (lo - hi) * 0.5 * (1.0 + math.cos(math.pi * step / total))
    raise ConfigError(f"unknown schedule kind {kind!r}")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


def decays(name, param):
    """Weight decay applies to matrices only; biases, norms, m_tilde and position tables are exempt."""
    return param.ndim >= 2 and name != "pos.psi"


def adamw_step(params, opt, lr, wd):
    """One AdamW update over ``params`` (a name -> Tensor map) using their ``.grad``."""
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        if p.grad is None:
            raise InternalError(f"parameter {name!r} has no gradient")
        g = p.grad
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        data = p.data
        if wd and decays(name, p):
            data = data * (1.0 - lr * wd)
        p.data = (data - lr * update).astype(p.data.dtype, copy=False)


def regularized_loss(base_loss, A, reg="none", coeff=0.0):
    """``base + coeff * sum|A|`` (l1) or ``base + coeff * sum A^2`` (l2)."""
    if coeff < 0:
        raise ConfigError(f"regularization coefficient must be >= 0, got {coeff}")
    if reg == "none" or coeff == 0:
        return base_loss
    if reg == "l1":
        penalty = T.sum_(T.abs_(A))
    elif reg == "l2":
        penalty = T.sum_(T.square(A))
    else:
        raise ConfigError(f"unknown regularizer {reg!r}")
    return T.add(base_loss, T.scale(penalty, coeff))


# ---------------------------------------------------------------------------
# config plumbing

def model_config(cfg, grid_h, grid_w, patch_dim):
    return M.ModelConfig(
        grid_h=grid_h,
        grid_w=grid_w,
        patch_dim=patch_dim,
        enc_depth=cfg["model.enc_depth"],
        d_e=cfg["model.d_e"],
        enc_heads=cfg["model.enc_heads"],
        pred_depth=cfg["model.pred_depth"],
        d_p=cfg["model.d_p"],
        pred_heads=cfg["model.pred_heads"],
        mlp_ratio=cfg["model.mlp_ratio"],
        embed_kind=cfg["stop.embed_kind"],
        sigma=cfg["stop.sigma"],
        noise_target=cfg["stop.noise_target"],
        target_mode=cfg["model.target_mode"],
        target_norm=cfg["model.target_norm"],
        pixel_mean=cfg["data.pixel_mean"],
        pixel_std=cfg["data.pixel_std"],
    )


def load_dataset(cfg, split="train"):
    """Train or test :class:`~stoplab.data.ImageBatch` described by ``cfg``."""
    if cfg["data.source"] == "synthetic":
        n = cfg["data.n_train"] if split == "train" else cfg["data.n_test"]
        seed = cfg["data.seed"] + (0 if split == "train" else 1)
        side = cfg["data.image_size"]
        return D.generate_synthetic(n, side, side, cfg["data.num_classes"], seed, channels=cfg["data.channels"])
    if cfg["data.source"] == "idx":
        images = cfg[f"data.{split}_images"]
        labels = cfg[f"data.{split}_labels"] or None
        if not images:
            raise ConfigError(f"data.{split}_images must be set when data.source = idx")
        return D.load_idx(images, labels)
    raise ConfigError(f"unknown data.source {cfg['data.source']!r}")


def load_state(cfg, path, dataset=None):
    """Model state stored at checkpoint ``path`` for a run configured by ``cfg``."""
    dataset = dataset if dataset is not None else load_dataset(cfg, "train")
    grid = D.patchify(dataset.subset(slice(0, 1)), cfg["data.patch"])
    config = model_config(cfg, grid.grid_h, grid.grid_w, grid.patches.shape[-1])
    state, _ = M.load_checkpoint(path, config, seed=cfg["train.seed"])
    return state


def sample_mask(cfg, grid_h, grid_w, rng, batch):
    def one():
        if cfg["data.mask"] == "block":
            return D.sample_block_mask(
                grid_h, grid_w, cfg["data.num_targets"],
                (cfg["data.target_scale_lo"], cfg["data.target_scale_hi"]),
                (cfg["data.aspect_lo"], cfg["data.aspect_hi"]), rng,
            )
        if cfg["data.mask"] == "random":
            return D.sample_random_mask(grid_h * grid_w, cfg["data.mask_ratio"], rng)
        raise ConfigError(f"unknown data.mask {cfg['data.mask']!r}")

    if cfg["data.per_image_masks"]:
        return D.stack_masks([one() for _ in range(batch)])
    return one()


def step_rngs(seed, step):
    """Independent generators for (batch + mask) and positional noise at ``step``.

    Keying on the step number makes a resumed run draw exactly what the
    uninterrupted run would have drawn.
    """
    return np.random.default_rng([seed, step, 0]), np.random.default_rng([seed, step, 1])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainMetrics:
    rows: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def append(self, row, elapsed):
        self.rows.append(row)
        self.wall_time.append(elapsed)

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    def last(self):
        return self.rows[-1] if self.rows else None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for r in self.rows:
                writer.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path):
        metrics = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                row = {"step": int(rec["step"])}
                row.update({c: float(rec[c]) for c in METRIC_COLUMNS[1:]})
                metrics.append(row, 0.0)
        return metrics


def _grad_norms(params):
    return {k: float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64)))) for k, p in params.items() if p.grad is not None}


def _checkpoint_extra(opt):
    extra = {"meta/step": np.array(opt.step, dtype=np.float32)}
    for k in opt.m:
        extra[f"opt/m/{k}"] = opt.m[k]
        extra[f"opt/v/{k}"] = opt.v[k]
    return extra


class Pretrainer:
    """Runs the masked-prediction training loop for one :class:`RunConfig`.

    Each iteration: sample images, patchify, mask, encode the context,
    build context and masked predictor tokens (with stochastic positions
    when enabled), predict, regress onto target-encoder features, take an
    AdamW step over every trainable parameter, then update the EMA target.
    """

    def __init__(self, cfg, run_dir=None, dataset=None):
        self.cfg = cfg if isinstance(cfg, RunConfig) else RunConfig(cfg)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dataset = dataset if dataset is not None else load_dataset(self.cfg, "train")
        self.grid = D.patchify(self.dataset.subset(slice(0, 1)), self.cfg["data.patch"])
        self.patches = D.patchify(self.dataset, self.cfg["data.patch"]).patches
        self.model_config = model_config(self.cfg, self.grid.grid_h, self.grid.grid_w, self.patches.shape[-1])
        self.state = M.init_model(self.model_config, seed=self.cfg["train.seed"])
        self.opt = OptimState(betas=(self.cfg["optim.beta1"], self.cfg["optim.beta2"]), eps=self.cfg["optim.eps"])
        self.metrics = TrainMetrics()
        self.step = 0

    # -- persistence ------------------------------------------------------
    def save(self, path):
        M.save_checkpoint(path, self.state, _checkpoint_extra(self.opt))

    def resume(self, path):
        state, extra = M.load_checkpoint(path, self.model_config, seed=self.cfg["train.seed"])
        self.state = state
        self.step = int(extra.pop("meta/step"))
        self.opt.step = self.step
        self.opt.m = {k[len("opt/m/"):]: v for k, v in extra.items() if k.startswith("opt/m/")}
        self.opt.v = {k[len("opt/v/"):]: v for k, v in extra.items() if k.startswith("opt/v/")}
        if self.run_dir is not None and (self.run_dir / "metrics.csv").exists():
            previous = TrainMetrics.read_csv(self.run_dir / "metrics.csv")
            for row in previous.rows:
                if row["step"] <= self.step:
                    self.metrics.append(row, 0.0)
        return self

    # -- loop ---------------------------------------------------------------
    def train_step(self):
        cfg = self.cfg
        total = cfg["train.steps"]
        warmup = int(round(cfg["optim.warmup_frac"] * total))
        k = self.step
        data_rng, noise_rng = step_rngs(cfg["train.seed"], k)
        batch = min(cfg["optim.batch"], len(self.patches))
        idx = np.sort(data_rng.choice(len(self.patches), size=batch, replace=False))
        patches = self.patches[idx]
        mask = sample_mask(cfg, self.grid.grid_h, self.grid.grid_w, data_rng, batch)

        trainable = self.state.trainable()
        for p in trainable.values():
            p.zero_grad()
        loss, _, _ = M.forward_loss(self.state, patches, mask, rng=noise_rng)
        total_loss = regularized_loss(loss, self.state.A, cfg["stop.reg"], cfg["stop.reg_coeff"])
        lr = schedule(k + 1, total, warmup, 0.0, cfg["optim.lr"], "lr")
        wd = schedule(k, total, warmup, cfg["optim.wd_lo"], cfg["optim.wd_hi"], "wd")
        value = float(loss.data)
        if not np.isfinite(float(total_loss.data)):
            raise TrainingDiverged(
                f"loss became {value} at step {k}",
                {"step": k, "lr": lr, "wd": wd, "loss": value},
            )
        total_loss.backward()
        grad_norms = _grad_norms(trainable)
        if not all(np.isfinite(v) for v in grad_norms.values()):
            raise TrainingDiverged(f"non-finite gradient at step {k}", {"step": k, "lr": lr, "grad_norms": grad_norms})
        adamw_step(trainable, self.opt, lr, wd)
        M.ema_update(self.state.target, self.state.params,
                     M.momentum_schedule(k + 1, total, cfg["optim.ema_lo"], cfg["optim.ema_hi"]))
        self.step += 1
        return {
            "step": self.step,
            "loss": value,
            "lr": lr,
            "wd": wd,
            "norm_A": float(np.linalg.norm(self.state.A.data.astype(np.float64))),
            "norm_m_tilde": float(np.linalg.norm(self.state.m_tilde.data.astype(np.float64))),
        }

    def run(self, until=None):
        """Train up to step ``until`` (default: ``train.steps``), checkpointing along the way."""
        cfg = self.cfg
        until = cfg["train.steps"] if until is None else min(until, cfg["train.steps"])
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "artifacts").mkdir(exist_ok=True)
            (self.run_dir / "config.resolved").write_text(cfg.to_text())
        every = cfg["train.ckpt_every"]
        t0 = time.perf_counter()
        while self.step < until:
            try:
                row = self.train_step()
            except TrainingDiverged as exc:
                if self.run_dir is not None:
                    (self.run_dir / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2, default=float))
                    self.metrics.write_csv(self.run_dir / "metrics.csv")
                raise
            self.metrics.append(row, time.perf_counter() - t0)
            if self.run_dir is not None and every and self.step % every == 0 and self.step < cfg["train.steps"]:
                self.save(self.run_dir / f"ckpt_step{self.step}.bin")
                self.metrics.write_csv(self.run_dir / "metrics.csv")
            if self.step % 100 == 0:
                logger.info("step %d loss %.4f |A| %.3f |m| %.3f", self.step, row["loss"], row["norm_A"], row["norm_m_tilde"])
        if self.run_dir is not None:
            self.metrics.write_csv(self.run_dir / "metrics.csv")
            if self.step >= cfg["train.steps"]:
                self.save(self.run_dir / "final.bin")
        return self.state, self.metrics


def pretrain(config, run_dir=None, resume=None, dataset=None):
    """Train from scratch (or from checkpoint ``resume``); returns ``(state, metrics)``."""
    trainer = Pretrainer(config, run_dir=run_dir, dataset=dataset)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


# ---------------------------------------------------------------------------
# ablations

def _variant_name(overrides):
    return ",".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items()) or "base"


def expand_sweep(sweep):
    """Turn ``{"stop.sigma": [0, 0.25], ...}`` into a list of override dicts (cartesian product)."""
    variants = [{}]
    for key, values in sweep.items():
        variants = [dict(v, **{key: val}) for v in variants for val in values]
    return variants


def run_ablation_suite(base_config, sweep, seeds=(0,), run_root=None, csv_path=None, probe=True):
    """Train and probe every variant in ``sweep`` for every seed; one CSV row per run.

    ``sweep`` is either a mapping of config key to a list of values (expanded
    as a cartesian product) or an explicit list of override dicts.  A failed
    variant is recorded with its error message and the suite continues.
    """
    from .evaluation import probe_state

    base = base_config if isinstance(base_config, RunConfig) else RunConfig(base_config)
    variants = expand_sweep(sweep) if isinstance(sweep, dict) else list(sweep)
    train_set = load_dataset(base, "train") if base["data.source"] == "synthetic" else None
    test_set = load_dataset(base, "test") if (probe and base["data.source"] == "synthetic") else None
    rows = []
    for overrides in variants:
        for seed in seeds:
            cfg = base.override(dict(overrides, **{"train.seed": seed}))
            row = {c: "" for c in ABLATION_COLUMNS}
            row.update(
                variant=_variant_name(overrides), embed_kind=cfg["stop.embed_kind"], sigma=cfg["stop.sigma"],
                noise_target=cfg["stop.noise_target"], reg=cfg["stop.reg"], reg_coeff=cfg["stop.reg_coeff"],
                seed=seed, steps=cfg["train.steps"],
            )
            run_dir = None
            if run_root is not None:
                run_dir = Path(run_root) / f"{row['variant'].replace('=', '-').replace(',', '_')}_seed{seed}"
            try:
                ds = train_set if train_set is not None else load_dataset(cfg, "train")
                trainer = Pretrainer(cfg, run_dir=run_dir, dataset=ds)
                state, metrics = trainer.run()
                last = metrics.last()
                row.update(final_loss=last["loss"], norm_A=last["norm_A"], norm_m_tilde=last["norm_m_tilde"])
                if probe:
                    test = test_set if test_set is not None else load_dataset(cfg, "test")
                    reports = probe_state(state, cfg, ds, test)
                    row["acc_last_layer"] = reports["last_layer"].test_acc
                    row["acc_last4_concat"] = reports["last4_concat"].test_acc if "last4_concat" in reports else ""
                    row["best"] = max(r.test_acc for r in reports.values())
                row["status"] = "ok"
            except StopLabError as exc:
                row["status"] = f"failed: {exc}"
                logger.warning("variant %s seed %d failed: %s", row["variant"], seed, exc)
            rows.append(row)
            if csv_path is not None:
                write_ablation_csv(csv_path, rows)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in ABLATION_COLUMNS})

"""Two-group training protocol with fully deterministic replay.

Each batch slot holds one HR image, one sampled degradation and two
disjoint crops of the image. The first crop's LR feeds the encoder and the
generator; the second crop is the degrader's reproduction target, so the
representation must carry degradation information that transfers across
content. Every random draw is keyed by (seed, step index), which makes
checkpoint/resume bit-exact and whole runs byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Adam, ParameterError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .degradation import MODES, DegradationSpec, degrade, sample_spec
from .losses import (
    ConfigurationError,
    LossWeights,
    TargetDistribution,
    loss_ed,
    loss_kl,
    loss_rd,
    loss_sr,
    modulation_weight,
    total_loss,
)
from .memtune import keep_large_buffers_resident
from .models import MIN_ENCODER_INPUT, ArchSpec, Model

logger = logging.getLogger(__name__)

CSV_HEADER = "step,loss_rd,loss_ed,loss_sr,loss_total,mean_w,lr,ms"


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; the message carries a snapshot."""


@dataclass
class TrainConfig:
    """Everything needed to reproduce a run, JSON-serializable with flat keys."""

    batch_size: int = 8
    patch_size: int = 32
    m_targets: int = 64
    lambda_ed: float = 0.01
    epochs: int = 10
    iters_per_epoch: int = 200
    learning_rate: float = 1e-4
    schedule_period: int = 4
    mode: str = "isotropic"
    scale: int = 2
    sigma_set: list | None = None
    seed_init: int = 0
    seed_data: int = 1
    seed_noise: int = 2
    seed_targets: int = 3
    loss_rd: bool = True
    loss_ed: bool = True
    ed_target: str = "gaussian"
    kl_substitute: bool = False
    modulated_sr: bool = True
    c_repr: int = 16
    trunk_width: int = 12
    trunk_blocks: int = 3
    mlp_hidden: int = 64
    enc_channels: list = field(default_factory=lambda: [16, 16, 32, 32])
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "patch_size", "m_targets", "iters_per_epoch",
                     "schedule_period", "scale", "c_repr", "trunk_width",
                     "trunk_blocks", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patch_size < MIN_ENCODER_INPUT:
            raise ConfigurationError(
                f"patch_size must be >= {MIN_ENCODER_INPUT}, got {self.patch_size}"
            )
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown degradation mode {self.mode!r}")
        if self.sigma_set is not None and (
            not self.sigma_set or min(self.sigma_set) <= 0
        ):
            raise ConfigurationError("sigma_set must be a non-empty list of positive widths")
        self.loss_weights()
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_ed=self.lambda_ed,
            use_rd=self.loss_rd,
            use_ed=self.loss_ed,
            use_kl=self.kl_substitute,
            modulated_sr=self.modulated_sr,
            ed_target=self.ed_target,
        ).validate()

    def arch(self) -> ArchSpec:
        return ArchSpec(
            scale=self.scale,
            c_repr=self.c_repr,
            enc_channels=tuple(self.enc_channels),
            trunk_width=self.trunk_width,
            trunk_blocks=self.trunk_blocks,
            mlp_hidden=self.mlp_hidden,
            kl_head=self.kl_substitute,
        )

    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    def lr_at_epoch(self, epoch: int) -> float:
        return self.learning_rate * 0.5 ** (epoch // self.schedule_period)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainRecord:
    """One optimizer step's scalars. The ms column exists for layout
    stability but is always 0 so logs stay byte-reproducible."""

    step: int
    loss_rd: float
    loss_ed: float
    loss_sr: float
    loss_total: float
    mean_w: float
    lr: float
    ms: float = 0.0

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.loss_rd:.17g},{self.loss_ed:.17g},"
            f"{self.loss_sr:.17g},{self.loss_total:.17g},{self.mean_w:.17g},"
            f"{self.lr:.17g},{self.ms:g}"
        )


@dataclass
class Batch:
    """Two crop groups with pairwise-shared degradations (NCHW float64)."""

    enc_hr: np.ndarray
    enc_lr: np.ndarray
    deg_hr: np.ndarray
    deg_lr: np.ndarray
    specs: list
    rects: list  # ((y1, x1), (y2, x2)) HR-space corners per slot, for tests


def _nchw(patches: list) -> np.ndarray:
    return np.ascontiguousarray(np.stack(patches).transpose(0, 3, 1, 2))


def usable_images(images: list, cfg: TrainConfig) -> list:
    """Images large enough for two disjoint HR crops; warns about the rest."""
    hr_patch = cfg.patch_size * cfg.scale
    out = []
    for i, img in enumerate(images):
        h, w = img.shape[:2]
        if min(h, w) >= hr_patch and max(h, w) >= 2 * hr_patch:
            out.append(img)
        else:
            logger.warning(
                "image %d (%dx%d) too small for two disjoint %dpx patches, skipped",
                i, h, w, hr_patch,
            )
    if not out:
        raise ParameterError(
            f"no image can host two disjoint {hr_patch}px patches"
        )
    return out


def _slot_spec(cfg: TrainConfig, rng) -> DegradationSpec:
    if cfg.sigma_set is not None:
        sigma = float(cfg.sigma_set[rng.integers(len(cfg.sigma_set))])
        return DegradationSpec(sigma, sigma, 0.0, 0.0, cfg.scale)
    return sample_spec(rng, cfg.mode, cfg.scale)


def _disjoint_crops(img, hr_patch: int, rng):
    """Two non-overlapping hr_patch crops, separated along one image axis."""
    h, w = img.shape[:2]
    axes = [a for a, size in ((0, h), (1, w)) if size >= 2 * hr_patch]
    axis = axes[rng.integers(len(axes))] if len(axes) > 1 else axes[0]
    size = h if axis == 0 else w
    split = int(rng.integers(hr_patch, size - hr_patch + 1))
    lo = int(rng.integers(0, split - hr_patch + 1))
    hi = int(rng.integers(split, size - hr_patch + 1))
    first_low = bool(rng.integers(2))
    a_main, b_main = (lo, hi) if first_low else (hi, lo)
    other = w if axis == 0 else h
    a_off = int(rng.integers(0, other - hr_patch + 1))
    b_off = int(rng.integers(0, other - hr_patch + 1))
    if axis == 0:
        ra, rb = (a_main, a_off), (b_main, b_off)
    else:
        ra, rb = (a_off, a_main), (b_off, b_main)
    crop = lambda r: np.ascontiguousarray(
        img[r[0] : r[0] + hr_patch, r[1] : r[1] + hr_patch]
    )
    return crop(ra), crop(rb), ra, rb


def build_batch(images: list, cfg: TrainConfig, rng, noise_key=(0, 0)) -> Batch:
    """Assemble one two-group batch.

    Args:
        images: usable HR images (see `usable_images`).
        cfg: training configuration.
        rng: generator driving image choice, degradation draw and crops.
        noise_key: (noise_seed, step) prefix for the per-slot noise streams.

    Per slot, crop 1 goes to the encoder/generator group and crop 2 to the
    degrader group; both share the slot's degradation.
    """
    if not images:
        raise ParameterError("build_batch: empty image list")
    hr_patch = cfg.patch_size * cfg.scale
    enc_hr, enc_lr, deg_hr, deg_lr, specs, rects = [], [], [], [], [], []
    for slot in range(cfg.batch_size):
        img = images[rng.integers(len(images))]
        spec = _slot_spec(cfg, rng)
        crop1, crop2, r1, r2 = _disjoint_crops(img, hr_patch, rng)
        lr1 = degrade(crop1, spec, [*noise_key, slot, 0])
        lr2 = degrade(crop2, spec, [*noise_key, slot, 1])
        enc_hr.append(crop1)
        enc_lr.append(lr1)
        deg_hr.append(crop2)
        deg_lr.append(lr2)
        specs.append(spec)
        rects.append((r1, r2))
    return Batch(
        enc_hr=_nchw(enc_hr), enc_lr=_nchw(enc_lr),
        deg_hr=_nchw(deg_hr), deg_lr=_nchw(deg_lr),
        specs=specs, rects=rects,
    )


def _require_finite(step: int, values: dict):
    bad = {k: v for k, v in values.items() if v is not None and not np.isfinite(v)}
    if bad:
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: "
            + ", ".join(f"{k}={v}" for k, v in values.items() if v is not None)
        )


def train_step(model: Model, optimizer: Adam, batch: Batch, cfg: TrainConfig,
               dist: TargetDistribution, step: int) -> TrainRecord:
    """One joint optimization step over encoder, degrader and generator."""
    weights = cfg.loss_weights()
    lr1 = Tensor(batch.enc_lr)

    logvar = None
    if cfg.kl_substitute:
        f, logvar = model.encode_with_logvar(lr1)
    else:
        f = model.encode(lr1)

    rd = ed = kl = None
    w_arr = None
    if cfg.loss_rd:
        pred_lr2 = model.reproduce(Tensor(batch.deg_hr), f)
        rd = loss_rd(batch.deg_lr, pred_lr2)
        if cfg.modulated_sr:
            w_arr = modulation_weight(batch.deg_lr, pred_lr2).w
    if cfg.loss_ed:
        ed = loss_ed(f, dist.sample(cfg.m_targets, stream=step))
    if cfg.kl_substitute:
        kl = loss_kl(f, logvar)

    sr = model.super_resolve(lr1, f)
    srl = loss_sr(sr, batch.enc_hr, w_arr)

    total = total_loss(weights, rd=rd, ed=ed, kl=kl, sr=srl)
    scalars = {
        "loss_rd": None if rd is None else rd.item(),
        "loss_ed": ed.item() if ed is not None else (kl.item() if kl is not None else None),
        "loss_sr": srl.item(),
        "loss_total": total.item(),
    }
    _require_finite(step, scalars)

    total.backward()
    optimizer.step()
    return TrainRecord(
        step=step,
        loss_rd=scalars["loss_rd"] if scalars["loss_rd"] is not None else 0.0,
        loss_ed=scalars["loss_ed"] if scalars["loss_ed"] is not None else 0.0,
        loss_sr=scalars["loss_sr"],
        loss_total=scalars["loss_total"],
        mean_w=float(np.mean(w_arr)) if w_arr is not None else 1.0,
        lr=optimizer.state.learning_rate,
    )


def train(cfg: TrainConfig, images: list, out_dir, resume_from=None):
    """Run the configured number of steps; write log.csv and checkpoints.

    Args:
        cfg: validated training configuration.
        images: HR image list (HWC floats in [0, 1]).
        out_dir: destination for log.csv, config.json and checkpoints.
        resume_from: optional checkpoint path; continues bit-exactly as if
            the run had never stopped, appending to an existing log.

    Returns:
        (model, records) with records covering only the steps run here.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    model = Model(cfg.arch(), seed=cfg.seed_init)
    start_step = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_arch=cfg.arch())
        model.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
        optimizer = ck.build_adam(model.parameters())
        start_step = int(ck.meta["step"])
    else:
        optimizer = Adam(list(model.parameters().values()),
                         learning_rate=cfg.learning_rate)

    pool = usable_images(images, cfg)
    dist = TargetDistribution(cfg.ed_target, cfg.c_repr, cfg.seed_targets)
    total_steps = cfg.total_steps()
    records = []

    log_path = out_dir / "log.csv"
    fresh_log = start_step == 0 or not log_path.exists()
    t0 = time.perf_counter()
    with open(log_path, "w" if fresh_log else "a") as log:
        if fresh_log:
            log.write(CSV_HEADER + "\n")
        for step in range(start_step, total_steps):
            epoch = step // cfg.iters_per_epoch
            optimizer.state.learning_rate = cfg.lr_at_epoch(epoch)
            rng = np.random.default_rng([cfg.seed_data, step])
            batch = build_batch(pool, cfg, rng, noise_key=(cfg.seed_noise, step))
            rec = train_step(model, optimizer, batch, cfg, dist, step)
            records.append(rec)
            log.write(rec.csv_row() + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_step{step + 1:06d}.rdck",
                                model, optimizer, meta={"step": step + 1})
    elapsed = time.perf_counter() - t0
    steps_run = total_steps - start_step
    if steps_run:
        logger.info("ran %d steps in %.1fs (%.0f ms/step)",
                     steps_run, elapsed, 1000 * elapsed / steps_run)
    save_checkpoint(out_dir / "checkpoint.rdck", model, optimizer,
                    meta={"step": total_steps})
    return model, records

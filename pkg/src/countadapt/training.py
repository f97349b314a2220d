"""Losses and the alternating adversarial training loop.

The estimator objective on a labeled source batch plus an unlabeled target
batch is

    total = density_loss(source) + lambda_adv * adversarial_loss(target)

where density_loss is the density-map MSE plus the squared count error, and
the adversarial term is -sum(log p) over the discriminator's output on
target predictions, pushing them to be rated as source. The discriminator
itself trains on a binary cross-entropy over both domains (label 1 source,
0 target) against freshly recomputed, detached density maps.

Each training step runs the estimator sub-step with the discriminator
frozen, then the discriminator sub-step with the estimator detached, so
neither update leaks into the other.
"""

from __future__ import annotations

import hashlib
import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (ModelParams, Tensor, adam_step, add, backward,
                       clamp_min, frozen, log, mse_loss, mul, no_grad,
                       sum_per_item)
from .data import (SOURCE, TARGET, Batch, DensityKernelSpec, batch_iter,
                   source_only_batch_iter)
from .errors import ConfigError, TrainingError
from .models import (DiscriminatorConfig, EstimatorConfig, discriminator_forward,
                     estimator_forward, init_params, save_checkpoint)

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7

STEP_CSV_HEADER = "step,l_density_map,l_regression,l_adv,l_disc,source_count_mae"


def derive_seed(seed: int, label: str) -> int:
    """Stable named sub-stream of a master seed (hash-based, process-independent)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainConfig:
    lambda_adv: float = 0.01
    lr_psi: float = 1e-4
    lr_theta: float = 1e-4
    epochs: int = 1
    batch_size: int = 4
    sigma_ratio: float = 0.25
    seed: int = 0
    eval_every: int = 200
    checkpoint_dir: str | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    pixel_reduction: str = "sum"  # per-image reduction over discriminator pixels
    disc_on_gt_maps: bool = False  # variant: feed ground-truth source maps to the discriminator
    deterministic: bool = True

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ConfigError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.lr_psi <= 0 or self.lr_theta <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.pixel_reduction not in ("sum", "mean"):
            raise ConfigError(f"pixel_reduction must be 'sum' or 'mean', got {self.pixel_reduction!r}")

    def kernel_spec(self) -> DensityKernelSpec:
        return DensityKernelSpec(sigma_ratio=self.sigma_ratio)


@dataclass
class StepReport:
    step: int
    l_density_map: float
    l_regression: float
    l_adv: float
    l_disc: float
    source_count_mae: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.l_density_map!r},{self.l_regression!r},"
                f"{self.l_adv!r},{self.l_disc!r},{self.source_count_mae!r}")

    def values(self):
        return (self.l_density_map, self.l_regression, self.l_adv, self.l_disc,
                self.source_count_mae)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def density_map_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """MSE between a predicted and a ground-truth density map."""
    return mse_loss(pred, gt)


def count_regression_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Squared difference between predicted and ground-truth count (map sums)."""
    diff = add(pred.sum(), mul(gt.sum(), -1.0))
    return mul(diff, diff)


def density_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Density-map MSE plus squared count error, for one image."""
    return add(density_map_loss(pred, gt), count_regression_loss(pred, gt))


def _log_prob_sum(p: Tensor, reduction: str) -> Tensor:
    """Per-sample reduction of log p, averaged over the batch when 4-d.

    "sum" reduces each sample's pixels by summation, "mean" by averaging;
    either way a batch dimension is averaged over.
    """
    total = log(clamp_min(p, LOG_CLAMP)).sum()
    if reduction == "mean":
        return mul(total, 1.0 / p.size)
    n = p.shape[0] if p.data.ndim == 4 else 1
    return mul(total, 1.0 / n) if n > 1 else total


def adversarial_loss(disc_out_target: Tensor, reduction: str = "sum") -> Tensor:
    """-sum(log p) over the discriminator output for a target prediction.

    Minimal when the discriminator rates the map as source (p -> 1); the
    log argument is clamped at 1e-7 so a saturated discriminator cannot
    produce infinities. A batched (N,1,h,w) input yields the batch mean of
    the per-sample losses.
    """
    return mul(_log_prob_sum(disc_out_target, reduction), -1.0)


def discriminator_loss(disc_out: Tensor, domain_label: str, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy over all output pixels of one sample.

    With a single sigmoid channel p = P(source), the source term is
    -sum(log p) and the target term -sum(log(1 - p)); every pixel of a
    sample carries the sample's domain label. Batched input averages over
    the samples.
    """
    if domain_label == SOURCE:
        return mul(_log_prob_sum(disc_out, reduction), -1.0)
    if domain_label == TARGET:
        one_minus = add(mul(disc_out, -1.0), 1.0)
        return mul(_log_prob_sum(one_minus, reduction), -1.0)
    raise ConfigError(f"domain_label must be '{SOURCE}' or '{TARGET}', got {domain_label!r}")


def _stack_images(images) -> Tensor:
    return Tensor(np.stack([im.image.data for im in images]))


def _stack_grids(grids) -> Tensor:
    return Tensor(np.stack([g.grid.data for g in grids]))


# ---------------------------------------------------------------------------
# alternating optimization
# ---------------------------------------------------------------------------

def psi_substep(psi: ModelParams, theta: ModelParams | None, batch: Batch,
                cfg: TrainConfig) -> dict:
    """Estimator update: supervised density loss plus the weighted adversarial
    term, with the discriminator frozen. Returns the loss components."""
    n_src = len(batch.source)
    freeze_ctx = frozen(theta) if theta is not None else nullcontext()
    with freeze_ctx:  # must cover backward: grad accumulation checks happen there
        images = _stack_images(batch.source)
        gts = _stack_grids(batch.source_gt)
        preds = estimator_forward(psi, images)  # (N, H, W)
        l_map = density_map_loss(preds, gts)  # mean over N*H*W == batch mean of MSEs
        count_diff = add(sum_per_item(preds), mul(sum_per_item(gts), -1.0))
        l_reg = mul(mul(count_diff, count_diff).sum(), 1.0 / n_src)
        supervised = add(l_map, l_reg)

        pred_counts = preds.data.reshape(n_src, -1).sum(axis=1)
        count_mae = float(np.mean([abs(float(c) - im.count)
                                   for c, im in zip(pred_counts, batch.source)]))

        l_adv_value = None
        if cfg.lambda_adv > 0 and batch.target:
            if theta is None:
                raise ConfigError("lambda_adv > 0 needs a discriminator")
            d_t = estimator_forward(psi, _stack_images(batch.target))  # (N, H, W)
            p = discriminator_forward(theta, d_t.reshape((len(batch.target), 1) + d_t.shape[1:]))
            l_adv = adversarial_loss(p, cfg.pixel_reduction)
            l_adv_value = l_adv.item()
            total = add(supervised, mul(l_adv, cfg.lambda_adv))
        else:
            total = supervised

        values = {
            "l_density_map": l_map.item(),
            "l_regression": l_reg.item(),
            "l_adv": l_adv_value,
            "source_count_mae": count_mae,
        }
        psi.zero_grads()
        backward(total)
    adam_step(psi, cfg.lr_psi)
    return values


def theta_substep(psi: ModelParams, theta: ModelParams, batch: Batch,
                  cfg: TrainConfig) -> dict:
    """Discriminator update on freshly recomputed, detached density maps.

    Source maps come from the updated estimator (or the ground truth when
    cfg.disc_on_gt_maps is set), target maps always from the estimator.
    Also reports the adversarial-loss value on the target maps as telemetry.
    """
    n_src, n_tgt = len(batch.source), len(batch.target)
    if cfg.disc_on_gt_maps:
        maps_s = np.stack([gt.grid.data for gt in batch.source_gt])
    else:
        with no_grad():
            maps_s = estimator_forward(psi, _stack_images(batch.source)).data
    with no_grad():
        maps_t = estimator_forward(psi, _stack_images(batch.target)).data

    p_s = discriminator_forward(theta, Tensor(maps_s[:, None]))
    p_t = discriminator_forward(theta, Tensor(maps_t[:, None]))
    loss_s = discriminator_loss(p_s, SOURCE, cfg.pixel_reduction)  # mean over source samples
    loss_t = discriminator_loss(p_t, TARGET, cfg.pixel_reduction)
    # mean over all 2N samples
    l_disc = mul(add(mul(loss_s, float(n_src)), mul(loss_t, float(n_tgt))), 1.0 / (n_src + n_tgt))
    adv_telemetry = float(-np.log(np.maximum(p_t.data, LOG_CLAMP)).sum()) / n_tgt

    value = l_disc.item()
    theta.zero_grads()
    backward(l_disc)
    adam_step(theta, cfg.lr_theta)
    return {"l_disc": value, "l_adv_on_target": adv_telemetry}


def train_step(psi: ModelParams, theta: ModelParams | None, batch: Batch,
               cfg: TrainConfig, step: int = 0) -> StepReport:
    """One alternation: estimator sub-step, then discriminator sub-step."""
    psi_vals = psi_substep(psi, theta, batch, cfg)
    l_disc = 0.0
    l_adv = psi_vals["l_adv"]
    if theta is not None and batch.target:
        theta_vals = theta_substep(psi, theta, batch, cfg)
        l_disc = theta_vals["l_disc"]
        if l_adv is None:
            l_adv = theta_vals["l_adv_on_target"]
    report = StepReport(
        step=step,
        l_density_map=psi_vals["l_density_map"],
        l_regression=psi_vals["l_regression"],
        l_adv=0.0 if l_adv is None else l_adv,
        l_disc=l_disc,
        source_count_mae=psi_vals["source_count_mae"],
    )
    if not all(np.isfinite(v) for v in report.values()):
        raise TrainingError(
            f"non-finite loss at step {step}: "
            f"l_density_map={report.l_density_map}, l_regression={report.l_regression}, "
            f"l_adv={report.l_adv}, l_disc={report.l_disc}, "
            f"source_count_mae={report.source_count_mae}, "
            f"psi |w|max={max(float(np.abs(t.data).max()) for t in psi.tensors())}")
    return report


def train(source, target, cfg: TrainConfig, val_source=None, val_target=None,
          report_sink=None):
    """Full training run; returns the trained estimator and the step history.

    ``target`` may be empty only when lambda_adv is 0, which is the
    supervised no-discriminator baseline (no discriminator sub-steps at
    all). With target data present, discriminator sub-steps always run, even
    at lambda_adv = 0, so their telemetry can be compared against adapted
    runs. The discriminator itself is a training-time tool and is not
    returned; checkpoints preserve it.
    """
    if not source:
        raise ConfigError("train needs a non-empty source set")
    target = target or []
    if cfg.lambda_adv > 0 and not target:
        raise ConfigError("lambda_adv > 0 requires target-domain images")

    psi = init_params(cfg.estimator, derive_seed(cfg.seed, "init.psi"))
    theta = init_params(DiscriminatorConfig(), derive_seed(cfg.seed, "init.theta")) if target else None
    shuffle_seed = derive_seed(cfg.seed, "shuffle")
    spec = cfg.kernel_spec()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    density_cache: dict = {}
    history: list[StepReport] = []
    step = 0
    for epoch in range(cfg.epochs):
        if target:
            batches = batch_iter(source, target, cfg.batch_size, shuffle_seed, epoch,
                                 kernel_spec=spec, density_cache=density_cache)
        else:
            batches = source_only_batch_iter(source, cfg.batch_size, shuffle_seed, epoch,
                                             kernel_spec=spec, density_cache=density_cache)
        for batch in batches:
            step += 1
            report = train_step(psi, theta, batch, cfg, step=step)
            history.append(report)
            if report_sink is not None:
                report_sink(report)
            if step % cfg.eval_every == 0:
                if ckpt_dir:
                    save_checkpoint(psi, ckpt_dir / f"psi_{step}.ckpt", with_moments=True)
                    if theta is not None:
                        save_checkpoint(theta, ckpt_dir / f"theta_{step}.ckpt", with_moments=True)
                _log_validation(psi, val_source, val_target, spec, step)
    if ckpt_dir:
        save_checkpoint(psi, ckpt_dir / "psi_final.ckpt", with_moments=True)
        if theta is not None:
            save_checkpoint(theta, ckpt_dir / "theta_final.ckpt", with_moments=True)
    return psi, history


def _log_validation(psi, val_source, val_target, spec, step):
    if not val_source and not val_target:
        return
    from .evaluation import evaluate
    for label, dataset in (("source-val", val_source), ("target-val", val_target)):
        if dataset:
            report = evaluate(psi, dataset, spec)
            logger.info("step %d %s: mae=%.4f mse=%.4f", step, label, report.mae, report.mse)


def write_history_csv(history, path_or_file):
    """Stream step reports as CSV (full-precision float reprs)."""
    def _emit(f):
        f.write(STEP_CSV_HEADER + "\n")
        for report in history:
            f.write(report.csv_row() + "\n")

    if hasattr(path_or_file, "write"):
        _emit(path_or_file)
    else:
        with open(path_or_file, "w", encoding="utf-8") as f:
            _emit(f)

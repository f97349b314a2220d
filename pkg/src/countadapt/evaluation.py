"""Counting metrics (MAE, MSE, ARE) and domain-gap comparison reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .data import DensityKernelSpec
from .errors import ConfigError
from .models import ModelParams, estimator_forward, predict_count


@dataclass
class MetricsReport:
    mae: float
    mse: float
    are: float  # NaN when every image had a zero true count
    n_images: int
    n_zero_count_excluded: int
    per_image: list = field(default_factory=list)  # (true_count, predicted_count) pairs

    @property
    def rmse(self) -> float:
        """Root of MSE; a derived convenience, not one of the three base metrics."""
        return math.sqrt(self.mse)

    @property
    def are_defined(self) -> bool:
        return not math.isnan(self.are)


def metrics_from_pairs(pairs) -> MetricsReport:
    """MAE / MSE / ARE over (true_count, predicted_count) pairs.

    ARE divides by the true count, so zero-count images are excluded from it
    (and counted); with no positive-count image at all it is reported as NaN
    rather than 0. Sums run in index order so results are deterministic.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("metrics need at least one image")
    abs_sum = 0.0
    sq_sum = 0.0
    rel_sum = 0.0
    n_rel = 0
    for true_count, pred in pairs:
        err = abs(pred - true_count)
        abs_sum += err
        sq_sum += err * err
        if true_count > 0:
            rel_sum += err / true_count
            n_rel += 1
    n = len(pairs)
    return MetricsReport(
        mae=abs_sum / n,
        mse=sq_sum / n,
        are=rel_sum / n_rel if n_rel else math.nan,
        n_images=n,
        n_zero_count_excluded=n - n_rel,
        per_image=pairs,
    )


_EVAL_CHUNK = 16


def evaluate(psi: ModelParams, dataset, spec: DensityKernelSpec | None = None) -> MetricsReport:
    """Run the estimator over a dataset and score its counts.

    True counts come from the box lists and predictions from the density-map
    sum, so the kernel spec plays no role here; it is accepted so evaluation
    call sites can carry the same data configuration as training. Same-shape
    images are forwarded in chunks for speed.
    """
    if not dataset:
        raise ConfigError("evaluate needs a non-empty dataset")
    pairs = []
    uniform = len({im.image.shape for im in dataset}) == 1
    with no_grad():
        if uniform:
            for start in range(0, len(dataset), _EVAL_CHUNK):
                chunk = dataset[start:start + _EVAL_CHUNK]
                stacked = Tensor(np.stack([im.image.data for im in chunk]))
                preds = estimator_forward(psi, stacked).data
                sums = preds.reshape(len(chunk), -1).sum(axis=1)
                pairs.extend((float(im.count), float(s)) for im, s in zip(chunk, sums))
        else:
            for im in dataset:
                pred = predict_count(estimator_forward(psi, im.image))
                pairs.append((float(im.count), pred))
    return metrics_from_pairs(pairs)


@dataclass
class DomainComparison:
    source: MetricsReport
    target: MetricsReport
    ratios: dict  # metric name -> target value / source value


def compare_domains(psi: ModelParams, source_val, target_val,
                    spec: DensityKernelSpec | None = None) -> DomainComparison:
    """Evaluate the same estimator on both domains and report target/source ratios."""
    source_report = evaluate(psi, source_val, spec)
    target_report = evaluate(psi, target_val, spec)
    ratios = {}
    for name in ("mae", "mse", "are"):
        s = getattr(source_report, name)
        t = getattr(target_report, name)
        ratios[name] = t / s if s else math.inf
    return DomainComparison(source_report, target_report, ratios)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:.4f}"


def format_report(report: MetricsReport, label: str = "dataset") -> str:
    lines = [
        f"{label}: {report.n_images} images"
        + (f" ({report.n_zero_count_excluded} zero-count excluded from ARE)"
           if report.n_zero_count_excluded else ""),
        f"  mae  = {_fmt(report.mae)}",
        f"  mse  = {_fmt(report.mse)}",
        f"  are  = {_fmt(report.are)}",
        f"  rmse = {_fmt(report.rmse)} (derived from mse)",
    ]
    return "\n".join(lines)


METRICS_CSV_HEADER = "split,metric,value,n_images,n_zero_count_excluded"


def report_csv_rows(label: str, report: MetricsReport) -> list[str]:
    rows = []
    for name in ("mae", "mse", "are", "rmse"):
        value = getattr(report, name)
        rows.append(f"{label},{name},{value!r},{report.n_images},{report.n_zero_count_excluded}")
    return rows

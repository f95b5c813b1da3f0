"""Segmentation losses over voxel probability fields, with analytic gradients.

All losses are two-class (foreground/background) over a single foreground
probability field p: the background channel is 1 - p, and the binary ground
truth g supplies the one-hot labels. Each loss returns both its scalar value
and the exact derivative with respect to every p_i, so the kernels can drive
any gradient-based optimizer without an autodiff framework.

The adaptive variant re-weights the squared-denominator Dice by how rare each
voxel's absolute residual |g - p| is: residuals are histogrammed into bins of
nominal width ``bin_width``, each bin's density is its count divided by its
boundary-truncated width, and a voxel's weight is N / density(bin). Rare
residual magnitudes (typically hard, misclassified voxels) therefore get
large weights while abundant easy ones are damped. Weights are recomputed
every forward pass and treated as constants during differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import check_binary, check_geometry, check_unit_range
from .volume import VolumeGrid

# clamp floor applied to probabilities before logarithms
P_FLOOR = 1e-7

LOSS_IDS = ("dice", "focal", "dfl", "l1dfl")


@dataclass(frozen=True)
class LossConfig:
    """Shared hyperparameters for all four losses."""

    epsilon: float = 1e-5
    gamma: float = 2.0
    alpha: float = 1.0
    bin_width: float = 0.1
    focal_reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 < self.bin_width <= 1.0:
            raise ValueError(f"bin_width must be in (0, 1], got {self.bin_width}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.focal_reduction not in ("mean", "sum"):
            raise ValueError(f"focal_reduction must be 'mean' or 'sum', got {self.focal_reduction!r}")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss value plus d(loss)/d(p_i) as a field over the input grid."""

    value: float
    grad: VolumeGrid


@dataclass(frozen=True)
class BinWeighting:
    """Residual histogram and the per-voxel weights derived from it.

    ``centers[k] = bin_width * k``; membership is half-open
    [center - w/2, center + w/2) except the last occupiable bin, which is
    closed at 1 so that the bins partition [0, 1] and counts sum to the
    number of samples. ``eff_width`` is the bin width truncated to [0, 1],
    ``density[k] = counts[k] / eff_width[k]`` for occupied bins, and
    ``voxel_weight[i] = n_samples / density[bin(i)]``.
    """

    centers: np.ndarray
    counts: np.ndarray
    eff_width: np.ndarray
    density: np.ndarray
    voxel_bin: np.ndarray
    voxel_weight: np.ndarray
    n_samples: int

    @property
    def n_bins(self) -> int:
        return self.centers.size

    def bin_weight(self, k: int) -> float:
        """Weight assigned to bin k (defined only for occupied bins)."""
        if self.counts[k] <= 0:
            raise ValueError(f"bin {k} is empty; weights are defined only for occupied bins")
        return float(self.n_samples / self.density[k])

    def table(self) -> list[dict]:
        rows = []
        for k in range(self.n_bins):
            rows.append(
                {
                    "bin": k,
                    "center": float(self.centers[k]),
                    "count": int(self.counts[k]),
                    "eff_width": float(self.eff_width[k]),
                    "density": float(self.density[k]),
                    "weight": float(self.n_samples / self.density[k]) if self.counts[k] > 0 else None,
                }
            )
        return rows


# ---------------------------------------------------------------------------
# flat kernels (value + gradient on 1-D float64 arrays)
# ---------------------------------------------------------------------------

def _dice_fb(p: np.ndarray, g: np.ndarray, eps: float):
    n = p.size
    num_fg = 2.0 * float(np.dot(p, g))
    den_fg = float(p.sum() + g.sum()) + eps
    num_bg = 2.0 * float(np.dot(1.0 - p, 1.0 - g))
    den_bg = float((1.0 - p).sum() + (1.0 - g).sum()) + eps
    value = 1.0 - 0.5 * (num_fg / den_fg + num_bg / den_bg)
    grad = -0.5 * (
        (2.0 * g * den_fg - num_fg) / den_fg**2
        + (-2.0 * (1.0 - g) * den_bg + num_bg) / den_bg**2
    )
    return value, grad


def _focal_fb(p: np.ndarray, g: np.ndarray, gamma: float, alpha: float, reduction: str):
    pc = np.clip(p, P_FLOOR, 1.0 - P_FLOOR)
    sign = np.where(g == 1.0, 1.0, -1.0)
    pt = np.where(g == 1.0, pc, 1.0 - pc)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    terms = -alpha * one_m**gamma * log_pt
    # d/dpt of -alpha*(1-pt)^gamma*log(pt); zero where the clamp is active
    dpt = alpha * gamma * one_m ** (gamma - 1.0) * log_pt - alpha * one_m**gamma / pt
    active = (p > P_FLOOR) & (p < 1.0 - P_FLOOR)
    grad = np.where(active, dpt * sign, 0.0)
    if reduction == "mean":
        return float(terms.mean()), grad / p.size
    return float(terms.sum()), grad


def _weighted_dice_fb(p: np.ndarray, g: np.ndarray, w: np.ndarray, eps: float):
    # squared-denominator Dice with frozen per-voxel weights, per class
    num_fg = 2.0 * float(np.sum(w * g * p)) + eps
    den_fg = float(np.sum(w * (g * g + p * p))) + eps
    num_bg = 2.0 * float(np.sum(w * (1.0 - g) * (1.0 - p))) + eps
    den_bg = float(np.sum(w * ((1.0 - g) ** 2 + (1.0 - p) ** 2))) + eps
    value = 1.0 - 0.5 * (num_fg / den_fg + num_bg / den_bg)
    dnum_fg = 2.0 * w * g
    dden_fg = 2.0 * w * p
    dnum_bg = -2.0 * w * (1.0 - g)
    dden_bg = -2.0 * w * (1.0 - p)
    grad = -0.5 * (
        (dnum_fg * den_fg - num_fg * dden_fg) / den_fg**2
        + (dnum_bg * den_bg - num_bg * dden_bg) / den_bg**2
    )
    return value, grad


def residual_bins(delta: np.ndarray, bin_width: float) -> BinWeighting:
    """Histogram residuals in [0, 1] and derive density-inverse weights."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    check_unit_range(delta, "residuals")
    if not 0.0 < bin_width <= 1.0:
        raise ValueError(f"bin width must be in (0, 1], got {bin_width}")
    n_bins = math.ceil(1.0 / bin_width + 1.0 - 1e-9)
    k_axis = np.arange(n_bins, dtype=np.float64)
    centers = k_axis * bin_width
    # min(center + w/2, 1) - max(center - w/2, 0), evaluated in units of the
    # bin width so the two boundary bins come out with identical widths
    eff = bin_width * (
        np.minimum(k_axis + 0.5, 1.0 / bin_width) - np.maximum(k_axis - 0.5, 0.0)
    )
    # last bin whose interval still reaches into [0, 1]; it absorbs delta == 1
    occupiable = np.flatnonzero(eff > 0.0)
    k_top = int(occupiable[-1])
    k = np.floor(delta / bin_width + 0.5).astype(np.int64)
    k = np.minimum(k, k_top)
    counts = np.bincount(k, minlength=n_bins)
    density = np.where(counts > 0, counts / np.where(eff > 0, eff, 1.0), 0.0)
    n = delta.size
    bin_w = np.where(counts > 0, n / np.where(density > 0, density, 1.0), 0.0)
    return BinWeighting(
        centers=centers,
        counts=counts,
        eff_width=eff,
        density=density,
        voxel_bin=k,
        voxel_weight=bin_w[k],
        n_samples=n,
    )


# ---------------------------------------------------------------------------
# public operations on volumes
# ---------------------------------------------------------------------------

def _check_pair(p: VolumeGrid, g: VolumeGrid):
    check_geometry(p, g, ("p", "g"))
    check_unit_range(p.data, "probabilities")
    check_binary(g.data, "ground truth")
    return p.data, g.data


def _result(p: VolumeGrid, value: float, grad: np.ndarray) -> LossResult:
    return LossResult(value=float(value), grad=VolumeGrid(p.dims, p.spacing, grad, "WEIGHT"))


def dice_loss(p: VolumeGrid, g: VolumeGrid, cfg: LossConfig = LossConfig()) -> LossResult:
    """Two-class soft Dice loss (plain denominator, epsilon in denominator)."""
    pa, ga = _check_pair(p, g)
    value, grad = _dice_fb(pa, ga, cfg.epsilon)
    return _result(p, value, grad)


def focal_loss(p: VolumeGrid, g: VolumeGrid, cfg: LossConfig = LossConfig()) -> LossResult:
    """Focal loss -alpha*(1-p_t)^gamma*log(p_t) over the true-class probability.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithm; the
    gradient is exactly zero inside the clamped region. Reduction is the mean
    over voxels by default (``cfg.focal_reduction='sum'`` for the bare sum).
    """
    pa, ga = _check_pair(p, g)
    value, grad = _focal_fb(pa, ga, cfg.gamma, cfg.alpha, cfg.focal_reduction)
    return _result(p, value, grad)


def dice_focal_loss(p: VolumeGrid, g: VolumeGrid, cfg: LossConfig = LossConfig()) -> LossResult:
    """Sum of the Dice and focal losses; gradients add elementwise."""
    pa, ga = _check_pair(p, g)
    dv, dg = _dice_fb(pa, ga, cfg.epsilon)
    fv, fg_ = _focal_fb(pa, ga, cfg.gamma, cfg.alpha, cfg.focal_reduction)
    return _result(p, dv + fv, dg + fg_)


def l1_norms(p: VolumeGrid, g: VolumeGrid) -> VolumeGrid:
    """Per-voxel absolute residual |g - p| on the foreground channel."""
    pa, ga = _check_pair(p, g)
    return VolumeGrid(p.dims, p.spacing, np.abs(ga - pa), "WEIGHT")


def bin_weights(delta, bin_width: float = 0.1) -> BinWeighting:
    """Residual-density weighting for a residual field (volume or array)."""
    arr = delta.data if isinstance(delta, VolumeGrid) else delta
    return residual_bins(arr, bin_width)


def weighted_dice_loss(p: VolumeGrid, g: VolumeGrid, cfg: LossConfig = LossConfig()) -> LossResult:
    """Squared-denominator Dice re-weighted by inverse residual density.

    Epsilon is added to both numerator and denominator. When every residual
    lands in one bin (or densities are uniform across bins) the weights are
    equal and the loss reduces to the unweighted squared-denominator Dice.
    Weights are constants with respect to differentiation.
    """
    pa, ga = _check_pair(p, g)
    w = residual_bins(np.abs(ga - pa), cfg.bin_width).voxel_weight
    value, grad = _weighted_dice_fb(pa, ga, w, cfg.epsilon)
    return _result(p, value, grad)


def l1dfl(p: VolumeGrid, g: VolumeGrid, cfg: LossConfig = LossConfig()) -> LossResult:
    """Residual-density-weighted Dice plus focal loss."""
    pa, ga = _check_pair(p, g)
    w = residual_bins(np.abs(ga - pa), cfg.bin_width).voxel_weight
    wv, wg = _weighted_dice_fb(pa, ga, w, cfg.epsilon)
    fv, fg_ = _focal_fb(pa, ga, cfg.gamma, cfg.alpha, cfg.focal_reduction)
    return _result(p, wv + fv, wg + fg_)


LOSSES = {
    "dice": dice_loss,
    "focal": focal_loss,
    "dfl": dice_focal_loss,
    "l1dfl": l1dfl,
}


def loss_by_id(loss_id: str):
    if loss_id not in LOSSES:
        raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")
    return LOSSES[loss_id]


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    loss_id: str
    h: float
    tol: float
    max_error: float
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "loss_id": self.loss_id,
            "h": self.h,
            "tol": self.tol,
            "max_error": self.max_error,
            "worst_index": self.worst_index,
            "analytic_at_worst": self.analytic_at_worst,
            "numeric_at_worst": self.numeric_at_worst,
            "passed": self.passed,
        }


def _value_with_frozen_weights(loss_id: str, p: np.ndarray, g: np.ndarray,
                               cfg: LossConfig, w0: np.ndarray | None) -> float:
    if loss_id == "dice":
        return _dice_fb(p, g, cfg.epsilon)[0]
    if loss_id == "focal":
        return _focal_fb(p, g, cfg.gamma, cfg.alpha, cfg.focal_reduction)[0]
    if loss_id == "dfl":
        return (
            _dice_fb(p, g, cfg.epsilon)[0]
            + _focal_fb(p, g, cfg.gamma, cfg.alpha, cfg.focal_reduction)[0]
        )
    if loss_id == "l1dfl":
        return (
            _weighted_dice_fb(p, g, w0, cfg.epsilon)[0]
            + _focal_fb(p, g, cfg.gamma, cfg.alpha, cfg.focal_reduction)[0]
        )
    raise ValueError(f"unknown loss id {loss_id!r}")


def grad_check(loss_id: str, p: VolumeGrid, g: VolumeGrid,
               cfg: LossConfig = LossConfig(), h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient against central finite differences.

    The numeric side perturbs one voxel at a time: (L(p_i + h) - L(p_i - h))
    / (2h). For the density-weighted loss the per-voxel weights are frozen at
    the evaluation point, matching the stop-gradient contract of the analytic
    backward pass. Errors are relative, falling back to absolute differences
    below 1e-8 magnitudes. Steps outside [1e-7, 1e-3] are rejected: larger
    ones are dominated by truncation error, smaller ones by roundoff.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h must be in [1e-7, 1e-3], got {h}")
    return _grad_check_any_h(loss_id, p, g, cfg, h, tol)


def _grad_check_any_h(loss_id: str, p: VolumeGrid, g: VolumeGrid,
                      cfg: LossConfig, h: float, tol: float) -> GradCheckReport:
    # permissive variant so the CLI can demonstrate what a bad h does
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    pa, ga = _check_pair(p, g)
    if np.min(pa) <= 0.0 or np.max(pa) >= 1.0:
        raise ValueError("grad_check requires p strictly inside (0, 1)")

    analytic = loss_by_id(loss_id)(p, g, cfg).grad.data
    w0 = residual_bins(np.abs(ga - pa), cfg.bin_width).voxel_weight if loss_id == "l1dfl" else None

    numeric = np.empty_like(pa)
    work = pa.copy()
    for i in range(pa.size):
        orig = work[i]
        work[i] = orig + h
        up = _value_with_frozen_weights(loss_id, work, ga, cfg, w0)
        work[i] = orig - h
        down = _value_with_frozen_weights(loss_id, work, ga, cfg, w0)
        work[i] = orig
        numeric[i] = (up - down) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.where(scale >= 1e-8, diff / np.where(scale > 0, scale, 1.0), diff)
    worst = int(np.argmax(err))
    return GradCheckReport(
        loss_id=loss_id,
        h=h,
        tol=tol,
        max_error=float(err[worst]),
        worst_index=worst,
        analytic_at_worst=float(analytic[worst]),
        numeric_at_worst=float(numeric[worst]),
        passed=bool(err[worst] < tol),
    )

"""Desk-scale optimization drivers exercising the losses end to end.

Two fit-shaped models, both scikit-learn estimators:

* ``LogitDescentSegmenter`` gives every voxel its own free logit and runs
  plain gradient descent on one case. There is nothing the model cannot fit,
  so it isolates loss/gradient correctness: a correct gradient must drive the
  prediction onto the ground truth.
* ``VoxelFeatureSegmenter`` is a logistic model over a handful of fixed
  per-voxel features (local SUV statistics, CT value, depth inside the
  body). Lesions and high-uptake traps collide in this feature space, so the
  model is capacity-limited and the losses reveal their false-positive
  behavior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, maximum_filter, uniform_filter
from sklearn.base import BaseEstimator

from .losses import LOSS_IDS, LossConfig, loss_by_id
from .metrics import classify_detections, connected_components_18, evaluate_detection, patient_dsc
from .volume import ScanCase, VolumeGrid, make_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-5

BODY_CT_THRESHOLD = 0.13  # CT_NORM above this is inside the body (air is 0)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine-annealed learning rate: lr0 at step 0, 0 at the final step."""
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass(frozen=True)
class OptimConfig:
    loss_id: str = "l1dfl"
    steps: int = 1000
    lr0: float = 2e-4
    schedule: str = "cosine"
    optimizer: str = "adaptive_moments"
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.loss_id not in LOSS_IDS:
            raise ValueError(f"unknown loss id {self.loss_id!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    loss: float | None
    dsc: float
    tp: int
    fp: int
    fn: int
    lr: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "dsc": self.dsc,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "lr": self.lr,
        }


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    aborted: bool = False
    abort_step: int | None = None
    abort_reason: str | None = None

    def to_rows(self) -> list[dict]:
        rows = [r.to_dict() for r in self.records]
        if self.aborted:
            rows.append({"step": self.abort_step, "aborted": True, "reason": self.abort_reason})
        return rows


class _Sgd:
    def update(self, theta, grad, lr):
        return theta - lr * grad


class _AdaptiveMoments:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, theta, grad, lr):
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1.0 - ADAM_BETA1**self.t)
        v_hat = self.v / (1.0 - ADAM_BETA2**self.t)
        return theta - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + WEIGHT_DECAY * theta)


def _make_optimizer(name: str, shape):
    return _Sgd() if name == "sgd" else _AdaptiveMoments(shape)


def _lr_at(cfg: OptimConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr0
    return cosine_lr(step, cfg.steps, cfg.lr0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _case_metrics(p: np.ndarray, case: ScanCase, gt_lesions) -> tuple[float, int, int, int]:
    pred = VolumeGrid(case.dims, case.spacing, (p > 0.5).astype(np.float64), "MASK")
    dsc = patient_dsc(case.gt, pred)
    counts = classify_detections(gt_lesions, connected_components_18(pred), case.pet)
    return dsc, counts.tp, counts.fp, counts.fn


def _loss_params(obj) -> LossConfig:
    return LossConfig(
        epsilon=obj.epsilon,
        gamma=obj.gamma,
        alpha=obj.alpha,
        bin_width=obj.bin_width,
        focal_reduction=obj.focal_reduction,
    )


class LogitDescentSegmenter(BaseEstimator):
    """Per-voxel free-logit descent on a single case.

    ``fit`` runs ``steps`` optimizer updates on logits initialized to zero
    (p = 0.5) and records a trajectory of loss/DSC/detection counts every
    ``eval_every`` steps plus the final step. ``predict`` returns the
    thresholded (p > 0.5) mask.
    """

    def __init__(self, loss="dice", steps=1000, lr0=2e-4, schedule="cosine",
                 optimizer="adaptive_moments", seed=0, eval_every=100,
                 gamma=2.0, alpha=1.0, epsilon=1e-5, bin_width=0.1,
                 focal_reduction="mean"):
        self.loss = loss
        self.steps = steps
        self.lr0 = lr0
        self.schedule = schedule
        self.optimizer = optimizer
        self.seed = seed
        self.eval_every = eval_every
        self.gamma = gamma
        self.alpha = alpha
        self.epsilon = epsilon
        self.bin_width = bin_width
        self.focal_reduction = focal_reduction

    def _optim_config(self) -> OptimConfig:
        return OptimConfig(
            loss_id=self.loss,
            steps=self.steps,
            lr0=self.lr0,
            schedule=self.schedule,
            optimizer=self.optimizer,
            seed=self.seed,
            eval_every=self.eval_every,
        )

    def fit(self, case: ScanCase, y=None):
        cfg = self._optim_config()
        loss_cfg = _loss_params(self)
        loss_fn = loss_by_id(cfg.loss_id)
        gt_lesions = connected_components_18(case.gt)

        theta = np.zeros(case.gt.n_voxels)
        opt = _make_optimizer(cfg.optimizer, theta.shape)
        traj = Trajectory()

        for step in range(cfg.steps + 1):
            lr = _lr_at(cfg, step)
            p = _sigmoid(theta)
            res = loss_fn(VolumeGrid(case.dims, case.spacing, p, "PROB"), case.gt, loss_cfg)
            grad_theta = res.grad.data * p * (1.0 - p)
            if not (np.isfinite(res.value) and np.isfinite(grad_theta).all()):
                traj.aborted = True
                traj.abort_step = step
                traj.abort_reason = f"non-finite loss or gradient at step {step}"
                break
            if step % cfg.eval_every == 0 or step == cfg.steps:
                dsc, tp, fp, fn = _case_metrics(p, case, gt_lesions)
                traj.records.append(TrajectoryRecord(step, res.value, dsc, tp, fp, fn, lr))
            if step == cfg.steps:
                break
            theta = opt.update(theta, grad_theta, lr)

        self.trajectory_ = traj
        self.logits_ = theta
        p = _sigmoid(theta)
        self.probabilities_ = VolumeGrid(case.dims, case.spacing, p, "PROB")
        self.mask_ = VolumeGrid(case.dims, case.spacing, (p > 0.5).astype(np.float64), "MASK")
        return self

    def predict(self, case: ScanCase | None = None) -> VolumeGrid:
        return self.mask_


def optimize_logits(case: ScanCase, cfg: OptimConfig, loss_cfg: LossConfig) -> Trajectory:
    """Functional wrapper around LogitDescentSegmenter returning the trajectory."""
    est = LogitDescentSegmenter(
        loss=cfg.loss_id, steps=cfg.steps, lr0=cfg.lr0, schedule=cfg.schedule,
        optimizer=cfg.optimizer, seed=cfg.seed, eval_every=cfg.eval_every,
        gamma=loss_cfg.gamma, alpha=loss_cfg.alpha, epsilon=loss_cfg.epsilon,
        bin_width=loss_cfg.bin_width, focal_reduction=loss_cfg.focal_reduction,
    )
    return est.fit(case).trajectory_


# ---------------------------------------------------------------------------
# capacity-limited voxel-feature model
# ---------------------------------------------------------------------------

FEATURE_NAMES = ("suv", "suv_mean3", "suv_max3", "ct", "body_depth_mm")


def voxel_features(case: ScanCase) -> np.ndarray:
    """(N, 5) feature matrix: SUV, 3x3x3 mean/max SUV, CT, depth inside body."""
    suv3 = case.pet.as_3d()
    mean3 = uniform_filter(suv3, size=3, mode="nearest")
    max3 = maximum_filter(suv3, size=3, mode="nearest")
    body = case.ct.as_3d() > BODY_CT_THRESHOLD
    depth = distance_transform_edt(body, sampling=case.spacing)
    return np.stack(
        [
            case.pet.data,
            mean3.ravel(order="F"),
            max3.ravel(order="F"),
            case.ct.data,
            depth.ravel(order="F"),
        ],
        axis=1,
    )


class VoxelFeatureSegmenter(BaseEstimator):
    """Logistic voxel classifier trained with any of the four losses.

    Features are standardized with training-set statistics. Weights start at
    zero (p = 0.5 everywhere). When ``eval_cases`` are passed to ``fit`` the
    trajectory tracks them and the weights with the best mean DSC across
    evaluation points are kept.
    """

    def __init__(self, loss="l1dfl", steps=300, lr0=0.05, schedule="cosine",
                 optimizer="adaptive_moments", seed=0, eval_every=50,
                 gamma=2.0, alpha=1.0, epsilon=1e-5, bin_width=0.1,
                 focal_reduction="mean"):
        self.loss = loss
        self.steps = steps
        self.lr0 = lr0
        self.schedule = schedule
        self.optimizer = optimizer
        self.seed = seed
        self.eval_every = eval_every
        self.gamma = gamma
        self.alpha = alpha
        self.epsilon = epsilon
        self.bin_width = bin_width
        self.focal_reduction = focal_reduction

    def _optim_config(self) -> OptimConfig:
        return OptimConfig(
            loss_id=self.loss, steps=self.steps, lr0=self.lr0, schedule=self.schedule,
            optimizer=self.optimizer, seed=self.seed, eval_every=self.eval_every,
        )

    def _proba_flat(self, feats: np.ndarray) -> np.ndarray:
        scaled = (feats - self.feature_mean_) / self.feature_std_
        return _sigmoid(scaled @ self.coef_ + self.intercept_)

    def fit(self, cases, y=None, eval_cases=None):
        if not cases:
            raise ValueError("need at least one training case")
        cfg = self._optim_config()
        loss_cfg = _loss_params(self)
        loss_fn = loss_by_id(cfg.loss_id)

        feats = [voxel_features(c) for c in cases]
        stacked = np.concatenate(feats, axis=0)
        self.feature_mean_ = stacked.mean(axis=0)
        self.feature_std_ = np.maximum(stacked.std(axis=0), 1e-8)
        scaled = [(f - self.feature_mean_) / self.feature_std_ for f in feats]

        eval_feats = None
        eval_lesions = None
        if eval_cases:
            eval_feats = [
                (voxel_features(c) - self.feature_mean_) / self.feature_std_ for c in eval_cases
            ]
            eval_lesions = [connected_components_18(c.gt) for c in eval_cases]

        n_feat = scaled[0].shape[1]
        theta = np.zeros(n_feat + 1)  # weights + intercept
        opt = _make_optimizer(cfg.optimizer, theta.shape)
        traj = Trajectory()
        best = (-1.0, theta.copy(), 0)

        def forward_backward(th):
            total = 0.0
            grad = np.zeros_like(th)
            for c, x in zip(cases, scaled):
                z = x @ th[:-1] + th[-1]
                p = _sigmoid(z)
                res = loss_fn(VolumeGrid(c.dims, c.spacing, p, "PROB"), c.gt, loss_cfg)
                gp = res.grad.data * p * (1.0 - p)
                grad[:-1] += x.T @ gp
                grad[-1] += gp.sum()
                total += res.value
            return total / len(cases), grad / len(cases)

        def eval_metrics(th):
            if not eval_cases:
                sources = zip(cases, scaled, (connected_components_18(c.gt) for c in cases))
            else:
                sources = zip(eval_cases, eval_feats, eval_lesions)
            dscs, tp, fp, fn = [], 0, 0, 0
            for c, x, gl in sources:
                p = _sigmoid(x @ th[:-1] + th[-1])
                d, a, b, e = _case_metrics(p, c, gl)
                dscs.append(d)
                tp, fp, fn = tp + a, fp + b, fn + e
            return float(np.mean(dscs)), tp, fp, fn

        for step in range(cfg.steps + 1):
            lr = _lr_at(cfg, step)
            value, grad = forward_backward(theta)
            if not (np.isfinite(value) and np.isfinite(grad).all()):
                traj.aborted = True
                traj.abort_step = step
                traj.abort_reason = f"non-finite loss or gradient at step {step}"
                break
            if step % cfg.eval_every == 0 or step == cfg.steps:
                dsc, tp, fp, fn = eval_metrics(theta)
                traj.records.append(TrajectoryRecord(step, value, dsc, tp, fp, fn, lr))
                if dsc > best[0]:
                    best = (dsc, theta.copy(), step)
            if step == cfg.steps:
                break
            theta = opt.update(theta, grad, lr)

        self.trajectory_ = traj
        self.best_step_ = best[2]
        self.coef_ = best[1][:-1]
        self.intercept_ = float(best[1][-1])
        self.final_theta_ = theta
        return self

    def predict_proba(self, case: ScanCase) -> VolumeGrid:
        p = self._proba_flat(voxel_features(case))
        return VolumeGrid(case.dims, case.spacing, p, "PROB")

    def predict(self, case: ScanCase) -> VolumeGrid:
        p = self._proba_flat(voxel_features(case))
        return VolumeGrid(case.dims, case.spacing, (p > 0.5).astype(np.float64), "MASK")


@dataclass
class FeatureModelResult:
    model: VoxelFeatureSegmenter
    trajectory: Trajectory
    reports: list
    train_ids: list
    test_ids: list
    best_step: int
    dsc_by_case: dict


def split_cohort(cases, seed: int) -> tuple[list, list]:
    """Deterministic half/half train/test split by shuffled case order."""
    rng = make_rng(seed)
    order = rng.permutation(len(cases))
    n_train = len(cases) // 2
    train = sorted(int(i) for i in order[:n_train])
    test = sorted(int(i) for i in order[n_train:])
    return [cases[i] for i in train], [cases[i] for i in test]


def optimize_feature_model(cohort, cfg: OptimConfig, loss_cfg: LossConfig) -> FeatureModelResult:
    """Train the voxel-feature model on half the cohort, report on the rest.

    The split depends only on (cohort, cfg.seed), so runs with different
    losses on the same seed are paired case by case.
    """
    cohort = list(cohort)
    if len(cohort) < 4:
        raise ValueError(f"cohort must contain at least 4 cases, got {len(cohort)}")
    train, test = split_cohort(cohort, cfg.seed)

    est = VoxelFeatureSegmenter(
        loss=cfg.loss_id, steps=cfg.steps, lr0=cfg.lr0, schedule=cfg.schedule,
        optimizer=cfg.optimizer, seed=cfg.seed, eval_every=cfg.eval_every,
        gamma=loss_cfg.gamma, alpha=loss_cfg.alpha, epsilon=loss_cfg.epsilon,
        bin_width=loss_cfg.bin_width, focal_reduction=loss_cfg.focal_reduction,
    )
    est.fit(train, eval_cases=test)

    reports = []
    dsc_by_case = {}
    for case in sorted(test, key=lambda c: c.id):
        pred = est.predict(case)
        report = evaluate_detection(case.gt, pred, case.pet, case_id=case.id)
        reports.append(report)
        dsc_by_case[case.id] = report.patient_dsc
    return FeatureModelResult(
        model=est,
        trajectory=est.trajectory_,
        reports=reports,
        train_ids=[c.id for c in train],
        test_ids=[c.id for c in sorted(test, key=lambda c: c.id)],
        best_step=est.best_step_,
        dsc_by_case=dsc_by_case,
    )

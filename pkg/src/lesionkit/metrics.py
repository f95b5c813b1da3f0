"""Lesion-level detection and segmentation metrics for volumetric masks.

Lesions are connected components under 18-connectivity (face and edge
neighbors; corner-only neighbors are excluded). A ground-truth lesion counts
as detected when some predicted component covers its hottest voxel (maximum
SUV, ties broken by scan order); a predicted component that overlaps no
ground-truth voxel at all is a false positive; predictions that overlap a
lesion but miss every hottest voxel are recorded separately as partial
overlaps and count toward neither.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .validation import GeometryError, check_binary, check_geometry
from .volume import VolumeGrid

# 18-connectivity: all offsets within the 3x3x3 cube that share a face or an
# edge with the center, i.e. |dx|+|dy|+|dz| <= 2 (corners have L1 norm 3)
NEIGHBORS_18 = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0) and abs(dx) + abs(dy) + abs(dz) <= 2
)


@dataclass(frozen=True)
class LesionSet:
    """Connected-component labeling of a binary mask.

    ``labels`` is a flat int array over the grid: 0 for background, k for the
    k-th component, numbered by first-encountered voxel in x-fastest scan
    order. ``voxel_lists[k-1]`` holds the flat indices of component k in
    ascending order.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray
    count: int
    voxel_lists: tuple = field(repr=False, default=())

    def labels_3d(self) -> np.ndarray:
        return self.labels.reshape(self.dims, order="F")

    def component_mask(self, label: int) -> VolumeGrid:
        return VolumeGrid(self.dims, self.spacing, (self.labels == label).astype(np.float64), "MASK")


def _mask_data(mask: VolumeGrid) -> np.ndarray:
    check_binary(mask.data, "mask")
    return mask.data


def connected_components_18(mask: VolumeGrid) -> LesionSet:
    """Label 18-connected components with a union-find over neighbor edges."""
    data = _mask_data(mask)
    nx, ny, nz = mask.dims
    m3 = data.reshape(mask.dims, order="F") > 0.5

    parent = np.arange(mask.n_voxels, dtype=np.int64)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]  # path halving
            i = parent[i]
        return int(i)

    # one edge list per backward neighbor offset (negative flat delta), so
    # every adjacency is visited exactly once
    strides = (1, nx, nx * ny)
    for off in NEIGHBORS_18:
        delta = off[0] * strides[0] + off[1] * strides[1] + off[2] * strides[2]
        if delta >= 0:
            continue
        src = tuple(slice(max(0, -o), min(d, d - o)) for o, d in zip(off, (nx, ny, nz)))
        dst = tuple(slice(max(0, o), min(d, d + o)) for o, d in zip(off, (nx, ny, nz)))
        both = m3[src] & m3[dst]
        if not both.any():
            continue
        xs, ys, zs = np.nonzero(both)
        a = (xs + src[0].start) + nx * ((ys + src[1].start) + ny * (zs + src[2].start))
        b = a + delta
        for i, j in zip(a.tolist(), b.tolist()):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    labels = np.zeros(mask.n_voxels, dtype=np.int32)
    fg = np.flatnonzero(data)
    next_label = 0
    root_label: dict[int, int] = {}
    for i in fg.tolist():
        r = find(i)
        lab = root_label.get(r)
        if lab is None:
            next_label += 1
            lab = next_label
            root_label[r] = lab
        labels[i] = lab

    voxel_lists = tuple(np.flatnonzero(labels == k) for k in range(1, next_label + 1))
    return LesionSet(
        dims=mask.dims,
        spacing=mask.spacing,
        labels=labels,
        count=next_label,
        voxel_lists=voxel_lists,
    )


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionCounts:
    tp: int
    fp: int
    fn: int
    partial_overlap: int
    # gt label -> predicted labels sharing at least one voxel
    matches: tuple
    detected_gt: tuple
    fp_pred: tuple
    partial_pred: tuple


def _check_lesionset_geometry(ls: LesionSet, vol: VolumeGrid, names):
    if ls.dims != vol.dims or ls.spacing != vol.spacing:
        raise GeometryError(
            f"geometry mismatch: {names[0]} has dims={ls.dims} spacing={ls.spacing}, "
            f"{names[1]} has dims={vol.dims} spacing={vol.spacing}"
        )


def classify_detections(gt: LesionSet, pred: LesionSet, pet: VolumeGrid) -> DetectionCounts:
    """Classify detections by hottest-voxel coverage.

    A ground-truth lesion is a true positive when some predicted component
    contains its maximum-SUV voxel (first such voxel in scan order on ties),
    else a false negative. A predicted component with no ground-truth overlap
    anywhere is a false positive; overlapping predictions that miss every
    hottest voxel are partial overlaps, counted as neither.
    """
    if gt.dims != pred.dims or gt.spacing != pred.spacing:
        raise GeometryError("geometry mismatch between ground-truth and predicted lesion sets")
    _check_lesionset_geometry(gt, pet, ("lesions", "pet"))

    suvmax_covering: set[int] = set()
    detected = []
    matches = []
    for k, voxels in enumerate(gt.voxel_lists, start=1):
        hottest = int(voxels[int(np.argmax(pet.data[voxels]))])
        covering = int(pred.labels[hottest])
        if covering > 0:
            detected.append(k)
            suvmax_covering.add(covering)
        overlapping = np.unique(pred.labels[voxels])
        matches.append((k, tuple(int(v) for v in overlapping if v > 0)))

    fp_pred = []
    partial_pred = []
    for k, voxels in enumerate(pred.voxel_lists, start=1):
        if not (gt.labels[voxels] > 0).any():
            fp_pred.append(k)
        elif k not in suvmax_covering:
            partial_pred.append(k)

    tp = len(detected)
    return DetectionCounts(
        tp=tp,
        fp=len(fp_pred),
        fn=gt.count - tp,
        partial_overlap=len(partial_pred),
        matches=tuple(matches),
        detected_gt=tuple(detected),
        fp_pred=tuple(fp_pred),
        partial_pred=tuple(partial_pred),
    )


def f1_score(tp: int, fp: int, fn: int) -> float:
    """TP / (TP + (FP + FN)/2); defined as 1.0 when all counts are zero."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn}")
    if tp == fp == fn == 0:
        return 1.0
    denom = tp + 0.5 * (fp + fn)
    return tp / denom if denom > 0 else 0.0


# ---------------------------------------------------------------------------
# overlap metrics
# ---------------------------------------------------------------------------

def patient_dsc(gt: VolumeGrid, pred: VolumeGrid) -> float:
    """Whole-image Dice overlap 2|G∩P|/(|G|+|P|); 1.0 when both are empty."""
    check_geometry(gt, pred, ("gt", "pred"))
    ga = _mask_data(gt)
    pa = _mask_data(pred)
    inter = float(np.dot(ga, pa))
    total = float(ga.sum() + pa.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * inter / total


def lesion_dscs(gt: LesionSet, pred: LesionSet) -> list[float]:
    """Per-ground-truth-lesion Dice against the union of overlapping predictions.

    A lesion with no overlapping predicted component scores 0.
    """
    if gt.dims != pred.dims or gt.spacing != pred.spacing:
        raise GeometryError("geometry mismatch between lesion sets")
    pred_sizes = {k: len(v) for k, v in enumerate(pred.voxel_lists, start=1)}
    out = []
    for voxels in gt.voxel_lists:
        overlapping = [int(v) for v in np.unique(pred.labels[voxels]) if v > 0]
        if not overlapping:
            out.append(0.0)
            continue
        inter = int((pred.labels[voxels] > 0).sum())
        union_size = sum(pred_sizes[k] for k in overlapping)
        out.append(2.0 * inter / (len(voxels) + union_size))
    return out


@dataclass(frozen=True)
class ClinicalQuantities:
    mtv_ml: tuple
    tla: tuple
    tmtv_ml: float
    tla_total: float


def clinical_quantities(lesions: LesionSet, pet: VolumeGrid) -> ClinicalQuantities:
    """Per-lesion volume (ml) and activity (SUV*ml), plus their case totals."""
    _check_lesionset_geometry(lesions, pet, ("lesions", "pet"))
    sx, sy, sz = lesions.spacing
    vv_ml = sx * sy * sz / 1000.0
    mtv = tuple(len(v) * vv_ml for v in lesions.voxel_lists)
    tla = tuple(float(pet.data[v].sum()) * vv_ml for v in lesions.voxel_lists)
    return ClinicalQuantities(
        mtv_ml=mtv,
        tla=tla,
        tmtv_ml=float(sum(mtv)),
        tla_total=float(sum(tla)),
    )


# ---------------------------------------------------------------------------
# lesion spread
# ---------------------------------------------------------------------------

def _foreground_points_mm(mask: VolumeGrid) -> np.ndarray:
    nx, ny, _ = mask.dims
    idx = np.flatnonzero(mask.data)
    x = idx % nx
    y = (idx // nx) % ny
    z = idx // (nx * ny)
    pts = np.stack([x, y, z], axis=1).astype(np.float64)
    return pts * np.asarray(mask.spacing, dtype=np.float64)


def _max_sq_distance(pts: np.ndarray) -> float:
    best = 0.0
    chunk = 2048
    for i in range(0, pts.shape[0], chunk):
        block = pts[i: i + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return best


def _column_extremes(pts: np.ndarray) -> np.ndarray:
    # keep only min-x/max-x per (y, z) column; some farthest pair survives
    # because swapping an endpoint for its column extreme never shrinks the
    # distance
    order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2]))
    s = pts[order]
    changed = (np.diff(s[:, 1]) != 0) | (np.diff(s[:, 2]) != 0)
    boundaries = np.flatnonzero(changed)
    first = np.concatenate([[0], boundaries + 1])
    last = np.concatenate([boundaries, [s.shape[0] - 1]])
    keep = np.unique(np.concatenate([first, last]))
    return s[keep]


def dmax(mask: VolumeGrid, method: str = "reduced") -> float | None:
    """Maximum physical distance (cm) between any two foreground voxels.

    Returns None with fewer than two foreground voxels. ``method='bruteforce'``
    scans all pairs; ``method='reduced'`` scans only per-column extreme voxels
    and is exactly equal by construction.
    """
    if method not in ("bruteforce", "reduced"):
        raise ValueError(f"method must be 'bruteforce' or 'reduced', got {method!r}")
    pts = _foreground_points_mm(mask)
    if pts.shape[0] < 2:
        return None
    if method == "reduced":
        pts = _column_extremes(pts)
    return math.sqrt(_max_sq_distance(pts)) / 10.0


# ---------------------------------------------------------------------------
# cohort summaries
# ---------------------------------------------------------------------------

def volume_thresholds(volumes) -> list[float]:
    """Default sweep thresholds: 0 and the quartiles up to the 85th percentile."""
    vols = np.asarray(list(volumes), dtype=np.float64)
    if vols.size == 0:
        raise ValueError("empty volume list")
    q25, q50, q75, p85 = np.percentile(vols, [25, 50, 75, 85], method="linear")
    return [0.0, float(q25), float(q50), float(q75), float(p85)]


def threshold_sweep(items, thresholds=None) -> list[tuple[float, float | None]]:
    """Median DSC over items whose volume strictly exceeds each threshold.

    ``items`` is a sequence of (volume, dsc) pairs; thresholds default to
    0/Q25/Q50/Q75/P85 of the volume distribution. An empty selection yields
    None for that threshold.
    """
    items = list(items)
    if not items:
        raise ValueError("empty input")
    vols = np.asarray([v for v, _ in items], dtype=np.float64)
    dscs = np.asarray([d for _, d in items], dtype=np.float64)
    if thresholds is None:
        thresholds = volume_thresholds(vols)
    out = []
    for t in thresholds:
        sel = vols > t
        out.append((float(t), float(np.median(dscs[sel])) if sel.any() else None))
    return out


@dataclass(frozen=True)
class SpreadGroups:
    groups: tuple
    cuts: tuple
    degenerate: bool


def dmax_groups(values) -> SpreadGroups:
    """Assign cases to quartile groups of lesion spread.

    Groups are G0 = [0, Q25], G1 = (Q25, Q50], G2 = (Q50, Q75], G3 = (Q75, inf).
    Fewer than 4 cases cannot support quartiles: everything goes to G0 and the
    result is flagged degenerate.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty input")
    if vals.size < 4:
        return SpreadGroups(groups=tuple([0] * vals.size), cuts=(), degenerate=True)
    q25, q50, q75 = np.percentile(vals, [25, 50, 75], method="linear")
    groups = np.full(vals.size, 3, dtype=np.int64)
    groups[vals <= q75] = 2
    groups[vals <= q50] = 1
    groups[vals <= q25] = 0
    return SpreadGroups(
        groups=tuple(int(g) for g in groups),
        cuts=(float(q25), float(q50), float(q75)),
        degenerate=False,
    )


# ---------------------------------------------------------------------------
# paired significance test
# ---------------------------------------------------------------------------

def wilcoxon_signed_rank_one_tailed(a, b) -> tuple[float, float]:
    """One-tailed paired Wilcoxon signed-rank test for the alternative a > b.

    Zero differences are dropped; |differences| are ranked with average ranks
    on ties and the statistic W is the sum of ranks of positive differences.
    The p-value is exact (all 2^n sign assignments) for n <= 20 and a normal
    approximation with tie and continuity corrections beyond.
    """
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise ValueError(f"insufficient pairs: need >= 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())

    if n <= 20:
        # full enumeration by iterative doubling; rank sums are exact in
        # float64 (multiples of 0.5 well below 2**53)
        sums = np.zeros(1, dtype=np.float64)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        p = float(np.count_nonzero(sums >= w)) / sums.size
        return w, p

    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts)).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    sd = math.sqrt(var)
    z = (w - mu - 0.5) / sd
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return w, p


# ---------------------------------------------------------------------------
# per-case report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionReport:
    """Everything the evaluation pipeline knows about one case."""

    case_id: str
    tp: int
    fp: int
    fn: int
    partial_overlap: int
    f1: float
    patient_dsc: float
    lesion_dscs: tuple
    matches: tuple
    mtv_ml: tuple
    tla: tuple
    tmtv_ml: float
    tla_total: float
    pred_tmtv_ml: float
    dmax_cm: float | None
    gt_lesion_count: int
    pred_lesion_count: int

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "partial_overlap": self.partial_overlap,
            "f1": self.f1,
            "patient_dsc": self.patient_dsc,
            "lesion_dscs": list(self.lesion_dscs),
            "matches": [[gt_label, list(preds)] for gt_label, preds in self.matches],
            "mtv_ml": list(self.mtv_ml),
            "tla": list(self.tla),
            "tmtv_ml": self.tmtv_ml,
            "tla_total": self.tla_total,
            "pred_tmtv_ml": self.pred_tmtv_ml,
            "dmax_cm": self.dmax_cm,
            "gt_lesion_count": self.gt_lesion_count,
            "pred_lesion_count": self.pred_lesion_count,
        }


def evaluate_detection(gt: VolumeGrid, pred: VolumeGrid, pet: VolumeGrid,
                       case_id: str = "") -> DetectionReport:
    """Run the full per-case evaluation: components, detections, DSC, clinical."""
    check_geometry(gt, pred, ("gt", "pred"))
    check_geometry(gt, pet, ("gt", "pet"))
    gt_ls = connected_components_18(gt)
    pred_ls = connected_components_18(pred)
    counts = classify_detections(gt_ls, pred_ls, pet)
    clin = clinical_quantities(gt_ls, pet)
    sx, sy, sz = gt.spacing
    vv_ml = sx * sy * sz / 1000.0
    return DetectionReport(
        case_id=case_id,
        tp=counts.tp,
        fp=counts.fp,
        fn=counts.fn,
        partial_overlap=counts.partial_overlap,
        f1=f1_score(counts.tp, counts.fp, counts.fn),
        patient_dsc=patient_dsc(gt, pred),
        lesion_dscs=tuple(lesion_dscs(gt_ls, pred_ls)),
        matches=counts.matches,
        mtv_ml=clin.mtv_ml,
        tla=clin.tla,
        tmtv_ml=clin.tmtv_ml,
        tla_total=clin.tla_total,
        pred_tmtv_ml=float(pred.data.sum()) * vv_ml,
        dmax_cm=dmax(gt),
        gt_lesion_count=gt_ls.count,
        pred_lesion_count=pred_ls.count,
    )

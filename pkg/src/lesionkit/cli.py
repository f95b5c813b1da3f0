"""Command-line interface.

Subcommands: ``phantom`` (generate synthetic cohorts), ``loss`` (evaluate a
loss on two volumes), ``gradcheck`` (finite-difference gradient check),
``evaluate`` (cohort evaluation of prediction sets), ``experiment`` (train
the voxel-feature model under each loss and emit comparison tables), and
``serve`` (JSON-lines request loop over stdin/stdout for foreign-language
bindings).

Exit codes: 0 success, 2 configuration error, 3 output collision,
4 input-contract violation, 5 numerical failure.
"""

from __future__ import annotations

import base64
import hashlib
import json
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .losses import LOSS_IDS, LossConfig, _grad_check_any_h, bin_weights, l1_norms, loss_by_id
from .metrics import (
    dmax_groups,
    evaluate_detection,
    threshold_sweep,
    wilcoxon_signed_rank_one_tailed,
)
from .optim import OptimConfig, optimize_feature_model
from .phantom import CohortSpec, cohort, config_from_dict, generate
from .validation import GeometryError
from .volume import VolumeGrid, VvolError, make_rng, read_vvol, write_vvol

EXIT_CONFIG = 2
EXIT_COLLISION = 3
EXIT_INPUT = 4
EXIT_NUMERIC = 5


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: int, message: str) -> CliFailure:
    return CliFailure(code, message)


def _load_json_config(path: Path) -> dict:
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise _fail(EXIT_CONFIG, f"config parse error: {path} not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise _fail(EXIT_CONFIG, f"config parse error: {exc}") from None


def _load_volume(path: Path) -> VolumeGrid:
    try:
        return read_vvol(path)
    except FileNotFoundError:
        raise _fail(EXIT_INPUT, f"missing input volume: {path}") from None
    except VvolError as exc:
        raise _fail(EXIT_INPUT, f"{path}: {exc}") from None


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise _fail(EXIT_COLLISION, f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config_echo, seed, inputs: dict,
                    timestamps: tuple | None) -> None:
    manifest = {
        "tool": "lesionkit",
        "version": __version__,
        "command": command,
        "config": config_echo,
        "seed": seed,
        "inputs": {str(k): v for k, v in inputs.items()},
    }
    if timestamps is not None:
        manifest["started"], manifest["finished"] = timestamps
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
    )


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_csv(path: Path, header: list, rows: list) -> None:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", "utf-8")


def _guarded(fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except GeometryError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT)


@click.group()
@click.version_option(version=__version__, prog_name="lesionkit")
def main():
    """Adaptive segmentation losses, lesion metrics, and phantom experiments."""


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

@main.command("phantom")
@click.argument("config_path", type=click.Path(path_type=Path))
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.option("--no-timestamps", is_flag=True, help="Omit timestamps from the manifest.")
def cmd_phantom(config_path, out_dir, force, no_timestamps):
    """Generate a synthetic cohort from CONFIG_PATH into OUT_DIR.

    The config mirrors the phantom schema: dims, spacing, seed, lesions,
    traps, background_suv_mean, background_noise_sd, gt_threshold_frac, plus
    an optional "cohort" object {n_cases, single_fraction, base_lesion,
    max_lesions, seed} for jittered multi-case generation. Each case writes
    {id}_pet.vvol, {id}_ct.vvol, {id}_gt.vvol.
    """
    def run():
        started = _utcnow()
        obj = _load_json_config(config_path)
        try:
            base, spec = config_from_dict(obj)
            cases = cohort(base, spec) if spec is not None else [generate(base)]
        except (ValueError, KeyError, TypeError) as exc:
            raise _fail(EXIT_CONFIG, f"config parse error: {exc}") from None
        _prepare_out_dir(out_dir, force)
        for case in cases:
            write_vvol(case.pet, out_dir / f"{case.id}_pet.vvol")
            write_vvol(case.ct, out_dir / f"{case.id}_ct.vvol")
            write_vvol(case.gt, out_dir / f"{case.id}_gt.vvol")
        _write_manifest(
            out_dir, "phantom", obj, obj.get("seed", 0),
            {config_path: _sha256(config_path)},
            None if no_timestamps else (started, _utcnow()),
        )
        click.echo(f"wrote {3 * len(cases)} volumes for {len(cases)} cases to {out_dir}")

    _guarded(run)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _loss_config_from_flags(gamma, alpha, gamma_bin, epsilon, focal_reduction) -> LossConfig:
    try:
        return LossConfig(
            epsilon=epsilon, gamma=gamma, alpha=alpha,
            bin_width=gamma_bin, focal_reduction=focal_reduction,
        )
    except ValueError as exc:
        raise _fail(EXIT_CONFIG, f"bad loss configuration: {exc}") from None


@main.command("loss")
@click.argument("pred_path", type=click.Path(path_type=Path))
@click.argument("gt_path", type=click.Path(path_type=Path))
@click.option("--loss", "loss_id", type=click.Choice(LOSS_IDS), default="l1dfl",
              show_default=True, help="Loss to evaluate.")
@click.option("--gamma", type=float, default=2.0, show_default=True,
              help="Focal focusing exponent.")
@click.option("--alpha", type=float, default=1.0, show_default=True,
              help="Focal class-balance factor.")
@click.option("--gamma-bin", type=float, default=0.1, show_default=True,
              help="Nominal residual bin width.")
@click.option("--epsilon", type=float, default=1e-5, show_default=True,
              help="Dice stabilizer.")
@click.option("--focal-reduction", type=click.Choice(["mean", "sum"]), default="mean",
              show_default=True)
@click.option("--grad-out", type=click.Path(path_type=Path), default=None,
              help="Write the per-voxel gradient as a .vvol volume.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None,
              help="Write the JSON result here instead of stdout.")
def cmd_loss(pred_path, gt_path, loss_id, gamma, alpha, gamma_bin, epsilon,
             focal_reduction, grad_out, out_path):
    """Evaluate a loss on PRED_PATH (probabilities) against GT_PATH (mask).

    Emits JSON with the loss value, gradient statistics, and, for l1dfl, the
    residual bin table.
    """
    def run():
        cfg = _loss_config_from_flags(gamma, alpha, gamma_bin, epsilon, focal_reduction)
        pred = _load_volume(pred_path)
        gt = _load_volume(gt_path)
        p = VolumeGrid(pred.dims, pred.spacing, pred.data, "PROB") if pred.kind != "PROB" else pred
        res = loss_by_id(loss_id)(p, gt, cfg)
        grad = res.grad.data
        out = {
            "loss": loss_id,
            "value": res.value,
            "grad": {
                "n": int(grad.size),
                "min": float(grad.min()),
                "max": float(grad.max()),
                "mean": float(grad.mean()),
                "l2": float(np.linalg.norm(grad)),
            },
            "config": {
                "gamma": gamma, "alpha": alpha, "bin_width": gamma_bin,
                "epsilon": epsilon, "focal_reduction": focal_reduction,
            },
        }
        if loss_id == "l1dfl":
            out["bins"] = bin_weights(l1_norms(p, gt), gamma_bin).table()
        if grad_out is not None:
            write_vvol(res.grad, grad_out)
            out["grad_file"] = str(grad_out)
        text = json.dumps(out, indent=2, sort_keys=True) + "\n"
        if out_path is not None:
            out_path.write_text(text, "utf-8")
        else:
            click.echo(text, nl=False)

    _guarded(run)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

@main.command("gradcheck")
@click.option("--loss", "loss_ids", type=click.Choice(LOSS_IDS), multiple=True,
              help="Losses to check (default: all four).")
@click.option("--dims", default="4,4,4", show_default=True,
              help="Comma-separated instance dims.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--h", type=float, default=1e-5, show_default=True,
              help="Central-difference step.")
@click.option("--tol", type=float, default=1e-4, show_default=True,
              help="Max relative error allowed.")
@click.option("--trials", type=int, default=10, show_default=True,
              help="Random instances per loss.")
def cmd_gradcheck(loss_ids, dims, seed, h, tol, trials):
    """Check analytic gradients against central finite differences.

    Exits 0 when every instance passes, 5 otherwise. The worst voxel index
    and both gradient values are reported per loss.
    """
    def run():
        try:
            d = tuple(int(x) for x in dims.split(","))
            if len(d) != 3 or any(x < 1 for x in d):
                raise ValueError(dims)
        except ValueError:
            raise _fail(EXIT_CONFIG, f"bad --dims {dims!r}; expected e.g. 4,4,4") from None
        ids = loss_ids or LOSS_IDS
        rng = make_rng(seed)
        n = d[0] * d[1] * d[2]
        all_passed = True
        for loss_id in ids:
            worst = None
            for _ in range(trials):
                p = VolumeGrid(d, (1, 1, 1), rng.uniform(0.02, 0.98, n), "PROB")
                g = VolumeGrid(d, (1, 1, 1), (rng.random(n) < 0.35).astype(float), "MASK")
                report = _grad_check_any_h(loss_id, p, g, LossConfig(), h, tol)
                if worst is None or report.max_error > worst.max_error:
                    worst = report
            status = "PASS" if worst.passed else "FAIL"
            all_passed &= worst.passed
            click.echo(
                f"{status} {loss_id}: max rel err {worst.max_error:.3e} over {trials} "
                f"instances of dims {d} (worst voxel {worst.worst_index}: "
                f"analytic {worst.analytic_at_worst!r}, numeric {worst.numeric_at_worst!r})"
            )
        if not all_passed:
            raise _fail(EXIT_NUMERIC, f"gradient check failed at h={h}, tol={tol}")

    _guarded(run)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _collect_case_ids(gt_dir: Path) -> list:
    ids = sorted(p.name[: -len("_gt.vvol")] for p in gt_dir.glob("*_gt.vvol"))
    if not ids:
        raise _fail(EXIT_INPUT, f"no *_gt.vvol files found in {gt_dir}")
    return ids


def _evaluate_pred_set(label, pred_dir, gt_dir, pet_dir, case_ids, jobs):
    def one(case_id):
        gt = _load_volume(gt_dir / f"{case_id}_gt.vvol")
        pet = _load_volume(pet_dir / f"{case_id}_pet.vvol")
        pred = _load_volume(pred_dir / f"{case_id}_pred.vvol")
        return evaluate_detection(gt, pred, pet, case_id=case_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one, case_ids))
    else:
        reports = [one(cid) for cid in case_ids]
    return {"label": label, "reports": reports}


def _per_case_rows(sets) -> tuple[list, list]:
    header = [
        "pred_set", "case_id", "tp", "fp", "fn", "partial_overlap", "f1",
        "patient_dsc", "mean_lesion_dsc", "gt_lesion_count", "pred_lesion_count",
        "tmtv_ml", "pred_tmtv_ml", "tla_total", "dmax_cm", "dmax_group",
    ]
    rows = []
    for s in sets:
        reports = s["reports"]
        dmax_vals = [r.dmax_cm for r in reports if r.dmax_cm is not None]
        group_of = {}
        if dmax_vals:
            groups = dmax_groups(dmax_vals)
            ids_with = [r.case_id for r in reports if r.dmax_cm is not None]
            group_of = dict(zip(ids_with, groups.groups))
        for r in reports:
            mean_lesion = float(np.mean(r.lesion_dscs)) if r.lesion_dscs else None
            rows.append([
                s["label"], r.case_id, r.tp, r.fp, r.fn, r.partial_overlap, r.f1,
                r.patient_dsc, mean_lesion, r.gt_lesion_count, r.pred_lesion_count,
                r.tmtv_ml, r.pred_tmtv_ml, r.tla_total, r.dmax_cm,
                group_of.get(r.case_id),
            ])
    return header, rows


def _summary_rows(sets) -> tuple[list, list]:
    labels = [s["label"] for s in sets]
    header = [
        "pred_set", "n_cases", "mean_dsc", "sd_dsc", "median_dsc",
        "q1_dsc", "q3_dsc", "mean_tp", "mean_fp", "mean_fn", "mean_f1",
        "mean_dsc_single", "median_dsc_single",
        "mean_dsc_multiple", "median_dsc_multiple",
    ]
    header += [f"p_{lab}_greater" for lab in labels]
    rows = []
    dsc_vectors = {
        s["label"]: np.array([r.patient_dsc for r in s["reports"]]) for s in sets
    }
    for s in sets:
        reports = s["reports"]
        dscs = dsc_vectors[s["label"]]
        single = [r.patient_dsc for r in reports if r.gt_lesion_count == 1]
        multi = [r.patient_dsc for r in reports if r.gt_lesion_count >= 2]
        q1, med, q3 = np.percentile(dscs, [25, 50, 75], method="linear")
        row = [
            s["label"], len(reports), float(dscs.mean()),
            float(dscs.std(ddof=1)) if len(dscs) > 1 else 0.0,
            float(med), float(q1), float(q3),
            float(np.mean([r.tp for r in reports])),
            float(np.mean([r.fp for r in reports])),
            float(np.mean([r.fn for r in reports])),
            float(np.mean([r.f1 for r in reports])),
            float(np.mean(single)) if single else None,
            float(np.median(single)) if single else None,
            float(np.mean(multi)) if multi else None,
            float(np.median(multi)) if multi else None,
        ]
        for other in labels:
            if other == s["label"]:
                row.append(None)
                continue
            try:
                _, p = wilcoxon_signed_rank_one_tailed(dsc_vectors[other], dscs)
                row.append(p)
            except ValueError:
                row.append(None)
        rows.append(row)
    return header, rows


def _sweep_rows(sets) -> tuple[list, list]:
    header = ["pred_set", "level", "threshold", "median_dsc"]
    rows = []
    for s in sets:
        reports = s["reports"]
        patient_items = [(r.tmtv_ml, r.patient_dsc) for r in reports if r.tmtv_ml > 0]
        lesion_items = [
            (mtv, d)
            for r in reports
            for mtv, d in zip(r.mtv_ml, r.lesion_dscs)
        ]
        for level, items in (("patient", patient_items), ("lesion", lesion_items)):
            if not items:
                continue
            for t, med in threshold_sweep(items):
                rows.append([s["label"], level, t, med])
    return header, rows


@main.command("evaluate")
@click.argument("pred_dirs", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option("--gt-dir", required=True, type=click.Path(path_type=Path),
              help="Directory holding {id}_gt.vvol masks.")
@click.option("--pet-dir", required=True, type=click.Path(path_type=Path),
              help="Directory holding {id}_pet.vvol volumes.")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path),
              help="Per-case CSV output path; summary/sweep tables are written next to it.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Per-case evaluation threads.")
def cmd_evaluate(pred_dirs, gt_dir, pet_dir, out_path, jobs):
    """Evaluate one or more prediction sets ({id}_pred.vvol per PRED_DIR).

    Writes per-case rows to --out plus <stem>_summary.csv (with one-tailed
    paired Wilcoxon p-value columns when several sets are given) and
    <stem>_sweeps.csv (median DSC versus volume thresholds).
    """
    def run():
        case_ids = _collect_case_ids(gt_dir)
        labels = []
        for d in pred_dirs:
            label = d.name
            if label in labels:
                label = str(d).replace("/", "_")
            labels.append(label)
        sets = [
            _evaluate_pred_set(label, d, gt_dir, pet_dir, case_ids, jobs)
            for label, d in zip(labels, pred_dirs)
        ]
        header, rows = _per_case_rows(sets)
        _write_csv(out_path, header, rows)
        sheader, srows = _summary_rows(sets)
        _write_csv(out_path.with_name(out_path.stem + "_summary.csv"), sheader, srows)
        wheader, wrows = _sweep_rows(sets)
        _write_csv(out_path.with_name(out_path.stem + "_sweeps.csv"), wheader, wrows)
        click.echo(f"evaluated {len(case_ids)} cases x {len(sets)} prediction sets")

    _guarded(run)


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

@main.command("experiment")
@click.argument("config_path", type=click.Path(path_type=Path))
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.option("--no-timestamps", is_flag=True, help="Omit timestamps from the manifest.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Concurrent per-loss training runs.")
def cmd_experiment(config_path, out_dir, force, no_timestamps, jobs):
    """Train the voxel-feature model under each loss and compare them.

    CONFIG_PATH is JSON: {"seed", "phantom": {...cohort config...},
    "losses": [...], "optim": {steps, lr0, schedule, optimizer, eval_every},
    "loss_params": {gamma, alpha, epsilon, bin_width, focal_reduction}}.
    Outputs per-loss trajectories (JSONL), per-case reports (JSON + CSV),
    a summary table with single/multiple-lesion splits and Wilcoxon
    p-values, and a manifest.
    """
    def run():
        started = _utcnow()
        obj = _load_json_config(config_path)
        try:
            seed = int(obj.get("seed", 0))
            losses = list(obj.get("losses", LOSS_IDS))
            bad = [l for l in losses if l not in LOSS_IDS]
            if bad or not losses:
                raise ValueError(f"losses must be drawn from {LOSS_IDS}, got {losses}")
            base, spec = config_from_dict(obj["phantom"])
            if spec is None:
                raise ValueError('experiment config needs a phantom "cohort" block')
            optim_obj = obj.get("optim", {})
            loss_obj = obj.get("loss_params", {})
            loss_cfg = LossConfig(
                epsilon=float(loss_obj.get("epsilon", 1e-5)),
                gamma=float(loss_obj.get("gamma", 2.0)),
                alpha=float(loss_obj.get("alpha", 1.0)),
                bin_width=float(loss_obj.get("bin_width", 0.1)),
                focal_reduction=loss_obj.get("focal_reduction", "mean"),
            )

            def optim_cfg(loss_id):
                return OptimConfig(
                    loss_id=loss_id,
                    steps=int(optim_obj.get("steps", 200)),
                    lr0=float(optim_obj.get("lr0", 0.05)),
                    schedule=optim_obj.get("schedule", "cosine"),
                    optimizer=optim_obj.get("optimizer", "adaptive_moments"),
                    seed=seed,
                    eval_every=int(optim_obj.get("eval_every", 50)),
                )
            cfgs = [optim_cfg(l) for l in losses]
        except (KeyError, TypeError, ValueError) as exc:
            raise _fail(EXIT_CONFIG, f"config parse error: {exc}") from None

        _prepare_out_dir(out_dir, force)
        cases = cohort(base, spec)

        def train(cfg):
            return optimize_feature_model(cases, cfg, loss_cfg)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(train, cfgs))
        else:
            results = [train(cfg) for cfg in cfgs]

        sets = []
        for loss_id, result in zip(losses, results):
            rows = [json.dumps(r, sort_keys=True) for r in result.trajectory.to_rows()]
            (out_dir / f"trajectory_{loss_id}.jsonl").write_text(
                "\n".join(rows) + "\n", "utf-8"
            )
            (out_dir / f"reports_{loss_id}.json").write_text(
                json.dumps([r.to_dict() for r in result.reports], indent=2, sort_keys=True)
                + "\n",
                "utf-8",
            )
            sets.append({"label": loss_id, "reports": result.reports})

        header, rows = _per_case_rows(sets)
        _write_csv(out_dir / "per_case.csv", header, rows)
        sheader, srows = _summary_rows(sets)
        _write_csv(out_dir / "summary.csv", sheader, srows)
        wheader, wrows = _sweep_rows(sets)
        _write_csv(out_dir / "sweeps.csv", wheader, wrows)
        _write_manifest(
            out_dir, "experiment", obj, seed,
            {config_path: _sha256(config_path)},
            None if no_timestamps else (started, _utcnow()),
        )
        for result, loss_id in zip(results, losses):
            if result.trajectory.aborted:
                raise _fail(EXIT_NUMERIC, f"{loss_id}: {result.trajectory.abort_reason}")
        click.echo(f"experiment complete: {len(losses)} losses over {len(cases)} cases")

    _guarded(run)


# ---------------------------------------------------------------------------
# serve (bindings endpoint)
# ---------------------------------------------------------------------------

def _decode_array(payload: str, dtype: str, n: int, name: str) -> np.ndarray:
    if dtype not in ("f32", "f64"):
        raise ValueError(f"{name}: unsupported dtype {dtype!r}")
    raw = base64.b64decode(payload)
    np_dtype = "<f4" if dtype == "f32" else "<f8"
    arr = np.frombuffer(raw, dtype=np_dtype)
    if arr.size != n:
        raise ValueError(f"{name}: expected {n} values, got {arr.size}")
    return arr.astype(np.float64)


def _serve_loss(req: dict) -> dict:
    dims = tuple(int(d) for d in req["dims"])
    spacing = tuple(float(s) for s in req.get("spacing", (1.0, 1.0, 1.0)))
    n = dims[0] * dims[1] * dims[2]
    dtype = req.get("dtype", "f32")
    p_arr = _decode_array(req["p_b64"], dtype, n, "p")
    g_arr = _decode_array(req["g_b64"], dtype, n, "g")
    cfg_obj = req.get("config", {})
    cfg = LossConfig(
        epsilon=float(cfg_obj.get("epsilon", 1e-5)),
        gamma=float(cfg_obj.get("gamma", 2.0)),
        alpha=float(cfg_obj.get("alpha", 1.0)),
        bin_width=float(cfg_obj.get("bin_width", 0.1)),
        focal_reduction=cfg_obj.get("focal_reduction", "mean"),
    )
    p = VolumeGrid(dims, spacing, p_arr, "PROB")
    g = VolumeGrid(dims, spacing, g_arr, "MASK")
    res = loss_by_id(req["loss_id"])(p, g, cfg)
    out = {
        "value": res.value,
        "grad_b64": base64.b64encode(res.grad.data.astype("<f8").tobytes()).decode("ascii"),
        "grad_dtype": "f64",
    }
    if req["loss_id"] == "l1dfl":
        out["bins"] = bin_weights(l1_norms(p, g), cfg.bin_width).table()
    return out


def _serve_evaluate(req: dict) -> dict:
    dims = tuple(int(d) for d in req["dims"])
    spacing = tuple(float(s) for s in req.get("spacing", (1.0, 1.0, 1.0)))
    n = dims[0] * dims[1] * dims[2]
    dtype = req.get("dtype", "f32")
    gt = VolumeGrid(dims, spacing, _decode_array(req["gt_b64"], dtype, n, "gt"), "MASK")
    pred = VolumeGrid(dims, spacing, _decode_array(req["pred_b64"], dtype, n, "pred"), "MASK")
    pet = VolumeGrid(dims, spacing, _decode_array(req["pet_b64"], dtype, n, "pet"), "SUV")
    report = evaluate_detection(gt, pred, pet, case_id=req.get("case_id", ""))
    return {"report": report.to_dict()}


@main.command("serve")
def cmd_serve():
    """Answer JSON-lines requests on stdin until "shutdown" or EOF.

    Request: {"id": ..., "op": "ping"|"loss"|"evaluate"|"shutdown", ...};
    arrays travel as little-endian base64 with a "dtype" of f32 or f64.
    Responses mirror the request id; gradients come back as base64 float64.
    """
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req_id = None
        try:
            req = json.loads(line)
            req_id = req.get("id")
            op = req.get("op")
            if op == "ping":
                resp = {"id": req_id, "ok": True, "version": __version__}
            elif op == "shutdown":
                print(json.dumps({"id": req_id, "ok": True}), flush=True)
                break
            elif op == "loss":
                resp = {"id": req_id, "ok": True, **_serve_loss(req)}
            elif op == "evaluate":
                resp = {"id": req_id, "ok": True, **_serve_evaluate(req)}
            else:
                resp = {"id": req_id, "ok": False, "code": "bad-op",
                        "error": f"unknown op {op!r}"}
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            resp = {"id": req_id, "ok": False, "code": "input", "error": str(exc)}
        print(json.dumps(resp), flush=True)


if __name__ == "__main__":
    main()

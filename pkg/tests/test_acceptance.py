"""Acceptance suite: one test per release criterion, with pinned tolerances.

Run with ``pytest -s tests/test_acceptance.py`` to see one PASS/FAIL line per
criterion.
"""

import json
import time
from itertools import product

import numpy as np
import pytest
from click.testing import CliRunner

from lesionkit import (
    VolumeGrid,
    classify_detections,
    connected_components_18,
    dmax,
    grad_check,
    make_rng,
    optimize_logits,
    read_vvol,
    wilcoxon_signed_rank_one_tailed,
    write_vvol,
    LossConfig,
    OptimConfig,
    VvolError,
)
from lesionkit.cli import main as cli_main
from lesionkit.losses import _weighted_dice_fb, residual_bins
from lesionkit.phantom import PhantomConfig, SphereSpec, generate

from oracles import brute_force_pairwise_max_cm, flood_fill_components_18, wilcoxon_enumeration


def _report(name):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.monotonic()
            return self

        def __exit__(self, exc_type, exc, tb):
            dt = time.monotonic() - self.t0
            status = "PASS" if exc_type is None else "FAIL"
            print(f"[{status}] {name} ({dt:.2f}s)")
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_gradient_suite():
    with _report("gradient suite: 4 losses x 50 instances, dims <= 6^3, h=1e-5, rel err < 1e-4, < 10 s"):
        rng = make_rng(20250809)
        t0 = time.monotonic()
        worst = {}
        for loss_id in ("dice", "focal", "dfl", "l1dfl"):
            max_err = 0.0
            for _ in range(50):
                dims = tuple(int(rng.integers(2, 7)) for _ in range(3))
                n = dims[0] * dims[1] * dims[2]
                p = VolumeGrid(dims, (1, 1, 1), rng.uniform(0.02, 0.98, n), "PROB")
                g = VolumeGrid(dims, (1, 1, 1), (rng.random(n) < 0.35).astype(float), "MASK")
                rep = grad_check(loss_id, p, g, LossConfig(), h=1e-5, tol=1e-4)
                max_err = max(max_err, rep.max_error)
                assert rep.passed, (loss_id, rep.max_error, rep.worst_index)
            worst[loss_id] = max_err
        elapsed = time.monotonic() - t0
        assert elapsed < 10.0, f"gradient suite took {elapsed:.1f}s"
        assert all(err < 1e-4 for err in worst.values()), worst


# ---------------------------------------------------------------------------
# 2. weighting arithmetic
# ---------------------------------------------------------------------------

def test_weighting_arithmetic_exact():
    with _report("weighting arithmetic: residuals {0,0,0,1}, width 0.1 -> exact hand values"):
        bw = residual_bins(np.array([0.0, 0.0, 0.0, 1.0]), 0.1)
        assert int(bw.counts[0]) == 3
        assert int(bw.counts[10]) == 1
        assert bw.eff_width[0] == 0.05
        assert bw.eff_width[10] == 0.05
        assert bw.density[0] == 60.0
        assert bw.density[10] == 20.0
        assert bw.bin_weight(0) == 1.0 / 15.0
        assert bw.bin_weight(10) == 1.0 / 5.0
        assert bw.voxel_weight[0] == 1.0 / 15.0
        assert bw.voxel_weight[3] == 0.2


# ---------------------------------------------------------------------------
# 3. reduction to the unweighted squared-denominator Dice
# ---------------------------------------------------------------------------

def _unweighted_squared_dice(p, g):
    num_fg = 2 * np.sum(g * p)
    den_fg = np.sum(g * g + p * p)
    num_bg = 2 * np.sum((1 - g) * (1 - p))
    den_bg = np.sum((1 - g) ** 2 + (1 - p) ** 2)
    return 1.0 - 0.5 * (num_fg / den_fg + num_bg / den_bg)


def test_reduction_property():
    with _report("reduction: weighted Dice == squared-denominator Dice within 1e-9 (eps=0)"):
        rng = make_rng(77)
        # single-bin cases: constant residual magnitude
        for shift in (0.0, 0.07, 0.33):
            g = (rng.random(200) < 0.25).astype(float)
            p = np.abs(g - shift)  # residual == shift everywhere
            bw = residual_bins(np.abs(g - p), 0.1)
            assert np.flatnonzero(bw.counts).size == 1
            value, _ = _weighted_dice_fb(p, g, bw.voxel_weight, 0.0)
            assert abs(value - _unweighted_squared_dice(p, g)) < 1e-9
        # density-uniform construction: counts proportional to widths
        delta = np.concatenate([[0.0], np.repeat(np.arange(1, 10) * 0.1, 2), [1.0]])
        g = np.zeros(delta.size)
        p = delta.copy()
        bw = residual_bins(np.abs(g - p), 0.1)
        assert np.unique(bw.density[bw.counts > 0]).size == 1
        value, _ = _weighted_dice_fb(p, g, bw.voxel_weight, 0.0)
        assert abs(value - _unweighted_squared_dice(p, g)) < 1e-9


# ---------------------------------------------------------------------------
# 4. bin count
# ---------------------------------------------------------------------------

def test_bin_count():
    with _report("bin count: width 0.1 -> 11 bins centered 0.0, 0.1, ..., 1.0"):
        bw = residual_bins(np.array([0.5]), 0.1)
        assert bw.n_bins == 11
        np.testing.assert_allclose(bw.centers, np.arange(11) * 0.1, atol=1e-15)


# ---------------------------------------------------------------------------
# 5. metrics oracles
# ---------------------------------------------------------------------------

def test_components_match_flood_fill_200_masks():
    with _report("components: union-find == flood fill on 200 random 16^3 masks"):
        rng = make_rng(501)
        for _ in range(200):
            frac = rng.uniform(0.03, 0.6)
            data = (rng.random(16**3) < frac).astype(np.float64)
            mask = VolumeGrid((16, 16, 16), (1, 1, 1), data, "MASK")
            ls = connected_components_18(mask)
            labels, count = flood_fill_components_18(mask)
            assert ls.count == count
            assert np.array_equal(ls.labels, labels)


def test_dmax_accelerated_equals_bruteforce_100_masks():
    with _report("dmax: accelerated path == O(N^2) brute force on 100 masks <= 500 voxels"):
        rng = make_rng(502)
        spacings = [1.0, 2.0, 2.5, 3.0]
        for _ in range(100):
            n_fg = int(rng.integers(2, 501))
            dims = (20, 20, 20)
            idx = rng.choice(20**3, size=n_fg, replace=False)
            data = np.zeros(20**3)
            data[idx] = 1.0
            spacing = tuple(float(rng.choice(spacings)) for _ in range(3))
            mask = VolumeGrid(dims, spacing, data, "MASK")
            accel = dmax(mask, method="reduced")
            brute = dmax(mask, method="bruteforce")
            oracle = brute_force_pairwise_max_cm(mask)
            assert accel == brute == oracle


def _scenario_case(gt_lesions, pred_lesions, hot):
    dims = (12, 12, 12)
    n = 12**3

    def build(groups):
        data = np.zeros(n)
        for group in groups:
            for x, y, z in group:
                data[x + 12 * (y + 12 * z)] = 1.0
        return VolumeGrid(dims, (1, 1, 1), data, "MASK")

    pet = np.full(n, 1.0)
    for (x, y, z), v in hot:
        pet[x + 12 * (y + 12 * z)] = v
    return (
        connected_components_18(build(gt_lesions)),
        connected_components_18(build(pred_lesions)),
        VolumeGrid(dims, (1, 1, 1), pet, "SUV"),
    )


DETECTION_SCENARIOS = [
    # (gt lesions, pred components, hot voxels, expected tp/fp/fn/partial)
    ("pred covers the hottest voxel",
     [[(2, 2, 2), (3, 2, 2)]], [[(2, 2, 2)]], [((2, 2, 2), 9.0)], (1, 0, 0, 0)),
    ("pred overlaps but misses the hottest voxel",
     [[(2, 2, 2), (3, 2, 2)]], [[(3, 2, 2)]], [((2, 2, 2), 9.0)], (0, 0, 1, 1)),
    ("disjoint prediction",
     [[(2, 2, 2)]], [[(8, 8, 8)]], [((2, 2, 2), 9.0)], (0, 1, 1, 0)),
    ("empty prediction",
     [[(2, 2, 2)]], [], [((2, 2, 2), 9.0)], (0, 0, 1, 0)),
    ("empty ground truth",
     [], [[(8, 8, 8)]], [], (0, 1, 0, 0)),
    ("both empty",
     [], [], [], (0, 0, 0, 0)),
    ("one prediction detects two lesions",
     [[(2, 2, 2)], [(8, 2, 2)]],
     [[(x, 2, 2) for x in range(2, 9)]],
     [((2, 2, 2), 9.0), ((8, 2, 2), 7.0)], (2, 0, 0, 0)),
    ("second overlapping prediction is partial, not FP",
     [[(2, 2, 2), (3, 2, 2), (4, 2, 2)]],
     [[(2, 2, 2)], [(4, 2, 2)]],
     [((2, 2, 2), 9.0)], (1, 0, 0, 1)),
    ("detection plus stray blob",
     [[(2, 2, 2)], [(2, 8, 2)]],
     [[(2, 2, 2)], [(8, 8, 8)]],
     [((2, 2, 2), 9.0), ((2, 8, 2), 5.0)], (1, 1, 1, 0)),
    ("SUV tie broken by scan order",
     [[(3, 3, 3), (4, 3, 3)]], [[(4, 3, 3)]],
     [((3, 3, 3), 7.0), ((4, 3, 3), 7.0)], (0, 0, 1, 1)),
]


def test_detection_scenario_table():
    with _report("detection classification matches the 10-case hand-built table"):
        for name, gt_l, pred_l, hot, expected in DETECTION_SCENARIOS:
            gt_ls, pred_ls, pet = _scenario_case(gt_l, pred_l, hot)
            counts = classify_detections(gt_ls, pred_ls, pet)
            got = (counts.tp, counts.fp, counts.fn, counts.partial_overlap)
            assert got == expected, f"{name}: expected {expected}, got {got}"
            assert counts.tp + counts.fn == gt_ls.count, name


# ---------------------------------------------------------------------------
# 6. Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def test_wilcoxon_exact_values_and_enumeration():
    with _report("wilcoxon: p = 2^-n for all-positive n=5..10; matches 2^n enumeration on 100 samples"):
        for n in range(5, 11):
            a = np.arange(1, n + 1, dtype=float) + 1.0
            b = np.ones(n)
            _, p = wilcoxon_signed_rank_one_tailed(a, b)
            assert p == pytest.approx(2.0 ** (-n), rel=1e-12)

        rng = make_rng(601)
        checked = 0
        while checked < 100:
            n = int(rng.integers(5, 13))
            a = rng.normal(0.3, 1.0, n)
            b = rng.normal(0.0, 1.0, n)
            if rng.random() < 0.4 and n >= 7:
                d = a - b
                d[1] = -d[0]           # tie in |d| with opposite signs
                d[3] = d[2]            # exact duplicate difference
                a = b + d
            d = a - b
            if np.count_nonzero(d) < 5:
                continue
            w, p = wilcoxon_signed_rank_one_tailed(a, b)
            w_ref, p_ref = wilcoxon_enumeration(a, b)
            assert w == pytest.approx(w_ref, abs=0)
            assert p == pytest.approx(p_ref, rel=1e-12)
            checked += 1


# ---------------------------------------------------------------------------
# 7. end-to-end convergence
# ---------------------------------------------------------------------------

def test_end_to_end_convergence_all_losses():
    with _report("end-to-end: free-logit descent reaches DSC >= 0.99 in <= 2000 steps for all losses, < 60 s each"):
        case = generate(PhantomConfig(
            dims=(16, 16, 16), spacing=(2, 2, 2), seed=0,
            lesions=(SphereSpec(center=(8, 8, 8), radius_mm=6.0, peak_suv=10.0),),
            background_suv_mean=0.5, background_noise_sd=0.1,
        ))
        for loss_id in ("dice", "focal", "dfl", "l1dfl"):
            t0 = time.monotonic()
            traj = optimize_logits(
                case,
                OptimConfig(loss_id=loss_id, steps=2000, lr0=0.05,
                            schedule="cosine", optimizer="adaptive_moments",
                            eval_every=500),
                LossConfig(),
            )
            elapsed = time.monotonic() - t0
            assert not traj.aborted, loss_id
            final = traj.records[-1]
            assert final.step <= 2000
            assert final.dsc >= 0.99, (loss_id, final.dsc)
            assert elapsed < 60.0, (loss_id, elapsed)


# ---------------------------------------------------------------------------
# 8. experiment determinism
# ---------------------------------------------------------------------------

EXPERIMENT_CONFIG = {
    "seed": 3,
    "phantom": {
        "dims": [24, 24, 24],
        "spacing": [2, 2, 2],
        "lesions": [{"center": [12, 12, 12], "radius_mm": 6.0, "peak_suv": 9.0}],
        "traps": [{"center": [6, 6, 6], "radius_mm": 6.0, "peak_suv": 12.0}],
        "background_suv_mean": 0.4,
        "background_noise_sd": 0.1,
        "cohort": {"n_cases": 10, "single_fraction": 0.5, "seed": 11},
    },
    "losses": ["dice", "focal", "dfl", "l1dfl"],
    "optim": {"steps": 100, "lr0": 0.05, "eval_every": 50},
    "loss_params": {"gamma": 2.0, "bin_width": 0.1},
}


def test_experiment_rerun_bit_identical(tmp_path):
    with _report("determinism: experiment rerun emits bit-identical CSV/JSON (timestamps excluded)"):
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(EXPERIMENT_CONFIG))
        runner = CliRunner()
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            result = runner.invoke(
                cli_main, ["experiment", str(cfg_path), str(out), "--no-timestamps"]
            )
            assert result.exit_code == 0, result.output
        names = sorted(p.name for p in out1.iterdir())
        assert names == sorted(p.name for p in out2.iterdir())
        for name in names:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
        # the summary holds one row per loss and the paired p-value columns
        summary = (out1 / "summary.csv").read_text().strip().split("\n")
        assert len(summary) == 1 + 4
        assert "p_l1dfl_greater" in summary[0]
        assert "mean_dsc_single" in summary[0] and "mean_dsc_multiple" in summary[0]


# ---------------------------------------------------------------------------
# 9. container format
# ---------------------------------------------------------------------------

def test_vvol_round_trip_and_error_codes(tmp_path):
    with _report("format: .vvol round-trip bit-exact; malformed inputs yield documented codes"):
        rng = make_rng(901)
        for trial in range(30):
            kind = ("SUV", "MASK", "PROB", "WEIGHT", "CT_RAW")[trial % 5]
            dims = tuple(int(rng.integers(1, 33)) for _ in range(3))
            n = dims[0] * dims[1] * dims[2]
            if kind == "MASK":
                data = (rng.random(n) < 0.4).astype(np.float64)
            elif kind == "PROB":
                data = rng.random(n).astype(np.float32).astype(np.float64)
            else:
                data = (rng.standard_normal(n) * 7).astype(np.float32).astype(np.float64)
            vol = VolumeGrid(dims, tuple(rng.uniform(0.5, 4.0, 3)), data, kind)
            path = tmp_path / f"v{trial}.vvol"
            write_vvol(vol, path)
            back = read_vvol(path)
            assert back.dims == vol.dims and back.spacing == vol.spacing
            assert back.kind == vol.kind
            assert np.array_equal(back.data, vol.data)

        header = json.dumps(
            {"dims": [2, 2, 2], "spacing": [1, 1, 1], "kind": "SUV", "dtype": "f32"}
        ).encode()
        cases = {
            "bad-magic": b"XXXX1\n" + header + b"\n" + b"\x00" * 32,
            "bad-header": b"VVOL1\nnot json\n" + b"\x00" * 32,
            "unknown-dtype": b"VVOL1\n" + header.replace(b"f32", b"f16") + b"\n" + b"\x00" * 32,
            "truncated": b"VVOL1\n" + header + b"\n" + b"\x00" * 28,
            "payload-mismatch": b"VVOL1\n" + header + b"\n" + b"\x00" * 36,
        }
        for code, blob in cases.items():
            path = tmp_path / f"{code}.vvol"
            path.write_bytes(blob)
            with pytest.raises(VvolError) as exc:
                read_vvol(path)
            assert exc.value.code == code, (code, exc.value.code)

"""Synthetic PET/CT scan generator with controllable lesions and decoys.

Each case gets a noisy low-uptake background, Gaussian-profile uptake spheres
for lesions, optional high-uptake non-lesion "trap" spheres (bladder-like
structures that tempt false positives), and a soft-tissue body ellipsoid on
the CT channel. Ground truth marks only lesion cores: voxels inside a
lesion's radius whose uptake contribution from that lesion is at least
``gt_threshold_frac`` of its peak. Everything is deterministic given the
config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import connected_components_18
from .volume import ScanCase, VolumeGrid, clip_normalize_ct, make_rng


@dataclass(frozen=True)
class SphereSpec:
    """Radial uptake source: center in voxel coordinates, radius and peak SUV."""

    center: tuple[int, int, int]
    radius_mm: float
    peak_suv: float

    def __post_init__(self):
        center = tuple(int(c) for c in self.center)
        if len(center) != 3:
            raise ValueError(f"center must be 3 voxel coordinates, got {self.center!r}")
        if self.radius_mm <= 0 or self.peak_suv <= 0:
            raise ValueError("radius_mm and peak_suv must be positive")
        object.__setattr__(self, "center", center)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    seed: int = 0
    lesions: tuple = ()
    traps: tuple = ()
    background_suv_mean: float = 0.3
    background_noise_sd: float = 0.1
    gt_threshold_frac: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "lesions", tuple(self.lesions))
        object.__setattr__(self, "traps", tuple(self.traps))
        if not 0.0 < self.gt_threshold_frac < 1.0:
            raise ValueError(f"gt_threshold_frac must be in (0, 1), got {self.gt_threshold_frac}")
        if self.background_noise_sd < 0 or self.background_suv_mean < 0:
            raise ValueError("background mean and noise sd must be non-negative")
        for sph in self.lesions + self.traps:
            for c, d, s in zip(sph.center, self.dims, self.spacing):
                r_vox = sph.radius_mm / s
                if c - r_vox < 0 or c + r_vox > d - 1:
                    raise ValueError(
                        f"sphere at {sph.center} with radius {sph.radius_mm} mm "
                        f"does not fit inside dims {self.dims}"
                    )


def _voxel_coords_mm(dims, spacing):
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz, dtype=np.int64)
    x = (idx % nx).astype(np.float64) * spacing[0]
    y = ((idx // nx) % ny).astype(np.float64) * spacing[1]
    z = (idx // (nx * ny)).astype(np.float64) * spacing[2]
    return x, y, z


def _sphere_fields(sph: SphereSpec, coords, spacing):
    x, y, z = coords
    cx, cy, cz = (c * s for c, s in zip(sph.center, spacing))
    r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
    sigma = sph.radius_mm / 2.0
    uptake = sph.peak_suv * np.exp(-r2 / (2.0 * sigma**2))
    return uptake, r2


def generate(config: PhantomConfig, case_id: str | None = None) -> ScanCase:
    """Build one deterministic case from an explicit sphere layout.

    Rejects configs whose lesion cores merge under 18-connectivity, vanish
    entirely, or collide with a trap.
    """
    rng = make_rng(config.seed)
    n = config.dims[0] * config.dims[1] * config.dims[2]
    pet = np.maximum(
        rng.normal(config.background_suv_mean, config.background_noise_sd, n), 0.0
    )

    coords = _voxel_coords_mm(config.dims, config.spacing)
    gt = np.zeros(n, dtype=np.float64)
    for sph in config.lesions:
        uptake, r2 = _sphere_fields(sph, coords, config.spacing)
        pet += uptake
        core = (r2 <= sph.radius_mm**2) & (uptake >= config.gt_threshold_frac * sph.peak_suv)
        if not core.any():
            raise ValueError(f"lesion at {sph.center} produces an empty ground-truth core")
        gt[core] = 1.0

    trap_zone = np.zeros(n, dtype=bool)
    for sph in config.traps:
        uptake, r2 = _sphere_fields(sph, coords, config.spacing)
        pet += uptake
        trap_zone |= r2 <= sph.radius_mm**2

    if (gt[trap_zone] > 0).any():
        raise ValueError("trap sphere intersects a ground-truth lesion core")

    gt_vol = VolumeGrid(config.dims, config.spacing, gt, "MASK")
    n_comp = connected_components_18(gt_vol).count
    if n_comp != len(config.lesions):
        raise ValueError(
            f"lesion cores are not separable: {len(config.lesions)} lesions produced "
            f"{n_comp} connected components"
        )

    # body ellipsoid on CT: soft tissue (~40 HU) inside, air outside
    x, y, z = coords
    extents = [d * s for d, s in zip(config.dims, config.spacing)]
    body = sum(
        ((c - (e - s) / 2.0) / (0.45 * e)) ** 2
        for c, e, s in zip((x, y, z), extents, config.spacing)
    ) <= 1.0
    ct_raw = VolumeGrid(config.dims, config.spacing, np.where(body, 40.0, -1000.0), "CT_RAW")

    return ScanCase(
        id=case_id if case_id is not None else f"phantom-{config.seed}",
        pet=VolumeGrid(config.dims, config.spacing, pet, "SUV"),
        ct=clip_normalize_ct(ct_raw),
        gt=gt_vol,
    )


@dataclass(frozen=True)
class CohortSpec:
    """Jitter recipe for generating a cohort from a base config."""

    n_cases: int
    single_fraction: float = 0.5
    base_lesion: SphereSpec | None = None
    max_lesions: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError(f"n_cases must be >= 1, got {self.n_cases}")
        if not 0.0 <= self.single_fraction <= 1.0:
            raise ValueError("single_fraction must be in [0, 1]")
        if self.max_lesions < 2:
            raise ValueError("max_lesions must be >= 2")


def _place_spheres(rng, base: PhantomConfig, protos, existing, max_attempts=500):
    """Randomly place jittered copies of prototype spheres, rejecting overlaps."""
    placed = list(existing)
    out = []
    min_sp = min(base.spacing)
    for proto in protos:
        radius = proto.radius_mm * rng.uniform(0.75, 1.3)
        peak = proto.peak_suv * rng.uniform(0.8, 1.25)
        for attempt in range(max_attempts):
            center = tuple(
                int(rng.integers(int(np.ceil(radius / s)) + 1, d - int(np.ceil(radius / s)) - 1))
                for d, s in zip(base.dims, base.spacing)
            )
            ok = True
            for other_center, other_radius in placed:
                dist = np.sqrt(
                    sum(((a - b) * s) ** 2 for a, b, s in zip(center, other_center, base.spacing))
                )
                if dist < radius + other_radius + 3.0 * min_sp:
                    ok = False
                    break
            if ok:
                sph = SphereSpec(center=center, radius_mm=radius, peak_suv=peak)
                placed.append((center, radius))
                out.append(sph)
                break
        else:
            raise ValueError(
                f"could not place a sphere of radius {radius:.1f} mm after {max_attempts} attempts; "
                f"volume too small or too crowded"
            )
    return out, placed


def cohort(base: PhantomConfig, spec: CohortSpec) -> list[ScanCase]:
    """Generate a deterministic cohort mixing single- and multi-lesion cases.

    The first round(n * single_fraction) cases carry one lesion, the rest
    2..max_lesions; lesion size, uptake, and position are jittered around the
    prototype. Traps from the base config are re-placed per case.
    """
    proto = spec.base_lesion
    if proto is None:
        if not base.lesions:
            raise ValueError("need base.lesions or spec.base_lesion as a lesion prototype")
        proto = base.lesions[0]

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_cases)
    n_single = int(round(spec.n_cases * spec.single_fraction))
    cases = []
    for i, child in enumerate(children):
        case_seed = int(child.generate_state(1, np.uint64)[0])
        rng = make_rng(case_seed)
        n_lesions = 1 if i < n_single else int(rng.integers(2, spec.max_lesions + 1))
        lesions, placed = _place_spheres(rng, base, [proto] * n_lesions, [])
        traps, _ = _place_spheres(rng, base, base.traps, placed)
        cfg = replace(base, seed=case_seed, lesions=tuple(lesions), traps=tuple(traps))
        cases.append(generate(cfg, case_id=f"case{i:03d}"))
    return cases


def config_from_dict(obj: dict) -> tuple[PhantomConfig, CohortSpec | None]:
    """Parse the JSON schema used by the command line.

    Top-level keys mirror PhantomConfig (dims, spacing, seed, lesions, traps,
    background_suv_mean, background_noise_sd, gt_threshold_frac); an optional
    "cohort" object adds {n_cases, single_fraction, base_lesion, max_lesions}.
    """
    def sphere(d):
        return SphereSpec(
            center=tuple(d["center"]),
            radius_mm=float(d["radius_mm"]),
            peak_suv=float(d["peak_suv"]),
        )

    known = {
        "dims", "spacing", "seed", "lesions", "traps",
        "background_suv_mean", "background_noise_sd", "gt_threshold_frac", "cohort",
    }
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    base = PhantomConfig(
        dims=tuple(obj.get("dims", (32, 32, 32))),
        spacing=tuple(obj.get("spacing", (2.0, 2.0, 2.0))),
        seed=int(obj.get("seed", 0)),
        lesions=tuple(sphere(d) for d in obj.get("lesions", ())),
        traps=tuple(sphere(d) for d in obj.get("traps", ())),
        background_suv_mean=float(obj.get("background_suv_mean", 0.3)),
        background_noise_sd=float(obj.get("background_noise_sd", 0.1)),
        gt_threshold_frac=float(obj.get("gt_threshold_frac", 0.4)),
    )
    if "cohort" not in obj:
        return base, None
    c = obj["cohort"]
    spec = CohortSpec(
        n_cases=int(c["n_cases"]),
        single_fraction=float(c.get("single_fraction", 0.5)),
        base_lesion=sphere(c["base_lesion"]) if "base_lesion" in c else None,
        max_lesions=int(c.get("max_lesions", 3)),
        seed=int(c.get("seed", base.seed)),
    )
    return base, spec

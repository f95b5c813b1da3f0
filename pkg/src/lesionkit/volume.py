"""Volumetric data model, the .vvol container format, and preprocessing ops.

A volume is a dense 3D scalar field with physical voxel spacing. Data is
stored flat in x-fastest order: flat index ``i = x + nx * (y + ny * z)``.
All arithmetic is done in float64; files store float32.

.vvol format
------------
* bytes ``VVOL1\\n``
* one UTF-8 JSON line terminated by ``\\n`` with keys
  ``{"dims": [nx, ny, nz], "spacing": [sx, sy, sz], "kind": <kind>, "dtype": "f32"}``
* ``nx * ny * nz`` little-endian IEEE-754 binary32 values in x-fastest order.

Mask volumes store 0.0/1.0. Decoding errors carry a machine-readable
``code``: ``bad-magic``, ``bad-header``, ``unknown-dtype``, ``truncated``,
``payload-mismatch``, ``invalid-volume``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    check_binary,
    check_finite,
    check_geometry,
    check_positive_triple,
    check_unit_range,
)

KINDS = ("SUV", "CT_RAW", "CT_NORM", "MASK", "PROB", "LOGIT", "WEIGHT")

MAGIC = b"VVOL1\n"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the one RNG used everywhere for portability."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class VvolError(ValueError):
    """Decode/encode failure for the .vvol format, with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class VolumeGrid:
    """Immutable dense 3D scalar field with voxel spacing in millimeters."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    kind: str

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims!r}")
        spacing = check_positive_triple(self.spacing, "spacing")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64)).reshape(-1)
        n = dims[0] * dims[1] * dims[2]
        if data.size != n:
            raise ValueError(f"data length {data.size} != nx*ny*nz = {n}")
        if self.kind == "MASK":
            check_binary(data, "MASK volume")
        elif self.kind == "PROB":
            check_finite(data, "PROB volume")
            check_unit_range(data, "PROB volume")
        elif self.kind == "CT_NORM":
            check_finite(data, "CT_NORM volume")
            check_unit_range(data, "CT_NORM volume")
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_ml(self) -> float:
        """Volume of one voxel in milliliters (spacing is mm, 1 ml = 1000 mm^3)."""
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def as_3d(self) -> np.ndarray:
        """Read-only (nx, ny, nz) view of the flat x-fastest buffer."""
        return self.data.reshape(self.dims, order="F")

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "VolumeGrid":
        return VolumeGrid(self.dims, self.spacing, data, kind if kind is not None else self.kind)

    def flat_index(self, x: int, y: int, z: int) -> int:
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def flat_to_xyz(self, i: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        return i % nx, (i // nx) % ny, i // (nx * ny)


@dataclass(frozen=True)
class ScanCase:
    """One patient-equivalent sample: PET SUV, normalized CT, binary GT mask."""

    id: str
    pet: VolumeGrid
    ct: VolumeGrid
    gt: VolumeGrid

    def __post_init__(self):
        for vol, want in ((self.pet, "SUV"), (self.ct, "CT_NORM"), (self.gt, "MASK")):
            if vol.kind != want:
                raise ValueError(f"ScanCase field expects kind {want}, got {vol.kind}")
        check_geometry(self.pet, self.ct, ("pet", "ct"))
        check_geometry(self.pet, self.gt, ("pet", "gt"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.pet.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.pet.spacing


@dataclass(frozen=True)
class PatchSpec:
    """Cubic (or box) patch sampling request with a foreground-centering bias."""

    size: tuple[int, int, int]
    foreground_bias: float = 0.8
    seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or any(s < 1 for s in size):
            raise ValueError(f"patch size must be 3 positive integers, got {self.size!r}")
        if not 0.0 <= self.foreground_bias <= 1.0:
            raise ValueError(f"foreground_bias must be in [0, 1], got {self.foreground_bias}")
        object.__setattr__(self, "size", size)


# ---------------------------------------------------------------------------
# .vvol codec
# ---------------------------------------------------------------------------

def write_vvol(vol: VolumeGrid, path) -> None:
    """Write a volume; data is stored as little-endian float32."""
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "kind": vol.kind,
        "dtype": "f32",
    }
    payload = vol.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_vvol(path) -> VolumeGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise VvolError("bad-magic", f"bad magic: expected {MAGIC!r}")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise VvolError("bad-header", "header line is not newline-terminated")
    try:
        header = json.loads(raw[len(MAGIC): nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VvolError("bad-header", f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"dims", "spacing", "kind", "dtype"}:
        raise VvolError("bad-header", f"header keys must be dims/spacing/kind/dtype, got {header!r}")
    if header["dtype"] != "f32":
        raise VvolError("unknown-dtype", f"unknown dtype {header['dtype']!r} (only 'f32' is defined)")
    if header["kind"] not in KINDS:
        raise VvolError("bad-header", f"unknown volume kind {header['kind']!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
    except (TypeError, ValueError) as exc:
        raise VvolError("bad-header", f"malformed dims/spacing: {exc}") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise VvolError("bad-header", f"dims must be 3 positive integers, got {dims!r}")
    n = dims[0] * dims[1] * dims[2]
    payload = raw[nl + 1:]
    if len(payload) < 4 * n:
        raise VvolError(
            "truncated",
            f"payload size mismatch: expected {n} float32 values ({4 * n} bytes), "
            f"got {len(payload)} bytes",
        )
    if len(payload) > 4 * n:
        raise VvolError(
            "payload-mismatch",
            f"payload size mismatch: {len(payload) - 4 * n} trailing bytes after "
            f"{n} float32 values",
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    try:
        return VolumeGrid(dims, spacing, data, header["kind"])
    except ValueError as exc:
        raise VvolError("invalid-volume", f"payload violates {header['kind']} invariants: {exc}") from None


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def clip_normalize_ct(raw: VolumeGrid, lo: float = -1000.0, hi: float = 3000.0) -> VolumeGrid:
    """Clamp raw CT intensities to [lo, hi] and rescale linearly onto [0, 1]."""
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    check_finite(raw.data, "CT input")
    out = (np.clip(raw.data, lo, hi) - lo) / (hi - lo)
    return VolumeGrid(raw.dims, raw.spacing, out, "CT_NORM")


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # a + t*(b-a) is exact when a == b, so constants resample bit-exactly
    return a + t * (b - a)


def resample(vol: VolumeGrid, target_spacing, mode: str = "trilinear") -> VolumeGrid:
    """Resample onto a new isotropic-or-not grid of the same physical extent.

    Output dims are round-half-up of dim*spacing/target (at least 1). Sample
    positions are output voxel centers mapped into input continuous index
    space with the half-voxel convention; out-of-range samples clamp to the
    boundary voxel. Masks must use nearest-neighbor so they stay binary.
    """
    target = check_positive_triple(target_spacing, "target_spacing")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    if vol.kind == "MASK" and mode != "nearest":
        raise ValueError("MASK volumes require mode='nearest' (trilinear would break binarity)")

    out_dims = tuple(
        max(1, int(np.floor(d * s / t + 0.5)))
        for d, s, t in zip(vol.dims, vol.spacing, target)
    )
    src = vol.as_3d()

    # continuous input index per output index, one axis at a time
    axes_u = [
        (np.arange(nd, dtype=np.float64) + 0.5) * t / s - 0.5
        for nd, t, s in zip(out_dims, target, vol.spacing)
    ]

    if mode == "nearest":
        idx = [
            np.clip(np.floor(u + 0.5).astype(np.int64), 0, d - 1)
            for u, d in zip(axes_u, vol.dims)
        ]
        out = src[np.ix_(*idx)]
    else:
        lo_idx, hi_idx, fracs = [], [], []
        for u, d in zip(axes_u, vol.dims):
            i0 = np.floor(u).astype(np.int64)
            t_ax = u - i0
            lo_idx.append(np.clip(i0, 0, d - 1))
            hi_idx.append(np.clip(i0 + 1, 0, d - 1))
            fracs.append(t_ax)
        tx = fracs[0][:, None, None]
        ty = fracs[1][None, :, None]
        tz = fracs[2][None, None, :]
        x0, y0, z0 = lo_idx
        x1, y1, z1 = hi_idx
        c00 = _lerp(src[np.ix_(x0, y0, z0)], src[np.ix_(x1, y0, z0)], tx)
        c10 = _lerp(src[np.ix_(x0, y1, z0)], src[np.ix_(x1, y1, z0)], tx)
        c01 = _lerp(src[np.ix_(x0, y0, z1)], src[np.ix_(x1, y0, z1)], tx)
        c11 = _lerp(src[np.ix_(x0, y1, z1)], src[np.ix_(x1, y1, z1)], tx)
        c0 = _lerp(c00, c10, ty)
        c1 = _lerp(c01, c11, ty)
        out = _lerp(c0, c1, tz)

    return VolumeGrid(out_dims, target, out.ravel(order="F"), vol.kind)


def _crop(vol: VolumeGrid, origin, size) -> VolumeGrid:
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return VolumeGrid(size, vol.spacing, vol.as_3d()[sl].ravel(order="F"), vol.kind)


def sample_patch(case: ScanCase, spec: PatchSpec) -> ScanCase:
    """Crop a PET/CT/GT patch, biased toward centering on a foreground voxel.

    With probability ``foreground_bias`` the patch center is a uniformly
    chosen GT-foreground voxel (uniform over the whole grid when the mask is
    empty); otherwise a uniformly chosen voxel. The origin is clamped so the
    patch stays in bounds. Deterministic given ``spec.seed``.
    """
    dims = case.dims
    size = spec.size
    if any(s > d for s, d in zip(size, dims)):
        raise ValueError(f"patch size {size} does not fit inside volume dims {dims}")

    rng = make_rng(spec.seed)
    fg = np.flatnonzero(case.gt.data)
    take_fg = rng.random() < spec.foreground_bias and fg.size > 0
    if take_fg:
        center_flat = int(fg[rng.integers(fg.size)])
    else:
        center_flat = int(rng.integers(case.gt.n_voxels))
    center = case.gt.flat_to_xyz(center_flat)

    origin = tuple(
        int(np.clip(c - s // 2, 0, d - s)) for c, s, d in zip(center, size, dims)
    )
    return ScanCase(
        id=case.id,
        pet=_crop(case.pet, origin, size),
        ct=_crop(case.ct, origin, size),
        gt=_crop(case.gt, origin, size),
    )

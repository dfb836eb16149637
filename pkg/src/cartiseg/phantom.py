"""Synthetic wrist-like phantom volumes with known cartilage geometry.

Each phantom is a noisy volume holding one thin curved bright sheet (the
labeled structure), plus unlabeled confounders at matching intensity: a
peripheral bright ring ("skin") and scattered bright dots ("vessels").
Geometry and acquisition are driven by separate rng streams so the same
anatomy can be re-acquired (repeatability pairs) by pinning geometry_seed
while varying the seed.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

from .data import MaskVolume, ScanMeta, Volume

MIN_EXTENT = 16

CARTILAGE_LEVEL = 1.0
BACKGROUND_LEVEL = 0.18

# default analog of a thin-slab acquisition: 16 slices of 64x64,
# anisotropic voxels (dz, dy, dx) in millimetres
DEFAULT_DIMS = (16, 64, 64)
DEFAULT_VOXEL = (0.5, 0.37, 0.37)


@dataclasses.dataclass
class PhantomConfig:
    snr: float = 12.0
    mask_fraction: tuple[float, float] = (0.005, 0.02)
    confounders: bool = True
    geometry_seed: int | tuple | None = None   # pin to reuse anatomy across acquisitions
    subject_id: str | None = None
    hand: str = "right"
    coil: str = "coil-a"
    field_t: float = 3.0
    session: str = "ses-1"

    def __post_init__(self):
        if self.snr <= 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        lo, hi = self.mask_fraction
        if not 0 < lo < hi < 0.5:
            raise ValueError(f"bad mask fraction band {self.mask_fraction}")


def _seed_key(seed, salt: int) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed) + (salt,)
    return (int(seed), salt)


def _build_parts(seed, dims, config: PhantomConfig) -> dict:
    d, h, w = dims
    if min(dims) < MIN_EXTENT:
        raise ValueError(f"every axis must be >= {MIN_EXTENT}, got {dims}")
    geo_seed = config.geometry_seed if config.geometry_seed is not None else seed
    grng = np.random.default_rng(_seed_key(geo_seed, 17))
    arng = np.random.default_rng(_seed_key(seed, 29))

    margin = max(2.0, 0.05 * min(h, w))
    ay, ax = h / 2.0 - margin, w / 2.0 - margin
    m = min(ay, ax)

    cy = (h - 1) / 2.0 + grng.uniform(-1, 1) * 0.015 * h
    cx = (w - 1) / 2.0 + grng.uniform(-1, 1) * 0.015 * w
    cz = (d - 1) / 2.0 + grng.uniform(-1, 1) * 0.05 * d
    radius = m * grng.uniform(0.50, 0.68)
    thickness = float(np.clip(grng.uniform(1.4, 2.6), 1.0, max(1.4, 0.1 * m)))
    # z anisotropy chosen so the sheet spans 55-75% of the slices
    sz = 2.0 * radius / (d * grng.uniform(0.55, 0.75))

    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64),
                             np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    dist = np.sqrt((sz * (zz - cz)) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2)

    total = d * h * w
    frac_lo, frac_hi = config.mask_fraction
    span = frac_hi - frac_lo
    target = grng.uniform(frac_lo + 0.15 * span, frac_hi - 0.15 * span)
    k = max(1, int(round(target * total)))
    shell = np.abs(dist - radius) <= thickness / 2.0
    grow = 0
    while shell.sum() < k and grow < 12:
        thickness *= 1.35
        shell = np.abs(dist - radius) <= thickness / 2.0
        grow += 1
    if shell.sum() < k:
        raise ValueError(f"dims {dims} too small to hold the target structure")

    # take a contiguous azimuthal arc of the shell holding exactly k voxels
    phi = np.arctan2(yy - cy, xx - cx)
    phi0 = grng.uniform(0.0, 2.0 * np.pi)
    rank = np.mod(phi - phi0, 2.0 * np.pi)
    shell_idx = np.flatnonzero(shell.ravel())
    order = np.argsort(rank.ravel()[shell_idx], kind="stable")
    sheet = np.zeros(total, dtype=bool)
    sheet[shell_idx[order[:k]]] = True
    sheet = sheet.reshape(dims)

    skin = np.zeros(dims, dtype=bool)
    vessels = np.zeros(dims, dtype=bool)
    if config.confounders:
        cy0, cx0 = (h - 1) / 2.0, (w - 1) / 2.0
        ecc = np.sqrt(((yy[0] - cy0) / ay) ** 2 + ((xx[0] - cx0) / ax) ** 2)
        ring2d = np.abs(ecc - 1.0) * m <= 1.2
        skin[:] = ring2d[None, :, :]

        proj = np.argwhere(sheet.any(axis=0))          # sheet footprint, in-plane
        n_vessels = int(grng.integers(2, 5))
        placed = 0
        attempts = 0
        while placed < n_vessels and attempts < 300:
            attempts += 1
            vy = grng.uniform(cy0 - 0.75 * ay, cy0 + 0.75 * ay)
            vx = grng.uniform(cx0 - 0.75 * ax, cx0 + 0.75 * ax)
            vz = grng.uniform(0.2, 0.8) * (d - 1)
            rv = grng.uniform(1.1, 1.8)
            szv = grng.uniform(0.9, 1.5)
            if proj.size:
                d2 = ((proj[:, 0] - vy) ** 2 + (proj[:, 1] - vx) ** 2).min()
                if d2 < (rv + max(2.5, thickness)) ** 2:
                    continue
            blob = ((szv * (zz - vz)) ** 2 + (yy - vy) ** 2 + (xx - vx) ** 2) <= rv ** 2
            if not blob.any() or (blob & skin).any():
                continue
            vessels |= blob
            placed += 1
        vessels &= ~sheet

    clean = np.full(dims, BACKGROUND_LEVEL)
    clean += 0.03 * ndimage.gaussian_filter(
        arng.standard_normal(dims), sigma=(2.0, h / 8.0, w / 8.0))
    clean[skin] = CARTILAGE_LEVEL * grng.uniform(0.95, 1.05, int(skin.sum()))
    clean[vessels] = CARTILAGE_LEVEL * grng.uniform(0.95, 1.05, int(vessels.sum()))
    clean[sheet] = CARTILAGE_LEVEL * grng.uniform(0.98, 1.02, k)

    gain = arng.uniform(0.97, 1.03)
    noisy = gain * clean + arng.normal(0.0, CARTILAGE_LEVEL / config.snr, dims)
    noisy = np.clip(noisy, 0.0, None)

    return {
        "sheet": sheet,
        "skin": skin,
        "vessels": vessels,
        "clean": clean,
        "noisy": noisy.astype(np.float32),
        "cartilage_level": CARTILAGE_LEVEL,
    }


def generate_phantom(seed, dims=DEFAULT_DIMS, voxel_size=DEFAULT_VOXEL,
                     config: PhantomConfig | None = None
                     ) -> tuple[Volume, MaskVolume, ScanMeta]:
    """Deterministically synthesize one scan: (volume, mask, metadata).

    ``seed`` may be an int or a tuple of ints (hierarchical seeding)."""
    config = config or PhantomConfig()
    parts = _build_parts(seed, tuple(int(x) for x in dims), config)
    vol = Volume(parts["noisy"], voxel_size)
    mask = MaskVolume(parts["sheet"].astype(np.uint8), voxel_size)
    meta = ScanMeta(
        subject_id=config.subject_id or f"sub-{seed}",
        hand=config.hand,
        coil=config.coil,
        field_t=config.field_t,
        session=config.session,
    )
    return vol, mask, meta

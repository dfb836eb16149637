"""Volume I/O, slice preprocessing, augmentation and grouped CV splits.

Volumes are (D, H, W) arrays with per-axis voxel sizes in millimetres.
Images are float32, masks strictly binary uint8. The on-disk format is a
small self-describing binary container (see FORMAT_MAGIC below); datasets
are JSON manifests pointing at volume files plus scan metadata.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import struct

import numpy as np
from scipy import ndimage

FORMAT_MAGIC = b"WCSV1\n"

ELASTIC_AMPLITUDE_PX = (2.0, 8.0)
ELASTIC_SIGMA_PX = (4.0, 8.0)
GRID_CELLS = 4
GRID_SCALE_JITTER = 0.15


class FormatError(ValueError):
    """Raised for unreadable volume files or malformed manifests."""


class ConstantImageError(ValueError):
    """Raised when a slice has zero intensity variance."""


@dataclasses.dataclass
class Volume:
    data: np.ndarray                      # (D, H, W) float32
    voxel_size_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got {self.data.shape}")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError(f"voxel sizes must be 3 positive reals, got {self.voxel_size_mm}")

    @property
    def dims(self):
        return self.data.shape


@dataclasses.dataclass
class MaskVolume:
    data: np.ndarray                      # (D, H, W) uint8 in {0, 1}
    voxel_size_mm: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = arr.astype(np.uint8)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"mask must be 3D with positive dims, got {self.data.shape}")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError(f"voxel sizes must be 3 positive reals, got {self.voxel_size_mm}")

    @property
    def dims(self):
        return self.data.shape


@dataclasses.dataclass
class ScanMeta:
    subject_id: str
    hand: str = "right"
    coil: str = "coil-a"
    field_t: float = 3.0
    session: str = "ses-1"

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")

    def scan_id(self) -> tuple:
        return (self.subject_id, self.hand, self.coil, self.session)


@dataclasses.dataclass
class ScanRecord:
    image: Volume
    mask: MaskVolume
    meta: ScanMeta

    def __post_init__(self):
        if self.image.dims != self.mask.dims:
            raise ValueError(
                f"mask dims {self.mask.dims} do not match image dims {self.image.dims}")


@dataclasses.dataclass
class Dataset:
    entries: list[ScanRecord]

    @property
    def n_slices(self) -> int:
        return sum(rec.image.dims[0] for rec in self.entries)

    def subjects(self) -> list[str]:
        """Distinct subject ids in order of first appearance."""
        seen = {}
        for rec in self.entries:
            seen.setdefault(rec.meta.subject_id, None)
        return list(seen)


@dataclasses.dataclass
class FoldSplit:
    fold: int
    train_idx: list[int]
    test_idx: list[int]


# ---------------------------------------------------------------------------
# volume files


def save_volume(vol: Volume | MaskVolume, path) -> None:
    if isinstance(vol, MaskVolume):
        dtype, kind = "u8", "mask"
        payload = np.ascontiguousarray(vol.data, dtype=np.uint8).tobytes()
    elif isinstance(vol, Volume):
        dtype, kind = "f32", "image"
        payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    else:
        raise TypeError(f"expected Volume or MaskVolume, got {type(vol).__name__}")
    header = json.dumps({
        "dims": list(vol.dims),
        "voxel_size_mm": list(vol.voxel_size_mm),
        "dtype": dtype,
        "kind": kind,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_volume(path) -> Volume | MaskVolume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != FORMAT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:6]!r}")
    if len(blob) < 10:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    try:
        header = json.loads(blob[10:10 + hlen])
        dims = tuple(int(d) for d in header["dims"])
        voxel = tuple(float(v) for v in header["voxel_size_mm"])
        dtype, kind = header["dtype"], header["kind"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    n = int(np.prod(dims))
    payload = blob[10 + hlen:]
    if kind == "image":
        if dtype != "f32" or len(payload) != 4 * n:
            raise FormatError(f"{path}: payload length {len(payload)} != {4 * n} for dims {dims}")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return Volume(data, voxel)
    if kind == "mask":
        if dtype != "u8" or len(payload) != n:
            raise FormatError(f"{path}: payload length {len(payload)} != {n} for dims {dims}")
        data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
        if not np.isin(data, (0, 1)).all():
            raise FormatError(f"{path}: mask payload contains non-binary values")
        return MaskVolume(data.copy(), voxel)
    raise FormatError(f"{path}: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# manifests

MANIFEST_KEYS = ("image_path", "mask_path", "subject_id", "hand", "coil", "field_T", "session")


def save_manifest(rows: list[dict], path) -> None:
    for row in rows:
        missing = [k for k in MANIFEST_KEYS if k not in row]
        if missing:
            raise FormatError(f"manifest row missing keys {missing}: {row}")
    out = [{k: row[k] for k in MANIFEST_KEYS} for row in rows]
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> Dataset:
    base = pathlib.Path(path).parent
    try:
        with open(path) as fh:
            rows = json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(rows, list):
        raise FormatError(f"{path}: manifest must be a JSON list")
    entries = []
    for row in rows:
        missing = [k for k in MANIFEST_KEYS if k not in row]
        if missing:
            raise FormatError(f"{path}: manifest row missing keys {missing}")
        image = load_volume(base / row["image_path"])
        mask = load_volume(base / row["mask_path"])
        if not isinstance(image, Volume) or not isinstance(mask, MaskVolume):
            raise FormatError(f"{path}: {row['image_path']} / {row['mask_path']} have wrong kinds")
        meta = ScanMeta(row["subject_id"], row["hand"], row["coil"],
                        float(row["field_T"]), row["session"])
        entries.append(ScanRecord(image, mask, meta))
    return Dataset(entries)


# ---------------------------------------------------------------------------
# slice preprocessing


def normalize_slice(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.size < 2:
        raise ValueError(f"need at least 2 pixels, got {img.size}")
    # ptp, not std: rounding can give a constant array a tiny nonzero std
    if img.max() == img.min():
        raise ConstantImageError("cannot normalize a constant slice")
    return ((img - img.mean()) / img.std()).astype(np.float32)


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centered, edge-clamped interpolation weights."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    i0 = np.minimum(src.astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w)
    np.add.at(m, (np.arange(n_out), i1), w)
    return m


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    return np.clip(np.rint(src).astype(np.intp), 0, n_in - 1)


def resize_pair(image: np.ndarray, mask: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Resize a slice pair to target x target: image bilinearly, mask by
    nearest neighbor so it stays binary."""
    if target < 2 or (target & (target - 1)):
        raise ValueError(f"target extent must be a power of two >= 2, got {target}")
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape or image.ndim != 2:
        raise ValueError(f"image/mask must be matching 2D arrays, got {image.shape}/{mask.shape}")
    h, w = image.shape
    if (h, w) == (target, target):
        return image.astype(np.float32), mask.astype(np.uint8)
    my = _bilinear_matrix(target, h)
    mx = _bilinear_matrix(target, w)
    out_img = (my @ image.astype(np.float64) @ mx.T).astype(np.float32)
    iy = _nearest_index(target, h)
    ix = _nearest_index(target, w)
    out_mask = mask[np.ix_(iy, ix)].astype(np.uint8)
    return out_img, out_mask


# ---------------------------------------------------------------------------
# augmentation


def _warp_pair(image, mask, coords, fill):
    warped_img = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=fill)
    warped_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return warped_img, warped_mask.astype(np.uint8)


def _rotate(image, mask, angle_deg, rng_unused=None):
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    # pull-back: output pixel samples the input rotated by -angle
    src_y = cy + np.cos(th) * (yy - cy) - np.sin(th) * (xx - cx)
    src_x = cx + np.sin(th) * (yy - cy) + np.cos(th) * (xx - cx)
    return _warp_pair(image, mask, [src_y, src_x], float(image.min()))


def _elastic(image, mask, rng):
    h, w = image.shape
    amp = rng.uniform(*ELASTIC_AMPLITUDE_PX)
    sigma = rng.uniform(*ELASTIC_SIGMA_PX)
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma)
    peak = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    dy *= amp / peak
    dx *= amp / peak
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return _warp_pair(image, mask, [yy + dy, xx + dx], float(image.min()))


def _grid_axis_map(n: int, rng) -> np.ndarray:
    # distort node spacing by up to +-GRID_SCALE_JITTER, renormalized to the
    # full extent so corners stay fixed
    steps = rng.uniform(1.0 - GRID_SCALE_JITTER, 1.0 + GRID_SCALE_JITTER, GRID_CELLS)
    nodes_src = np.concatenate([[0.0], np.cumsum(steps)])
    nodes_src *= (n - 1) / nodes_src[-1]
    nodes_dst = np.linspace(0.0, n - 1, GRID_CELLS + 1)
    return np.interp(np.arange(n, dtype=np.float64), nodes_dst, nodes_src)


def _grid_distort(image, mask, rng):
    h, w = image.shape
    src_y = _grid_axis_map(h, rng)
    src_x = _grid_axis_map(w, rng)
    yy = np.broadcast_to(src_y[:, None], (h, w))
    xx = np.broadcast_to(src_x[None, :], (h, w))
    return _warp_pair(image, mask, [yy, xx], float(image.min()))


def augment(image: np.ndarray, mask: np.ndarray, multiplier: int,
            rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Produce ``multiplier`` randomly transformed copies of a slice pair.

    Each copy applies an independent random subset of: horizontal flip,
    vertical flip, rotation by an arbitrary angle, elastic deformation and
    grid distortion. Masks are warped with nearest-neighbor sampling and
    stay binary.
    """
    if multiplier < 1:
        raise ValueError(f"multiplier must be >= 1, got {multiplier}")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.uint8)
    out = []
    for _ in range(multiplier):
        img, msk = image, mask
        if rng.random() < 0.5:
            img, msk = img[:, ::-1], msk[:, ::-1]
        if rng.random() < 0.5:
            img, msk = img[::-1, :], msk[::-1, :]
        if rng.random() < 0.5:
            img, msk = _rotate(img, msk, rng.uniform(-180.0, 180.0))
        if rng.random() < 0.5:
            img, msk = _elastic(img, msk, rng)
        if rng.random() < 0.5:
            img, msk = _grid_distort(img, msk, rng)
        out.append((np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(msk)))
    return out


# ---------------------------------------------------------------------------
# cross-validation splits


def group_kfold(dataset: Dataset, k: int, rng: np.random.Generator) -> list[FoldSplit]:
    """Split scans into k folds keeping every subject on one side only."""
    subjects = dataset.subjects()
    if len(subjects) < k:
        raise ValueError(f"need at least {k} distinct subjects, got {len(subjects)}")
    order = list(rng.permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    groups = np.array_split(shuffled, k)
    folds = []
    for fold, test_subjects in enumerate(groups):
        test_set = set(test_subjects.tolist())
        test_idx = [i for i, rec in enumerate(dataset.entries)
                    if rec.meta.subject_id in test_set]
        train_idx = [i for i, rec in enumerate(dataset.entries)
                     if rec.meta.subject_id not in test_set]
        train_subj = {dataset.entries[i].meta.subject_id for i in train_idx}
        assert not (train_subj & test_set), "subject leaked across a fold boundary"
        folds.append(FoldSplit(fold, train_idx, test_idx))
    return folds


# ---------------------------------------------------------------------------
# resolution degradation


def degrade_resolution(volume: Volume, mask: MaskVolume, factor: int
                       ) -> tuple[Volume, MaskVolume]:
    """Downsample all three axes by block averaging (image) and strict
    majority vote (mask, ties to background); voxel size scales by factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return (Volume(volume.data.copy(), volume.voxel_size_mm),
                MaskVolume(mask.data.copy(), mask.voxel_size_mm))
    d, h, w = volume.dims
    if d % factor or h % factor or w % factor:
        raise ValueError(f"dims {volume.dims} not divisible by factor {factor}")
    blocks = (d // factor, factor, h // factor, factor, w // factor, factor)
    img = volume.data.reshape(blocks).mean(axis=(1, 3, 5)).astype(np.float32)
    counts = mask.data.reshape(blocks).sum(axis=(1, 3, 5), dtype=np.int64)
    msk = (counts * 2 > factor ** 3).astype(np.uint8)
    voxel = tuple(v * factor for v in volume.voxel_size_mm)
    return Volume(img, voxel), MaskVolume(msk, voxel)

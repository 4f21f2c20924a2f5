"""Volumes, masks, dataset splits, patch sampling and synthetic phantoms."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
IMAGE_SUFFIX = "_image.nii.gz"
LABEL_SUFFIX = "_label.nii.gz"
MANIFEST_NAME = "manifest.json"


@dataclass
class Volume:
    """A 3D scalar image laid out as (D, H, W) with spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


def as_binary_mask(mask, shape=None) -> np.ndarray:
    """Return ``mask`` as a uint8 {0, 1} array, binarized at > 0.5."""
    arr = (np.asarray(mask) > 0.5).astype(np.uint8)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} does not match volume shape {tuple(shape)}")
    return arr


def normalize_intensity(data: np.ndarray) -> np.ndarray:
    """Per-volume z-score; constant images map to zeros."""
    data = np.asarray(data, dtype=np.float64)
    data = np.nan_to_num(data, nan=0.0, posinf=0.0, neginf=0.0)
    out = (data - data.mean()) / (data.std() + NORM_EPS)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# file io


def _to_nifti(arr: np.ndarray, spacing) -> nib.Nifti1Image:
    # (D, H, W) is stored as NIfTI (i, j, k) = (W, H, D)
    img = nib.Nifti1Image(np.ascontiguousarray(arr.transpose(2, 1, 0)), np.diag([*spacing[::-1], 1.0]))
    img.header.set_zooms(tuple(spacing[::-1]))
    return img


def _from_nifti(path) -> tuple[np.ndarray, tuple]:
    img = nib.load(str(path))
    arr = np.asarray(img.dataobj)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a 3D image, got shape {arr.shape}")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return arr.transpose(2, 1, 0), zooms[::-1]


def save_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    nib.save(_to_nifti(arr, spacing), str(path))


def save_mask(path, mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    nib.save(_to_nifti(as_binary_mask(mask), spacing), str(path))


def read_raw(path) -> tuple[np.ndarray, tuple]:
    """Read a NIfTI file as a (D, H, W) array and its spacing, no normalization."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    return _from_nifti(path)


def load_case(path, mask_path=None, normalize: bool = True) -> tuple[Volume, Optional[np.ndarray]]:
    """Load an image and, if present, its mask.

    When ``mask_path`` is None the sibling ``<id>_label.nii.gz`` of an
    ``<id>_image.nii.gz`` file is used if it exists.
    """
    path = Path(path)
    data, spacing = read_raw(path)
    if min(spacing) <= 0:
        raise ValueError(f"{path}: non-positive spacing {spacing}")
    if normalize:
        data = normalize_intensity(data)
    volume = Volume(data, spacing)

    if mask_path is None and path.name.endswith(IMAGE_SUFFIX):
        candidate = path.with_name(path.name[: -len(IMAGE_SUFFIX)] + LABEL_SUFFIX)
        mask_path = candidate if candidate.exists() else None
    mask = None
    if mask_path is not None:
        raw_mask, _ = read_raw(mask_path)
        mask = as_binary_mask(raw_mask, volume.shape)
    return volume, mask


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    """Disjoint case-id lists; volumes are loaded on demand by id."""

    labeled: list
    unlabeled: list
    test: list

    def roles(self) -> dict:
        out = {cid: "labeled" for cid in self.labeled}
        out.update({cid: "unlabeled" for cid in self.unlabeled})
        out.update({cid: "test" for cid in self.test})
        return out


def split_dataset(case_ids: Sequence[str], m_labeled: int, n_test: int, seed: int) -> DatasetSplit:
    ids = sorted(str(c) for c in case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if m_labeled < 1:
        raise ValueError("m_labeled must be at least 1")
    if n_test < 0 or m_labeled + 1 > len(ids) - n_test:
        raise ValueError(
            f"insufficient cases: {len(ids)} ids cannot give {m_labeled} labeled, "
            f"{n_test} test and at least one unlabeled case"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    pool = shuffled[n_test:]
    return DatasetSplit(labeled=pool[:m_labeled], unlabeled=pool[m_labeled:], test=test)


# ---------------------------------------------------------------------------
# patches


def pad_to(data: np.ndarray, shape) -> tuple[np.ndarray, tuple]:
    """Zero-pad symmetrically up to ``shape``; returns the array and the leading pad."""
    pads = [max(p - s, 0) for s, p in zip(data.shape, shape)]
    before = tuple(p // 2 for p in pads)
    if not any(pads):
        return data, before
    width = [(b, p - b) for b, p in zip(before, pads)]
    return np.pad(data, width, mode="constant", constant_values=0), before


def crop(data: np.ndarray, offset, shape) -> np.ndarray:
    sl = tuple(slice(o, o + s) for o, s in zip(offset, shape))
    return data[sl]


def sample_patch(
    volume: Volume,
    mask: Optional[np.ndarray],
    patch_shape,
    rng: np.random.Generator,
    fg_prob: float = 0.5,
    return_offset: bool = False,
):
    """Crop a random patch of exactly ``patch_shape``.

    With a mask and probability ``fg_prob`` the patch is centred on a uniformly
    chosen foreground voxel. Offsets are in padded coordinates.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    data, _ = pad_to(volume.data, patch_shape)
    padded_mask = pad_to(mask, patch_shape)[0] if mask is not None else None
    limits = [s - p for s, p in zip(data.shape, patch_shape)]

    use_fg = padded_mask is not None and fg_prob > 0 and rng.random() < fg_prob
    fg = np.flatnonzero(padded_mask) if use_fg else ()
    if len(fg):
        center = np.unravel_index(fg[rng.integers(len(fg))], data.shape)
        offset = tuple(int(np.clip(c - p // 2, 0, lim)) for c, p, lim in zip(center, patch_shape, limits))
    else:
        offset = tuple(int(rng.integers(lim + 1)) for lim in limits)

    img = Volume(crop(data, offset, patch_shape).copy(), volume.spacing)
    msk = crop(padded_mask, offset, patch_shape).copy() if padded_mask is not None else None
    if return_offset:
        return img, msk, offset
    return img, msk


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    """One ellipsoidal phantom, optionally with unlabeled distractor spheres.

    Geometry is fully determined by ``center``/``radii``/perturbation and
    ``distractors`` (``(z, y, x, radius)`` spheres at the target's intensity,
    absent from the mask); ``seed`` only drives the noise field.
    """

    shape: tuple = (64, 64, 64)
    center: Optional[tuple] = None
    radii: tuple = (10.0, 10.0, 10.0)
    background: float = 0.0
    contrast: float = 1.0
    noise: float = 0.0
    perturb_amplitude: float = 0.0
    perturb_frequency: int = 3
    perturb_phase: float = 0.0
    distractors: tuple = ()
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def resolved_center(self):
        if self.center is None:
            return tuple((s - 1) / 2 for s in self.shape)
        return tuple(float(c) for c in self.center)


def phantom_mask(spec: PhantomSpec) -> np.ndarray:
    center = spec.resolved_center()
    radii = np.asarray(spec.radii, dtype=np.float64)
    if np.any(radii <= 0):
        raise ValueError(f"radii must be positive, got {spec.radii}")
    extent = (1.0 + abs(spec.perturb_amplitude)) * radii
    for c, r, s in zip(center, extent, spec.shape):
        if c - r < 0 or c + r > s - 1:
            raise ValueError(f"ellipsoid with radii {spec.radii} at {center} exceeds volume {spec.shape}")

    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in spec.shape), indexing="ij")
    dz, dy, dx = (zz - center[0]) / radii[0], (yy - center[1]) / radii[1], (xx - center[2]) / radii[2]
    rho = np.sqrt(dz**2 + dy**2 + dx**2)
    limit = 1.0
    if spec.perturb_amplitude:
        theta = np.arctan2(np.sqrt(dy**2 + dx**2), dz)
        phi = np.arctan2(dy, dx)
        f = spec.perturb_frequency
        limit = 1.0 + spec.perturb_amplitude * np.sin(f * phi + spec.perturb_phase) * np.sin(f * theta)
    mask = rho <= limit

    labels, n = ndimage.label(mask)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        mask = labels == (np.argmax(sizes) + 1)
    return mask.astype(np.uint8)


def distractor_mask(spec: PhantomSpec) -> np.ndarray:
    out = np.zeros(spec.shape, dtype=bool)
    if not spec.distractors:
        return out
    grid = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in spec.shape), indexing="ij")
    for z, y, x, r in spec.distractors:
        out |= (grid[0] - z) ** 2 + (grid[1] - y) ** 2 + (grid[2] - x) ** 2 <= r**2
    return out


def make_phantom(spec: PhantomSpec, normalize: bool = False) -> tuple[Volume, np.ndarray]:
    """Return (image, mask) with image = background + contrast * mask + noise.

    Distractors, when present, are painted with the same contrast but stay out
    of the mask.
    """
    mask = phantom_mask(spec)
    bright = mask.astype(bool) | distractor_mask(spec)
    image = spec.background + spec.contrast * bright.astype(np.float64)
    if spec.noise > 0:
        image = image + np.random.default_rng(spec.seed).normal(0.0, spec.noise, size=mask.shape)
    if normalize:
        image = normalize_intensity(image)
    return Volume(image, spec.spacing), mask


@dataclass
class PhantomDatasetSpec:
    """Ranges from which per-case phantoms are drawn."""

    n_cases: int = 20
    shape: tuple = (48, 48, 48)
    radius_range: tuple = (7.0, 13.0)
    center_jitter: float = 6.0
    contrast_range: tuple = (0.6, 1.4)
    background_range: tuple = (-0.5, 0.5)
    noise: float = 0.8
    perturb_amplitude_range: tuple = (0.0, 0.15)
    n_distractors_range: tuple = (0, 0)
    distractor_radius_range: tuple = (2.0, 4.0)
    spacing: tuple = (1.0, 1.0, 1.0)
    m_labeled: int = 1
    n_test: int = 4
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "PhantomDatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        return cls(**kwargs)


def case_specs(ds: PhantomDatasetSpec) -> dict:
    """Draw one PhantomSpec per case id, deterministically from ``ds.seed``."""
    rng = np.random.default_rng(ds.seed)
    width = len(str(ds.n_cases - 1))
    out = {}
    for i in range(ds.n_cases):
        radii = tuple(float(r) for r in rng.uniform(*ds.radius_range, size=3))
        amp = float(rng.uniform(*ds.perturb_amplitude_range))
        mid = np.array([(s - 1) / 2 for s in ds.shape])
        room = np.array([(s - 1) / 2 for s in ds.shape]) - (1 + amp) * np.array(radii) - 1
        jitter = np.minimum(ds.center_jitter, np.maximum(room, 0))
        center = tuple(float(c) for c in mid + rng.uniform(-1, 1, size=3) * jitter)
        distractors = _place_distractors(ds, rng, center, (1 + amp) * max(radii))
        out[f"case{i:0{width}d}"] = PhantomSpec(
            shape=tuple(ds.shape),
            center=center,
            radii=radii,
            background=float(rng.uniform(*ds.background_range)),
            contrast=float(rng.uniform(*ds.contrast_range)),
            noise=ds.noise,
            perturb_amplitude=amp,
            perturb_frequency=int(rng.integers(2, 5)),
            perturb_phase=float(rng.uniform(0, 2 * np.pi)),
            distractors=distractors,
            spacing=tuple(ds.spacing),
            seed=int(rng.integers(2**31)),
        )
    return out


def _place_distractors(ds: PhantomDatasetSpec, rng, center, target_extent, max_tries: int = 200) -> tuple:
    lo, hi = ds.n_distractors_range
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    placed = []
    for _ in range(max_tries):
        if len(placed) >= n:
            break
        r = float(rng.uniform(*ds.distractor_radius_range))
        pos = np.array([rng.uniform(r + 1, s - 2 - r) for s in ds.shape])
        # keep a gap of background between the target and every distractor
        if np.linalg.norm(pos - np.asarray(center)) < target_extent + r + 2:
            continue
        if any(np.linalg.norm(pos - np.asarray(p[:3])) < r + p[3] + 2 for p in placed):
            continue
        placed.append((*(float(c) for c in pos), r))
    return tuple(placed)


def write_phantom_dataset(ds: PhantomDatasetSpec, out_dir) -> Path:
    """Write every phantom as NIfTI image/label pairs plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = case_specs(ds)
    split = split_dataset(list(specs), ds.m_labeled, ds.n_test, ds.seed)
    roles = split.roles()
    cases = []
    for cid, spec in specs.items():
        vol, mask = make_phantom(spec)
        save_volume(out_dir / f"{cid}{IMAGE_SUFFIX}", vol.data, spec.spacing)
        save_mask(out_dir / f"{cid}{LABEL_SUFFIX}", mask, spec.spacing)
        cases.append({"case_id": cid, "role": roles[cid], "phantom": asdict(spec)})
    manifest = {"format_version": 1, "generator": asdict(ds), "cases": cases}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    logger.info("wrote %d phantom cases to %s", len(cases), out_dir)
    return path


def list_cases(data_dir) -> list:
    """Case ids in ``data_dir``: from the manifest if present, else by filename."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if manifest.exists():
        return [c["case_id"] for c in json.loads(manifest.read_text())["cases"]]
    if not data_dir.is_dir():
        raise FileNotFoundError(f"no such data directory: {data_dir}")
    return sorted(f[: -len(IMAGE_SUFFIX)] for f in os.listdir(data_dir) if f.endswith(IMAGE_SUFFIX))


def case_paths(data_dir, case_id) -> tuple[Path, Path]:
    data_dir = Path(data_dir)
    return data_dir / f"{case_id}{IMAGE_SUFFIX}", data_dir / f"{case_id}{LABEL_SUFFIX}"

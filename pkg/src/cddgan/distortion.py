"""Synthetic domain shifts: power-law contrast (H_C) and elastic deformation (H_E)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from cddgan.data_ingest import SliceDataset
from cddgan.domains import Domain


@dataclass(frozen=True)
class ContrastParams:
    gamma: float

    def __post_init__(self):
        if not 1.0 <= self.gamma <= 2.0:
            raise ValueError(f"contrast factor must lie in [1, 2], got {self.gamma}")


@dataclass(frozen=True)
class ElasticParams:
    seed: int
    grid: tuple[int, int] = (5, 5)
    max_displacement: float = 12.0
    # explicit control displacements, shape (2, *grid); drawn from seed when None
    control: np.ndarray | None = None

    def control_displacements(self) -> np.ndarray:
        if self.control is not None:
            control = np.asarray(self.control, dtype=np.float64)
            if control.shape != (2, *self.grid):
                raise ValueError(f"control grid must have shape {(2, *self.grid)}, got {control.shape}")
            if np.abs(control).max(initial=0.0) > self.max_displacement:
                raise ValueError("control displacement exceeds max_displacement")
            return control
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-self.max_displacement, self.max_displacement, size=(2, *self.grid))


def patient_rng(seed: int, patient_id: str, stream: str) -> np.random.Generator:
    """Per-patient stream, independent of processing order."""
    digest = hashlib.sha256(f"{stream}:{patient_id}".encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def apply_contrast(image: np.ndarray, params: ContrastParams) -> np.ndarray:
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("contrast expects intensities in [0, 1]")
    return np.power(image, params.gamma).astype(image.dtype, copy=False)


def sample_contrast_factor(rng: np.random.Generator) -> ContrastParams:
    return ContrastParams(float(rng.uniform(1.0, 2.0)))


def _bspline_weights(n_control: int, length: int) -> np.ndarray:
    """(length, n_control) cubic B-spline weights; rows are nonnegative and sum to 1.

    Control points sit evenly from the first to the last pixel; the control
    sequence is edge-extended so evaluation stays a convex combination.
    """
    u = np.arange(length) * (n_control - 1) / (length - 1)
    i = np.minimum(np.floor(u).astype(int), n_control - 2)
    t = u - i
    basis = np.stack(
        [
            (1 - t) ** 3 / 6,
            (3 * t**3 - 6 * t**2 + 4) / 6,
            (-3 * t**3 + 3 * t**2 + 3 * t + 1) / 6,
            t**3 / 6,
        ],
        axis=1,
    )
    weights = np.zeros((length, n_control))
    rows = np.arange(length)
    for k in range(4):
        cols = np.clip(i - 1 + k, 0, n_control - 1)
        np.add.at(weights, (rows, cols), basis[:, k])
    return weights


def dense_displacement(control: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Interpolate a (2, gy, gx) control grid to a (2, H, W) pixel field."""
    wy = _bspline_weights(control.shape[1], shape[0])
    wx = _bspline_weights(control.shape[2], shape[1])
    return np.stack([wy @ c @ wx.T for c in control])


def elastic_deform(image: np.ndarray, mask: np.ndarray, params: ElasticParams, field=None):
    """Warp an image (bilinear) and its mask (nearest) with one displacement field.

    Samples falling outside the image take the nearest border value.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape or image.ndim != 2:
        raise ValueError(f"image {image.shape} and mask {mask.shape} must be equal 2D shapes")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask is not binary")
    if field is None:
        field = dense_displacement(params.control_displacements(), image.shape)
    yy, xx = np.meshgrid(np.arange(image.shape[0]), np.arange(image.shape[1]), indexing="ij")
    coords = np.stack([yy + field[0], xx + field[1]])
    warped = map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest")
    warped_mask = map_coordinates(mask, coords, order=0, mode="nearest")
    return warped.astype(image.dtype), warped_mask.astype(mask.dtype)


def _elastic_seed(seed: int, patient_id: str) -> int:
    return int(patient_rng(seed, patient_id, "elastic").integers(2**31))


def distort_dataset(h_o: SliceDataset, kind: str, seed: int) -> SliceDataset:
    """Build H_C (``kind='contrast'``) or H_E (``kind='elastic'``) from H_O.

    Parameters are drawn once per patient and shared by all of its slices.
    """
    if kind not in ("contrast", "elastic"):
        raise ValueError(f"unknown distortion kind {kind!r}")
    images = h_o.images.copy()
    masks = h_o.masks.copy()
    record = {}
    for pid, idx in h_o.patient_indices().items():
        if kind == "contrast":
            params = sample_contrast_factor(patient_rng(seed, pid, "contrast"))
            for i in idx:
                images[i] = apply_contrast(h_o.images[i], params)
            record[pid] = {"gamma": params.gamma}
        else:
            params = ElasticParams(seed=_elastic_seed(seed, pid))
            control = params.control_displacements()
            field = dense_displacement(control, h_o.images.shape[1:])
            for i in idx:
                images[i], masks[i] = elastic_deform(h_o.images[i], h_o.masks[i], params, field=field)
            record[pid] = {
                "seed": params.seed,
                "grid": list(params.grid),
                "max_displacement": params.max_displacement,
                "control_displacements": control.tolist(),
            }
    domain = Domain.C if kind == "contrast" else Domain.E
    meta = dict(h_o.meta)
    meta.update(
        {
            "domain": domain.value,
            "distortion": {"kind": kind, "seed": seed},
            "distortion_record": record,
            "source_hash": h_o.content_hash(),
        }
    )
    return SliceDataset(
        images=images,
        masks=masks,
        patient_ids=h_o.patient_ids.copy(),
        slice_indices=h_o.slice_indices.copy(),
        domains=np.full(len(h_o), domain.index),
        splits=dict(h_o.splits),
        meta=meta,
    )


def build_distorted_datasets(h_o: SliceDataset, seed: int) -> tuple[SliceDataset, SliceDataset]:
    return distort_dataset(h_o, "contrast", seed), distort_dataset(h_o, "elastic", seed)

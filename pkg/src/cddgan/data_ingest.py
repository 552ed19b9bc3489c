"""Loading, splitting and slicing of the MSD hippocampus volumes.

The in-memory unit for training is a :class:`SliceDataset`: stacked 64x64
slices plus per-slice patient id, slice index and source domain.  A dataset
directory on disk is ``slices.npz`` next to ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cddgan.domains import Domain

SLICE_SIZE = 64
SPLIT_NAMES = ("train", "val", "test")
# 146 / 62 / 52 of 260 patients
SPLIT_FRACTIONS = (Fraction(146, 260), Fraction(62, 260), Fraction(52, 260))
NORMALIZATION = "per-slice min-max to [0, 1]; constant slices -> 0"


class DatasetNotFoundError(FileNotFoundError):
    pass


@dataclass
class PatientVolume:
    patient_id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"{self.patient_id}: image shape {self.image.shape} != mask shape {self.mask.shape}"
            )
        if self.image.ndim != 3:
            raise ValueError(f"{self.patient_id}: expected a 3D volume, got {self.image.ndim}D")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.patient_id}: mask is not binary")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape


@dataclass(frozen=True)
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def assignment(self) -> dict[str, str]:
        out = {}
        for name in SPLIT_NAMES:
            for pid in getattr(self, name):
                out[pid] = name
        return out

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass
class SliceSample:
    patient_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray
    domain: Domain


@dataclass
class SliceDataset:
    """Stacked slices of one domain (or one transformed domain mixture).

    ``domains`` holds the *source* domain of every slice as an integer index;
    after a domain transfer it still names where the slice came from.
    """

    images: np.ndarray
    masks: np.ndarray
    patient_ids: np.ndarray
    slice_indices: np.ndarray
    domains: np.ndarray
    splits: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
        self.patient_ids = np.asarray(self.patient_ids, dtype=str)
        self.slice_indices = np.asarray(self.slice_indices, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        for name in ("masks", "patient_ids", "slice_indices", "domains"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if n and self.images.shape[1:] != (SLICE_SIZE, SLICE_SIZE):
            raise ValueError(f"slices must be {SLICE_SIZE}x{SLICE_SIZE}, got {self.images.shape[1:]}")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> SliceSample:
        return SliceSample(
            patient_id=str(self.patient_ids[i]),
            slice_index=int(self.slice_indices[i]),
            image=self.images[i],
            mask=self.masks[i],
            domain=Domain.from_index(int(self.domains[i])),
        )

    @classmethod
    def from_samples(cls, samples: list[SliceSample], splits=None, meta=None) -> "SliceDataset":
        empty = np.zeros((0, SLICE_SIZE, SLICE_SIZE))
        return cls(
            images=np.stack([s.image for s in samples]) if samples else empty,
            masks=np.stack([s.mask for s in samples]) if samples else empty,
            patient_ids=[s.patient_id for s in samples],
            slice_indices=[s.slice_index for s in samples],
            domains=[s.domain.index for s in samples],
            splits=dict(splits or {}),
            meta=dict(meta or {}),
        )

    @classmethod
    def concat(cls, parts: list["SliceDataset"], meta=None) -> "SliceDataset":
        splits = {}
        for p in parts:
            splits.update(p.splits)
        return cls(
            images=np.concatenate([p.images for p in parts]),
            masks=np.concatenate([p.masks for p in parts]),
            patient_ids=np.concatenate([p.patient_ids for p in parts]),
            slice_indices=np.concatenate([p.slice_indices for p in parts]),
            domains=np.concatenate([p.domains for p in parts]),
            splits=splits,
            meta=dict(meta or {}),
        )

    def select(self, index) -> "SliceDataset":
        index = np.asarray(index)
        pids = set(self.patient_ids[index].tolist())
        return SliceDataset(
            images=self.images[index],
            masks=self.masks[index],
            patient_ids=self.patient_ids[index],
            slice_indices=self.slice_indices[index],
            domains=self.domains[index],
            splits={p: s for p, s in self.splits.items() if p in pids},
            meta=dict(self.meta),
        )

    def subset(self, split: str) -> "SliceDataset":
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        keep = np.array([self.splits.get(p) == split for p in self.patient_ids], dtype=bool)
        return self.select(np.flatnonzero(keep))

    def patients(self) -> list[str]:
        """Patient ids in first-appearance order."""
        return list(dict.fromkeys(self.patient_ids.tolist()))

    def patient_indices(self) -> dict[str, np.ndarray]:
        """Slice indices per patient, sorted by anatomical slice order."""
        out = {}
        for pid in self.patients():
            idx = np.flatnonzero(self.patient_ids == pid)
            out[pid] = idx[np.argsort(self.slice_indices[idx], kind="stable")]
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.masks, self.slice_indices, self.domains):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\0".join(self.patient_ids.tolist()).encode())
        h.update(json.dumps(self.splits, sort_keys=True).encode())
        return h.hexdigest()

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(
            directory / "slices.npz",
            images=self.images,
            masks=self.masks,
            patient_ids=self.patient_ids,
            slice_indices=self.slice_indices,
            domains=self.domains,
        )
        counts = {pid: len(idx) for pid, idx in self.patient_indices().items()}
        manifest = dict(self.meta)
        manifest.update(
            {
                "patients": [
                    {"id": pid, "n_slices": counts[pid], "split": self.splits.get(pid)}
                    for pid in counts
                ],
                "n_slices": len(self),
                "content_hash": self.content_hash(),
            }
        )
        manifest.setdefault("normalization", NORMALIZATION)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "SliceDataset":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise DatasetNotFoundError(f"dataset not found: {directory}")
        manifest = json.loads(manifest_path.read_text())
        with np.load(directory / "slices.npz") as arrays:
            data = {k: arrays[k] for k in arrays.files}
        splits = {p["id"]: p["split"] for p in manifest.pop("patients") if p["split"]}
        for key in ("n_slices", "content_hash"):
            manifest.pop(key, None)
        return cls(splits=splits, meta=manifest, **data)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise ValueError("image contains NaN or Inf")
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def _resize_stack(stack: np.ndarray, mode: str) -> np.ndarray:
    """Resize (D, H, W) to (D, 64, 64)."""
    t = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float64))[:, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(SLICE_SIZE, SLICE_SIZE), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(SLICE_SIZE, SLICE_SIZE), mode="nearest")
    return out[:, 0].numpy()


def volume_to_slices(volume: PatientVolume, domain: Domain = Domain.O) -> list[SliceSample]:
    """Cut a volume into 64x64 slices along its last axis."""
    images = np.moveaxis(np.asarray(volume.image, dtype=np.float64), -1, 0)
    masks = np.moveaxis(np.asarray(volume.mask, dtype=np.float64), -1, 0)
    images = _resize_stack(images, "bilinear")
    masks = _resize_stack(masks, "nearest").astype(np.uint8)
    return [
        SliceSample(
            patient_id=volume.patient_id,
            slice_index=k,
            image=normalize_intensity(images[k]).astype(np.float32),
            mask=masks[k],
            domain=domain,
        )
        for k in range(images.shape[0])
    ]


def split_sizes(n: int) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n patients into train/val/test."""
    if n < 3:
        raise ValueError("too few patients to split")
    quotas = [f * n for f in SPLIT_FRACTIONS]
    sizes = [int(q) for q in quotas]
    by_remainder = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    # every split gets at least one patient
    for i in range(3):
        if sizes[i] == 0:
            donor = max(range(3), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


def split_patients(volumes, seed: int) -> DatasetSplit:
    """Random patient-level split, a pure function of the id set and the seed."""
    ids = sorted(v.patient_id if isinstance(v, PatientVolume) else str(v) for v in volumes)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    n_train, n_val, _ = split_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train : n_train + n_val]),
        test=sorted(shuffled[n_train + n_val :]),
    )


def load_decathlon_hippocampus(root_path: str | os.PathLike) -> list[PatientVolume]:
    """Read every labeled subject listed in the MSD ``dataset.json``."""
    import nibabel as nib

    root = Path(root_path)
    manifest = root / "dataset.json"
    if not manifest.is_file():
        raise DatasetNotFoundError(f"dataset not found: no dataset.json under {root}")
    entries = json.loads(manifest.read_text()).get("training", [])
    if not entries:
        raise DatasetNotFoundError(f"dataset not found: {manifest} lists no labeled subjects")

    volumes = []
    for entry in entries:
        image_path = root / entry["image"]
        label_path = root / entry["label"]
        patient_id = image_path.name.split(".")[0]
        image = np.asarray(nib.load(image_path).dataobj, dtype=np.float32)
        label = np.asarray(nib.load(label_path).dataobj)
        if image.shape != label.shape:
            raise ValueError(
                f"{patient_id}: image shape {image.shape} does not match label shape {label.shape}"
            )
        # anterior + posterior -> one foreground class
        volumes.append(PatientVolume(patient_id, image, (label > 0).astype(np.uint8)))
    return volumes


def build_slice_dataset(
    volumes: list[PatientVolume], split: DatasetSplit, seed: int, domain: Domain = Domain.O
) -> SliceDataset:
    """Slice every volume in split order (train, val, test; ids sorted)."""
    by_id = {v.patient_id: v for v in volumes}
    samples = []
    for name in SPLIT_NAMES:
        for pid in getattr(split, name):
            samples.extend(volume_to_slices(by_id[pid], domain))
    meta = {"domain": domain.value, "split_seed": seed, "normalization": NORMALIZATION}
    return SliceDataset.from_samples(samples, splits=split.assignment(), meta=meta)

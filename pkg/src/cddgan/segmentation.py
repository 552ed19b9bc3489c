"""UNet training (UNet_P on raw H_O), retraining on generator outputs (UNet_R), 3D prediction."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cddgan.data_ingest import SliceDataset, SliceSample
from cddgan.domain_transfer import transform_dataset
from cddgan.domains import Domain
from cddgan.metrics import dice
from cddgan.networks import UNet, UNetConfig, save_checkpoint

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class SegTrainConfig:
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    bce_weight: float = 0.5
    seed: int = 0
    patience: int = 10
    unet: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.patience <= 0:
            raise ValueError("epochs, batch_size, lr and patience must be positive")
        if not 0 <= self.bce_weight <= 1:
            raise ValueError("bce_weight must lie in [0, 1]")


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits)
    inter = (p * target).sum()
    return 1 - (2 * inter + smooth) / (p.sum() + target.sum() + smooth)


def segmentation_loss(logits, target, bce_weight: float = 0.5) -> torch.Tensor:
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return bce_weight * bce + (1 - bce_weight) * soft_dice_loss(logits, target)


@torch.no_grad()
def predict_probabilities(s: UNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = s.training
    s.eval()
    out = []
    try:
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32))
            out.append(s(x[:, None]).numpy())
    finally:
        s.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 64, 64), dtype=np.float32)


def predict_volume(s: UNet, volume_slices) -> np.ndarray:
    """Predict each slice of one patient and stack them into a (64, 64, D) binary volume."""
    if isinstance(volume_slices, SliceDataset):
        volume_slices = [volume_slices[i] for i in range(len(volume_slices))]
    volume_slices = list(volume_slices)
    if not volume_slices:
        raise ValueError("no slices to predict")
    if len({sl.patient_id for sl in volume_slices}) != 1:
        raise ValueError("predict_volume expects slices of exactly one patient")
    ordered = sorted(volume_slices, key=lambda sl: sl.slice_index)
    indices = [sl.slice_index for sl in ordered]
    if indices != list(range(len(ordered))):
        missing = sorted(set(range(max(indices) + 1)) - set(indices))
        raise ValueError(f"patient {ordered[0].patient_id}: missing or duplicate slice index {missing or indices}")
    probs = predict_probabilities(s, np.stack([sl.image for sl in ordered]))
    return np.moveaxis((probs > THRESHOLD).astype(np.uint8), 0, -1)


def ground_truth_volume(volume_slices: list[SliceSample]) -> np.ndarray:
    ordered = sorted(volume_slices, key=lambda sl: sl.slice_index)
    return np.moveaxis(np.stack([sl.mask for sl in ordered]), 0, -1)


def subject_dice(s: UNet, data: SliceDataset) -> dict[str, float]:
    """Dice of the stacked 3D prediction against ground truth, per patient."""
    out = {}
    for pid, idx in data.patient_indices().items():
        slices = [data[i] for i in idx]
        out[pid] = dice(predict_volume(s, slices), ground_truth_volume(slices))
    return out


def train_unet(train: SliceDataset, val: SliceDataset, config: SegTrainConfig, out_dir=None):
    """Train a UNet and return the best-on-validation model with its log.

    Validation is per-subject mean Dice after every epoch (and once more if
    ``max_steps`` cuts an epoch short).
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("empty training or validation split")
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    model = UNet(UNetConfig(**config.unet))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed)

    images = torch.from_numpy(train.images)[:, None]
    masks = torch.from_numpy(train.masks.astype(np.float32))

    steps, curve = [], []
    best_dice, best_state, stale = -1.0, None, 0
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = order_rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            idx = order[start : start + config.batch_size]
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = torch.from_numpy(idx)
            loss = segmentation_loss(model.logits(images[idx]), masks[idx], config.bce_weight)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"segmentation loss is {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps.append({"step": step, "epoch": epoch, "loss": loss.item()})
            step += 1
        val_dice = float(np.mean(list(subject_dice(model, val).values())))
        curve.append({"epoch": epoch, "step": step, "val_dice": val_dice})
        if val_dice > best_dice:
            best_dice, best_state, stale = val_dice, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
        if stale >= config.patience or (config.max_steps is not None and step >= config.max_steps):
            break

    model.load_state_dict(best_state)
    model.eval()
    history = {"steps": steps, "validation": curve, "best_val_dice": best_dice}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "unet.pt", step=step, extra={"seed": config.seed, "best_val_dice": best_dice})
        with open(out / "log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("step", "epoch", "loss"))
            writer.writeheader()
            writer.writerows(steps)
        with open(out / "validation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("epoch", "step", "val_dice"))
            writer.writeheader()
            writer.writerows(curve)
    return model, history


def retrain_unet(g, h_o: SliceDataset, config: SegTrainConfig, out_dir=None):
    """Train a UNet on generator outputs of H_O (target O) paired with the untouched H_O masks.

    Both the training and validation splits are transformed.
    """
    if not (h_o.domains == Domain.O.index).all():
        raise ValueError("retraining reads original-domain data only")
    train = transform_dataset(g, h_o.subset("train"), Domain.O)
    val = transform_dataset(g, h_o.subset("val"), Domain.O)
    return train_unet(train, val, config, out_dir=out_dir)

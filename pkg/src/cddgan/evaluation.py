"""Subject-wise Dice, the domain classification score, and report files."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cddgan.data_ingest import SliceDataset
from cddgan.domains import N_DOMAINS
from cddgan.metrics import dice
from cddgan.networks import ClassifierConfig, DomainClassifier
from cddgan.segmentation import predict_volume, subject_dice

log = logging.getLogger(__name__)

DATASET_KEYS = ("HO", "HC", "HE")
TABLE_COLUMNS = ("method", "dice_HO", "dice_HC", "dice_HE", "avg_dice", "classification_score")
GRID_COLUMNS = ("input", "transformed", "predicted mask", "ground truth")

__all__ = [
    "dice",
    "evaluate_segmenter",
    "classification_score",
    "ClassifierTrainConfig",
    "MethodResult",
    "MetricsReport",
    "emit_report",
    "sample_panels",
]


def evaluate_segmenter(s, datasets: dict[str, SliceDataset], split: str = "test"):
    """Mean per-subject Dice on each dataset's ``split``.

    Returns ``{name: (mean_dice, {patient_id: dice})}``.
    """
    out = {}
    for name, data in datasets.items():
        expected = {p for p, sp in data.splits.items() if sp == split}
        part = data.subset(split)
        present = set(part.patient_ids.tolist())
        if not expected or expected - present:
            raise ValueError(f"{name}: patients missing from the {split} split: {sorted(expected - present)}")
        per_subject = subject_dice(s, part)
        out[name] = (float(np.mean(list(per_subject.values()))), per_subject)
    return out


@dataclass
class ClassifierTrainConfig:
    epochs: int = 20
    max_steps: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 5


def _accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start : start + batch_size])[:, None]
            pred = model(x).argmax(1).numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / len(images)


def classification_score(transformed, seed: int, config: ClassifierTrainConfig | None = None) -> float:
    """Held-out accuracy of a ResNet-18 recovering each slice's initial domain.

    ``transformed`` is one dataset (or a list of datasets) whose ``domains``
    field carries the initial domain.  Train/val/test follow the patient split.
    Chance level for three domains is 1/3.
    """
    config = config or ClassifierTrainConfig()
    data = SliceDataset.concat(list(transformed)) if isinstance(transformed, (list, tuple)) else transformed
    if len(np.unique(data.domains)) < N_DOMAINS:
        raise ValueError("classification score needs slices from all three initial domains")
    train, val, test = (data.subset(s) for s in ("train", "val", "test"))
    if min(len(train), len(val), len(test)) == 0:
        raise ValueError("classification score needs non-empty train, val and test splits")

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    model = DomainClassifier(ClassifierConfig())
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(train.images)[:, None]
    labels = torch.from_numpy(train.domains)

    best_acc, best_state, stale, step = -1.0, None, 0, 0
    for _ in range(config.epochs):
        model.train()
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = torch.from_numpy(order[start : start + config.batch_size])
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        acc = _accuracy(model, val.images, val.domains)
        if acc > best_acc:
            best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
        if stale >= config.patience or (config.max_steps is not None and step >= config.max_steps):
            break
    model.load_state_dict(best_state)
    return _accuracy(model, test.images, test.domains)


@dataclass
class MethodResult:
    dice: dict[str, float]
    classification_score: float | None = None
    per_subject: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(DATASET_KEYS) - set(self.dice)
        if missing:
            raise ValueError(f"missing Dice for {sorted(missing)}")
        values = list(self.dice.values())
        if self.classification_score is not None:
            values.append(self.classification_score)
        if not all(0.0 <= v <= 1.0 for v in values):
            raise ValueError("metrics must lie in [0, 1]")

    @property
    def avg_dice(self) -> float:
        return float(np.mean([self.dice[k] for k in DATASET_KEYS]))

    def row(self) -> dict:
        return {
            "dice_HO": self.dice["HO"],
            "dice_HC": self.dice["HC"],
            "dice_HE": self.dice["HE"],
            "avg_dice": self.avg_dice,
            "classification_score": self.classification_score,
        }


@dataclass
class MetricsReport:
    methods: dict[str, MethodResult] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "methods": {
                name: {**r.row(), "per_subject": r.per_subject} for name, r in self.methods.items()
            },
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        methods = {
            name: MethodResult(
                dice={k: m[f"dice_{k}"] for k in DATASET_KEYS},
                classification_score=m.get("classification_score"),
                per_subject=m.get("per_subject", {}),
            )
            for name, m in d["methods"].items()
        }
        return cls(methods=methods, provenance=d.get("provenance", {}))


def _grid_figure(sample_slices: dict, path: Path) -> tuple[int, int]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = list(sample_slices)
    n_rows, n_cols = len(methods) * len(DATASET_KEYS), len(GRID_COLUMNS)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2 * n_cols, 2 * n_rows), squeeze=False)
    keys = ("input", "transformed", "predicted", "ground_truth")
    for m, method in enumerate(methods):
        for d, ds in enumerate(DATASET_KEYS):
            r = m * len(DATASET_KEYS) + d
            panel = sample_slices[method][ds]
            for c, key in enumerate(keys):
                ax = axes[r, c]
                ax.imshow(panel[key], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(GRID_COLUMNS[c], fontsize=8)
                if c == 0:
                    ax.set_ylabel(f"{method}\nH_{ds[1]}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=72, metadata={"Software": None})
    plt.close(fig)
    return n_rows, n_cols


def sample_panels(seg, raw: dict, shown: dict) -> dict:
    """One test slice per dataset: the largest-foreground slice of the first test patient."""
    panels = {}
    for key in DATASET_KEYS:
        data = shown[key].subset("test")
        pid = sorted(data.patients())[0]
        idx = data.patient_indices()[pid]
        best = idx[int(np.argmax(data.masks[idx].sum(axis=(1, 2))))]
        raw_test = raw[key].subset("test")
        raw_i = np.flatnonzero(
            (raw_test.patient_ids == pid) & (raw_test.slice_indices == data.slice_indices[best])
        )[0]
        pred = predict_volume(seg, [data[i] for i in idx])
        panels[key] = {
            "input": raw_test.images[raw_i],
            "transformed": data.images[best],
            "predicted": pred[..., int(data.slice_indices[best])].astype(np.float32),
            "ground_truth": data.masks[best].astype(np.float32),
        }
    return panels


def emit_report(results: MetricsReport, sample_slices: dict | None, out_dir) -> dict:
    """Write ``metrics.json``, ``table.csv``, ``dice.csv`` and (with samples) ``grid.png``.

    ``sample_slices`` maps method -> dataset key -> panels
    ``{input, transformed, predicted, ground_truth}`` (64x64 arrays).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(results.to_dict(), indent=2, sort_keys=True))
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for name, r in results.methods.items():
            writer.writerow({"method": name, **r.row()})
    with open(out / "dice.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method", "dataset", "patient_id", "dice"))
        for name, r in results.methods.items():
            for ds in DATASET_KEYS:
                for pid, v in sorted(r.per_subject.get(ds, {}).items()):
                    writer.writerow((name, ds, pid, v))
    files = {k: out / f for k, f in (("metrics", "metrics.json"), ("table", "table.csv"), ("dice", "dice.csv"))}
    if sample_slices:
        files["grid"] = out / "grid.png"
        files["grid_shape"] = _grid_figure(sample_slices, files["grid"])
    return files

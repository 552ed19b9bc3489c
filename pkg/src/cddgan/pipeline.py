"""Staged reproduction of the ablation matrix with content-hash caching.

Each stage writes ``stages/<name>.json`` under the output root holding its
cache key, the upstream keys it was built from and a full config copy.  A
stage whose key is unchanged is skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cddgan.data_ingest import (
    PatientVolume,
    SliceDataset,
    build_slice_dataset,
    load_decathlon_hippocampus,
    split_patients,
)
from cddgan.distortion import distort_dataset
from cddgan.domain_transfer import transform_dataset
from cddgan.domains import Domain
from cddgan.evaluation import (
    DATASET_KEYS,
    ClassifierTrainConfig,
    MethodResult,
    MetricsReport,
    classification_score,
    emit_report,
    evaluate_segmenter,
    sample_panels,
)
from cddgan.gan_training import GanTrainConfig, train_gan
from cddgan.networks import load_checkpoint
from cddgan.segmentation import SegTrainConfig, retrain_unet, train_unet

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "CDDGAN_DATASET_ROOT"
TOY = "toy"
VARIANTS = ("cddgan", "drgan")
METHODS = ("UNet_P", "Dr-GAN", "(+Ret.) Dr-GAN", "(¬Ret.) CDD-GAN", "CDD-GAN")
# method -> (segmenter, transformed data source or None for raw)
METHOD_PLAN = {
    "UNet_P": ("P", None),
    "Dr-GAN": ("P", "drgan"),
    "(+Ret.) Dr-GAN": ("R_drgan", "drgan"),
    "(¬Ret.) CDD-GAN": ("P", "cddgan"),
    "CDD-GAN": ("R_cddgan", "cddgan"),
}

STAGES = ("prepare", "distort", "train_gan", "transform", "train_unet", "retrain_unet", "evaluate", "report")
DEPENDS = {
    "prepare": (),
    "distort": ("prepare",),
    "train_gan": ("prepare", "distort"),
    "transform": ("prepare", "distort", "train_gan"),
    "train_unet": ("prepare",),
    "retrain_unet": ("prepare", "train_gan"),
    "evaluate": ("prepare", "distort", "transform", "train_unet", "retrain_unet"),
    "report": ("evaluate",),
}


class MissingDependency(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset_root: str = TOY
    output_root: str = "runs/default"
    seed: int = 0
    distortion_seed: int = 0
    toy: dict = field(default_factory=lambda: {"n_patients": 6, "depth": 16})
    gan: dict = field(default_factory=lambda: {"cddgan": {}, "drgan": {}})
    segmentation: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=lambda: {"classifier": {}})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_dataset_root(self) -> str:
        return os.environ.get(DATA_ROOT_ENV) or self.dataset_root

    def gan_config(self, variant: str) -> GanTrainConfig:
        kwargs = dict(self.gan.get(variant, {}))
        kwargs.setdefault("seed", self.seed)
        return GanTrainConfig.for_variant(variant, **kwargs)

    def seg_config(self) -> SegTrainConfig:
        kwargs = dict(self.segmentation)
        kwargs.setdefault("seed", self.seed)
        return SegTrainConfig(**kwargs)

    def classifier_config(self) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(**self.evaluation.get("classifier", {}))

    def stage_section(self, stage: str) -> dict:
        return {
            "prepare": {"dataset_root": self.resolved_dataset_root(), "seed": self.seed, "toy": self.toy},
            "distort": {"distortion_seed": self.distortion_seed},
            "train_gan": {v: asdict(self.gan_config(v)) for v in VARIANTS},
            "transform": {},
            "train_unet": asdict(self.seg_config()),
            "retrain_unet": asdict(self.seg_config()),
            "evaluate": {"evaluation": self.evaluation, "seed": self.seed},
            "report": {},
        }[stage]


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def make_toy_fixture(seed: int = 0, n_patients: int = 6, depth: int = 16, size: int = 64) -> list[PatientVolume]:
    """Synthetic ellipsoid phantoms: a bright foreground body inside a noisy head-like background."""
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(np.arange(depth), np.arange(size), np.arange(size), indexing="ij")
    volumes = []
    for k in range(n_patients):
        cy, cx = rng.uniform(size * 0.4, size * 0.6, 2)
        cz = rng.uniform(depth * 0.4, depth * 0.6)
        ry, rx = rng.uniform(size * 0.12, size * 0.2, 2)
        rz = rng.uniform(depth * 0.25, depth * 0.35)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 + ((zz - cz) / rz) ** 2 <= 1.0
        head = ((yy - size / 2) / (size * 0.45)) ** 2 + ((xx - size / 2) / (size * 0.42)) ** 2 <= 1.0
        image = 200.0 * head + 250.0 * inside + rng.normal(0, 30.0, inside.shape)
        image += 40.0 * np.sin(yy / rng.uniform(4, 8)) * head
        # (H, W, D) layout, slices along the last axis
        volumes.append(
            PatientVolume(
                patient_id=f"toy_{k:03d}",
                image=np.moveaxis(image, 0, -1).astype(np.float32),
                mask=np.moveaxis(inside, 0, -1).astype(np.uint8),
            )
        )
    return volumes


class Pipeline:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_root)
        self.reads: dict[str, list[str]] = {}
        self._stage = None

    # -- paths and bookkeeping ---------------------------------------------
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def stage_key(self, stage: str) -> str:
        upstream = {}
        for dep in DEPENDS[stage]:
            m = self.read_manifest(dep)
            if m is None:
                raise MissingDependency(f"stage {stage!r} needs stage {dep!r}; run {dep!r} first")
            if m["key"] != self.stage_key(dep):
                raise MissingDependency(f"stage {dep!r} is out of date; rerun {dep!r} before {stage!r}")
            upstream[dep] = m["key"]
        return _hash({"stage": stage, "config": self.config.stage_section(stage), "upstream": upstream})

    def _record(self, path: Path) -> Path:
        if self._stage is not None:
            self.reads.setdefault(self._stage, []).append(str(path.relative_to(self.root)))
        return path

    def load_dataset(self, *parts) -> SliceDataset:
        return SliceDataset.load(self._record(self.path(*parts)))

    def load_model(self, *parts, kind=None):
        path = self._record(self.path(*parts))
        model, payload = load_checkpoint(path, expect_kind=kind)
        model.checkpoint_id = payload["param_hash"]
        return model

    # -- driver -------------------------------------------------------------
    def run(self, stages=None, force: bool = False) -> dict[str, str]:
        if stages is not None:
            unknown = set(stages) - set(STAGES)
            if unknown:
                raise ValueError(f"unknown stages {sorted(unknown)}")
        stages = list(STAGES) if stages is None else [s for s in STAGES if s in set(stages)]
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))
        status = {}
        for stage in stages:
            key = self.stage_key(stage)
            done = self.read_manifest(stage)
            if done is not None and done["key"] == key and not force:
                status[stage] = "skipped (up to date)"
                log.info("%s: skipped (up to date)", stage)
                continue
            log.info("%s: running", stage)
            self._stage = stage
            self.reads[stage] = []
            try:
                outputs = getattr(self, f"stage_{stage}")()
            finally:
                self._stage = None
            manifest = {
                "stage": stage,
                "key": key,
                "upstream": {d: self.read_manifest(d)["key"] for d in DEPENDS[stage]},
                "config_hash": _hash(self.config.to_dict()),
                "config": self.config.to_dict(),
                "reads": self.reads[stage],
                "outputs": outputs,
            }
            self.manifest_path(stage).parent.mkdir(parents=True, exist_ok=True)
            self.manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True))
            status[stage] = "ran"
        return status

    # -- stages -------------------------------------------------------------
    def stage_prepare(self):
        root = self.config.resolved_dataset_root()
        if root == TOY:
            volumes = make_toy_fixture(self.config.seed, **self.config.toy)
        else:
            volumes = load_decathlon_hippocampus(root)
        split = split_patients(volumes, self.config.seed)
        h_o = build_slice_dataset(volumes, split, self.config.seed, Domain.O)
        h_o.meta["source"] = root
        h_o.save(self.path("data", "H_O"))
        return {"H_O": h_o.content_hash(), "split_sizes": list(split.sizes())}

    def stage_distort(self):
        h_o = self.load_dataset("data", "H_O")
        out = {}
        for kind, name in (("contrast", "H_C"), ("elastic", "H_E")):
            ds = distort_dataset(h_o, kind, self.config.distortion_seed)
            ds.save(self.path("data", name))
            out[name] = ds.content_hash()
        return out

    def _train_data(self) -> SliceDataset:
        parts = [self.load_dataset("data", n).subset("train") for n in ("H_O", "H_C", "H_E")]
        return SliceDataset.concat(parts)

    def stage_train_gan(self):
        data = self._train_data()
        out = {}
        for variant in VARIANTS:
            g, dsc, rows = train_gan(self.config.gan_config(variant), data, out_dir=self.path("gan", variant))
            out[variant] = {"steps": len(rows), "final_cycle_loss": rows[-1]["cycle_loss"] if rows else None}
        return out

    def stage_transform(self):
        out = {}
        for variant in VARIANTS:
            g = self.load_model("gan", variant, "generator.pt", kind="generator")
            for name in ("H_O", "H_C", "H_E"):
                ds = transform_dataset(g, self.load_dataset("data", name), Domain.O)
                ds.save(self.path("transformed", variant, name))
                out[f"{variant}/{name}"] = ds.content_hash()
        return out

    def stage_train_unet(self):
        h_o = self.load_dataset("data", "H_O")
        _, history = train_unet(h_o.subset("train"), h_o.subset("val"), self.config.seg_config(),
                                out_dir=self.path("unet", "P"))
        return {"best_val_dice": history["best_val_dice"]}

    def stage_retrain_unet(self):
        h_o = self.load_dataset("data", "H_O")
        out = {}
        for variant in VARIANTS:
            g = self.load_model("gan", variant, "generator.pt", kind="generator")
            _, history = retrain_unet(g, h_o, self.config.seg_config(), out_dir=self.path("unet", f"R_{variant}"))
            out[variant] = {"best_val_dice": history["best_val_dice"]}
        return out

    def _datasets(self, source: str | None) -> dict[str, SliceDataset]:
        base = ("data",) if source is None else ("transformed", source)
        return {key: self.load_dataset(*base, f"H_{key[1]}") for key in DATASET_KEYS}

    def stage_evaluate(self):
        segmenters = {
            name: self.load_model("unet", name, "unet.pt", kind="unet") for name in ("P", "R_drgan", "R_cddgan")
        }
        raw = self._datasets(None)
        sources = {None: raw, "drgan": self._datasets("drgan"), "cddgan": self._datasets("cddgan")}
        cls_cfg = self.config.classifier_config()
        cls_scores = {
            src: classification_score([data[k] for k in DATASET_KEYS], self.config.seed, cls_cfg)
            for src, data in sources.items()
        }
        report = MetricsReport(provenance={"seed": self.config.seed, "config_hash": _hash(self.config.to_dict())})
        samples = {}
        for method in METHODS:
            seg_name, src = METHOD_PLAN[method]
            seg, data = segmenters[seg_name], sources[src]
            scores = evaluate_segmenter(seg, data)
            report.methods[method] = MethodResult(
                dice={k: v[0] for k, v in scores.items()},
                classification_score=cls_scores[src],
                per_subject={k: v[1] for k, v in scores.items()},
            )
            samples[method] = sample_panels(seg, raw, data)
        report.provenance["datasets"] = {
            f"{src or 'raw'}/{k}": d.content_hash() for src, ds in sources.items() for k, d in ds.items()
        }
        report.provenance["segmenters"] = {k: m.checkpoint_id for k, m in segmenters.items()}
        out = self.path("evaluation")
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        np.savez(out / "samples.npz", **{
            f"{m}|{d}|{k}": v for m, per in samples.items() for d, panel in per.items() for k, v in panel.items()
        })
        return {"metrics": _hash(report.to_dict())}

    def stage_report(self):
        path = self._record(self.path("evaluation", "metrics.json"))
        report = MetricsReport.from_dict(json.loads(path.read_text()))
        report.methods = {m: report.methods[m] for m in METHODS if m in report.methods}
        samples: dict = {}
        with np.load(self._record(self.path("evaluation", "samples.npz"))) as arrays:
            for key in arrays.files:
                m, d, k = key.split("|")
                samples.setdefault(m, {}).setdefault(d, {})[k] = arrays[key]
        samples = {m: samples[m] for m in report.methods if m in samples}
        files = emit_report(report, samples, self.path("report"))
        return {k: str(v) for k, v in files.items()}


def run_pipeline(config: ExperimentConfig, stages=None, force: bool = False) -> dict[str, str]:
    return Pipeline(config).run(stages, force=force)

import json

import numpy as np
import pytest

from cddgan.data_ingest import SliceDataset, build_slice_dataset, split_patients
from cddgan.pipeline import ExperimentConfig, make_toy_fixture

TINY_GENERATOR = {"latent_dim": 32, "noise_dim": 8, "channels": [8, 16, 16, 32, 32]}
TINY_DISCRIMINATOR = {"channels": [8, 16, 16, 32]}
TINY_UNET = {"base_channels": 8, "depth": 3}


def toy_experiment(output_root, gan_steps=30, unet_steps=30, **overrides) -> ExperimentConfig:
    """Experiment config on the toy fixture with tiny networks and short budgets."""
    gan = {"max_steps": gan_steps, "epochs": 1000, "batch_size": 8,
           "generator": TINY_GENERATOR, "discriminator": TINY_DISCRIMINATOR}
    config = {
        "output_root": str(output_root),
        "gan": {"cddgan": dict(gan), "drgan": dict(gan)},
        "segmentation": {"max_steps": unet_steps, "epochs": 1000, "batch_size": 16, "unet": TINY_UNET},
        "evaluation": {"classifier": {"epochs": 1, "max_steps": 5, "batch_size": 16}},
    }
    config.update(overrides)
    return ExperimentConfig(**config)


@pytest.fixture(scope="session")
def toy_volumes():
    return make_toy_fixture(seed=0)


@pytest.fixture(scope="session")
def h_o(toy_volumes):
    split = split_patients(toy_volumes, seed=0)
    return build_slice_dataset(toy_volumes, split, seed=0)


def standalone_slices(ds: SliceDataset, split: str = "train") -> SliceDataset:
    """Treat every slice as its own one-slice patient (for overfitting oracles)."""
    ids = [f"s{i}" for i in range(len(ds))]
    return SliceDataset(ds.images, ds.masks, ids, np.zeros(len(ds)), ds.domains, {p: split for p in ids})


def write_decathlon(root, subjects, affine=None):
    """Lay out ``(patient_id, image, label)`` triples like an MSD task directory."""
    import nibabel as nib

    affine = np.eye(4) if affine is None else affine
    (root / "imagesTr").mkdir(parents=True, exist_ok=True)
    (root / "labelsTr").mkdir(parents=True, exist_ok=True)
    training = []
    for pid, image, label in subjects:
        name = f"{pid}.nii.gz"
        nib.save(nib.Nifti1Image(image, affine), root / "imagesTr" / name)
        nib.save(nib.Nifti1Image(label, affine), root / "labelsTr" / name)
        training.append({"image": f"./imagesTr/{name}", "label": f"./labelsTr/{name}"})
    manifest = {"name": "Hippocampus", "labels": {"0": "background", "1": "Anterior", "2": "Posterior"},
                "numTraining": len(training), "training": training}
    (root / "dataset.json").write_text(json.dumps(manifest))
    return root


# --- acceptance bookkeeping -------------------------------------------------
# Tests marked ``@pytest.mark.criterion("N. label")`` decide criterion N; any
# failure marks it FAIL, otherwise a skip marks it SKIPPED.

CRITERIA: dict[str, str] = {}
_RANK = {"PASS": 0, "SKIPPED - dataset not present": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.failed:
        status = "FAIL"
    elif rep.skipped:
        status = "SKIPPED - dataset not present"
    elif rep.when == "call":
        status = "PASS"
    else:
        return
    label = marker.args[0]
    if _RANK[status] >= _RANK[CRITERIA.get(label, "PASS")]:
        CRITERIA[label] = status


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(CRITERIA, key=lambda s: int(s.split(".")[0])):
        terminalreporter.write_line(f"{CRITERIA[label]:<8} {label}")

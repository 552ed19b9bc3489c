import hashlib

import numpy as np
import pytest
import torch

from cddgan import segmentation
from cddgan.data_ingest import SliceDataset, SliceSample
from cddgan.distortion import build_distorted_datasets
from cddgan.domains import Domain
from cddgan.networks import UNet, UNetConfig, load_checkpoint
from cddgan.segmentation import (
    SegTrainConfig,
    predict_probabilities,
    predict_volume,
    retrain_unet,
    segmentation_loss,
    soft_dice_loss,
    subject_dice,
    train_unet,
)
from conftest import TINY_UNET, standalone_slices


def _config(**kwargs):
    kwargs.setdefault("unet", TINY_UNET)
    return SegTrainConfig(**kwargs)


def _untrained(seed=0):
    torch.manual_seed(seed)
    return UNet(UNetConfig(**TINY_UNET)).eval()


def _patient_slices(depth, pid="p", seed=0):
    rng = np.random.default_rng(seed)
    return [SliceSample(pid, k, rng.random((64, 64), dtype=np.float32),
                        (rng.random((64, 64)) > 0.8).astype(np.uint8), Domain.O) for k in range(depth)]


class _IdentityGenerator(torch.nn.Module):
    domains = ("O", "C", "E")
    noise_dim = 1

    def generate(self, x, d, z):
        return x

    def zero_noise(self, batch):
        return torch.zeros(batch, 1)


def _mask_hash(ds):
    return hashlib.sha256(ds.masks.tobytes()).hexdigest()


# --- losses -----------------------------------------------------------------

def test_soft_dice_loss_perfect_prediction_near_zero():
    target = torch.zeros(1, 64, 64)
    target[0, 20:30, 20:30] = 1
    logits = (target * 2 - 1) * 50
    assert soft_dice_loss(logits, target).item() < 1e-3
    assert soft_dice_loss(-logits, target).item() > 0.95


def test_segmentation_loss_mix():
    logits = torch.randn(2, 64, 64, generator=torch.Generator().manual_seed(0))
    target = (torch.rand(2, 64, 64, generator=torch.Generator().manual_seed(1)) > 0.7).float()
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
    sd = soft_dice_loss(logits, target)
    torch.testing.assert_close(segmentation_loss(logits, target, 0.5), 0.5 * bce + 0.5 * sd)
    torch.testing.assert_close(segmentation_loss(logits, target, 1.0), bce)


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"lr": -1.0}, {"bce_weight": 1.5}, {"patience": 0}])
def test_config_validated(kwargs):
    with pytest.raises(ValueError):
        SegTrainConfig(**kwargs)


# --- predict_volume -------------------------------------------------------------

def test_predict_volume_depth():
    vol = predict_volume(_untrained(), _patient_slices(30))
    assert vol.shape == (64, 64, 30)
    assert vol.dtype == np.uint8 and set(np.unique(vol)) <= {0, 1}


def test_all_background_probabilities_give_empty_volume():
    s = _untrained()
    with torch.no_grad():
        s.head.bias.fill_(-100.0)
    assert not predict_volume(s, _patient_slices(5)).any()


def test_predict_volume_matches_manual_loop():
    s = _untrained()
    slices = _patient_slices(7)
    manual = []
    with torch.no_grad():
        for sl in slices:
            p = s(torch.from_numpy(sl.image)[None, None])[0].numpy()
            manual.append((p > 0.5).astype(np.uint8))
    np.testing.assert_array_equal(predict_volume(s, slices), np.stack(manual, axis=-1))


def test_predict_volume_permutation_safe():
    s = _untrained()
    slices = _patient_slices(9)
    shuffled = [slices[i] for i in np.random.default_rng(3).permutation(9)]
    np.testing.assert_array_equal(predict_volume(s, shuffled), predict_volume(s, slices))


def test_predict_volume_missing_index():
    slices = _patient_slices(6)
    del slices[3]
    with pytest.raises(ValueError, match="missing or duplicate slice index"):
        predict_volume(_untrained(), slices)


def test_predict_volume_single_patient():
    with pytest.raises(ValueError, match="one patient"):
        predict_volume(_untrained(), _patient_slices(2, "a") + _patient_slices(2, "b"))


def test_predict_probabilities_restores_mode():
    s = _untrained().train()
    predict_probabilities(s, np.zeros((2, 64, 64), dtype=np.float32))
    assert s.training


# --- train_unet ---------------------------------------------------------------

def test_train_unet_overfits_eight_slices(h_o):
    train = h_o.subset("train")
    fg = np.flatnonzero(train.masks.sum(axis=(1, 2)) > 0)
    eight = standalone_slices(train.select(fg[np.linspace(0, len(fg) - 1, 8).astype(int)]))
    config = _config(max_steps=300, epochs=1000, batch_size=8, patience=1000)
    model, _ = train_unet(eight, eight, config)
    assert np.mean(list(subject_dice(model, eight).values())) > 0.9


def test_fixture_is_learnable(h_o):
    train = h_o.subset("train")
    config = _config(max_steps=300, epochs=1000, batch_size=16, patience=1000)
    model, _ = train_unet(train, train, config)
    assert np.mean(list(subject_dice(model, train).values())) > 0.9


def test_train_unet_deterministic(h_o, tmp_path):
    config = _config(max_steps=50, epochs=100, batch_size=16, patience=100)
    runs = [train_unet(h_o.subset("train"), h_o.subset("val"), config, tmp_path / str(i)) for i in range(2)]
    assert runs[0][1]["validation"] == runs[1][1]["validation"]
    assert runs[0][1]["steps"] == runs[1][1]["steps"]
    assert (tmp_path / "0" / "log.csv").read_bytes() == (tmp_path / "1" / "log.csv").read_bytes()


def test_train_unet_returns_best_checkpoint(h_o, tmp_path):
    config = _config(max_steps=40, epochs=100, batch_size=16, patience=100)
    model, history = train_unet(h_o.subset("train"), h_o.subset("val"), config, tmp_path)
    best = max(r["val_dice"] for r in history["validation"])
    assert history["best_val_dice"] == best
    assert np.mean(list(subject_dice(model, h_o.subset("val")).values())) == pytest.approx(best)
    back, payload = load_checkpoint(tmp_path / "unet.pt", expect_kind="unet")
    assert payload["extra"]["seed"] == 0
    for a, b in zip(back.state_dict().values(), model.state_dict().values()):
        assert torch.equal(a, b)


def test_train_unet_empty_split(h_o):
    empty = h_o.select(np.array([], dtype=int))
    with pytest.raises(ValueError, match="empty"):
        train_unet(empty, h_o.subset("val"), _config())


# --- retrain_unet ---------------------------------------------------------------

def test_retrain_reuses_original_masks(h_o, monkeypatch):
    seen = {}

    def fake_train(train, val, config, out_dir=None):
        seen["train"], seen["val"] = train, val
        return None, {}

    monkeypatch.setattr(segmentation, "train_unet", fake_train)
    torch.manual_seed(0)
    from cddgan.networks import Generator, GeneratorConfig

    g = Generator(GeneratorConfig(latent_dim=16, noise_dim=4, channels=(4, 8, 8, 16, 16)))
    retrain_unet(g, h_o, _config())
    assert _mask_hash(seen["train"]) == _mask_hash(h_o.subset("train"))
    assert _mask_hash(seen["val"]) == _mask_hash(h_o.subset("val"))
    assert not np.array_equal(seen["train"].images, h_o.subset("train").images)
    assert seen["train"].meta["transformed_to"] == "O"


def test_identity_generator_retrain_equals_train(h_o):
    config = _config(max_steps=10, epochs=10, batch_size=16)
    _, direct = train_unet(h_o.subset("train"), h_o.subset("val"), config)
    _, retrained = retrain_unet(_IdentityGenerator(), h_o, config)
    assert [r["loss"] for r in direct["steps"]] == [r["loss"] for r in retrained["steps"]]
    assert direct["validation"] == retrained["validation"]


def test_retrain_rejects_distorted_data(h_o):
    h_c, h_e = build_distorted_datasets(h_o, seed=0)
    for bad in (h_c, h_e, SliceDataset.concat([h_o, h_c])):
        with pytest.raises(ValueError, match="original-domain"):
            retrain_unet(_IdentityGenerator(), bad, _config())

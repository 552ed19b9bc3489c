"""Adversarial disentanglement training (Dr-GAN objective plus an L1 cycle term).

With ``w_cycle == 0`` the generator objective is exactly the Dr-GAN one, so
both variants share every line of this module.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cddgan.data_ingest import SliceDataset
from cddgan.domains import DOMAINS, N_DOMAINS, Domain
from cddgan.networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    parameter_hash,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "d_loss", "g_loss", "cycle_loss", "domain_acc_on_fake")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class GanLossWeights:
    w_adv: float = 1.0
    w_domain: float = 1.0
    w_identity: float = 1.0
    w_cycle: float = 10.0

    def __post_init__(self):
        for name in ("w_adv", "w_domain", "w_identity"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if not (math.isfinite(self.w_cycle) and self.w_cycle >= 0):
            raise ValueError(f"w_cycle must be finite and >= 0, got {self.w_cycle}")


VARIANT_WEIGHTS = {"cddgan": 10.0, "drgan": 0.0}


@dataclass
class GanTrainConfig:
    epochs: int = 50
    max_steps: int | None = None
    batch_size: int = 32
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    weights: GanLossWeights = field(default_factory=GanLossWeights)
    checkpoint_every: int = 0
    generator: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = GanLossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "GanTrainConfig":
        if variant not in VARIANT_WEIGHTS:
            raise ValueError(f"unknown variant {variant!r}; choose cddgan or drgan")
        weights = kwargs.pop("weights", {})
        if isinstance(weights, GanLossWeights):
            weights = asdict(weights)
        weights = {**weights, "w_cycle": VARIANT_WEIGHTS[variant]} if variant == "drgan" else weights
        return cls(weights=GanLossWeights(**weights), **kwargs)


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its round-trip reconstruction."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


@dataclass
class PassNoise:
    """Random draws for one cycle pass, fixed up front so losses can be replayed."""

    d_r: torch.Tensor
    z: torch.Tensor
    z_rec: torch.Tensor


def draw_pass_noise(g: Generator, batch: int, rng: torch.Generator) -> PassNoise:
    d_r = torch.randint(0, N_DOMAINS, (batch,), generator=rng)
    z = g.sample_noise(batch, rng)
    z_rec = g.sample_noise(batch, rng)
    return PassNoise(d_r, z, z_rec)


def cycle_pass(g: Generator, x: torch.Tensor, d_o, rng=None, noise: PassNoise | None = None,
               with_reconstruction: bool = True):
    """Transfer ``x`` to a random domain, then back to its own domain ``d_o``.

    Returns ``(x_bar, x_rec, d_r)``; ``x_rec`` is None when not requested.
    """
    x = x if x.dim() == 4 else x.reshape(-1, 1, 64, 64)
    if noise is None:
        noise = draw_pass_noise(g, x.shape[0], rng)
    x_bar = g.generate(x, noise.d_r, noise.z.to(x.dtype))
    x_rec = None
    if with_reconstruction:
        x_rec = g.generate(x_bar, _domain_indices(d_o, x.shape[0]), noise.z_rec.to(x.dtype))
    return x_bar, x_rec, noise.d_r


def _domain_indices(d, batch: int) -> torch.Tensor:
    if isinstance(d, Domain):
        return torch.full((batch,), d.index, dtype=torch.long)
    return torch.as_tensor(d, dtype=torch.long)


def discriminator_loss(dsc: Discriminator, x, x_bar, d_o, pid, weights: GanLossWeights):
    rf_real, dom_real, id_real = dsc(x)
    rf_fake, _, _ = dsc(x_bar.detach())
    return (
        F.binary_cross_entropy_with_logits(rf_real, torch.ones_like(rf_real))
        + F.binary_cross_entropy_with_logits(rf_fake, torch.zeros_like(rf_fake))
        + weights.w_domain * F.cross_entropy(dom_real, d_o)
        + weights.w_identity * F.cross_entropy(id_real, pid)
    )


def drgan_generator_loss(dsc: Discriminator, x_bar, d_r, pid, weights: GanLossWeights):
    """Non-saturating adversarial term plus domain and identity terms on ``x_bar``."""
    rf, dom, ident = dsc(x_bar)
    return (
        weights.w_adv * F.binary_cross_entropy_with_logits(rf, torch.ones_like(rf))
        + weights.w_domain * F.cross_entropy(dom, d_r)
        + weights.w_identity * F.cross_entropy(ident, pid)
    )


def generator_loss(g, dsc, x, d_o, pid, noise: PassNoise, weights: GanLossWeights):
    """Returns ``(total, cycle, x_bar)``; the cycle term is skipped from the graph when its weight is 0."""
    use_cycle = weights.w_cycle > 0
    x_bar, x_rec, d_r = cycle_pass(g, x, d_o, noise=noise, with_reconstruction=use_cycle)
    total = drgan_generator_loss(dsc, x_bar, d_r, pid, weights)
    if use_cycle:
        cyc = cycle_loss(x, x_rec)
        total = total + weights.w_cycle * cyc
    else:
        with torch.no_grad():
            x_rec = g.generate(x_bar, d_o, noise.z_rec.to(x.dtype))
            cyc = cycle_loss(x, x_rec)
    return total, cyc, x_bar


def _check_finite(loss: torch.Tensor, what: str, step: int):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"{what} loss is {loss.item()} at step {step}")


def discriminator_step(dsc, g, batch, weights, rng, optimizer, step: int = 0) -> float:
    """One update of the discriminator only; the generator is run without gradients."""
    x, d_o, pid = batch
    noise = draw_pass_noise(g, x.shape[0], rng)
    with torch.no_grad():
        x_bar = g.generate(x, noise.d_r, noise.z)
    loss = discriminator_loss(dsc, x, x_bar, d_o, pid, weights)
    _check_finite(loss, "discriminator", step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def generator_step(g, dsc, batch, weights, rng, optimizer, step: int = 0):
    """One update of the generator only. Returns ``(loss, cycle, domain_acc_on_fake)``."""
    x, d_o, pid = batch
    noise = draw_pass_noise(g, x.shape[0], rng)
    dsc.requires_grad_(False)
    try:
        loss, cyc, x_bar = generator_loss(g, dsc, x, d_o, pid, noise, weights)
        _check_finite(loss, "generator", step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    finally:
        dsc.requires_grad_(True)
    with torch.no_grad():
        acc = (dsc(x_bar)[1].argmax(1) == noise.d_r).float().mean().item()
    return loss.item(), cyc.item(), acc


def identity_index(patient_ids) -> dict[str, int]:
    return {pid: i for i, pid in enumerate(sorted(set(patient_ids)))}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def build_models(config: GanTrainConfig, n_identities: int, seed: int):
    torch.manual_seed(seed)
    g = Generator(GeneratorConfig(**_tuples(config.generator)))
    dsc = Discriminator(DiscriminatorConfig(n_identities=n_identities, **_tuples(config.discriminator)))
    return g, dsc


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def train_gan(config: GanTrainConfig, train_data: SliceDataset, out_dir=None):
    """Alternate discriminator and generator updates over shuffled mixed-domain batches.

    Returns ``(generator, discriminator, log_rows)``.  When ``out_dir`` is given the
    loss log is written as CSV and checkpoints are stored there.
    """
    present = set(train_data.domains.tolist())
    if present != {d.index for d in DOMAINS}:
        missing = [d.value for d in DOMAINS if d.index not in present]
        raise ValueError(f"training data lacks domains {missing}")
    torch.use_deterministic_algorithms(True)

    ids = identity_index(train_data.patient_ids)
    g, dsc = build_models(config, len(ids), config.seed)
    g.train()
    dsc.train()
    opt_g = torch.optim.Adam(g.parameters(), lr=config.lr_generator, betas=config.betas)
    opt_d = torch.optim.Adam(dsc.parameters(), lr=config.lr_discriminator, betas=config.betas)
    torch_rng = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)

    images = torch.from_numpy(train_data.images)[:, None]
    domains = torch.from_numpy(train_data.domains)
    pids = torch.tensor([ids[p] for p in train_data.patient_ids], dtype=torch.long)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    step = 0
    last_good = None
    try:
        for epoch in range(config.epochs):
            for idx in _batches(len(train_data), config.batch_size, order_rng):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                idx = torch.from_numpy(idx)
                batch = (images[idx], domains[idx], pids[idx])
                d_loss = discriminator_step(dsc, g, batch, config.weights, torch_rng, opt_d, step)
                g_loss, cyc, acc = generator_step(g, dsc, batch, config.weights, torch_rng, opt_g, step)
                rows.append({"step": step, "d_loss": d_loss, "g_loss": g_loss,
                             "cycle_loss": cyc, "domain_acc_on_fake": acc})
                step += 1
                if out and config.checkpoint_every and step % config.checkpoint_every == 0:
                    _save_pair(g, dsc, out, step, config)
                    last_good = step
            else:
                continue
            break
    except TrainingDivergence as err:
        if out:
            _write_log(rows, out / "log.csv")
        log.error("%s; last good checkpoint at step %s", err, last_good)
        raise TrainingDivergence(f"{err}; last good checkpoint at step {last_good}") from err

    g.eval()
    dsc.eval()
    if out:
        _write_log(rows, out / "log.csv")
        _save_pair(g, dsc, out, step, config)
    return g, dsc, rows


def _save_pair(g, dsc, out: Path, step: int, config: GanTrainConfig):
    extra = {"seed": config.seed, "train_config": _jsonable(asdict(config))}
    save_checkpoint(g, out / "generator.pt", step=step, extra=extra)
    save_checkpoint(dsc, out / "discriminator.pt", step=step, extra=extra)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def _write_log(rows, path: Path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def model_hashes(g, dsc) -> tuple[str, str]:
    return parameter_hash(g), parameter_hash(dsc)

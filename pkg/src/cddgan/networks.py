"""Generator (encoder/decoder), multi-head discriminator, UNet and ResNet-18 classifier.

All modules take single-channel 64x64 images in [0, 1] shaped (B, 1, 64, 64).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torchvision

from cddgan.domains import DOMAINS, N_DOMAINS, Domain

IMAGE_SHAPE = (1, 64, 64)
CHECKPOINT_VERSION = 1


def _check_images(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if tuple(x.shape[1:]) != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (B, 1, 64, 64), got {tuple(x.shape)}")
    return x


def domain_one_hot(domains, batch: int | None = None, device=None) -> torch.Tensor:
    """One-hot rows for a Domain, a list of Domains or an index tensor."""
    if isinstance(domains, Domain):
        idx = torch.full((batch or 1,), domains.index, dtype=torch.long, device=device)
    elif isinstance(domains, torch.Tensor):
        idx = domains.long()
    else:
        idx = torch.tensor([Domain(d).index for d in domains], dtype=torch.long, device=device)
    return nn.functional.one_hot(idx, N_DOMAINS).float()


def _conv_block(c_in, c_out, norm=True):
    layers = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.GroupNorm(min(8, c_out), c_out))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up_block(c_in, c_out):
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.ReLU(),
    )


@dataclass
class GeneratorConfig:
    latent_dim: int = 256
    noise_dim: int = 50
    channels: tuple[int, ...] = (32, 64, 128, 256, 256)


class Encoder(nn.Module):
    """Five stride-2 conv blocks, then global average pooling to the latent code."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = (1, *cfg.channels)
        self.blocks = nn.Sequential(*[_conv_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.proj = (
            nn.Identity() if chans[-1] == cfg.latent_dim else nn.Linear(chans[-1], cfg.latent_dim)
        )

    def forward(self, x):
        h = self.blocks(x).mean(dim=(2, 3))
        return self.proj(h)


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = tuple(reversed(cfg.channels))[:5]
        self.in_dim = cfg.latent_dim + N_DOMAINS + cfg.noise_dim
        self.c0 = chans[0]
        self.fc = nn.Linear(self.in_dim, chans[0] * 4 * 4)
        self.up = nn.Sequential(*[_up_block(a, b) for a, b in zip(chans[:4], chans[1:5])])
        self.out = nn.Conv2d(chans[4], 1, 3, padding=1)

    def forward(self, code):
        h = torch.relu(self.fc(code)).view(-1, self.c0, 4, 4)
        return torch.sigmoid(self.out(self.up(h)))


class Generator(nn.Module):
    """Encoder/decoder pair: image -> content code; (code, domain, noise) -> image."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        if len(self.cfg.channels) != 5:
            raise ValueError("generator needs exactly five channel widths")
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.domains = tuple(d.value for d in DOMAINS)

    @property
    def latent_dim(self):
        return self.cfg.latent_dim

    @property
    def noise_dim(self):
        return self.cfg.noise_dim

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(_check_images(x))

    def decode(self, f: torch.Tensor, d, z: torch.Tensor) -> torch.Tensor:
        if f.dim() == 1:
            f = f[None]
        if z.dim() == 1:
            z = z[None]
        onehot = domain_one_hot(d, batch=f.shape[0], device=f.device).to(f.dtype)
        if f.shape[1] != self.latent_dim or z.shape[1] != self.noise_dim:
            raise ValueError(
                f"decoder expects code dim {self.latent_dim} and noise dim {self.noise_dim}, "
                f"got {f.shape[1]} and {z.shape[1]}"
            )
        if not (onehot.shape[0] == f.shape[0] == z.shape[0]):
            raise ValueError("code, domain and noise batch sizes differ")
        return self.decoder(torch.cat([f, onehot, z], dim=1))

    def generate(self, x: torch.Tensor, d, z: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x), d, z)

    def sample_noise(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.rand(batch, self.noise_dim, generator=generator) * 2 - 1

    def zero_noise(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.noise_dim)


@dataclass
class DiscriminatorConfig:
    n_identities: int = 146
    channels: tuple[int, ...] = (32, 64, 128, 256)


class Discriminator(nn.Module):
    """Shared conv trunk with real/fake, domain and identity heads."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        chans = (1, *self.cfg.channels)
        self.trunk = nn.Sequential(
            *[_conv_block(a, b, norm=False) for a, b in zip(chans[:-1], chans[1:])],
            nn.Flatten(),
        )
        size = 64 // 2 ** len(self.cfg.channels)
        feat = chans[-1] * size * size
        self.head_realfake = nn.Linear(feat, 1)
        self.head_domain = nn.Linear(feat, N_DOMAINS)
        self.head_identity = nn.Linear(feat, self.cfg.n_identities)
        # zero biases plus a centred input keep the heads from collapsing onto
        # a common-mode feature at init
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.zeros_(m.bias)

    def forward(self, x):
        h = self.trunk(2.0 * _check_images(x) - 1.0)
        return self.head_realfake(h)[:, 0], self.head_domain(h), self.head_identity(h)


@dataclass
class UNetConfig:
    base_channels: int = 32
    depth: int = 4


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        widths = [self.cfg.base_channels * 2**i for i in range(self.cfg.depth + 1)]
        self.down = nn.ModuleList()
        c = 1
        for w in widths[:-1]:
            self.down.append(_double_conv(c, w))
            c = w
        self.bottom = _double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w_hi, w in zip(reversed(widths[1:]), reversed(widths[:-1])):
            self.up.append(nn.ConvTranspose2d(w_hi, w, 2, stride=2))
            self.merge.append(_double_conv(2 * w, w))
        self.head = nn.Conv2d(widths[0], 1, 1)
        self.pool = nn.MaxPool2d(2)

    def logits(self, x):
        x = _check_images(x)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = merge(torch.cat([up(x), skip], dim=1))
        return self.head(x)[:, 0]

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


@dataclass
class ClassifierConfig:
    n_classes: int = N_DOMAINS


class DomainClassifier(nn.Module):
    """torchvision ResNet-18 with a single-channel stem."""

    def __init__(self, cfg: ClassifierConfig | None = None):
        super().__init__()
        self.cfg = cfg or ClassifierConfig()
        self.net = torchvision.models.resnet18(weights=None, num_classes=self.cfg.n_classes)
        self.net.conv1 = nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False)

    def forward(self, x):
        return self.net(_check_images(x))


def encode(g: Generator, x) -> torch.Tensor:
    return g.encode(torch.as_tensor(x, dtype=torch.float32))


def decode(g: Generator, f, d, z) -> torch.Tensor:
    return g.decode(torch.as_tensor(f), d, torch.as_tensor(z))


def generate(g: Generator, x, d, z) -> torch.Tensor:
    return g.generate(torch.as_tensor(x, dtype=torch.float32), d, torch.as_tensor(z))


def discriminate(dsc: Discriminator, x):
    return dsc(torch.as_tensor(x, dtype=torch.float32))


def unet_forward(s: UNet, x) -> torch.Tensor:
    return s(torch.as_tensor(x, dtype=torch.float32))


def classify_domain(c: DomainClassifier, x) -> torch.Tensor:
    return c(torch.as_tensor(x, dtype=torch.float32))


# --- checkpoints -----------------------------------------------------------

_KINDS = {
    "generator": (Generator, GeneratorConfig),
    "discriminator": (Discriminator, DiscriminatorConfig),
    "unet": (UNet, UNetConfig),
    "classifier": (DomainClassifier, ClassifierConfig),
}


def kind_of(model: nn.Module) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"no checkpoint kind for {type(model).__name__}")


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_checkpoint(model: nn.Module, path, step: int = 0, extra: dict | None = None) -> str:
    """Write a versioned checkpoint; returns the parameter hash."""
    kind = kind_of(model)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": _config_dict(model.cfg),
        "state_dict": model.state_dict(),
        "step": step,
        "rng_state": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "domains": list(getattr(model, "domains", [])),
        "param_hash": parameter_hash(model),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return payload["param_hash"]


def load_checkpoint(path, expect_kind: str | None = None):
    """Return ``(model, payload)``; the model is put in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    kind = payload["kind"]
    if expect_kind and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    cls, cfg_cls = _KINDS[kind]
    cfg_kwargs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in payload["config"].items()
    }
    model = cls(cfg_cls(**cfg_kwargs))
    model.load_state_dict(payload["state_dict"])
    if payload["domains"]:
        model.domains = tuple(payload["domains"])
    model.eval()
    return model, payload

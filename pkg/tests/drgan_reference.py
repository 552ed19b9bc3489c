"""Dr-GAN training written out by hand as an independent oracle for the trainer."""

import numpy as np
import torch
import torch.nn.functional as F

from cddgan.gan_training import identity_index
from cddgan.networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig


def reference_drgan_losses(config, data, steps):
    """Per-step ``(d_loss, g_loss)`` within the first epoch, drawing from the same random streams."""
    torch.manual_seed(config.seed)
    ids = identity_index(data.patient_ids)
    g = Generator(GeneratorConfig(**{k: tuple(v) for k, v in config.generator.items() if isinstance(v, list)},
                                  **{k: v for k, v in config.generator.items() if not isinstance(v, list)}))
    dsc = Discriminator(DiscriminatorConfig(n_identities=len(ids), channels=tuple(config.discriminator["channels"])))
    opt_g = torch.optim.Adam(g.parameters(), lr=config.lr_generator, betas=config.betas)
    opt_d = torch.optim.Adam(dsc.parameters(), lr=config.lr_discriminator, betas=config.betas)
    rng = torch.Generator().manual_seed(config.seed)
    order = np.random.default_rng(config.seed).permutation(len(data))
    images = torch.from_numpy(data.images)[:, None]
    doms = torch.from_numpy(data.domains)
    pids = torch.tensor([ids[p] for p in data.patient_ids])
    out = []
    for step in range(steps):
        idx = torch.from_numpy(order[step * config.batch_size:(step + 1) * config.batch_size])
        x, d_o, pid = images[idx], doms[idx], pids[idx]
        n = x.shape[0]
        d_r = torch.randint(0, 3, (n,), generator=rng)
        z = torch.rand(n, g.noise_dim, generator=rng) * 2 - 1
        torch.rand(n, g.noise_dim, generator=rng)
        with torch.no_grad():
            fake = g.generate(x, d_r, z)
        rf_r, dom_r, id_r = dsc(x)
        rf_f = dsc(fake)[0]
        d_loss = (F.binary_cross_entropy_with_logits(rf_r, torch.ones(n))
                  + F.binary_cross_entropy_with_logits(rf_f, torch.zeros(n))
                  + F.cross_entropy(dom_r, d_o) + F.cross_entropy(id_r, pid))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        d_r = torch.randint(0, 3, (n,), generator=rng)
        z = torch.rand(n, g.noise_dim, generator=rng) * 2 - 1
        torch.rand(n, g.noise_dim, generator=rng)
        for p in dsc.parameters():
            p.requires_grad_(False)
        rf, dom, ident = dsc(g.generate(x, d_r, z))
        g_loss = (F.binary_cross_entropy_with_logits(rf, torch.ones(n))
                  + F.cross_entropy(dom, d_r) + F.cross_entropy(ident, pid))
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        for p in dsc.parameters():
            p.requires_grad_(True)
        out.append((d_loss.item(), g_loss.item()))
    return out

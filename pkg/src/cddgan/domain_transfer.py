from __future__ import annotations

import numpy as np
import torch

from cddgan.data_ingest import SliceDataset
from cddgan.domains import Domain
from cddgan.networks import parameter_hash

NOISE_POLICY = "zero"


def generator_id(g) -> str:
    gid = getattr(g, "checkpoint_id", None)
    return gid if gid is not None else parameter_hash(g)


@torch.no_grad()
def transform_dataset(g, data: SliceDataset, target: Domain = Domain.O, batch_size: int = 256) -> SliceDataset:
    """Regenerate every slice in ``target`` domain with zero noise.

    Masks, ids, slice indices, split membership and the source-domain field
    pass through untouched.  Each call appends one entry to the provenance chain.
    """
    target = Domain(target)
    vocab = tuple(getattr(g, "domains", ()))
    used = {Domain.from_index(int(i)).value for i in np.unique(data.domains)} | {target.value}
    if not used <= set(vocab):
        raise ValueError(f"generator domain vocabulary {vocab} does not cover {sorted(used)}")

    was_training = g.training
    g.eval()
    out = np.empty_like(data.images)
    try:
        for start in range(0, len(data), batch_size):
            x = torch.from_numpy(data.images[start : start + batch_size])[:, None]
            x_bar = g.generate(x, target, g.zero_noise(x.shape[0]))
            out[start : start + batch_size] = x_bar[:, 0].numpy()
    finally:
        g.train(was_training)

    meta = dict(data.meta)
    chain = list(meta.get("provenance", []))
    chain.append({"generator": generator_id(g), "target": target.value, "noise_policy": NOISE_POLICY})
    meta["provenance"] = chain
    meta["transformed_to"] = target.value
    return SliceDataset(
        images=out,
        masks=data.masks.copy(),
        patient_ids=data.patient_ids.copy(),
        slice_indices=data.slice_indices.copy(),
        domains=data.domains.copy(),
        splits=dict(data.splits),
        meta=meta,
    )

from __future__ import annotations

from enum import Enum

import numpy as np


class Domain(str, Enum):
    """Image domain: original, contrast-shifted, elastically deformed."""

    O = "O"
    C = "C"
    E = "E"

    @property
    def index(self) -> int:
        return DOMAINS.index(self)

    @classmethod
    def from_index(cls, i: int) -> "Domain":
        return DOMAINS[i]

    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(DOMAINS), dtype=np.float32)
        v[self.index] = 1.0
        return v


DOMAINS = (Domain.O, Domain.C, Domain.E)
N_DOMAINS = len(DOMAINS)

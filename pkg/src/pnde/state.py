"""Phase-space points with a time annotation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StateVector:
    """A point ``u`` in the ambient phase space at time ``t``."""

    t: float
    u: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.u.shape[-1]

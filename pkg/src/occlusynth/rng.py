"""Hierarchical, path-addressed random streams.

Every stochastic step receives a :class:`SeededRng` derived from the root seed
plus a path of labels (scene id, stage name, ...). Two objects with the same
``(seed, path)`` always produce the same stream, regardless of which other
streams were consumed before.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

Label = Union[str, int]


def _label_key(label: Label) -> int:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        tag = f"i:{int(label)}"
    elif isinstance(label, str):
        tag = f"s:{label}"
    else:
        raise TypeError(f"unsupported label type {type(label).__name__}")
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class SeededRng:
    seed: int
    path: Tuple[Label, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, *labels: Label) -> "SeededRng":
        for lab in labels:
            _label_key(lab)
        return SeededRng(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this path's stream."""
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=tuple(_label_key(x) for x in self.path)
        )
        return np.random.Generator(np.random.PCG64(ss))

    def path_string(self) -> str:
        return "/".join(str(x) for x in (self.seed,) + self.path)

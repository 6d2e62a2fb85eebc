# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements the ordered parameter container trained by the
optimizers.
"""

from dataclasses import dataclass
from typing import Dict, Iterator, List

import numpy as np


@dataclass(eq=False)
class Parameter:
    """A named weight.

    Attributes:
      name (str): Unique parameter name.
      value (np.ndarray): 2-D weight matrix or 1-D vector, updated in place.
      block (int): Block label used by the rank selection.
    """
    name: str
    value: np.ndarray
    block: int = 0

    @property
    def is_matrix(self) -> bool:
        return self.value.ndim == 2


class ModelParams:
    """Parameters in declaration order.

    Args:
      params (list): The parameters; names must be unique.
    """
    def __init__(self, params: List[Parameter]):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        self._params = list(params)
        self._index = {p.name: p for p in self._params}

    @classmethod
    def single(cls, W: np.ndarray, name: str = "W") -> "ModelParams":
        """Wrap one matrix as a model."""
        return cls([Parameter(name=name, value=W)])

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._index[name]

    @property
    def names(self) -> List[str]:
        return [p.name for p in self._params]

    def matrices(self) -> List[Parameter]:
        return [p for p in self._params if p.is_matrix]

    def copy(self) -> "ModelParams":
        return type(self)([
            Parameter(name=p.name, value=p.value.copy(), block=p.block)
            for p in self._params
        ])

    def values(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value for p in self._params}

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.value.reshape(-1) for p in self._params])

    def assign_flat(self, flat: np.ndarray) -> None:
        """Overwrite all values, in place, from a flat vector."""
        offset = 0
        for p in self._params:
            size = p.value.size
            p.value[...] = flat[offset:offset + size].reshape(p.value.shape)
            offset += size
        if offset != flat.size:
            raise ValueError(f"{flat.size - offset} values not consumed")

    @property
    def size(self) -> int:
        return sum(p.value.size for p in self._params)

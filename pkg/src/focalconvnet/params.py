"""Named, ordered parameter collections."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` map with hierarchical dotted names.

    Iteration order is insertion order, so two stores built the same way
    always line up entry by entry (optimizer state, checkpoints).
    """

    def __init__(self) -> None:
        self._items: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self._items if k not in state]
        extra = [k for k in state if k not in self._items]
        if strict and (missing or extra):
            raise ConfigError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, t in self._items.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            # parameters are replaced in place so layer dataclasses keep seeing them
            t.data = np.array(arr, dtype=t.dtype)

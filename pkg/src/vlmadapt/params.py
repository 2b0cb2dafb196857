"""Named model parameters with per-parameter trainability and group tags."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

GROUPS = ("vision_encoder", "lm_block", "resampler", "gated_xattn", "adapter", "layernorm")


class ParameterStore:
    """Ordered map name -> (tensor, trainable flag, group).

    Groups drive the frozen/unfrozen partition; the vision_encoder group can
    never be made trainable.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._group: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, group: str, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if group == "vision_encoder":
            trainable = False
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        self._group[name] = group
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group_of(self, name: str) -> str:
        return self._group[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def items(self):
        for name, t in self._params.items():
            yield name, t, self._trainable[name], self._group[name]

    def trainable_items(self):
        for name, t in self._params.items():
            if self._trainable[name]:
                yield name, t

    def num_params(self, trainable_only: bool = False) -> int:
        total = 0
        for name, t in self._params.items():
            if trainable_only and not self._trainable[name]:
                continue
            total += t.data.size
        return total

    def set_trainable_groups(self, groups: set[str] | frozenset[str]) -> None:
        """Mark parameters trainable iff their group is in `groups`."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")
        for name in self._params:
            g = self._group[name]
            self._trainable[name] = g in groups and g != "vision_encoder"

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values (used for early-stopping rollback)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, value in snap.items():
            self._params[name].data = value.copy()

    def state_hash(self) -> str:
        """Order-sensitive digest over all parameter bytes; cheap change detector."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

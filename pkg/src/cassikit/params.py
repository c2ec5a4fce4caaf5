"""Named parameter store shared by the learned pipeline stages.

All weights live in one flat, insertion-ordered namespace.  Every stage of
the unfolded reconstruction references the same store (recurrent weight
sharing), so an in-place update through one stage's view is observable in
all of them.

Initialization convention: a single PCG64 stream seeded with the store seed;
parameters draw from it strictly in registration order.  Conv and linear
weights are uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)] with fan_in the
number of input values feeding one output (kh*kw*Cin/groups for convs, the
input width for linear maps).  Biases, position embeddings and layer-norm
shifts start at zero; layer-norm scales start at one.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Insertion-ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ParameterError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def n_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of all values, for serialization."""
        return {name: t.copy_array() for name, t in self._entries.items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamStore":
        store = cls()
        for name, arr in arrays.items():
            store.add(name, arr)
        return store

    def load_arrays(self, arrays: dict) -> None:
        """Overwrite values in place; names and shapes must match exactly."""
        if set(arrays) != set(self._entries):
            missing = set(self._entries) - set(arrays)
            extra = set(arrays) - set(self._entries)
            raise ShapeError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in arrays.items():
            self._entries[name]._assign(np.asarray(arr, dtype=np.float64))


class Initializer:
    """Draws parameters from one seeded PCG64 stream in registration order."""

    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def conv(self, name: str, kh: int, kw: int, cin_per_group: int, cout: int,
             bias: bool = True) -> None:
        fan_in = kh * kw * cin_per_group
        bound = 1.0 / np.sqrt(fan_in)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, size=(kh, kw, cin_per_group, cout)))
        if bias:
            self.store.add(name + ".b", np.zeros(cout))

    def conv_transpose(self, name: str, stride: int, cin: int, cout: int,
                       bias: bool = True) -> None:
        fan_in = cin  # each output value sees one input pixel across Cin channels
        bound = 1.0 / np.sqrt(fan_in)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, size=(stride, stride, cin, cout)))
        if bias:
            self.store.add(name + ".b", np.zeros(cout))

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        if bias:
            self.store.add(name + ".b", np.zeros(fan_out))

    def layer_norm(self, name: str, channels: int) -> None:
        self.store.add(name + ".gamma", np.ones(channels))
        self.store.add(name + ".beta", np.zeros(channels))

    def zeros(self, name: str, shape: tuple) -> None:
        self.store.add(name, np.zeros(shape))

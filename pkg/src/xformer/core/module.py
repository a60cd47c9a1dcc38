"""A small torch-like container: named parameters, buffers and submodules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


class Module:
    """Base class for layers.

    Attributes that are :class:`Parameter` instances, :class:`Module`
    instances, or lists of modules are discovered automatically (in attribute
    assignment order). Non-learnable state such as running statistics is kept
    as numpy arrays whose attribute names are listed in ``_buffer_names``.
    """

    _buffer_names: tuple = ()
    training = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for b in mod._buffer_names:
                yield (f"{mod_name}.{b}" if mod_name else b), getattr(mod, b)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to_dtype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for b in mod._buffer_names:
                setattr(mod, b, getattr(mod, b).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, keyed by dotted name."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into this module; names and shapes must match exactly.

        Raises:
            KeyError: naming the first parameter missing from either side.
            ValueError: naming the first parameter whose shape differs.
        """
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(np.shape(state[name])) != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: expected {arr.shape}, got {np.shape(state[name])}")
        for name in state:
            if name not in own:
                raise KeyError(f"unexpected parameter {name!r}")
        params = dict(self.named_parameters())
        for mod_name, mod in self.named_modules():
            for b in mod._buffer_names:
                key = f"{mod_name}.{b}" if mod_name else b
                setattr(mod, b, np.array(state[key], dtype=getattr(mod, b).dtype))
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)

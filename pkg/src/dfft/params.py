"""Named parameter storage shared by all functional ops.

Ops never own weights. They ask a :class:`Scope` for a tensor by name and
shape; on first request the tensor is created from the store's seeded
generator, afterwards the same tensor is returned. Once the store is frozen,
requesting an unknown name is an error.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterator

import torch

Init = str | Callable[[torch.Tensor, torch.Generator], None]


def _apply_init(t: torch.Tensor, init: Init, gen: torch.Generator) -> None:
    with torch.no_grad():
        if callable(init):
            init(t, gen)
        elif init == "trunc_normal":
            torch.nn.init.trunc_normal_(t, std=0.02, a=-0.04, b=0.04, generator=gen)
        elif init == "zeros":
            t.zero_()
        elif init == "ones":
            t.fill_(1.0)
        else:
            raise ValueError(f"unknown init {init!r}")


def constant(value: float) -> Callable[[torch.Tensor, torch.Generator], None]:
    def fill(t: torch.Tensor, gen: torch.Generator) -> None:
        t.fill_(value)

    return fill


def focal_prior(prob: float = 0.01) -> Callable[[torch.Tensor, torch.Generator], None]:
    return constant(-math.log((1.0 - prob) / prob))


class ParamStore:
    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.seed = seed
        self.dtype = dtype
        self.frozen = False
        self._entries: dict[str, torch.Tensor] = {}
        self._gen = torch.Generator().manual_seed(seed)

    def get(self, name: str, shape: tuple[int, ...], init: Init = "trunc_normal") -> torch.Tensor:
        shape = tuple(int(s) for s in shape)
        t = self._entries.get(name)
        if t is not None:
            if tuple(t.shape) != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {tuple(t.shape)}, requested {shape}"
                )
            return t
        if self.frozen:
            raise KeyError(f"unknown parameter {name!r} (store is frozen)")
        t = torch.empty(shape, dtype=self.dtype)
        _apply_init(t, init, self._gen)
        t.requires_grad_(True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def parameters(self) -> list[torch.Tensor]:
        return list(self._entries.values())

    def num_params(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def freeze(self) -> "ParamStore":
        self.frozen = True
        return self

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grad(self, name: str) -> torch.Tensor:
        t = self[name]
        return torch.zeros_like(t) if t.grad is None else t.grad

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self._entries.items()}

    def load_state(self, state: dict[str, torch.Tensor], strict: bool = True) -> None:
        if strict and set(state) != set(self._entries) and self._entries:
            missing = sorted(set(self._entries) - set(state))
            extra = sorted(set(state) - set(self._entries))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        with torch.no_grad():
            for name, value in state.items():
                if name in self._entries:
                    if tuple(value.shape) != tuple(self._entries[name].shape):
                        raise ValueError(
                            f"parameter {name!r} has shape {tuple(self._entries[name].shape)}, "
                            f"state holds {tuple(value.shape)}"
                        )
                    self._entries[name].copy_(value.to(self.dtype))
                else:
                    t = value.detach().to(self.dtype).clone().requires_grad_(True)
                    self._entries[name] = t


class Scope:
    """A name prefix into a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def get(self, name: str, shape: tuple[int, ...], init: Init = "trunc_normal") -> torch.Tensor:
        return self.store.get(self._full(name), shape, init)

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._full(name))

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype

    def __repr__(self) -> str:
        return f"Scope({self.prefix!r})"


def as_scope(params: ParamStore | Scope) -> Scope:
    return params if isinstance(params, Scope) else Scope(params)

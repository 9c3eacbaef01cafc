"""Factorized tuning (FacT) of query/value projections.

Weight increments share two d x r factors across every layer; each
(layer, projection) pair owns an r x r core: ``delta = U @ sigma @ V.T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import ops
from .tensor import Tensor, register_gradcheck

PROJECTIONS = ("query", "value")


@dataclass
class FacTFactors:
    u: Tensor | dict[str, Tensor]
    v: Tensor | dict[str, Tensor]
    sigmas: dict[tuple[int, str], Tensor] = field(default_factory=dict)

    @property
    def shared(self) -> bool:
        return isinstance(self.u, Tensor)

    def factors_for(self, proj: str) -> tuple[Tensor, Tensor]:
        if self.shared:
            return self.u, self.v
        return self.u[proj], self.v[proj]

    @property
    def rank(self) -> int:
        return self.factors_for(PROJECTIONS[0])[0].shape[1]

    @property
    def dim(self) -> int:
        return self.factors_for(PROJECTIONS[0])[0].shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.shared:
            out["fact.u"], out["fact.v"] = self.u, self.v
        else:
            for p in self.u:
                out[f"fact.u.{p}"], out[f"fact.v.{p}"] = self.u[p], self.v[p]
        for (layer, proj), s in sorted(self.sigmas.items()):
            out[f"fact.sigma.{layer}.{proj}"] = s
        return out

    def validate(self, depth: int) -> None:
        d, r = self.dim, self.rank
        if r > d:
            raise ValueError(f"FacT rank {r} exceeds feature dim {d}")
        missing = [(i, p) for i in range(depth) for p in PROJECTIONS if (i, p) not in self.sigmas]
        if missing:
            raise ValueError(f"FacT cores missing for {missing}")


def init_fact(dim: int, rank: int, depth: int, rng: np.random.Generator, shared: bool = True) -> FacTFactors:
    """U, V ~ N(0, 1/d); every core starts at zero so the adapted weight equals W0."""
    if not 1 <= rank <= dim:
        raise ValueError(f"rank must lie in [1, {dim}], got {rank}")

    def factor():
        return Tensor(rng.normal(size=(dim, rank)) / math.sqrt(dim), requires_grad=True)

    if shared:
        u, v = factor(), factor()
    else:
        u = {p: factor() for p in PROJECTIONS}
        v = {p: factor() for p in PROJECTIONS}
    sigmas = {(i, p): Tensor(np.zeros((rank, rank)), requires_grad=True) for i in range(depth) for p in PROJECTIONS}
    return FacTFactors(u=u, v=v, sigmas=sigmas)


def fact_delta(f: FacTFactors, layer: int, proj: str) -> Tensor:
    key = (layer, proj)
    if key not in f.sigmas:
        raise KeyError(f"no FacT core for layer {layer}, projection {proj!r}")
    u, v = f.factors_for(proj)
    return ops.matmul(ops.matmul(u, f.sigmas[key]), ops.swap_last(v))


def fact_apply(w0: Tensor, f: FacTFactors, layer: int, proj: str) -> Tensor:
    if w0.ndim != 2 or w0.shape[0] != w0.shape[1]:
        raise ValueError(f"fact_apply needs a square base weight, got {w0.shape}")
    if w0.shape[0] != f.dim:
        raise ValueError(f"base weight dim {w0.shape[0]} != FacT factor dim {f.dim}")
    return ops.add(w0, fact_delta(f, layer, proj))


def count_parameters(params: Iterable[Tensor] | Mapping[str, Tensor], trainable_only: bool = False) -> int:
    values = params.values() if isinstance(params, Mapping) else params
    return int(sum(t.size for t in values if t.requires_grad or not trainable_only))


def trainable_fraction(model) -> float:
    """Share of parameters currently marked trainable (``requires_grad``)."""
    params = model.parameters() if hasattr(model, "parameters") else model
    if isinstance(params, Mapping):
        params = list(params.values())
    total = count_parameters(params)
    if total == 0:
        return 0.0
    return count_parameters(params, trainable_only=True) / total


@register_gradcheck("fact_apply")
def _gc_fact(rng):
    f = init_fact(6, 3, depth=2, rng=rng)
    for s in f.sigmas.values():
        s.data[:] = rng.normal(size=s.shape)
    w0 = Tensor(rng.normal(size=(6, 6)))
    core = f.sigmas[(1, "value")]
    return (lambda u, v, s: fact_apply(w0, FacTFactors(u, v, {(1, "value"): s}), 1, "value")), [f.u, f.v, core]

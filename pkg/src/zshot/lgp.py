"""Latent geometric prototype bank and prototype cross-attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class LgpBank:
    G: Tensor

    @property
    def M(self) -> int:
        return self.G.shape[0]

    @property
    def d(self) -> int:
        return self.G.shape[1]

    def copy(self, trainable: bool = False) -> "LgpBank":
        return LgpBank(Tensor(self.G.data.copy(), requires_grad=trainable, name="lgp.G"))


def init_bank(M: int, d: int, seed) -> LgpBank:
    if M < 2 or d < 2:
        raise ConfigError(f"bank needs M >= 2 and d >= 2, got M={M}, d={d}")
    rng = np.random.default_rng(seed)
    return LgpBank(Tensor(rng.standard_normal((M, d)) / np.sqrt(d), requires_grad=True, name="lgp.G"))


def init_attention(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    scale = 1.0 / np.sqrt(d)
    return {name: Tensor(rng.standard_normal((d, d)) * scale, requires_grad=True, name=f"attn.{name}")
            for name in ("W_Q", "W_K", "W_V", "W_O")}


def cross_attend(semantics, bank: LgpBank | Tensor, weights: dict[str, Tensor],
                 return_weights: bool = False):
    """Single-head attention of semantic queries over the prototype rows.

    ``softmax(Q K^T / sqrt(d)) V`` followed by the output projection, with
    ``Q = S W_Q``, ``K = G W_K``, ``V = G W_V``.
    """
    G = bank.G if isinstance(bank, LgpBank) else bank
    semantics = ad.as_tensor(semantics)
    d = G.shape[1]
    if semantics.shape[1] != d:
        raise DimensionError(f"semantics have dimension {semantics.shape[1]}, bank has {d}")
    q = semantics @ weights["W_Q"]
    k = G @ weights["W_K"]
    v = G @ weights["W_V"]
    attn = ad.softmax_rows(q @ k.T, scale=float(np.sqrt(d)))
    out = (attn @ v) @ weights["W_O"]
    return (out, attn) if return_weights else out


def export_bank_csv(path, bank: LgpBank) -> None:
    np.savetxt(path, bank.G.data, delimiter=",", fmt="%.17g")

"""Prototype-aware feature generator (stage 2).

Class semantics are projected to the feature dimension, enriched by
cross-attention over the prototype bank, summed with noise and decoded by a
small MLP.  Training matches real seen-class features with a multi-bandwidth
MMD plus an InfoNCE self-consistency term.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeatureSet, SupervisionMonitor
from .data import SemanticTable
from .errors import ContractError, LookupFailure, NumericalError
from .lgp import LgpBank, cross_attend, init_attention

log = logging.getLogger(__name__)


@dataclass
class GeneratorParams:
    tensors: dict[str, Tensor]
    use_lgp: bool = True
    single_z: bool = False
    noise_scale: float = 1.0
    # bank as seen by the frozen generator; set when stage 2 ends
    bank: LgpBank | None = None

    @property
    def attention(self) -> dict[str, Tensor]:
        return {k: self.tensors[k] for k in ("W_Q", "W_K", "W_V", "W_O")}

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        if self.bank is not None:
            self.bank.G.requires_grad = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


def init_generator(d_t: int, d: int, h_g: int, seed, use_lgp: bool = True, single_z: bool = False,
                   noise_scale: float = 1.0, proj_init: float = 0.01) -> GeneratorParams:
    """Fresh generator.  The semantic projection starts near zero so directions
    never spanned by seen-class semantics stay small after training."""
    rng = np.random.default_rng(seed)
    t = {
        "W_proj": Tensor(rng.standard_normal((d_t, d)) * proj_init / np.sqrt(d_t), requires_grad=True, name="gen.W_proj"),
        "W_g1": Tensor(rng.standard_normal((d, h_g)) * np.sqrt(2.0 / d), requires_grad=True, name="gen.W_g1"),
        "b_g1": Tensor(np.zeros((1, h_g)), requires_grad=True, name="gen.b_g1"),
        "W_g2": Tensor(rng.standard_normal((h_g, d)) * np.sqrt(2.0 / h_g), requires_grad=True, name="gen.W_g2"),
        "b_g2": Tensor(np.zeros((1, d)), requires_grad=True, name="gen.b_g2"),
    }
    t.update(init_attention(d, rng))
    return GeneratorParams(t, use_lgp, single_z, noise_scale)


def project_semantics(vectors, params: GeneratorParams) -> Tensor:
    """Linear map of semantic vectors into the feature dimension."""
    return ad.as_tensor(np.atleast_2d(vectors)) @ params.tensors["W_proj"]


def _noise(n: int, d: int, params: GeneratorParams, rng: np.random.Generator) -> np.ndarray:
    if params.single_z:
        return np.repeat(rng.standard_normal((1, d)), n, axis=0) * params.noise_scale
    return rng.standard_normal((n, d)) * params.noise_scale


def generate(t_c: np.ndarray, n: int, bank: LgpBank, params: GeneratorParams, rng) -> Tensor:
    """Differentiable synthesis of ``n`` features from one semantic vector.

    The replicated semantic rows are identical, so projection and attention
    run on a single row and broadcast against the per-point noise.
    """
    t_hat = project_semantics(t_c, params)
    h = t_hat
    if params.use_lgp:
        h = h + cross_attend(t_hat, bank, params.attention)
    d = t_hat.shape[1]
    z = _noise(n, d, params, rng)
    x = h + Tensor(z)
    t = params.tensors
    hidden = ad.leaky_relu(x @ t["W_g1"] + t["b_g1"])
    return hidden @ t["W_g2"] + t["b_g2"]


def synthesize(c: int, n_c: int, semantics: SemanticTable, bank: LgpBank | None, params: GeneratorParams,
               seed) -> FeatureSet:
    if n_c < 1:
        raise ContractError("need at least one generated point")
    t_c = semantics.vector(c)
    bank = bank if bank is not None else params.bank
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with ad.no_grad():
        f = generate(t_c, n_c, bank, params, rng)
    return FeatureSet(f.data, np.full(n_c, c), "synthetic")


# ------------------------------------------------------------------- losses


def gaussian_kernel(sqdist: Tensor, bandwidths) -> Tensor:
    """Mean over bandwidths b of ``exp(-d^2 / b)``."""
    return ad.rbf_mixture(sqdist, bandwidths)


def mmd_loss(real, fake, bandwidths) -> Tensor:
    """Biased (V-statistic) squared MMD with size-normalized kernel sums."""
    real, fake = ad.as_tensor(real), ad.as_tensor(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ContractError("MMD needs two non-empty feature sets")
    if real.shape[1] != fake.shape[1]:
        raise ContractError(f"MMD feature dimensions differ: {real.shape[1]} vs {fake.shape[1]}")
    if not len(list(bandwidths)):
        raise ContractError("MMD needs at least one bandwidth")
    kxx = gaussian_kernel(ad.pairwise_sqdist(real, real), bandwidths).mean()
    kyy = gaussian_kernel(ad.pairwise_sqdist(fake, fake), bandwidths).mean()
    kxy = gaussian_kernel(ad.pairwise_sqdist(real, fake), bandwidths).mean()
    return kxx + kyy - 2.0 * kxy


def median_bandwidths(real: np.ndarray, multipliers) -> tuple[float, ...]:
    sq = np.sum(real * real, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * real @ real.T, 0.0)
    iu = np.triu_indices(len(real), 1)
    med = float(np.median(dist[iu])) if len(iu[0]) else 1.0
    med = med if med > 0 else 1.0
    return tuple(m * med for m in multipliers)


def set_similarity(a, b, kind: str = "cosine") -> Tensor:
    """Similarity of two feature sets through their mean-pooled vectors (1 x 1)."""
    ma = ad.as_tensor(a).mean(axis=0, keepdims=True)
    mb = ad.as_tensor(b).mean(axis=0, keepdims=True)
    if kind == "dot":
        return ma @ mb.T
    return ad.cosine_matrix(ma, mb)


def info_nce(positive: Tensor, negatives: list[Tensor], tau: float) -> Tensor:
    """``-log(e^{p/tau} / (e^{p/tau} + sum_i e^{n_i/tau}))`` for 1 x 1 similarities."""
    row = ad.concat_cols([positive] + list(negatives))
    return -ad.pick(ad.log_softmax_rows(row, scale=tau), [0]).sum()


def self_consistency_loss(fake, real_others, tau1: float, n_k: int, rng, kind: str = "cosine") -> Tensor:
    """InfoNCE between two random N_k-subsets of the generated set.

    Each entry of ``real_others`` is one negative feature set from another
    class.
    """
    fake = ad.as_tensor(fake)
    n_c = fake.shape[0]
    if n_k > n_c:
        raise ContractError(f"N_k={n_k} exceeds the {n_c} generated features")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    first = ad.take_rows(fake, rng.choice(n_c, n_k, replace=False))
    second = ad.take_rows(fake, rng.choice(n_c, n_k, replace=False))
    pos = set_similarity(first, second, kind)
    negs = [set_similarity(first, ad.as_tensor(r), kind) for r in real_others]
    return info_nce(pos, negs, tau1)


def generator_loss(mmd_terms: dict[int, Tensor], self_terms: dict[int, Tensor], lambda1: float,
                   seen) -> Tensor:
    """Sum over seen classes of ``MMD_c + lambda1 * self_c``."""
    total = None
    for c in seen:
        if c not in mmd_terms or c not in self_terms:
            raise ContractError(f"missing generator loss term for seen class {c}")
        term = mmd_terms[c] + self_terms[c] * lambda1
        total = term if total is None else total + term
    if total is None:
        raise ContractError("generator loss needs at least one seen class")
    return total


# ----------------------------------------------------------------- training


@dataclass
class GenTrainResult:
    params: GeneratorParams
    bank: LgpBank
    log: list[tuple[int, float, float, float]] = field(default_factory=list)


def _sample(x: np.ndarray, n: int, rng) -> np.ndarray:
    return x[rng.choice(len(x), n, replace=len(x) < n)]


def train_generator(real: dict[int, np.ndarray], semantics: SemanticTable, bank: LgpBank,
                    params: GeneratorParams, cfg, seen, monitor: SupervisionMonitor | None = None,
                    seed=0) -> GenTrainResult:
    """Minimize the generator loss over the seen classes.

    ``real`` maps each seen class to its frozen backbone features.  The bank
    is updated too when ``cfg.lgp_trainable_step2`` is set.
    """
    for c in real:
        if c not in seen:
            raise ContractError(f"class {c} is not seen; its real features cannot enter stage 2")
        if monitor is not None:
            monitor.check(np.full(len(real[c]), c), "generator")
    bank.G.requires_grad = bool(cfg.lgp_trainable_step2 and params.use_lgp)
    trainable = dict(params.tensors)
    if not params.use_lgp:
        for k in ("W_Q", "W_K", "W_V", "W_O"):
            trainable.pop(k)
    if bank.G.requires_grad:
        trainable["G"] = bank.G
    opt = ad.Adam(trainable, lr=cfg.lr_generator, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([int(seed), 2])
    lam = 0.0 if cfg.no_self_loss else cfg.lambda1
    rows = []
    for it in range(cfg.iters_generator):
        batches = {c: _sample(real[c], cfg.N_c, rng) for c in seen}
        mmd_terms, self_terms = {}, {}
        opt.zero_grad()
        with ad.recording() as tape:
            for c in seen:
                fake = generate(semantics.vector(c), cfg.N_c, bank, params, rng)
                mmd_terms[c] = mmd_loss(batches[c], fake, median_bandwidths(batches[c], cfg.bandwidths))
                if lam > 0:
                    negs = [_sample(batches[o], cfg.n_k, rng) for o in seen if o != c]
                    self_terms[c] = self_consistency_loss(fake, negs, cfg.tau1, cfg.n_k, rng,
                                                          _set_kind(cfg))
                else:
                    self_terms[c] = Tensor(0.0)
            loss = generator_loss(mmd_terms, self_terms, lam, seen)
            if cfg.proj_l2 > 0:
                w = params.tensors["W_proj"]
                loss = loss + (w * w).sum() * cfg.proj_l2
            if not np.isfinite(loss.item()):
                raise NumericalError(f"generator loss is not finite at iteration {it}")
            ad.backward(loss, tape)
        opt.step()
        m = sum(t.item() for t in mmd_terms.values())
        s = sum(t.item() for t in self_terms.values())
        rows.append((it, m, s, loss.item()))
        if it % 50 == 0:
            log.debug("generator it %d mmd %.4f self %.4f", it, m, s)
    bank.G.requires_grad = False
    params.bank = bank.copy()
    params.freeze()
    return GenTrainResult(params, bank, rows)


def _set_kind(cfg) -> str:
    return "dot" if cfg.similarity_kind == "dot" else "cosine"

"""Shared prototype space for points and class semantics (stage 3) and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SemanticTable
from .errors import ContractError, DimensionError, NumericalError
from .generator import GeneratorParams, project_semantics, synthesize
from .lgp import LgpBank

log = logging.getLogger(__name__)

PROJECTIONS = ("psi", "phi", "sigma", "theta")


@dataclass
class AlignParams:
    tensors: dict[str, Tensor]
    tau2: float = 0.2
    similarity: str = "cosine"

    def __post_init__(self):
        missing = [p for p in PROJECTIONS if p not in self.tensors]
        if missing:
            raise ContractError(f"alignment projections missing: {missing}")
        if not self.tau2 > 0:
            raise ContractError("tau2 must be positive")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


def init_align(d: int, seed, tau2: float = 0.2, similarity: str = "cosine",
               perturb: float = 0.01) -> AlignParams:
    """Identity projections plus a small Gaussian perturbation."""
    rng = np.random.default_rng(seed)
    t = {name: Tensor(np.eye(d) + perturb * rng.standard_normal((d, d)), requires_grad=True,
                      name=f"align.{name}") for name in PROJECTIONS}
    return AlignParams(t, tau2, similarity)


def _rerepresent(x, bank: LgpBank | Tensor, left: Tensor, right: Tensor) -> Tensor:
    G = bank.G if isinstance(bank, LgpBank) else bank
    x = ad.as_tensor(x)
    d = G.shape[1]
    if x.shape[1] != d:
        raise DimensionError(f"input dimension {x.shape[1]} does not match bank dimension {d}")
    return ad.softmax_rows((x @ left) @ (G @ right).T, scale=float(np.sqrt(d)))


def rerepresent_visual(features, bank, params: AlignParams) -> Tensor:
    """Point features as distributions over prototypes (N x M)."""
    return _rerepresent(features, bank, params["psi"], params["phi"])


def rerepresent_semantic(semantics, bank, params: AlignParams) -> Tensor:
    """Projected class semantics as distributions over prototypes (|C| x M)."""
    return _rerepresent(semantics, bank, params["sigma"], params["theta"])


def similarity_matrix(points, classes, kind: str = "cosine") -> Tensor:
    """``D(points_i, classes_c)`` for every pair (N x |C|)."""
    if kind == "cosine":
        return ad.cosine_matrix(points, classes)
    if kind == "dot":
        return ad.as_tensor(points) @ ad.as_tensor(classes).T
    if kind == "bhattacharyya":
        return ad.sqrt(ad.as_tensor(points)) @ ad.sqrt(ad.as_tensor(classes)).T
    raise ContractError(f"unknown similarity {kind!r}")


def alignment_loss(visual, semantic, labels, tau2: float, kind: str = "cosine") -> Tensor:
    """Summed per-point cross-entropy of ``D(t_c, f_i) / tau2`` over all classes."""
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = ad.as_tensor(semantic).shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label outside the {n_classes} classes with semantic entries")
    sim = similarity_matrix(visual, semantic, kind)
    return -ad.pick(ad.log_softmax_rows(sim, scale=tau2), labels).sum()


def classify(visual, semantic, tau2: float = 0.2, kind: str = "cosine", allowed=None,
             return_confidence: bool = False):
    """Nearest class by similarity; ties go to the lowest class index.

    ``allowed`` restricts the candidate classes (global indices kept).
    """
    with ad.no_grad():
        sim = similarity_matrix(visual, semantic, kind).data
    return classify_similarities(sim, tau2, allowed, return_confidence)


def classify_similarities(sim: np.ndarray, tau2: float = 0.2, allowed=None, return_confidence: bool = False):
    sim = np.asarray(sim, dtype=np.float64)
    if allowed is not None:
        mask = np.full(sim.shape[1], -np.inf)
        mask[list(allowed)] = 0.0
        sim = sim + mask
    pred = np.argmax(sim, axis=1)
    if not return_confidence:
        return pred
    z = sim / tau2
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return pred, p[np.arange(len(pred)), pred]


# ----------------------------------------------------------------- training


@dataclass
class AlignTrainResult:
    params: AlignParams
    bank: LgpBank
    losses: list[float] = field(default_factory=list)


def class_semantics(semantics: SemanticTable, generator: GeneratorParams) -> np.ndarray:
    """Every class vector through the frozen generator projection (|C| x d).

    Rows are rescaled to norm sqrt(d), the typical norm of a standardized
    point feature, so both sides enter the prototype softmax at one scale.
    """
    with ad.no_grad():
        t = project_semantics(semantics.vectors, generator).data
    norm = np.linalg.norm(t, axis=1, keepdims=True)
    return t * (np.sqrt(t.shape[1]) / np.where(norm > 0, norm, 1.0))


def train_alignment(real: dict[int, np.ndarray], semantics: SemanticTable, generator: GeneratorParams,
                    bank: LgpBank, params: AlignParams, cfg, unseen, seed=0,
                    train_bank: bool = True) -> AlignTrainResult:
    """Fit the four projections (and the bank) on real seen + fresh synthetic unseen features."""
    rng = np.random.default_rng([int(seed), 3])
    sem = class_semantics(semantics, generator)
    bank.G.requires_grad = train_bank
    trainable = dict(params.tensors)
    if train_bank:
        trainable["G"] = bank.G
    opt = ad.Adam(trainable, lr=cfg.lr_alignment, clip_norm=cfg.clip_norm)
    n_real = cfg.align_points_per_class
    losses = []
    for it in range(cfg.iters_alignment):
        feats, labels = [], []
        for c in sorted(real):
            x = real[c]
            feats.append(x[rng.choice(len(x), n_real, replace=len(x) < n_real)])
            labels.append(np.full(n_real, c))
        for c in unseen:
            fs = synthesize(c, cfg.N_c, semantics, None, generator, rng)
            feats.append(fs.features)
            labels.append(fs.labels)
        x = np.concatenate(feats)
        y = np.concatenate(labels)
        opt.zero_grad()
        with ad.recording() as tape:
            fv = rerepresent_visual(x, bank, params)
            ts = rerepresent_semantic(sem, bank, params)
            loss = alignment_loss(fv, ts, y, params.tau2, params.similarity) * (1.0 / len(y))
            if not np.isfinite(loss.item()):
                raise NumericalError(f"alignment loss is not finite at iteration {it}")
            ad.backward(loss, tape)
        opt.step()
        losses.append(loss.item())
        if it % 50 == 0:
            log.debug("alignment it %d loss %.4f", it, losses[-1])
    bank.G.requires_grad = False
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    return AlignTrainResult(params, bank, losses)

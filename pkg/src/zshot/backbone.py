"""Neighborhood-pooling point encoder and its seen-class pretraining (stage 1)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ClassSplit, SceneSample
from .errors import ContractError, NumericalError

log = logging.getLogger(__name__)

# neighborhood offsets and spreads are O(0.1); this brings them to O(1)
LOCAL_SCALE = 10.0


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    origin: str = "real"

    def __post_init__(self):
        if self.origin not in ("real", "synthetic"):
            raise ContractError(f"unknown feature origin {self.origin!r}")
        if len(self.features) != len(self.labels):
            raise ContractError("features and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def of_class(self, c: int) -> np.ndarray:
        return self.features[self.labels == c]


class SupervisionMonitor:
    """Counts loss inputs checked and any that carry unseen-class labels."""

    def __init__(self, split: ClassSplit):
        self.unseen = np.asarray(split.unseen)
        self.checked = 0
        self.violations = 0

    def check(self, labels: np.ndarray, where: str) -> None:
        self.checked += 1
        bad = np.isin(labels, self.unseen)
        if bad.any():
            self.violations += 1
            raise ContractError(f"{where}: {int(bad.sum())} unseen-class points reached a training loss")


@dataclass
class BackboneParams:
    tensors: dict[str, Tensor]
    k: int
    seen: tuple[int, ...]
    frozen: bool = False
    # per-dimension standardization fitted on seen training features at freeze time
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.tensors["W3"].shape[1]

    def freeze(self) -> None:
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def standardize(self, features: np.ndarray) -> np.ndarray:
        if self.feat_mean is None:
            return features
        return (features - self.feat_mean) / self.feat_std


def init_backbone(h: int, d: int, k: int, seen, seed) -> BackboneParams:
    rng = np.random.default_rng(seed)

    def lin(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    n_seen = len(seen)
    t = {
        "W1": lin(IN_DIM, h), "b1": np.zeros((1, h)),
        "W2": lin(h, h), "b2": np.zeros((1, h)),
        "W3": lin(2 * h, d), "b3": np.zeros((1, d)),
        "Wc": lin(d, n_seen), "bc": np.zeros((1, n_seen)),
    }
    return BackboneParams({n: Tensor(v, requires_grad=True, name=f"backbone.{n}") for n, v in t.items()},
                          k, tuple(seen))


def knn(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points (self included), ties to the lowest index."""
    n = len(points)
    if n < k:
        raise ContractError(f"scene has {n} points, fewer than k={k}")
    sq = np.sum(points * points, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(dist, 0.0, out=dist)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def local_inputs(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Per-point local shape descriptor, invariant to rotation about z.

    Columns: height, the three principal spreads of the neighborhood, |z| of
    its normal and principal axis, horizontal and vertical offset from the
    neighborhood centroid.  Lengths are multiplied by ``LOCAL_SCALE``.
    """
    q = points[neighbors]
    c = q.mean(axis=1)
    x = q - c[:, None, :]
    cov = np.einsum("nki,nkj->nij", x, x) / neighbors.shape[1]
    ev, vec = np.linalg.eigh(cov)
    spread = np.sqrt(np.maximum(ev, 0.0)) * LOCAL_SCALE
    off = points - c
    return np.column_stack([
        points[:, 2],
        spread[:, 2], spread[:, 1], spread[:, 0],
        np.abs(vec[:, 2, 0]), np.abs(vec[:, 2, 2]),
        np.hypot(off[:, 0], off[:, 1]) * LOCAL_SCALE,
        off[:, 2] * LOCAL_SCALE,
    ])


IN_DIM = 8


@dataclass
class PreparedScene:
    inputs: np.ndarray
    neighbors: np.ndarray
    labels: np.ndarray
    scene_id: int


def prepare(scene: SceneSample, k: int) -> PreparedScene:
    nb = knn(scene.points, k)
    return PreparedScene(local_inputs(scene.points, nb), nb, scene.labels, scene.scene_id)


def _forward(inputs, neighbors, params: BackboneParams) -> Tensor:
    t = params.tensors
    h = ad.leaky_relu(ad.Tensor(inputs) @ t["W1"] + t["b1"])
    h = ad.leaky_relu(h @ t["W2"] + t["b2"])
    pooled = ad.gather_mean(h, neighbors)
    return ad.leaky_relu(ad.concat_cols([h, pooled]) @ t["W3"] + t["b3"])


def encode(scene: SceneSample | PreparedScene, params: BackboneParams, raw: bool = False) -> FeatureSet:
    """Per-point features; standardized once the backbone is frozen unless ``raw``."""
    prep = scene if isinstance(scene, PreparedScene) else prepare(scene, params.k)
    with ad.no_grad():
        f = _forward(prep.inputs, prep.neighbors, params).data
    return FeatureSet(f if raw else params.standardize(f), prep.labels.copy(), "real")


def _batch(scenes: list[PreparedScene]):
    offsets = np.cumsum([0] + [len(s.labels) for s in scenes])[:-1]
    inputs = np.concatenate([s.inputs for s in scenes])
    nb = np.concatenate([s.neighbors + o for s, o in zip(scenes, offsets)])
    labels = np.concatenate([s.labels for s in scenes])
    return inputs, nb, labels


def classifier_logits(features, params: BackboneParams) -> Tensor:
    t = params.tensors
    return ad.as_tensor(features) @ t["Wc"] + t["bc"]


@dataclass
class PretrainResult:
    params: BackboneParams
    accuracy: float
    losses: list[float] = field(default_factory=list)


def pretrain(scenes: list[PreparedScene], split: ClassSplit, cfg, monitor: SupervisionMonitor | None = None,
             seed=0) -> PretrainResult:
    """Seen-class cross-entropy training; params are frozen on return."""
    monitor = monitor or SupervisionMonitor(split)
    params = init_backbone(cfg.h, cfg.d, cfg.k, split.seen, seed)
    opt = ad.Adam(params.tensors, lr=cfg.lr_pretrain, clip_norm=cfg.clip_norm)
    remap = np.full(split.n_classes, -1)
    remap[list(split.seen)] = np.arange(len(split.seen))
    rng = np.random.default_rng([int(seed), 1])
    losses = []
    stable = params.snapshot()
    bs = cfg.pretrain_batch_scenes
    for epoch in range(cfg.epochs_pretrain):
        order = rng.permutation(len(scenes))
        total = 0.0
        for start in range(0, len(order), bs):
            inputs, nb, labels = _batch([scenes[i] for i in order[start:start + bs]])
            keep = split.seen_mask(labels)
            monitor.check(labels[keep], "pretrain")
            opt.zero_grad()
            try:
                with ad.recording() as tape:
                    feats = _forward(inputs, nb, params)
                    logits = classifier_logits(ad.take_rows(feats, np.flatnonzero(keep)), params)
                    loss = ad.cross_entropy(logits, remap[labels[keep]]) * (1.0 / keep.sum())
                    ad.backward(loss, tape)
                opt.step()
            except NumericalError as exc:
                err = NumericalError(f"pretraining diverged at epoch {epoch}: {exc}")
                err.checkpoint = stable
                raise err from None
            stable = params.snapshot()
            total += loss.item()
        losses.append(total / int(np.ceil(len(order) / bs)))
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    acc = seen_accuracy(scenes, params, split)
    params.freeze()
    feats = [encode(s, params, raw=True) for s in scenes]
    f = np.concatenate([x.features[split.seen_mask(x.labels)] for x in feats])
    params.feat_mean = f.mean(axis=0, keepdims=True)
    params.feat_std = np.maximum(f.std(axis=0, keepdims=True), 1e-6)
    return PretrainResult(params, acc, losses)


def predict_seen(feats: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Step-1 classifier: argmax over seen classes, returned as global class ids."""
    with ad.no_grad():
        logits = classifier_logits(feats, params).data
    return np.asarray(params.seen)[np.argmax(logits, axis=1)]


def seen_accuracy(scenes: list[PreparedScene], params: BackboneParams, split: ClassSplit) -> float:
    correct = total = 0
    for s in scenes:
        fs = encode(s, params, raw=True)
        keep = split.seen_mask(fs.labels)
        pred = predict_seen(fs.features[keep], params)
        correct += int(np.sum(pred == fs.labels[keep]))
        total += int(keep.sum())
    return correct / max(total, 1)

"""Three-stage training, evaluation and checkpoint IO."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .alignment import (AlignParams, class_semantics, classify, init_align, rerepresent_semantic,
                        rerepresent_visual, train_alignment)
from .config import ExperimentConfig
from .data import (ClassSplit, Corpus, SceneSample, SemanticTable, compose_corpus, default_class_defs,
                   load_word_vectors, split_classes, synth_semantic_embeddings)
from .errors import ContractError, LoadError
from .generator import GeneratorParams, init_generator, train_generator
from .lgp import LgpBank, init_bank
from .metrics import EvalReport, build_report, confusion_matrix, entropy_rows

log = logging.getLogger(__name__)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    defs = default_class_defs()
    if cfg.n_classes != len(defs):
        raise ContractError(f"the default class set has {len(defs)} classes, config asks for {cfg.n_classes}")
    split = split_classes(len(defs), cfg.n_unseen, cfg.split_seed)
    train = compose_corpus(defs, cfg.train_scenes, cfg.points_per_scene, cfg.corpus_seed)
    test = compose_corpus(defs, cfg.test_scenes, cfg.points_per_scene, cfg.corpus_seed,
                          first_id=cfg.train_scenes)
    names = [c.name for c in defs]
    if cfg.word_vectors:
        sem = load_word_vectors([p for p in cfg.word_vectors.split(",") if p], names)
    else:
        sem = synth_semantic_embeddings(defs, cfg.d_t, cfg.semantic_noise, cfg.corpus_seed)
    return Corpus(train, test, names, split, sem, defs)


def _seeds(seed: int) -> dict[str, int]:
    ss = np.random.SeedSequence(int(seed)).spawn(6)
    keys = ("backbone", "bank", "generator", "gen_train", "align", "align_train")
    return {k: int(s.generate_state(1)[0]) for k, s in zip(keys, ss)}


class FreezeGuard:
    """Bitwise checks that frozen parameters stay untouched."""

    def __init__(self):
        self.violations = 0
        self._saved: dict[str, dict[str, np.ndarray]] = {}

    def hold(self, key: str, snapshot: dict[str, np.ndarray]) -> None:
        self._saved[key] = {k: v.copy() for k, v in snapshot.items()}

    def verify(self, key: str, snapshot: dict[str, np.ndarray]) -> bool:
        ref = self._saved[key]
        ok = ref.keys() == snapshot.keys() and all(np.array_equal(ref[k], snapshot[k]) for k in ref)
        if not ok:
            self.violations += 1
        return ok


@dataclass
class ModelBundle:
    cfg: ExperimentConfig
    split: ClassSplit
    semantics: SemanticTable
    backbone: bb.BackboneParams
    generator: GeneratorParams | None = None
    bank: LgpBank | None = None
    align: AlignParams | None = None
    names: list[str] = field(default_factory=list)


@dataclass
class TrainLogs:
    pretrain_accuracy: float = float("nan")
    pretrain_losses: list[float] = field(default_factory=list)
    generator: list[tuple] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    freeze_violations: int = 0
    supervision_checks: int = 0
    supervision_violations: int = 0


def real_features(scenes: list[bb.PreparedScene], backbone: bb.BackboneParams, classes) -> dict[int, np.ndarray]:
    feats = [bb.encode(s, backbone) for s in scenes]
    f = np.concatenate([x.features for x in feats])
    y = np.concatenate([x.labels for x in feats])
    return {c: f[y == c] for c in classes if np.any(y == c)}


def stage_pretrain(corpus: Corpus, cfg: ExperimentConfig, monitor=None):
    prep = [bb.prepare(s, cfg.k) for s in corpus.train]
    res = bb.pretrain(prep, corpus.split, cfg, monitor, seed=_seeds(cfg.seed)["backbone"])
    return res, prep


def stage_generator(real: dict[int, np.ndarray], corpus: Corpus, cfg: ExperimentConfig, monitor=None):
    s = _seeds(cfg.seed)
    bank = init_bank(cfg.M, cfg.d, s["bank"])
    gen = init_generator(corpus.semantics.dim, cfg.d, cfg.h_g, s["generator"],
                         use_lgp=not cfg.no_lgp_in_generator, single_z=cfg.single_z_mode,
                         noise_scale=cfg.noise_scale)
    return train_generator(real, corpus.semantics, bank, gen, cfg, corpus.split.seen, monitor,
                           seed=s["gen_train"])


def stage_alignment(real: dict[int, np.ndarray], corpus: Corpus, gen: GeneratorParams, bank: LgpBank,
                    cfg: ExperimentConfig):
    s = _seeds(cfg.seed)
    params = init_align(cfg.d, s["align"], cfg.tau2, cfg.similarity_kind)
    return train_alignment(real, corpus.semantics, gen, bank, params, cfg, corpus.split.unseen,
                           seed=s["align_train"])


def train_all(corpus: Corpus, cfg: ExperimentConfig, pretrained=None) -> tuple[ModelBundle, TrainLogs]:
    """Run stages 1-3.  ``pretrained`` = (PretrainResult, prepared scenes) skips stage 1."""
    logs = TrainLogs()
    monitor = bb.SupervisionMonitor(corpus.split)
    guard = FreezeGuard()
    t0 = time.perf_counter()
    if pretrained is None:
        pre, prep = stage_pretrain(corpus, cfg, monitor)
    else:
        pre, prep = pretrained
    logs.pretrain_accuracy = pre.accuracy
    logs.pretrain_losses = list(pre.losses)
    backbone = pre.params
    guard.hold("backbone", backbone.snapshot())
    t1 = time.perf_counter()
    logs.timings["pretrain"] = t1 - t0

    real = real_features(prep, backbone, corpus.split.seen)
    gres = stage_generator(real, corpus, cfg, monitor)
    guard.verify("backbone", backbone.snapshot())
    guard.hold("generator", gres.params.snapshot())
    logs.generator = gres.log
    t2 = time.perf_counter()
    logs.timings["generator"] = t2 - t1

    bundle = ModelBundle(cfg, corpus.split, corpus.semantics, backbone, gres.params, gres.bank, None,
                         list(corpus.names))
    if not cfg.no_alignment:
        ares = stage_alignment(real, corpus, gres.params, gres.bank, cfg)
        bundle.align = ares.params
        bundle.bank = ares.bank
        logs.alignment = ares.losses
    guard.verify("backbone", backbone.snapshot())
    guard.verify("generator", gres.params.snapshot())
    logs.timings["alignment"] = time.perf_counter() - t2
    logs.freeze_violations = guard.violations
    logs.supervision_checks = monitor.checked
    logs.supervision_violations = monitor.violations
    return bundle, logs


# --------------------------------------------------------------- inference


def predict_scene(bundle: ModelBundle, scene: SceneSample | bb.PreparedScene, mode: str = "full"):
    """Per-point predictions plus (visual distributions or None)."""
    if mode == "zsl_trivial":
        fs = bb.encode(scene, bundle.backbone, raw=True)
        return bb.predict_seen(fs.features, bundle.backbone), fs.labels, None
    fs = bb.encode(scene, bundle.backbone)
    if mode != "full":
        raise ContractError(f"unknown evaluation mode {mode!r}")
    if bundle.align is None:
        # no shared prototype space: cosine against the generator's semantic projection
        sem = class_semantics(bundle.semantics, bundle.generator)
        return classify(fs.features, sem, bundle.cfg.tau2, "cosine"), fs.labels, None
    with ad.no_grad():
        fv = rerepresent_visual(fs.features, bundle.bank, bundle.align).data
        ts = semantic_distributions(bundle)
    return classify(fv, ts, bundle.align.tau2, bundle.align.similarity), fs.labels, fv


def semantic_distributions(bundle: ModelBundle) -> np.ndarray:
    with ad.no_grad():
        return rerepresent_semantic(class_semantics(bundle.semantics, bundle.generator), bundle.bank,
                                    bundle.align).data


def evaluate(bundle: ModelBundle, scenes, mode: str = "full") -> EvalReport:
    n = bundle.split.n_classes
    conf = np.zeros((n, n), dtype=np.int64)
    ent, per_class_sum, per_class_n = [], np.zeros((n, bundle.cfg.M)), np.zeros(n)
    for s in scenes:
        pred, labels, fv = predict_scene(bundle, s, mode)
        conf += confusion_matrix(pred, labels, n)
        if fv is not None:
            ent.append(entropy_rows(fv))
            np.add.at(per_class_sum, labels, fv)
            per_class_n += np.bincount(labels, minlength=n)
    ev = float(np.concatenate(ent).mean()) if ent else float("nan")
    es = float("nan")
    extra = {}
    if mode == "full" and bundle.align is not None:
        ts = semantic_distributions(bundle)
        es = float(entropy_rows(ts).mean())
        extra["_visual_dists"] = per_class_sum / np.maximum(per_class_n, 1)[:, None]
        extra["_semantic_dists"] = ts
    rep = build_report(conf, bundle.split.seen, bundle.split.unseen, bundle.names,
                       entropy_visual=ev, entropy_semantic=es)
    rep.extra = extra
    return rep


@dataclass
class ExperimentResult:
    bundle: ModelBundle
    report: EvalReport
    trivial: EvalReport
    logs: TrainLogs
    corpus: Corpus


def run_experiment(cfg: ExperimentConfig, corpus: Corpus | None = None, pretrained=None) -> ExperimentResult:
    corpus = corpus if corpus is not None else build_corpus(cfg)
    bundle, logs = train_all(corpus, cfg, pretrained)
    test = [bb.prepare(s, cfg.k) for s in corpus.test]
    report = evaluate(bundle, test, "full")
    trivial = evaluate(bundle, test, "zsl_trivial")
    return ExperimentResult(bundle, report, trivial, logs, corpus)


# ------------------------------------------------------------- checkpoints
#
# A checkpoint is a NumPy ``.npz`` archive of named float64 arrays plus a
# ``__meta__`` entry holding a JSON string (flags, shapes of record).  Names
# are ``<group>.<param>``; the layout is the same for every run.


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(str(z["__meta__"])) if "__meta__" in z.files else {}
    return arrays, meta


def save_backbone(path, p: bb.BackboneParams, accuracy: float) -> Path:
    arrays = {f"backbone.{k}": t.data for k, t in p.tensors.items()}
    arrays["norm.mean"] = p.feat_mean
    arrays["norm.std"] = p.feat_std
    return save_checkpoint(path, arrays, {"k": p.k, "seen": list(p.seen), "accuracy": accuracy})


def load_backbone(path) -> bb.BackboneParams:
    arrays, meta = load_checkpoint(path)
    t = {k.split(".", 1)[1]: ad.Tensor(v, name=k) for k, v in arrays.items() if k.startswith("backbone.")}
    return bb.BackboneParams(t, int(meta["k"]), tuple(meta["seen"]), True,
                             arrays["norm.mean"], arrays["norm.std"])


def save_generator(path, g: GeneratorParams, bank: LgpBank) -> Path:
    arrays = {f"gen.{k}": t.data for k, t in g.tensors.items()}
    arrays["gen_bank.G"] = g.bank.G.data
    arrays["lgp.G"] = bank.G.data
    return save_checkpoint(path, arrays, {"use_lgp": g.use_lgp, "single_z": g.single_z,
                                          "noise_scale": g.noise_scale})


def load_generator(path) -> tuple[GeneratorParams, LgpBank]:
    arrays, meta = load_checkpoint(path)
    t = {k.split(".", 1)[1]: ad.Tensor(v, name=k) for k, v in arrays.items() if k.startswith("gen.")}
    g = GeneratorParams(t, meta["use_lgp"], meta["single_z"], meta["noise_scale"],
                        LgpBank(ad.Tensor(arrays["gen_bank.G"])))
    return g, LgpBank(ad.Tensor(arrays["lgp.G"], name="lgp.G"))


def save_alignment(path, a: AlignParams, bank: LgpBank) -> Path:
    arrays = {f"align.{k}": t.data for k, t in a.tensors.items()}
    arrays["lgp.G"] = bank.G.data
    return save_checkpoint(path, arrays, {"tau2": a.tau2, "similarity": a.similarity})


def load_alignment(path) -> tuple[AlignParams, LgpBank]:
    arrays, meta = load_checkpoint(path)
    t = {k.split(".", 1)[1]: ad.Tensor(v, name=k) for k, v in arrays.items() if k.startswith("align.")}
    return AlignParams(t, meta["tau2"], meta["similarity"]), LgpBank(ad.Tensor(arrays["lgp.G"], name="lgp.G"))

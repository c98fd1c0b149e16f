"""Synthetic primitive-scene corpus, class splits and semantic embeddings."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, GeometryError, LookupFailure

PRIMITIVES = ("cone", "cylinder", "cuboid", "sphere", "plane")
JITTER_FRACTION = 0.02


@dataclass(frozen=True)
class Part:
    kind: str
    params: dict
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weight: float = 1.0


@dataclass(frozen=True)
class ClassDef:
    name: str
    parts: tuple[Part, ...]


@dataclass
class SceneSample:
    points: np.ndarray
    labels: np.ndarray
    scene_id: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise FormatError(f"scene {self.scene_id}: points must be a non-empty N x 3 array")
        if len(self.labels) != len(self.points):
            raise FormatError(f"scene {self.scene_id}: {len(self.labels)} labels for {len(self.points)} points")


@dataclass(frozen=True)
class ClassSplit:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen classes overlap")
        if not self.unseen:
            raise ConfigError("at least one unseen class is required")

    @property
    def n_classes(self) -> int:
        return len(self.seen) + len(self.unseen)

    def seen_mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, self.seen)


@dataclass
class SemanticTable:
    vectors: np.ndarray
    names: list[str]
    source: str = "synthetic"

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def vector(self, c: int) -> np.ndarray:
        if not 0 <= c < len(self.names):
            raise LookupFailure(f"class {c} has no semantic vector")
        return self.vectors[c]


@dataclass
class Corpus:
    train: list[SceneSample]
    test: list[SceneSample]
    names: list[str]
    split: ClassSplit
    semantics: SemanticTable
    class_defs: list[ClassDef] = field(default_factory=list)


# ----------------------------------------------------------------- geometry


def _scale_of(kind: str, p: dict) -> float:
    if kind == "sphere":
        return p["radius"]
    if kind in ("cylinder", "cone"):
        return max(p["radius"], p["height"])
    if kind == "cuboid":
        return max(p["size"])
    return max(p["width"], p["length"])


def _check_params(kind: str, p: dict) -> None:
    need = {
        "sphere": ("radius",),
        "cylinder": ("radius", "height"),
        "cone": ("radius", "height"),
        "cuboid": ("size",),
        "plane": ("width", "length"),
    }
    if kind not in need:
        raise GeometryError(f"unknown primitive kind {kind!r}; expected one of {PRIMITIVES}")
    for key in need[kind]:
        if key not in p:
            raise GeometryError(f"{kind}: missing parameter {key!r}")
        vals = np.atleast_1d(np.asarray(p[key], dtype=float))
        if key == "size" and vals.shape != (3,):
            raise GeometryError("cuboid size must have three extents")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise GeometryError(f"{kind}: parameter {key!r} must be positive, got {p[key]}")
    if kind == "plane" and p.get("normal", "z") not in ("x", "y", "z"):
        raise GeometryError(f"plane normal must be x, y or z, got {p['normal']!r}")


def _surface(kind: str, p: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return p["radius"] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cylinder":
        theta = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(0, p["height"], n)
        r = p["radius"]
        return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    if kind == "cone":
        # apex at the top; sqrt keeps sampling uniform in area
        s = np.sqrt(rng.uniform(0, 1, n))
        theta = rng.uniform(0, 2 * np.pi, n)
        r = p["radius"] * s
        return np.column_stack([r * np.cos(theta), r * np.sin(theta), p["height"] * (1 - s)])
    if kind == "cuboid":
        a, b, c = (float(v) for v in p["size"])
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([a, b, c])
        u[:, 2] += c / 2
        axis = face // 2
        side = np.where(face % 2 == 0, -0.5, 0.5)
        lo = np.array([-a / 2, -b / 2, 0.0])
        ext = np.array([a, b, c])
        rows = np.arange(n)
        u[rows, axis] = lo[axis] + (side + 0.5) * ext[axis]
        return u
    w, l = p["width"], p["length"]
    s = rng.uniform(-0.5, 0.5, n) * w
    t = rng.uniform(0, 1, n) * l
    normal = p.get("normal", "z")
    if normal == "z":
        return np.column_stack([s, t - l / 2, np.zeros(n)])
    if normal == "x":
        return np.column_stack([np.zeros(n), s, t])
    return np.column_stack([s, np.zeros(n), t])


def make_primitive(kind: str, params: dict, n_points: int, seed) -> np.ndarray:
    """Sample ``n_points`` on the surface of a primitive, with jitter.

    Jitter is isotropic Gaussian with sigma ``0.02 * scale``; vectors longer
    than ``3 sigma`` are shrunk back onto that radius.
    """
    if n_points < 8:
        raise GeometryError(f"need at least 8 points per primitive, got {n_points}")
    _check_params(kind, params)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = _surface(kind, params, n_points, rng)
    sigma = JITTER_FRACTION * _scale_of(kind, params)
    e = rng.standard_normal((n_points, 3)) * sigma
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    e *= np.minimum(1.0, 3 * sigma / np.maximum(norm, 1e-300))
    return pts + e


# ------------------------------------------------------------------- corpus


def default_class_defs() -> list[ClassDef]:
    """Eight object classes, each a two-primitive mixture.

    Every primitive kind occurs in at least two classes so any held-out class
    shares local geometry with the seen ones.
    """
    P = Part
    return [
        ClassDef("table", (P("cuboid", {"size": (1.0, 0.6, 0.05)}, (0, 0, 0.7), 0.6),
                           P("cylinder", {"radius": 0.05, "height": 0.7}, (0, 0, 0), 0.4))),
        ClassDef("lamp", (P("cone", {"radius": 0.25, "height": 0.3}, (0, 0, 1.2), 0.5),
                          P("cylinder", {"radius": 0.03, "height": 1.2}, (0, 0, 0), 0.5))),
        ClassDef("globe", (P("sphere", {"radius": 0.3}, (0, 0, 0.9), 0.7),
                           P("cylinder", {"radius": 0.04, "height": 0.6}, (0, 0, 0), 0.3))),
        ClassDef("crate", (P("cuboid", {"size": (0.6, 0.6, 0.5)}, (0, 0, 0), 0.7),
                           P("plane", {"width": 0.8, "length": 0.8}, (0, 0, 0.0), 0.3))),
        ClassDef("pillar", (P("cylinder", {"radius": 0.15, "height": 2.0}, (0, 0, 0.2), 0.7),
                            P("cuboid", {"size": (0.4, 0.4, 0.2)}, (0, 0, 0), 0.3))),
        ClassDef("tent", (P("cone", {"radius": 0.6, "height": 0.8}, (0, 0, 0), 0.7),
                          P("plane", {"width": 1.2, "length": 1.2}, (0, 0, 0), 0.3))),
        ClassDef("tank", (P("cylinder", {"radius": 0.3, "height": 0.8}, (0, 0, 0), 0.6),
                          P("sphere", {"radius": 0.3}, (0, 0, 0.8), 0.4))),
        ClassDef("board", (P("plane", {"width": 1.0, "length": 1.0, "normal": "x"}, (0, 0, 0.5), 0.7),
                           P("cuboid", {"size": (0.3, 0.6, 0.5)}, (0, 0, 0), 0.3))),
    ]


def _instance(cdef: ClassDef, n: int, rng: np.random.Generator) -> np.ndarray:
    weights = np.array([p.weight for p in cdef.parts], dtype=float)
    counts = np.floor(n * weights / weights.sum()).astype(int)
    counts[0] += n - counts.sum()
    chunks = []
    for part, m in zip(cdef.parts, counts):
        if m == 0:
            continue
        if m < 8:
            # tiny parts still need a valid sample; trim afterwards
            pts = make_primitive(part.kind, part.params, 8, rng)[:m]
        else:
            pts = make_primitive(part.kind, part.params, int(m), rng)
        chunks.append(pts + np.asarray(part.offset, dtype=float))
    return np.concatenate(chunks, axis=0)


def _scene(class_defs: Sequence[ClassDef], classes: Sequence[int], n_points: int,
           scene_id: int, rng: np.random.Generator) -> SceneSample:
    k = len(classes)
    share = np.full(k, n_points // k)
    share[: n_points % k] += 1
    base_angle = rng.uniform(0, 2 * np.pi)
    pts, labels = [], []
    for i, (c, m) in enumerate(zip(classes, share)):
        obj = _instance(class_defs[c], int(m), rng)
        yaw = rng.uniform(0, 2 * np.pi)
        cs, sn = np.cos(yaw), np.sin(yaw)
        rot = np.array([[cs, -sn, 0], [sn, cs, 0], [0, 0, 1]])
        obj = obj @ rot.T * rng.uniform(0.9, 1.1)
        ang = base_angle + 2 * np.pi * i / k + rng.uniform(-0.2, 0.2)
        radius = 1.5 + 0.3 * k + rng.uniform(-0.2, 0.2)
        obj[:, :2] += radius * np.array([np.cos(ang), np.sin(ang)])
        pts.append(obj)
        labels.append(np.full(len(obj), c))
    return SceneSample(np.concatenate(pts), np.concatenate(labels), scene_id)


def _scene_plan(n_classes: int, scenes: int, rng: np.random.Generator,
                min_objects: int = 3, max_objects: int = 4) -> list[list[int]]:
    """Classes per scene drawn from a reshuffled deck so every class appears."""
    plan, deck = [], []
    for _ in range(scenes):
        k = int(rng.integers(min_objects, max(min_objects, min(max_objects, n_classes)) + 1))
        chosen: list[int] = []
        while len(chosen) < k:
            if not deck:
                deck = list(rng.permutation(n_classes))
            c = int(deck.pop())
            if c not in chosen:
                chosen.append(c)
            elif not deck:
                deck = list(rng.permutation(n_classes))
        plan.append(chosen)
    return plan


def compose_corpus(class_defs: Sequence[ClassDef], scenes: int, points_per_scene: int, seed,
                   first_id: int = 0) -> list[SceneSample]:
    n_classes = len(class_defs)
    if n_classes < 2:
        raise ConfigError("a corpus needs at least two classes")
    if points_per_scene < n_classes * 8:
        raise ConfigError(
            f"points_per_scene={points_per_scene} is below {n_classes} classes x 8 points")
    plan = _scene_plan(n_classes, scenes, np.random.default_rng([int(seed), 0x5CE9E]),
                       min_objects=min(3, n_classes))
    out = []
    for i, classes in enumerate(plan):
        sid = first_id + i
        rng = np.random.default_rng([int(seed), sid])
        out.append(_scene(class_defs, classes, points_per_scene, sid, rng))
    return out


# ---------------------------------------------------------------- semantics


def class_descriptor(cdef: ClassDef, size_weight: float = 0.5) -> np.ndarray:
    """Primitive mixture proportions followed by coarse size statistics."""
    w = np.array([p.weight for p in cdef.parts], dtype=float)
    w = w / w.sum()
    mix = np.zeros(len(PRIMITIVES))
    for part, wi in zip(cdef.parts, w):
        mix[PRIMITIVES.index(part.kind)] += wi
    height = max(part.offset[2] + _part_height(part) for part in cdef.parts)
    footprint = max(_part_footprint(part) for part in cdef.parts)
    scale = float(np.dot(w, [_scale_of(p.kind, p.params) for p in cdef.parts]))
    return np.concatenate([mix, size_weight * np.array([height, footprint, scale])])


def _part_height(part: Part) -> float:
    p = part.params
    if part.kind == "sphere":
        return p["radius"]
    if part.kind in ("cylinder", "cone"):
        return p["height"]
    if part.kind == "cuboid":
        return p["size"][2]
    return p["length"] if p.get("normal", "z") != "z" else 0.0


def _part_footprint(part: Part) -> float:
    p = part.params
    if part.kind in ("sphere", "cylinder", "cone"):
        return p["radius"]
    if part.kind == "cuboid":
        return 0.5 * float(np.hypot(p["size"][0], p["size"][1]))
    return 0.5 * p["width"]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(n, 1e-12)


def synth_semantic_embeddings(class_defs: Sequence[ClassDef], d_t: int, noise: float, seed) -> SemanticTable:
    """Embed class descriptors through a fixed random isometry plus noise."""
    if d_t < 4:
        raise ConfigError(f"semantic dimension must be >= 4, got {d_t}")
    desc = np.stack([class_descriptor(c) for c in class_defs]) if class_defs else np.zeros((0, 8))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((max(d_t, desc.shape[1]), desc.shape[1])))
    vecs = desc @ q[:d_t].T
    if noise > 0:
        vecs = vecs + noise * rng.standard_normal(vecs.shape)
    return SemanticTable(_normalize(vecs), [c.name for c in class_defs], "synthetic")


def class_tokens(name: str) -> list[str]:
    return [t for t in re.split(r"[-_\s]+", name.strip()) if t]


def _read_vectors(path: Path, wanted: set[str]) -> tuple[dict[str, np.ndarray], int]:
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            width = len(parts) - 1
            if dim is None:
                dim = width
            elif width != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, found {width}")
            if parts[0] in wanted:
                try:
                    found[parts[0]] = np.array(parts[1:], dtype=np.float64)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
    if dim is None or dim == 0:
        raise FormatError(f"{path}: no vectors found")
    return found, dim


def load_word_vectors(paths, classes: Sequence[str]) -> SemanticTable:
    """Per-class vectors from one or more ``word v0 v1 ...`` text files.

    Several files concatenate along the feature axis; multi-word class
    names (split on ``-``, ``_`` or whitespace) average their tokens.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    tokens = {name: class_tokens(name) for name in classes}
    wanted = {t for ts in tokens.values() for t in ts}
    blocks = []
    for path in paths:
        found, dim = _read_vectors(Path(path), wanted)
        rows = []
        for name in classes:
            missing = [t for t in tokens[name] if t not in found]
            if missing or not tokens[name]:
                raise LookupFailure(f"class {name!r}: no vector for token(s) {missing or [name]} in {path}")
            rows.append(np.mean([found[t] for t in tokens[name]], axis=0))
        blocks.append(np.array(rows).reshape(len(classes), dim))
    vecs = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(classes), 0))
    source = "concatenated" if len(blocks) > 1 else "loaded"
    return SemanticTable(_normalize(vecs) if len(classes) else vecs, list(classes), source)


def write_word_vectors(path, words: Sequence[str], vectors: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in zip(words, vectors):
            fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def split_classes(n_classes: int, n_unseen: int, seed) -> ClassSplit:
    if not 1 <= n_unseen < n_classes:
        raise ConfigError(f"n_unseen must lie in [1, {n_classes - 1}], got {n_unseen}")
    perm = np.random.default_rng(seed).permutation(n_classes)
    unseen = tuple(sorted(int(c) for c in perm[:n_unseen]))
    seen = tuple(c for c in range(n_classes) if c not in unseen)
    return ClassSplit(seen, unseen)


# ----------------------------------------------------------------------- IO


def _write_scene(path: Path, scene: SceneSample) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "label"])
        for (x, y, z), lab in zip(scene.points, scene.labels):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), int(lab)])


def _read_scene(path: Path, scene_id: int) -> SceneSample:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "y", "z", "label"]:
        raise FormatError(f"{path}: expected header x,y,z,label")
    arr = np.array(rows[1:], dtype=np.float64)
    return SceneSample(arr[:, :3], arr[:, 3].astype(np.int64), scene_id)


def write_corpus(root, corpus: Corpus) -> list[Path]:
    root = Path(root)
    written = []
    for sub, scenes in (("train", corpus.train), ("test", corpus.test)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for s in scenes:
            p = root / sub / f"scene_{s.scene_id}.csv"
            _write_scene(p, s)
            written.append(p)
    unseen = set(corpus.split.unseen)
    p = root / "classes.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "seen"])
        for i, name in enumerate(corpus.names):
            w.writerow([i, name, "false" if i in unseen else "true"])
    written.append(p)
    p = root / "embeddings.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id"] + [f"v{j}" for j in range(corpus.semantics.dim)])
        for i, v in enumerate(corpus.semantics.vectors):
            w.writerow([i] + [repr(float(x)) for x in v])
    written.append(p)
    return written


def _scene_files(d: Path) -> list[tuple[int, Path]]:
    out = []
    for p in d.glob("scene_*.csv"):
        out.append((int(p.stem.split("_", 1)[1]), p))
    return sorted(out)


def read_corpus(root) -> Corpus:
    root = Path(root)
    if not (root / "classes.csv").exists():
        raise FormatError(f"{root}: not a corpus directory (classes.csv missing)")
    with open(root / "classes.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = [r["name"] for r in rows]
    seen = tuple(int(r["id"]) for r in rows if r["seen"] == "true")
    unseen = tuple(int(r["id"]) for r in rows if r["seen"] != "true")
    with open(root / "embeddings.csv", newline="") as fh:
        erows = list(csv.reader(fh))
    vecs = np.array([r[1:] for r in erows[1:]], dtype=np.float64)
    train = [_read_scene(p, i) for i, p in _scene_files(root / "train")]
    test = [_read_scene(p, i) for i, p in _scene_files(root / "test")]
    return Corpus(train, test, names, ClassSplit(seen, unseen), SemanticTable(vecs, names, "loaded"))

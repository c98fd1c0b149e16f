import filecmp
from pathlib import Path

import numpy as np
import pytest

from zshot import data as D
from zshot.config import ExperimentConfig
from zshot.errors import ConfigError, FormatError, GeometryError, LookupFailure
from zshot.pipeline import build_corpus

SIGMA = D.JITTER_FRACTION


def test_sphere_points_within_jitter_shell():
    pts = D.make_primitive("sphere", {"radius": 1.0}, 1000, 0)
    r = np.linalg.norm(pts, axis=1)
    assert r.min() >= 1 - 3 * SIGMA - 1e-12 and r.max() <= 1 + 3 * SIGMA + 1e-12


def test_plane_jitter_unbiased():
    pts = D.make_primitive("plane", {"width": 1.0, "length": 1.0}, 1000, 3)
    assert abs(pts[:, 2].mean()) < 3 * SIGMA / np.sqrt(1000)


@pytest.mark.parametrize("seed", range(5))
def test_cylinder_radial_distance(seed):
    r, h = 0.4, 1.5
    pts = D.make_primitive("cylinder", {"radius": r, "height": h}, 500, seed)
    sigma = SIGMA * max(r, h)
    radial = np.hypot(pts[:, 0], pts[:, 1])
    assert np.all(np.abs(radial - r) <= 3 * sigma + 1e-12)


def test_cone_and_cuboid_lie_near_surface():
    pts = D.make_primitive("cone", {"radius": 0.5, "height": 1.0}, 400, 0)
    # lateral surface: r/R + z/H = 1
    resid = np.hypot(pts[:, 0], pts[:, 1]) / 0.5 + pts[:, 2] / 1.0 - 1
    assert np.abs(resid).max() < 3 * SIGMA * 1.0 * (1 / 0.5 + 1) + 1e-9
    box = D.make_primitive("cuboid", {"size": (1.0, 2.0, 0.5)}, 400, 1)
    half = np.array([0.5, 1.0, 0.25])
    q = np.abs(box - np.array([0, 0, 0.25]))
    dist_to_face = np.min(np.abs(q - half), axis=1)
    assert dist_to_face.max() <= 3 * SIGMA * 2.0 + 1e-12


@pytest.mark.parametrize("kind,params", [
    ("sphere", {"radius": -1.0}),
    ("cylinder", {"radius": 0.0, "height": 1.0}),
    ("cuboid", {"size": (1.0, 1.0)}),
    ("plane", {"width": 1.0}),
    ("pyramid", {}),
])
def test_invalid_primitive_params(kind, params):
    with pytest.raises(GeometryError):
        D.make_primitive(kind, params, 20, 0)


def test_too_few_points():
    with pytest.raises(GeometryError):
        D.make_primitive("sphere", {"radius": 1.0}, 7, 0)


def test_corpus_covers_every_class():
    scenes = D.compose_corpus(D.default_class_defs(), 20, 512, 0)
    present = set(np.concatenate([s.labels for s in scenes]).tolist())
    assert present == set(range(8))
    assert all(len(np.unique(s.labels)) >= 3 for s in scenes)
    assert all(len(s.points) == 512 for s in scenes)


def test_corpus_histogram_cap():
    corpus = build_corpus(ExperimentConfig())
    labels = np.concatenate([s.labels for s in corpus.train + corpus.test])
    assert np.bincount(labels).max() / len(labels) <= 0.6


def test_corpus_points_below_minimum():
    with pytest.raises(ConfigError):
        D.compose_corpus(D.default_class_defs(), 2, 8 * 8 - 1, 0)


def test_corpus_files_identical_for_same_seed(tmp_path):
    cfg = ExperimentConfig(train_scenes=3, test_scenes=2)
    D.write_corpus(tmp_path / "a", build_corpus(cfg))
    D.write_corpus(tmp_path / "b", build_corpus(cfg))
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not cmp.diff_files


def test_corpus_roundtrip(tmp_path):
    corpus = build_corpus(ExperimentConfig(train_scenes=2, test_scenes=1))
    D.write_corpus(tmp_path, corpus)
    back = D.read_corpus(tmp_path)
    assert back.names == corpus.names and back.split == corpus.split
    for a, b in zip(back.train + back.test, corpus.train + corpus.test):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(back.semantics.vectors, corpus.semantics.vectors)
    header = (tmp_path / "embeddings.csv").read_text().splitlines()[0]
    assert header == "class_id," + ",".join(f"v{j}" for j in range(32))


def test_scene_generation_order_independent():
    a = D.compose_corpus(D.default_class_defs(), 6, 256, 4)
    b = D.compose_corpus(D.default_class_defs(), 6, 256, 4)
    for x, y in zip(a[::-1], b[::-1]):
        assert np.array_equal(x.points, y.points)


def test_embeddings_identical_descriptors_identical_vectors():
    cdefs = D.default_class_defs()
    twin = D.ClassDef("twin", cdefs[0].parts)
    t = D.synth_semantic_embeddings([cdefs[0], twin, cdefs[1]], 16, 0.0, 5)
    assert np.array_equal(t.vectors[0], t.vectors[1])


@pytest.mark.parametrize("seed", range(5))
def test_embeddings_unit_norm(seed):
    t = D.synth_semantic_embeddings(D.default_class_defs(), 32, 0.3, seed)
    assert np.allclose(np.linalg.norm(t.vectors, axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(t.vectors))


def test_embeddings_keep_descriptor_geometry():
    # lamp: cone shade on a pole; pillar: cylinder; board: plane
    t = D.synth_semantic_embeddings(D.default_class_defs(), 32, 0.0, 0)
    v = {n: t.vectors[i] for i, n in enumerate(t.names)}
    assert v["lamp"] @ v["pillar"] > v["lamp"] @ v["board"]


def test_embeddings_dim_too_small():
    with pytest.raises(ConfigError):
        D.synth_semantic_embeddings(D.default_class_defs(), 3, 0.0, 0)


def _write(path: Path, rows):
    path.write_text("".join(" ".join([w] + [repr(float(x)) for x in v]) + "\n" for w, v in rows))


def test_word_vectors_concatenate(tmp_path):
    rng = np.random.default_rng(0)
    names = ["chair", "table"]
    for f in ("a.txt", "b.txt"):
        _write(tmp_path / f, [(n, rng.standard_normal(300)) for n in names + ["sofa"]])
    t = D.load_word_vectors([tmp_path / "a.txt", tmp_path / "b.txt"], names)
    assert t.vectors.shape == (2, 600)
    assert t.source == "concatenated"
    assert np.allclose(np.linalg.norm(t.vectors, axis=1), 1.0)


def test_word_vectors_hyphen_average(tmp_path):
    _write(tmp_path / "v.txt", [("traffic", [1.0, 0.0, 0.0]), ("sign", [0.0, 1.0, 0.0])])
    t = D.load_word_vectors(tmp_path / "v.txt", ["traffic-sign"])
    assert np.allclose(t.vectors[0], np.array([1.0, 1.0, 0.0]) / np.sqrt(2))


def test_word_vectors_empty_class_list(tmp_path):
    _write(tmp_path / "v.txt", [("a", [1.0, 2.0])])
    t = D.load_word_vectors(tmp_path / "v.txt", [])
    assert len(t) == 0


def test_word_vectors_missing_token(tmp_path):
    _write(tmp_path / "v.txt", [("a", [1.0, 2.0])])
    with pytest.raises(LookupFailure, match="zebra"):
        D.load_word_vectors(tmp_path / "v.txt", ["a", "zebra"])


def test_word_vectors_ragged(tmp_path):
    (tmp_path / "v.txt").write_text("a 1 2\nb 1 2 3\n")
    with pytest.raises(FormatError):
        D.load_word_vectors(tmp_path / "v.txt", ["a"])


def test_split_sizes_and_disjointness():
    s = D.split_classes(8, 2, 0)
    assert len(s.seen) == 6 and len(s.unseen) == 2
    assert set(s.seen) | set(s.unseen) == set(range(8))
    assert len(D.split_classes(8, 4, 0).unseen) == 4


def test_split_varies_with_seed():
    splits = {D.split_classes(8, 2, s).unseen for s in range(10)}
    assert len(splits) >= 2


@pytest.mark.parametrize("n_unseen", [0, 8, -1])
def test_split_out_of_range(n_unseen):
    with pytest.raises(ConfigError):
        D.split_classes(8, n_unseen, 0)

import numpy as np
import pytest

from zshot import autodiff as ad
from zshot import backbone as bb
from zshot.config import ExperimentConfig
from zshot.data import SceneSample, split_classes
from zshot.errors import ContractError
from zshot.pipeline import build_corpus, stage_generator, stage_pretrain, real_features


def _scene(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return SceneSample(rng.uniform(-1, 1, (n, 3)), rng.integers(0, 8, n), 0)


def _params(k=8, seed=0):
    return bb.init_backbone(16, 12, k, (0, 1, 2), seed)


def test_encode_shape():
    fs = bb.encode(_scene(), _params())
    assert fs.features.shape == (200, 12) and fs.origin == "real"


@pytest.mark.parametrize("seed", range(3))
def test_encode_permutation_equivariant(seed):
    s = _scene(seed=seed)
    perm = np.random.default_rng(seed + 10).permutation(len(s.points))
    p = _params()
    a = bb.encode(s, p).features
    b = bb.encode(SceneSample(s.points[perm], s.labels[perm], 0), p).features
    assert np.max(np.abs(a[perm] - b)) < 1e-9


def test_duplicated_points_share_features():
    s = _scene(120)
    p = _params(k=8)
    dup = SceneSample(np.concatenate([s.points, s.points]), np.concatenate([s.labels, s.labels]), 0)
    f = bb.encode(dup, p).features
    assert np.max(np.abs(f[:120] - f[120:])) < 1e-9


def test_duplicated_points_with_doubled_k_leave_features_unchanged():
    # every neighbor appears twice, so means and spreads over 2k match those over k
    s = _scene(120)
    p = _params(k=8)
    p2 = bb.BackboneParams(p.tensors, 16, p.seen)
    dup = SceneSample(np.concatenate([s.points, s.points]), np.concatenate([s.labels, s.labels]), 0)
    assert np.max(np.abs(bb.encode(dup, p2).features[:120] - bb.encode(s, p).features)) < 1e-9


def test_knn_tie_break_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 0, 5.0]])
    assert bb.knn(pts, 2)[0].tolist() == [0, 1]


def test_encode_too_few_points():
    with pytest.raises(ContractError, match="k=8"):
        bb.encode(_scene(5), _params(k=8))


def test_local_inputs_rotation_about_z_invariant():
    s = _scene(150, seed=4)
    a = np.pi / 3
    rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    p = _params()
    f1 = bb.encode(s, p).features
    f2 = bb.encode(SceneSample(s.points @ rot.T, s.labels, 0), p).features
    assert np.max(np.abs(f1 - f2)) < 1e-8


def test_pretrain_loss_gradient_matches_finite_differences():
    scene = _scene(60, seed=2)
    split = split_classes(8, 2, 0)
    p = bb.init_backbone(6, 5, 4, split.seen, 1)
    prep = bb.prepare(scene, 4)
    keep = split.seen_mask(prep.labels)
    remap = np.full(8, -1)
    remap[list(split.seen)] = np.arange(len(split.seen))

    for name in ("W1", "W3", "Wc"):
        def f(x, name=name):
            t = dict(p.tensors)
            t[name] = x
            q = bb.BackboneParams(t, 4, p.seen)
            feats = bb._forward(prep.inputs, prep.neighbors, q)
            logits = bb.classifier_logits(ad.take_rows(feats, np.flatnonzero(keep)), q)
            return ad.cross_entropy(logits, remap[prep.labels[keep]]) * (1.0 / keep.sum())
        assert ad.finite_diff_check(f, p.tensors[name].data) < 1e-4, name


@pytest.fixture(scope="module")
def pretrained():
    cfg = ExperimentConfig()
    corpus = build_corpus(cfg)
    monitor = bb.SupervisionMonitor(corpus.split)
    res, prep = stage_pretrain(corpus, cfg, monitor)
    return cfg, corpus, res, prep, monitor


def test_pretrain_accuracy(pretrained):
    _, _, res, _, _ = pretrained
    assert res.accuracy > 0.85


def test_pretrain_masks_unseen(pretrained):
    _, _, _, _, monitor = pretrained
    assert monitor.checked > 0 and monitor.violations == 0


def test_monitor_fires_on_unseen_labels():
    split = split_classes(8, 2, 0)
    m = bb.SupervisionMonitor(split)
    with pytest.raises(ContractError):
        m.check(np.array([split.unseen[0]]), "test")
    assert m.violations == 1


def test_frozen_backbone_gets_no_gradient_from_generator(pretrained):
    cfg, corpus, res, prep, _ = pretrained
    params = res.params
    assert params.frozen and all(not t.requires_grad for t in params.tensors.values())
    before = params.snapshot()
    real = real_features(prep, params, corpus.split.seen)
    stage_generator(real, corpus, cfg.replace(iters_generator=2))
    assert all(t.grad is None for t in params.tensors.values())
    after = params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_standardized_seen_features(pretrained):
    _, corpus, res, prep, _ = pretrained
    real = real_features(prep, res.params, corpus.split.seen)
    f = np.concatenate(list(real.values()))
    assert np.allclose(f.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(f.std(axis=0)[f.std(axis=0) > 1e-6], 1, atol=1e-9)

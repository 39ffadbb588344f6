"""Classifier head, margin objectives, and training behavior."""

import numpy as np
import pytest

from vclab import autodiff as ad
from vclab import classifier, codec, video


def _head_oracle(w1, w2, feats):
    """Plain-numpy mirror of the dense head for cross-checking."""
    b = feats.shape[0]
    ones = np.ones((b, 1))
    h = np.maximum(np.concatenate([feats, ones], axis=1) @ w1, 0.0)
    logits = np.concatenate([h, ones], axis=1) @ w2
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _random_classifier(rng, k=8):
    return classifier.Classifier(
        w1=rng.standard_normal((9, classifier.HIDDEN)),
        w2=rng.standard_normal((classifier.HIDDEN + 1, k)))


# ------------------------------------------------------------- adversarial

def test_adv_loss_worked_examples():
    probs = [0.7, 0.2, 0.1]
    assert classifier.adv_loss(probs, 0) == pytest.approx(0.5)
    assert classifier.adv_loss(probs, 0, target=2) == pytest.approx(0.6)
    assert classifier.adv_loss([0.1, 0.2, 0.7], 0, target=2) == pytest.approx(-0.5)


def test_adv_loss_sign_tracks_decision():
    rng = np.random.default_rng(31)
    for _ in range(200):
        p = rng.dirichlet(np.ones(8))
        true = int(rng.integers(8))
        pred = int(np.argmax(p))
        untargeted = classifier.adv_loss(p, true)
        assert (untargeted > 0) == (pred == true)
        target = int((true + 1 + rng.integers(7)) % 8)
        targeted = classifier.adv_loss(p, true, target=target)
        assert (targeted < 0) == (pred == target)


def test_adv_loss_rejects_bad_arguments():
    with pytest.raises(classifier.ClassifierError):
        classifier.adv_loss([0.5, 0.5], 0, target=0)   # target == true
    with pytest.raises(classifier.ClassifierError):
        classifier.adv_loss([0.5, 0.5], 2)
    with pytest.raises(classifier.ClassifierError):
        classifier.adv_loss([[0.5, 0.5]], 0)


def test_graph_margin_matches_reference():
    rng = np.random.default_rng(32)
    probs = rng.dirichlet(np.ones(6), size=5)
    true = rng.integers(0, 6, size=5)
    sel = np.zeros((5, 6))
    sel[np.arange(5), true] = 1.0
    g = ad.Graph()
    p = g.leaf("p", (5, 6), diff=False)
    s = g.leaf("s", (5, 6), diff=False)
    out = classifier.append_adv_loss(g, p, s)
    got = g.eval({"p": probs, "s": sel})[out]
    want = [classifier.adv_loss(probs[i], true[i]) for i in range(5)]
    assert np.allclose(got, want, atol=1e-12)
    # targeted rows are the same expression negated
    tgt = (true + 1) % 6
    sel_t = np.zeros((5, 6))
    sel_t[np.arange(5), tgt] = 1.0
    got_t = -g.eval({"p": probs, "s": sel_t})[out]
    want_t = [classifier.adv_loss(probs[i], true[i], target=tgt[i])
              for i in range(5)]
    assert np.allclose(got_t, want_t, atol=1e-12)


# -------------------------------------------------------------- prediction

def test_head_matches_numpy_oracle():
    rng = np.random.default_rng(33)
    clf = _random_classifier(rng)
    feats = rng.standard_normal((10, 8)) * 0.01
    got = classifier.predict_probs(clf, feats)
    assert np.allclose(got, _head_oracle(clf.w1, clf.w2, feats), atol=1e-12)
    assert np.allclose(got.sum(axis=1), 1.0)


def test_classify_breaks_ties_toward_lowest_index():
    clf = classifier.Classifier(w1=np.zeros((9, classifier.HIDDEN)),
                                w2=np.zeros((classifier.HIDDEN + 1, 8)))
    clip = video.gen_moving_shapes(1, n_frames=5, seed=34)[0].video
    assert classifier.classify(clip, clf) == 0


def test_classify_ignores_redundant_clamp():
    rng = np.random.default_rng(35)
    clf = _random_classifier(rng)
    clip = video.gen_moving_shapes(1, n_frames=8, seed=36)[0].video
    assert classifier.classify(clip, clf) == \
        classifier.classify(np.clip(clip, 0.0, 1.0), clf)


# ----------------------------------------------------------------- training

def test_train_classifier_learns_and_is_deterministic():
    data = video.gen_moving_shapes(64, n_frames=10, seed=37)
    params = codec.init_params(1024.0, seed=2)
    clf1, tr1 = classifier.train_classifier(data, params, "nh", gop_size=5,
                                            epochs=250, seed=3)
    clf2, tr2 = classifier.train_classifier(data, params, "nh", gop_size=5,
                                            epochs=250, seed=3)
    assert tr1 == tr2
    assert np.array_equal(clf1.w1, clf2.w1)
    assert tr1[-1] < tr1[0]
    dec = [codec.code_video(c.video, params, "nh", 5).decoded for c in data]
    assert classifier.accuracy(clf1, dec, [c.label for c in data]) >= 0.9


def test_train_classifier_rejects_bad_labels():
    clip = video.gen_moving_shapes(1, n_frames=10, seed=38)[0]
    params = codec.init_params(1024.0)
    with pytest.raises(classifier.ClassifierError):
        classifier.train_classifier([(clip.video, 11)], params, "nh",
                                    gop_size=5, epochs=1)
    with pytest.raises(classifier.ClassifierError):
        classifier.train_classifier([], params, "nh", gop_size=5)


def test_classifier_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(39)
    clf = _random_classifier(rng)
    path = tmp_path / "clf.ckpt"
    classifier.save_classifier(path, clf)
    back = classifier.load_classifier(path)
    assert np.array_equal(back.w1, clf.w1)
    assert np.array_equal(back.w2, clf.w2)
    assert back.n_classes == 8

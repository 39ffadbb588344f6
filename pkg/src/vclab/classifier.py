"""Video classifier over decoded clips.

The representation is fixed: for each consecutive frame pair, the
temporal difference is correlated with the spatial gradient of the later
frame along 8 evenly spaced directions and averaged over pixels and
pairs (the ``motion_features`` graph primitive).  On top of that sit two
learned dense layers (8 -> 32 -> n_classes) with bias folded in as a
ones column, so the whole decode-classify pipeline stays expressible as
one differentiable graph.

Adversarial objectives are margins on the softmax probabilities:
``p_true - max_other`` untargeted (positive while the clip is still
classified correctly), ``max_other - p_target`` targeted (negative once
the target class wins).  A logit-margin variant of the same expressions
is available but off by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, codec, gop

N_DIRECTIONS = 8
HIDDEN = 32

DEFAULT_GOP = {"nh": 10, "hp": 10, "hb": 11}


class ClassifierError(Exception):
    pass


@dataclass
class Classifier:
    w1: np.ndarray  # (N_DIRECTIONS + 1, HIDDEN), last row is the bias
    w2: np.ndarray  # (HIDDEN + 1, n_classes)

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]


def save_classifier(path, clf: Classifier) -> None:
    checkpoint.save_tensors(path, {"w1": clf.w1, "w2": clf.w2})


def load_classifier(path) -> Classifier:
    tensors = checkpoint.load_tensors(path)
    try:
        return Classifier(w1=tensors["w1"], w2=tensors["w2"])
    except KeyError as e:
        raise ClassifierError(f"{path}: missing tensor {e.args[0]!r}") from None


# ------------------------------------------------------------ graph pieces

def append_head(g: ad.Graph, feats: ad.Ref, w1: ad.Ref, w2: ad.Ref) -> ad.Ref:
    """Dense head on (B, N_DIRECTIONS) features; returns (B, K) probs."""
    b = feats.shape[0]
    ones = g.const(np.ones((b, 1)))
    h = g.relu(g.matmul(g.concat([feats, ones], axis=1), w1))
    logits = g.matmul(g.concat([h, ones], axis=1), w2)
    return g.softmax(logits, axis=1)


_FEAT_CACHE: dict[tuple, tuple] = {}


def batch_features(clips: np.ndarray) -> np.ndarray:
    """Motion descriptors (B, N_DIRECTIONS) for decoded clips (B,T,H,W,C)."""
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim == 4:
        clips = clips[None]
    if clips.ndim != 5:
        raise ClassifierError(f"expected (B,T,H,W,C), got {clips.shape}")
    key = ("feat", clips.shape)
    if key not in _FEAT_CACHE:
        g = ad.Graph()
        x = g.leaf("x", clips.shape, diff=False)
        _FEAT_CACHE[key] = (g, g.motion_features(x, N_DIRECTIONS))
    g, ref = _FEAT_CACHE[key]
    return g.eval({"x": clips})[ref]


_HEAD_CACHE: dict[tuple, tuple] = {}


def predict_probs(clf: Classifier, feats: np.ndarray) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    key = ("head", feats.shape, clf.w1.shape, clf.w2.shape)
    if key not in _HEAD_CACHE:
        g = ad.Graph()
        f = g.leaf("f", feats.shape, diff=False)
        w1 = g.leaf("w1", clf.w1.shape, diff=False)
        w2 = g.leaf("w2", clf.w2.shape, diff=False)
        _HEAD_CACHE[key] = (g, append_head(g, f, w1, w2))
    g, ref = _HEAD_CACHE[key]
    return g.eval({"f": feats, "w1": clf.w1, "w2": clf.w2})[ref]


def classify(decoded: np.ndarray, clf: Classifier) -> int:
    """Predicted class of one decoded clip (T,H,W,C); ties break to the
    lowest index."""
    probs = predict_probs(clf, batch_features(decoded))[0]
    return int(np.argmax(probs))


def classify_batch(decoded: np.ndarray, clf: Classifier) -> np.ndarray:
    probs = predict_probs(clf, batch_features(decoded))
    return np.argmax(probs, axis=1)


# ------------------------------------------------------ adversarial margin

def adv_loss(probs: np.ndarray, true_label: int,
             target: int | None = None) -> float:
    """Margin objective the attacker descends.

    Untargeted: p_true - max others (positive while still correct).
    Targeted: max non-target - p_target (negative once the target wins).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ClassifierError(f"expected a probability vector, got {probs.shape}")
    k = probs.shape[0]
    if not 0 <= true_label < k:
        raise ClassifierError(f"true label {true_label} out of range 0..{k-1}")
    if target is None:
        others = np.delete(probs, true_label)
        return float(probs[true_label] - others.max())
    if not 0 <= target < k:
        raise ClassifierError(f"target {target} out of range 0..{k-1}")
    if target == true_label:
        raise ClassifierError("target class equals the true label")
    others = np.delete(probs, target)
    return float(others.max() - probs[target])


def append_adv_loss(g: ad.Graph, probs: ad.Ref, sel: ad.Ref) -> ad.Ref:
    """Graph version of :func:`adv_loss`: per-clip margins (B,).

    ``sel`` is a (B, K) one-hot mask: the true class for untargeted
    clips, the target class for targeted ones.  The returned value is
    p_sel - max_other, which is the untargeted margin as-is and the
    negated targeted margin; callers multiply by a per-clip sign
    (+1 untargeted, -1 targeted) to orient both the same way.
    """
    b, k = probs.shape
    p_sel = g.sum(g.mul(probs, sel), axis=1)
    inv = g.sadd(g.smul(sel, -1.0), 1.0)          # 1 - sel
    p_other = g.max(g.mul(probs, inv), axis=1)
    return g.sub(p_sel, p_other)


# ----------------------------------------------------------------- training

def _decode_features(clips: list[np.ndarray], params, structure: str,
                     gop_size: int, batch: int = 16) -> np.ndarray:
    feats = []
    for i in range(0, len(clips), batch):
        chunk = np.stack(clips[i:i + batch])
        res = codec.code_videos(chunk, params, structure, gop_size)
        feats.append(batch_features(res.decoded))
    return np.concatenate(feats, axis=0)


def train_classifier(dataset, codec_params, structure: str,
                     gop_size: int | None = None, epochs: int = 400,
                     seed: int = 0, lr: float = 0.02,
                     n_classes: int = N_DIRECTIONS):
    """Fit the dense head on codec-decoded training clips.

    ``dataset`` is a sequence of objects with ``.video`` and ``.label``
    (or (video, label) pairs).  Returns (Classifier, loss trace).
    """
    if gop_size is None:
        gop_size = DEFAULT_GOP[structure]
    videos, labels = [], []
    for item in dataset:
        v, l = (item.video, item.label) if hasattr(item, "video") else item
        videos.append(np.asarray(v, dtype=np.float64))
        labels.append(int(l))
    if not videos:
        raise ClassifierError("no training clips")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ClassifierError("labels out of range")
    feats = _decode_features(videos, codec_params, structure, gop_size)

    rng = np.random.default_rng(seed)
    scale = 1.0 / (3.0 * (np.std(feats) + 1e-9))
    w1 = rng.normal(0.0, scale, (N_DIRECTIONS + 1, HIDDEN))
    w1[-1] = rng.normal(0.0, 0.01, HIDDEN)     # bias row sees a constant 1
    w2 = rng.normal(0.0, 1.0 / np.sqrt(HIDDEN), (HIDDEN + 1, n_classes))
    w2[-1] = 0.0

    b = len(videos)
    g = ad.Graph()
    f = g.leaf("f", (b, N_DIRECTIONS), diff=False)
    w1_ref = g.leaf("w1", w1.shape, diff=True)
    w2_ref = g.leaf("w2", w2.shape, diff=True)
    probs = append_head(g, f, w1_ref, w2_ref)
    onehot = np.zeros((b, n_classes))
    onehot[np.arange(b), labels] = 1.0
    picked = g.sum(g.mul(probs, g.const(onehot)), axis=1)
    loss_ref = g.smul(g.mean(g.log(g.sadd(picked, 1e-12))), -1.0)

    from .optim import Adam
    opt = Adam(lr=lr)
    weights = {"w1": w1, "w2": w2}
    trace = []
    for _ in range(epochs):
        vals = g.eval({"f": feats, **weights})
        loss = float(vals[loss_ref])
        if not np.isfinite(loss):
            raise ClassifierError("training diverged")
        trace.append(loss)
        opt.step(weights, g.backward(vals, loss_ref))
    return Classifier(w1=weights["w1"], w2=weights["w2"]), trace


def accuracy(clf: Classifier, decoded_clips, labels) -> float:
    """Fraction of decoded clips classified as their label."""
    feats = np.stack([batch_features(c)[0] for c in decoded_clips])
    pred = np.argmax(predict_probs(clf, feats), axis=1)
    return float(np.mean(pred == np.asarray(labels)))

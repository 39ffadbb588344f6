"""Attacks against the codec/classifier pipeline.

Three families:

* Per-clip iterative sign-gradient attacks (``ifgsm_attack``) that
  maximize a rate-distortion objective through eval-mode coding, with
  three flavors selected by ``xi``: 0 degrades reconstruction quality
  while a squared hinge keeps the rate change under ``eps0``; 1 inflates
  the rate while distortion change stays under ``eps1``; 2 pushes both.
  With ``beta`` > 0 a classifier margin joins the objective (targeted or
  untargeted).
* A clip-agnostic perturbation ``train_universal`` fits one GOP-length
  tensor that keeps working under cyclic temporal misalignment, by
  sampling a shift per GOP during training.
* Baselines: structure-aware Gaussian noise and a classifier-only
  attack that ignores the codec.

Every attack output satisfies max|adv - x| <= eps and adv in [0, 1]:
each iterate is clipped to valid range first and then to the Linf ball
around the clean clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, classifier as clsf, codec, gop


class AttackError(Exception):
    pass


@dataclass
class AttackConfig:
    xi: int = 0                  # 0 quality, 1 bandwidth, 2 both
    eps: float = 10.0 / 255.0    # L-infinity budget
    steps: int = 50              # sign-gradient iterations
    beta: float = 0.0            # classifier-loss weight; 0 = codec only
    eps0: float = 0.02           # allowed bpp drift for xi=0
    eps1: float = 2e-4           # allowed MSE drift for xi=1
    mu0: float = 1e3             # hinge weight on the bpp constraint
    mu1: float = 1e6             # hinge weight on the MSE constraint
    target: int | None = None    # target class (requires beta > 0)
    literal_objective: bool = False  # E0+lam*Q1 / Q0+lam*E1 variants
    objective_lam: float | None = None  # defaults to the codec's lambda

    def __post_init__(self):
        if self.xi not in (0, 1, 2):
            raise AttackError(f"xi must be 0, 1 or 2, got {self.xi}")
        if self.eps < 0:
            raise AttackError("eps must be non-negative")
        if self.steps < 1:
            raise AttackError("steps must be at least 1")
        if self.beta < 0:
            raise AttackError("beta must be non-negative")
        if self.target is not None and self.beta == 0:
            raise AttackError("targeted attack needs beta > 0")
        if self.objective_lam is not None and self.objective_lam <= 0:
            raise AttackError("objective_lam must be positive")


# ------------------------------------------------------------- QoE algebra

@dataclass
class QoeFactors:
    q0: float   # mean bpp over the GOP (adversarial run)
    q1: float   # mean MSE vs the clean frames over the GOP
    e0: float   # |q0 - clean q0|
    e1: float   # |q1 - clean q1|


def qoe_factors(clean_run: codec.CodeResult, adv_run: codec.CodeResult,
                g: int, clean_clip: np.ndarray) -> QoeFactors:
    """QoE factors of GOP ``g``: the adversarial run's rate and its
    distortion measured against the original clean frames, with drifts
    relative to the clean run."""
    if clean_run.structure != adv_run.structure or \
            clean_run.gop_size != adv_run.gop_size:
        raise AttackError("runs use different coding configurations")
    if not 0 <= g < clean_run.gop_bpp.shape[-1]:
        raise AttackError(f"GOP index {g} out of range")
    ts = clean_run.gop_display[g]
    clean_clip = np.asarray(clean_clip, dtype=np.float64)

    def gop_mse(run):
        return float(np.mean([np.mean((run.decoded[t] - clean_clip[t]) ** 2)
                              for t in ts]))

    q1 = gop_mse(adv_run)
    q0 = float(adv_run.gop_bpp[g])
    return QoeFactors(q0=q0, q1=q1,
                      e0=abs(q0 - float(clean_run.gop_bpp[g])),
                      e1=abs(q1 - gop_mse(clean_run)))


def comp_loss(xi: int, qoe: QoeFactors, lam: float,
              config: AttackConfig | None = None) -> float:
    """Scalar compression objective the attacker maximizes for one GOP."""
    cfg = config or AttackConfig(xi=xi)
    if xi not in (0, 1, 2):
        raise AttackError(f"xi must be 0, 1 or 2, got {xi}")
    if cfg.literal_objective:
        if xi == 0:
            return qoe.e0 + lam * qoe.q1
        if xi == 1:
            return qoe.q0 + lam * qoe.e1
        return qoe.q0 + lam * qoe.q1
    if xi == 0:
        return lam * qoe.q1 - cfg.mu0 * max(0.0, qoe.e0 - cfg.eps0) ** 2
    if xi == 1:
        return qoe.q0 - cfg.mu1 * lam * max(0.0, qoe.e1 - cfg.eps1) ** 2
    return qoe.q0 + lam * qoe.q1


def total_loss(comp_losses, adv_loss: float = 0.0, beta: float = 0.0) -> float:
    """Mean of per-GOP compression losses minus beta times the classifier
    margin (which the attacker wants negative)."""
    if beta < 0:
        raise AttackError("beta must be non-negative")
    return float(np.mean(comp_losses)) - beta * adv_loss


# ----------------------------------------------------------- attack graphs

@dataclass
class _AttackGraph:
    cg: codec.CodingGraph
    loss_sum: ad.Ref
    n_gops: int
    has_clf: bool
    k: int | None


_ATTACK_CACHE: dict[tuple, _AttackGraph] = {}


def _abs(g: ad.Graph, x: ad.Ref) -> ad.Ref:
    return g.add(g.relu(x), g.relu(g.smul(x, -1.0)))


def project_ball(out: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Force ``out`` into [0,1] and into the L-infinity eps-ball around
    ``x`` such that both hold under float re-measurement (half-ulp
    rounding of x + delta can otherwise leak past the bound)."""
    out = np.clip(out, 0.0, 1.0)
    for _ in range(64):
        over = np.abs(out - x) > eps
        if not np.any(over):
            return out
        out = np.where(over, np.nextafter(out, x), out)
    return out


def _build_attack_graph(*, structure, gop_size, n_frames, frame_shape, batch,
                        params: codec.CodecParams, config: AttackConfig,
                        n_classes: int | None) -> _AttackGraph:
    has_clf = config.beta > 0
    cg = codec.build_coding_graph(
        structure=structure, gop_size=gop_size, n_frames=n_frames,
        frame_shape=frame_shape, batch=batch, latent_dim=params.latent_dim,
        mode="eval", theta=params.theta, block=params.block,
        radius=params.radius, alpha_i=params.alpha_i, alpha_r=params.alpha_r,
        diff_input=True, with_stack=has_clf)
    g = cg.graph
    n_gops = len(cg.gops)
    lam = float(config.objective_lam if config.objective_lam is not None
                else params.lam)
    need_clean = config.literal_objective or config.xi in (0, 1)
    if need_clean:
        q0c = g.leaf("q0_clean", (batch, n_gops), diff=False)
        q1c = g.leaf("q1_clean", (batch, n_gops), diff=False)
    per_gop = []
    for i, gr in enumerate(cg.gops):
        q0, q1 = gr.bpp, gr.mse
        if config.literal_objective:
            if config.xi == 0:
                term = g.add(_abs(g, g.sub(q0, q0c[:, i])), g.smul(q1, lam))
            elif config.xi == 1:
                term = g.add(q0, g.smul(_abs(g, g.sub(q1, q1c[:, i])), lam))
            else:
                term = g.add(q0, g.smul(q1, lam))
        elif config.xi == 0:
            hinge = g.relu(g.sadd(_abs(g, g.sub(q0, q0c[:, i])), -config.eps0))
            term = g.sub(g.smul(q1, lam), g.smul(g.square(hinge), config.mu0))
        elif config.xi == 1:
            hinge = g.relu(g.sadd(_abs(g, g.sub(q1, q1c[:, i])), -config.eps1))
            term = g.sub(q0, g.smul(g.square(hinge), config.mu1 * lam))
        else:
            term = g.add(q0, g.smul(q1, lam))
        per_gop.append(term)
    comp = g.smul(codec._add_tree(g, per_gop), 1.0 / n_gops)
    if has_clf:
        w1 = g.leaf("w1", (clsf.N_DIRECTIONS + 1, clsf.HIDDEN), diff=False)
        w2 = g.leaf("w2", (clsf.HIDDEN + 1, n_classes), diff=False)
        probs = clsf.append_head(g, g.motion_features(cg.stack), w1, w2)
        sel = g.leaf("adv_sel", (batch, n_classes), diff=False)
        sign = g.leaf("adv_sign", (batch,), diff=False)
        margins = g.mul(clsf.append_adv_loss(g, probs, sel), sign)
        loss_vec = g.sub(comp, g.smul(margins, config.beta))
    else:
        loss_vec = comp
    return _AttackGraph(cg=cg, loss_sum=g.sum(loss_vec), n_gops=n_gops,
                        has_clf=has_clf, k=n_classes)


def _attack_graph(structure, gop_size, n_frames, frame_shape, batch, params,
                  config, n_classes):
    lam = float(config.objective_lam if config.objective_lam is not None
                else params.lam)
    key = (structure, gop_size, n_frames, frame_shape, batch,
           params.latent_dim, params.theta, params.block, params.radius,
           params.alpha_i, params.alpha_r, lam, config.xi,
           config.beta, config.eps0, config.eps1, config.mu0, config.mu1,
           config.literal_objective, n_classes)
    if key not in _ATTACK_CACHE:
        _ATTACK_CACHE[key] = _build_attack_graph(
            structure=structure, gop_size=gop_size, n_frames=n_frames,
            frame_shape=frame_shape, batch=batch, params=params,
            config=config, n_classes=n_classes)
    return _ATTACK_CACHE[key]


# --------------------------------------------------------------- the solver

@dataclass
class AttackReport:
    structure: str
    xi: int
    clean_psnr: np.ndarray
    adv_psnr: np.ndarray
    clean_bpp: np.ndarray
    adv_bpp: np.ndarray
    q0_clean: np.ndarray       # (B, n_gops)
    q0_adv: np.ndarray
    q1_clean: np.ndarray
    q1_adv: np.ndarray
    trace: list[float] = field(default_factory=list)
    adv_margin: np.ndarray | None = None   # signed per-clip margin
    predicted: np.ndarray | None = None
    success: np.ndarray | None = None

    @property
    def delta_psnr(self) -> np.ndarray:
        return self.clean_psnr - self.adv_psnr

    @property
    def delta_bpp(self) -> np.ndarray:
        return self.adv_bpp - self.clean_bpp


def _adv_mse_vs_clean(cg, vals):
    """Per-clip mean MSE of decoded frames against the clean originals
    plus per-GOP breakdown (the coding graph's own MSE refs already use
    the clean x leaf, so read those)."""
    q1 = np.stack([vals[gr.mse] for gr in cg.gops], axis=1)
    return vals[cg.mse], q1


def ifgsm_attack(x, structure: str, params: codec.CodecParams,
                 config: AttackConfig, clf: clsf.Classifier | None = None,
                 labels=None, gop_size: int | None = None, targets=None):
    """Iterative sign-gradient attack on a clip or batch of clips.

    Returns (adversarial clips, AttackReport).  ``labels`` are the true
    classes, required when ``config.beta`` > 0.  ``targets`` optionally
    gives a per-clip target class, overriding ``config.target``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5:
        raise AttackError(f"expected clip(s) (T,H,W,C)/(B,T,H,W,C), got {x.shape}")
    if gop_size is None:
        gop_size = clsf.DEFAULT_GOP[structure]
    b, t = x.shape[:2]
    if config.beta > 0:
        if clf is None:
            raise AttackError("beta > 0 needs a classifier")
        if labels is None:
            raise AttackError("beta > 0 needs true labels")
    labels = np.zeros(b, dtype=int) if labels is None else \
        np.atleast_1d(np.asarray(labels, dtype=int))
    ag = _attack_graph(structure, gop_size, t, x.shape[2:], b, params, config,
                       clf.n_classes if clf is not None else None)
    cg = ag.cg
    g = cg.graph

    if targets is None and config.target is not None:
        targets = np.full(b, int(config.target))
    elif targets is not None:
        targets = np.atleast_1d(np.asarray(targets, dtype=int))
        if config.beta == 0:
            raise AttackError("targeted attack needs beta > 0")
    base = {"x": x}
    base.update(params.tensors())
    if ag.has_clf:
        base["w1"], base["w2"] = clf.w1, clf.w2
        sel = np.zeros((b, clf.n_classes))
        sign = np.ones(b)
        if targets is not None:
            if np.any(labels == targets):
                raise AttackError("target class equals a true label")
            sel[np.arange(b), targets] = 1.0
            sign[:] = -1.0
        else:
            sel[np.arange(b), labels] = 1.0
        base["adv_sel"], base["adv_sign"] = sel, sign

    # clean pass: establishes the drift anchors and baseline metrics
    zeros = np.zeros_like(x)
    clean_bind = dict(base)
    clean_bind["delta"] = zeros
    need_clean = config.literal_objective or config.xi in (0, 1)
    if need_clean:
        clean_bind["q0_clean"] = np.zeros((b, ag.n_gops))
        clean_bind["q1_clean"] = np.zeros((b, ag.n_gops))
    cvals = g.eval(clean_bind)
    clean_q0 = np.stack([cvals[gr.bpp] for gr in cg.gops], axis=1)
    clean_mse, clean_q1 = _adv_mse_vs_clean(cg, cvals)
    clean_bpp = cvals[cg.bpp]
    if need_clean:
        base["q0_clean"], base["q1_clean"] = clean_q0, clean_q1

    step = config.eps / config.steps
    delta = np.zeros_like(x)
    trace = []
    for it in range(config.steps):
        bind = dict(base)
        bind["delta"] = delta
        try:
            vals = g.eval(bind)
            loss = float(vals[ag.loss_sum])
            grads = g.backward(vals, ag.loss_sum)
        except ad.GraphError as e:
            raise AttackError(f"non-finite attack state at iteration {it}: {e}") \
                from None
        if not np.isfinite(loss) or not np.all(np.isfinite(grads["delta"])):
            raise AttackError(f"non-finite gradient at iteration {it}")
        trace.append(loss / b)
        adv = np.clip(x + delta + step * np.sign(grads["delta"]), 0.0, 1.0)
        delta = np.clip(adv - x, -config.eps, config.eps)

    bind = dict(base)
    bind["delta"] = delta
    vals = g.eval(bind)
    adv_mse, adv_q1 = _adv_mse_vs_clean(cg, vals)
    report = AttackReport(
        structure=structure, xi=config.xi,
        clean_psnr=np.array([codec.psnr_from_mse(m) for m in clean_mse]),
        adv_psnr=np.array([codec.psnr_from_mse(m) for m in adv_mse]),
        clean_bpp=clean_bpp, adv_bpp=vals[cg.bpp],
        q0_clean=clean_q0, q0_adv=np.stack([vals[gr.bpp] for gr in cg.gops],
                                           axis=1),
        q1_clean=clean_q1, q1_adv=adv_q1, trace=trace)
    if ag.has_clf:
        dec = vals[cg.stack]
        probs = clsf.predict_probs(clf, clsf.batch_features(dec))
        report.predicted = np.argmax(probs, axis=1)
        report.adv_margin = np.array([
            clsf.adv_loss(probs[i], labels[i],
                          target=None if targets is None else int(targets[i]))
            for i in range(b)])
        if targets is None:
            report.success = report.predicted != labels
        else:
            report.success = report.predicted == targets
    out = project_ball(x + delta, x, config.eps)
    return (out[0], report) if single else (out, report)


# ------------------------------------------------------ universal (online)

@dataclass
class UniversalPerturbation:
    phi: np.ndarray              # (G, H, W, C)
    structures: tuple[str, ...]
    lams: tuple[float, ...]
    eps: float
    xi: int
    beta: float
    seed: int

    @property
    def gop_frames(self) -> int:
        return self.phi.shape[0]


def temporal_shift(phi: np.ndarray, tau: int) -> np.ndarray:
    """Cyclic shift: frame i of the result is frame (i+tau) mod G of phi."""
    phi = np.asarray(phi)
    g = phi.shape[0]
    tau = int(tau) % g
    if not 0 <= tau <= g - 1:
        raise AttackError(f"shift {tau} out of range 0..{g - 1}")
    return np.roll(phi, -tau, axis=0)


def _gop_slots(structure: str, gop_size: int, n_frames: int):
    """Per GOP, the display times that GOP owns (hierarchical-B windows
    share their boundary frame with the previous GOP, which owns it)."""
    plan, used = gop.plan_video(structure, gop_size, n_frames)
    slots = []
    seen = set()
    for gplan in plan:
        ts = sorted(t for t, _, _ in gplan)
        own = [t for t in ts if t not in seen]
        seen.update(own)
        slots.append(own)
    return slots, used


def apply_universal(x: np.ndarray, phi: np.ndarray, structure: str,
                    gop_size: int | None = None, tau: int | str = 0,
                    seed: int = 0) -> np.ndarray:
    """Add the (possibly shifted) universal perturbation GOP by GOP.

    ``tau`` is a fixed shift, or "random" for an independent uniform
    shift per GOP (deterministic per seed).
    """
    x = np.asarray(x, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if x.ndim != 4 or phi.ndim != 4 or x.shape[1:] != phi.shape[1:]:
        raise AttackError(f"clip {x.shape} and perturbation {phi.shape} "
                          "frame shapes differ")
    if gop_size is None:
        gop_size = clsf.DEFAULT_GOP[structure]
    slots, _ = _gop_slots(structure, gop_size, x.shape[0])
    rng = np.random.default_rng(seed)
    out = x.copy()
    gf = phi.shape[0]
    for own in slots:
        t_shift = int(rng.integers(gf)) if tau == "random" else int(tau)
        shifted = temporal_shift(phi, t_shift)
        for j, t in enumerate(own):
            out[t] = np.clip(out[t] + shifted[j % gf], 0.0, 1.0)
    return project_ball(out, x, float(np.max(np.abs(phi))))


def save_perturbation(path, up: UniversalPerturbation) -> None:
    sids = [gop.STRUCTURES.index(s) for s in up.structures]
    checkpoint.save_tensors(path, {
        "phi": up.phi,
        "structure_ids": np.asarray(sids, dtype=np.float64),
        "lambdas": np.asarray(up.lams, dtype=np.float64),
        "eps": np.asarray(up.eps), "xi": np.asarray(float(up.xi)),
        "beta": np.asarray(up.beta), "seed": np.asarray(float(up.seed)),
    })


def load_perturbation(path) -> UniversalPerturbation:
    t = checkpoint.load_tensors(path)
    try:
        return UniversalPerturbation(
            phi=t["phi"],
            structures=tuple(gop.STRUCTURES[int(i)]
                             for i in np.atleast_1d(t["structure_ids"])),
            lams=tuple(float(v) for v in np.atleast_1d(t["lambdas"])),
            eps=float(t["eps"]), xi=int(t["xi"]), beta=float(t["beta"]),
            seed=int(t["seed"]))
    except KeyError as e:
        raise AttackError(f"{path}: missing tensor {e.args[0]!r}") from None


def train_universal(train_set, codec_params: dict, config: AttackConfig,
                    clf: clsf.Classifier | None = None, labels=None,
                    max_iter: int = 50, seed: int = 0,
                    structures=("nh", "hp", "hb"), lams=None,
                    gop_frames: int = 10, videos_per_iter: int = 4,
                    step_multiplier: float = 2.0):
    """Fit a clip-agnostic GOP perturbation (Alg.-style online attack).

    ``codec_params`` maps (structure, lambda) to CodecParams; every
    requested combination must be present.  Each iteration samples one
    (structure, lambda) pair and a few clips, applies the perturbation
    with a random shift per GOP, and ascends the summed attack loss by
    a sign step of eps/max_iter*step_multiplier, projecting back onto
    the L-infinity ball.

    Returns (UniversalPerturbation, loss trace).
    """
    clips = [np.asarray(c, dtype=np.float64) for c in train_set]
    if not clips:
        raise AttackError("no training clips")
    shape = clips[0].shape
    if any(c.shape != shape for c in clips):
        raise AttackError("training clips must share a shape")
    if lams is None:
        lams = sorted({float(p.lam) for p in codec_params.values()})
    pairs = [(k, float(l)) for k in structures for l in lams]
    for pair in pairs:
        if pair not in codec_params:
            raise AttackError(f"missing codec checkpoint for {pair}")
    if config.beta > 0:
        if clf is None or labels is None:
            raise AttackError("beta > 0 needs a classifier and labels")
        labels = np.asarray(labels, dtype=int)

    t, h, w, c = shape
    rng = np.random.default_rng(seed)
    phi = np.zeros((gop_frames, h, w, c))
    step = config.eps / max_iter * step_multiplier
    trace = []
    slot_cache = {k: _gop_slots(k, clsf.DEFAULT_GOP[k], t)[0]
                  for k in structures}
    clean_cache: dict[tuple, tuple] = {}
    nb = min(videos_per_iter, len(clips))

    for it in range(max_iter):
        k, lam = pairs[int(rng.integers(len(pairs)))]
        idx = rng.choice(len(clips), size=nb, replace=False)
        params = codec_params[(k, lam)]
        gsize = clsf.DEFAULT_GOP[k]
        x = np.stack([clips[i] for i in idx])
        slots = slot_cache[k]
        taus = rng.integers(0, gop_frames, size=(nb, len(slots)))

        delta = np.zeros_like(x)
        for bi in range(nb):
            for gi, own in enumerate(slots):
                shifted = temporal_shift(phi, int(taus[bi, gi]))
                for j, ft in enumerate(own):
                    delta[bi, ft] = shifted[j % gop_frames]
        # keep x + delta a valid image; gradient of the clip is a pass
        # through wherever the pixel is strictly interior
        delta = np.clip(x + delta, 0.0, 1.0) - x

        ag = _attack_graph(k, gsize, t, (h, w, c), nb, params, config,
                           clf.n_classes if clf is not None else None)
        bind = {"x": x, "delta": delta}
        bind.update(params.tensors())
        if ag.has_clf:
            bind["w1"], bind["w2"] = clf.w1, clf.w2
            sel = np.zeros((nb, clf.n_classes))
            sign = np.ones(nb)
            if config.target is not None:
                sel[:, config.target] = 1.0
                sign[:] = -1.0
            else:
                sel[np.arange(nb), labels[idx]] = 1.0
            bind["adv_sel"], bind["adv_sign"] = sel, sign
        if config.literal_objective or config.xi in (0, 1):
            ck = (k, lam) + tuple(int(i) for i in idx)
            if ck not in clean_cache:
                cb = dict(bind)
                cb["delta"] = np.zeros_like(x)
                cb["q0_clean"] = np.zeros((nb, ag.n_gops))
                cb["q1_clean"] = np.zeros((nb, ag.n_gops))
                cv = ag.cg.graph.eval(cb)
                clean_cache[ck] = (
                    np.stack([cv[gr.bpp] for gr in ag.cg.gops], axis=1),
                    np.stack([cv[gr.mse] for gr in ag.cg.gops], axis=1))
            bind["q0_clean"], bind["q1_clean"] = clean_cache[ck]

        try:
            vals = ag.cg.graph.eval(bind)
            loss = float(vals[ag.loss_sum])
            grads = ag.cg.graph.backward(vals, ag.loss_sum)
        except ad.GraphError as e:
            raise AttackError(f"non-finite state at iteration {it}: {e}") \
                from None
        if not np.isfinite(loss):
            raise AttackError(f"non-finite loss at iteration {it}")
        trace.append(loss / nb)

        fold = np.zeros_like(phi)
        gd = grads["delta"]
        for bi in range(nb):
            for gi, own in enumerate(slots):
                tau = int(taus[bi, gi])
                for j, ft in enumerate(own):
                    fold[(j % gop_frames + tau) % gop_frames] += gd[bi, ft]
        phi = np.clip(phi + step * np.sign(fold), -config.eps, config.eps)

    up = UniversalPerturbation(
        phi=phi, structures=tuple(structures),
        lams=tuple(float(l) for l in lams), eps=config.eps, xi=config.xi,
        beta=config.beta, seed=seed)
    return up, trace


# ----------------------------------------------------------------- baselines

def gaussian_baseline(x: np.ndarray, case: str, eps: float, structure: str,
                      seed: int = 0, gop_size: int | None = None) -> np.ndarray:
    """Structure-aware Gaussian noise baseline.

    Case "I": every frame gets sigma = eps.  Case "II": frames at
    I-frame display positions get sigma = 2*eps, the rest eps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise AttackError(f"expected (T,H,W,C), got {x.shape}")
    if case not in ("I", "II"):
        raise AttackError(f"case must be 'I' or 'II', got {case!r}")
    if gop_size is None:
        gop_size = clsf.DEFAULT_GOP[structure]
    plan, used = gop.plan_video(structure, gop_size, x.shape[0])
    i_times = {t for gplan in plan for t, kind, _ in gplan
               if kind == gop.I_FRAME}
    rng = np.random.default_rng(seed)
    out = x.copy()
    for t in range(x.shape[0]):
        sigma = 2.0 * eps if (case == "II" and t in i_times) else eps
        out[t] = np.clip(out[t] + rng.normal(0.0, sigma, x.shape[1:]),
                         0.0, 1.0)
    return out


_CU_CACHE: dict[tuple, tuple] = {}


def compression_unaware_attack(x, labels, clf: clsf.Classifier,
                               eps: float = 10.0 / 255.0, steps: int = 50,
                               targets=None):
    """Classifier-only I-FGSM on the raw clip (no codec in the loop)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 4
    if single:
        x = x[None]
    b = x.shape[0]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    key = (x.shape, clf.n_classes)
    if key not in _CU_CACHE:
        g = ad.Graph()
        xl = g.leaf("x", x.shape, diff=False)
        dl = g.leaf("delta", x.shape, diff=True)
        w1 = g.leaf("w1", (clsf.N_DIRECTIONS + 1, clsf.HIDDEN), diff=False)
        w2 = g.leaf("w2", (clsf.HIDDEN + 1, clf.n_classes), diff=False)
        probs = clsf.append_head(
            g, g.motion_features(g.add(xl, dl)), w1, w2)
        sel = g.leaf("adv_sel", (b, clf.n_classes), diff=False)
        sign = g.leaf("adv_sign", (b,), diff=False)
        margins = g.mul(clsf.append_adv_loss(g, probs, sel), sign)
        _CU_CACHE[key] = (g, g.smul(g.sum(margins), -1.0))
    g, loss_ref = _CU_CACHE[key]
    sel = np.zeros((b, clf.n_classes))
    sign = np.ones(b)
    if targets is not None:
        targets = np.atleast_1d(np.asarray(targets, dtype=int))
        sel[np.arange(b), targets] = 1.0
        sign[:] = -1.0
    else:
        sel[np.arange(b), labels] = 1.0
    step = eps / steps
    delta = np.zeros_like(x)
    for it in range(steps):
        vals = g.eval({"x": x, "delta": delta, "w1": clf.w1, "w2": clf.w2,
                       "adv_sel": sel, "adv_sign": sign})
        grads = g.backward(vals, loss_ref)
        if not np.all(np.isfinite(grads["delta"])):
            raise AttackError(f"non-finite gradient at iteration {it}")
        adv = np.clip(x + delta + step * np.sign(grads["delta"]), 0.0, 1.0)
        delta = np.clip(adv - x, -eps, eps)
    out = project_ball(x + delta, x, eps)
    return out[0] if single else out

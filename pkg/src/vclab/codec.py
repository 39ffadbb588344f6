"""Differentiable blockwise video codec.

Frames are coded in GOPs (see :mod:`vclab.gop`).  The I frame of a GOP
goes through a linear block transform (8x8x3 blocks -> ``latent_dim``
coefficients), quantization, and a factorized logistic entropy model.
P and B frames are predicted by block motion compensation against
previously decoded frames; the block flows and the transform-coded
prediction residual are both quantized and entropy coded, so the rate
of an inter frame is flow bits plus residual bits.  B frames average
the warped predictions from their two references.

Two quantization modes:

* ``train``: additive uniform noise stands in for rounding and the flow
  stays the soft expectation over displacements, so the whole pipeline
  is differentiable in the ordinary sense.
* ``eval``: true rounding of latents and flows with straight-through
  gradients, and decoded frames clamped to [0, 1].  Reported rate and
  distortion numbers always come from this mode.

All coding graphs carry a leading batch axis and are cached per shape,
so coding many equally sized clips amortizes graph construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, gop
from .optim import Adam

BLOCK = 8
RADIUS = 3
DEFAULT_LATENT = 48
DEFAULT_THETA = 0.05


class CodecError(Exception):
    pass


# --------------------------------------------------------------- parameters

_TENSOR_FIELDS = ("analysis_i", "synthesis_i", "log_scale_i",
                  "analysis_r", "synthesis_r", "log_scale_r", "log_scale_m")


@dataclass
class CodecParams:
    """Learned codec weights plus the rate-distortion tradeoff they were
    trained for.

    ``analysis_*``/``synthesis_*`` are the block transform matrices of the
    I-frame coder and the residual coder; ``log_scale_*`` hold per-channel
    logistic scales of the entropy models (``_m`` is the 2-channel model
    for quantized flow components).
    """
    lam: float
    analysis_i: np.ndarray
    synthesis_i: np.ndarray
    log_scale_i: np.ndarray
    analysis_r: np.ndarray
    synthesis_r: np.ndarray
    log_scale_r: np.ndarray
    log_scale_m: np.ndarray
    theta: float = DEFAULT_THETA
    block: int = BLOCK
    radius: int = RADIUS
    alpha_i: float = 12.0   # fixed latent gain: quantization step is 1/alpha
    alpha_r: float = 12.0   # in pixel units, so matrices stay O(1)

    @property
    def latent_dim(self) -> int:
        return self.analysis_i.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    d = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    d *= np.sqrt(2.0 / n)
    d[0] *= np.sqrt(0.5)
    return d


def _zigzag(count: int) -> list[tuple[int, int]]:
    pairs = [(u, v) for u in range(BLOCK) for v in range(BLOCK)]
    pairs.sort(key=lambda uv: (uv[0] + uv[1], uv[0], uv[1]))
    return pairs[:count]


def init_params(lam: float, seed: int = 0, latent_dim: int = DEFAULT_LATENT,
                theta: float = DEFAULT_THETA) -> CodecParams:
    """Fresh parameters: low-frequency 2D-DCT transforms with a small
    seed-dependent jitter, unit logistic scales (wider on the DC channels
    of the I coder)."""
    if latent_dim < 3 or latent_dim > 3 * BLOCK * BLOCK:
        raise CodecError(f"latent_dim must be in 3..{3 * BLOCK * BLOCK}")
    rng = np.random.default_rng(seed)
    d = _dct_matrix(BLOCK)
    dims = BLOCK * BLOCK * 3
    counts = [latent_dim // 3 + (1 if i < latent_dim % 3 else 0)
              for i in range(3)]
    analysis = np.zeros((dims, latent_dim))
    synthesis = np.zeros((latent_dim, dims))
    dc_channels = []
    k = 0
    for c, count in enumerate(counts):
        for u, v in _zigzag(count):
            basis = np.zeros((BLOCK, BLOCK, 3))
            basis[:, :, c] = np.outer(d[u], d[v])
            flat = basis.reshape(-1)
            analysis[:, k] = flat
            synthesis[k] = flat
            if (u, v) == (0, 0):
                dc_channels.append(k)
            k += 1
    ls_i = np.zeros(latent_dim)
    ls_i[dc_channels] = 4.0
    jitter = 1e-4
    return CodecParams(
        lam=float(lam),
        analysis_i=analysis + rng.normal(0, jitter, analysis.shape),
        synthesis_i=synthesis + rng.normal(0, jitter, synthesis.shape),
        log_scale_i=ls_i,
        analysis_r=analysis + rng.normal(0, jitter, analysis.shape),
        synthesis_r=synthesis + rng.normal(0, jitter, synthesis.shape),
        log_scale_r=np.zeros(latent_dim),
        log_scale_m=np.zeros(2),
        theta=float(theta),
    )


def save_params(path: str, params: CodecParams) -> None:
    tensors = dict(params.tensors())
    tensors["lambda"] = np.asarray(params.lam)
    tensors["theta"] = np.asarray(params.theta)
    tensors["block"] = np.asarray(float(params.block))
    tensors["radius"] = np.asarray(float(params.radius))
    tensors["alpha_i"] = np.asarray(params.alpha_i)
    tensors["alpha_r"] = np.asarray(params.alpha_r)
    checkpoint.save_tensors(path, tensors)


def load_params(path: str) -> CodecParams:
    tensors = checkpoint.load_tensors(path)
    try:
        kw = {name: tensors[name] for name in _TENSOR_FIELDS}
        return CodecParams(
            lam=float(tensors["lambda"]),
            theta=float(tensors["theta"]),
            block=int(tensors["block"]),
            radius=int(tensors["radius"]),
            alpha_i=float(tensors["alpha_i"]),
            alpha_r=float(tensors["alpha_r"]),
            **kw,
        )
    except KeyError as e:
        raise CodecError(f"{path}: missing codec tensor {e.args[0]!r}") from None


# ------------------------------------------------------------ graph builder

def _disp_table(radius: int) -> np.ndarray:
    side = 2 * radius + 1
    j = np.arange(side * side)
    return np.stack([j % side - radius, j // side - radius], axis=1).astype(float)


@dataclass
class GopRefs:
    display_ts: tuple[int, ...]
    bits: ad.Ref       # (B,) total bits of the GOP
    bpp: ad.Ref        # (B,)
    mse: ad.Ref        # (B,) mean over the GOP's frames


@dataclass
class CodingGraph:
    """A built coding graph plus handles to its interesting nodes."""
    graph: ad.Graph
    structure: str
    gop_size: int
    n_frames: int
    used: int
    frame_shape: tuple[int, int, int]
    batch: int
    mode: str
    has_delta: bool
    noise_specs: list[tuple[str, tuple[int, ...]]]
    dec: dict[int, ad.Ref]                 # display t -> (B,H,W,C)
    frame_bits: dict[int, ad.Ref]          # display t -> (B,)
    frame_mse: dict[int, ad.Ref]           # display t -> (B,)
    latents: dict[int, dict[str, object]]  # display t -> refs of coded symbols
    gops: list[GopRefs] = field(default_factory=list)
    total_bits: ad.Ref | None = None
    bpp: ad.Ref | None = None
    mse: ad.Ref | None = None
    stack: ad.Ref | None = None            # (B,used,H,W,C) decoded clip
    rd_loss: ad.Ref | None = None

    def noise_bindings(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {name: rng.uniform(-0.5, 0.5, shape)
                for name, shape in self.noise_specs}


def _add_tree(g: ad.Graph, refs: list[ad.Ref]) -> ad.Ref:
    refs = list(refs)
    while len(refs) > 1:
        nxt = [g.add(refs[i], refs[i + 1]) if i + 1 < len(refs) else refs[i]
               for i in range(0, len(refs), 2)]
        refs = nxt
    return refs[0]


def build_coding_graph(*, structure: str, gop_size: int, n_frames: int,
                       frame_shape: tuple[int, int, int], batch: int,
                       latent_dim: int = DEFAULT_LATENT,
                       mode: str = "eval", theta: float = DEFAULT_THETA,
                       block: int = BLOCK, radius: int = RADIUS,
                       alpha_i: float = 12.0, alpha_r: float = 12.0,
                       diff_params: bool = False, diff_input: bool = False,
                       with_stack: bool = False,
                       rd_lambda: float | None = None,
                       distortion_target: bool = False) -> CodingGraph:
    if mode not in ("train", "eval"):
        raise CodecError(f"mode must be 'train' or 'eval', got {mode!r}")
    h, w, c = frame_shape
    if h % block or w % block:
        raise CodecError(f"frame {h}x{w} not divisible by block {block}")
    g = ad.Graph()
    bt = batch
    x = g.leaf("x", (bt, n_frames, h, w, c), diff=False)
    # distortion can be scored against a separate reference (used for
    # denoising-style training: code a noisy clip, reconstruct the clean one)
    tgt = g.leaf("x_target", x.shape, diff=False) if distortion_target else x
    if diff_input:
        delta = g.leaf("delta", (bt, n_frames, h, w, c), diff=True)
        src = g.add(x, delta)
    else:
        src = x
    dims = block * block * c
    a_i = g.leaf("analysis_i", (dims, latent_dim), diff=diff_params)
    s_i = g.leaf("synthesis_i", (latent_dim, dims), diff=diff_params)
    ls_i = g.leaf("log_scale_i", (latent_dim,), diff=diff_params)
    a_r = g.leaf("analysis_r", (dims, latent_dim), diff=diff_params)
    s_r = g.leaf("synthesis_r", (latent_dim, dims), diff=diff_params)
    ls_r = g.leaf("log_scale_r", (latent_dim,), diff=diff_params)
    ls_m = g.leaf("log_scale_m", (2,), diff=diff_params)
    disp = g.const(_disp_table(radius))

    hb, wb = h // block, w // block
    nb = hb * wb
    like = (bt, h, w, c)
    try:
        plan, used = gop.plan_video(structure, gop_size, n_frames)
    except ValueError as e:
        raise CodecError(str(e)) from None
    if not plan:
        raise CodecError(f"clip of {n_frames} frames too short for "
                         f"{structure} GOPs of {gop_size}")
    noise_specs: list[tuple[str, tuple[int, ...]]] = []

    def quantize(v: ad.Ref, name: str) -> ad.Ref:
        if mode == "eval":
            return g.round_ste(v)
        noise_specs.append((name, v.shape))
        return g.add(v, g.leaf(name, v.shape, diff=False))

    def code_blocks(vol: ad.Ref, analysis, synthesis, log_scale, alpha, name):
        """Transform-code an image volume; returns (quantized, recon, bits)."""
        lat = g.smul(g.matmul(g.blockify(vol, block), analysis), alpha)
        q = quantize(lat, name)
        bits_el = g.bits_mass(q, log_scale)
        bits = g.sum(g.reshape(bits_el, (bt, nb * latent_dim)), axis=1)
        rec = g.smul(g.unblockify(g.matmul(q, synthesis), like, block),
                     1.0 / alpha)
        return q, rec, bits

    dec: dict[int, ad.Ref] = {}
    frame_bits: dict[int, ad.Ref] = {}
    frame_mse: dict[int, ad.Ref] = {}
    latents: dict[int, dict[str, object]] = {}
    gop_refs: list[GopRefs] = []

    for gi, gplan in enumerate(plan):
        for t, kind, refs in gplan:
            if kind == gop.REUSED:
                if t not in dec:
                    raise CodecError("reused frame not yet decoded")
                continue
            cur = src[:, t]
            if kind == gop.I_FRAME:
                q, rec, bits = code_blocks(cur, a_i, s_i, ls_i, alpha_i,
                                           f"u_{t}")
                out = rec
                latents[t] = {"kind": "I", "latent": q}
            else:
                preds = []
                flows_q = []
                fbits = []
                for ri, rt in enumerate(refs):
                    scores = g.block_match(cur, dec[rt], radius, block)
                    soft = g.softmax(g.smul(g.reshape(
                        scores, (bt * nb, (2 * radius + 1) ** 2)),
                        1.0 / theta), axis=1)
                    flow_q = quantize(g.matmul(soft, disp), f"um_{t}_{ri}")
                    fb = g.bits_mass(flow_q, ls_m)
                    fbits.append(g.sum(g.reshape(fb, (bt, nb * 2)), axis=1))
                    field_ = g.block_expand(
                        g.reshape(flow_q, (bt, hb, wb, 2)), block)
                    preds.append(g.warp(dec[rt], field_))
                    flows_q.append(flow_q)
                pred = preds[0] if len(preds) == 1 else \
                    g.smul(g.add(preds[0], preds[1]), 0.5)
                resid = g.sub(cur, pred)
                q, rec, rbits = code_blocks(resid, a_r, s_r, ls_r, alpha_r,
                                            f"u_{t}")
                out = g.add(pred, rec)
                bits = _add_tree(g, fbits + [rbits])
                latents[t] = {"kind": kind, "latent": q, "flows": flows_q}
            dec[t] = g.clamp(out, 0.0, 1.0)
            frame_bits[t] = bits
            err = g.sub(dec[t], tgt[:, t])
            frame_mse[t] = g.mean(g.square(err), axis=(1, 2, 3))
        ts = tuple(t for t, _, _ in gplan)
        # a reused boundary frame costs this GOP nothing, but its display
        # quality still counts toward the GOP's distortion
        coded = [t for t, kind, _ in gplan if kind != gop.REUSED]
        gbits = _add_tree(g, [frame_bits[t] for t in coded])
        gmse = g.smul(_add_tree(g, [frame_mse[t] for t in ts]),
                      1.0 / len(ts))
        gop_refs.append(GopRefs(ts, gbits, g.smul(gbits, 1.0 / (len(ts) * h * w)),
                                gmse))

    display = sorted(dec)
    total_bits = _add_tree(g, [frame_bits[t] for t in display])
    bpp_ref = g.smul(total_bits, 1.0 / (used * h * w))
    mse_ref = g.smul(_add_tree(g, [frame_mse[t] for t in display]),
                     1.0 / len(display))
    stack = None
    if with_stack:
        stack = g.concat([g.reshape(dec[t], (bt, 1, h, w, c))
                          for t in display], axis=1)
    rd_loss = None
    if rd_lambda is not None:
        rd_loss = g.mean(g.add(bpp_ref, g.smul(mse_ref, float(rd_lambda))))

    cg = CodingGraph(
        graph=g, structure=structure, gop_size=gop_size, n_frames=n_frames,
        used=used, frame_shape=frame_shape, batch=batch, mode=mode,
        has_delta=diff_input, noise_specs=noise_specs, dec=dec,
        frame_bits=frame_bits, frame_mse=frame_mse, latents=latents,
        gops=gop_refs, total_bits=total_bits, bpp=bpp_ref, mse=mse_ref,
        stack=stack, rd_loss=rd_loss)
    return cg


_GRAPH_CACHE: dict[tuple, CodingGraph] = {}


def coding_graph(**kw) -> CodingGraph:
    key = tuple(sorted((k, v if not isinstance(v, tuple) else v)
                       for k, v in kw.items()))
    if key not in _GRAPH_CACHE:
        _GRAPH_CACHE[key] = build_coding_graph(**kw)
    return _GRAPH_CACHE[key]


# ----------------------------------------------------------------- metrics

def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return 99.0
    return float(10.0 * math.log10(1.0 / mse))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-ranged arrays; 99.0 when
    the inputs are identical."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return psnr_from_mse(float(np.mean(np.square(
        np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))))


def bpp(total_bits: float, n_frames: int, h: int, w: int) -> float:
    return float(total_bits) / (n_frames * h * w)


# --------------------------------------------------------------- video API

@dataclass
class CodeResult:
    """Eval-mode (or train-mode) coding outcome for a batch of clips.

    Arrays are per clip along the leading axis; ``decoded`` holds the
    reconstructed frames in display order (``used`` of them).
    """
    structure: str
    gop_size: int
    used: int
    decoded: np.ndarray      # (B, used, H, W, C)
    frame_bits: np.ndarray   # (B, used)
    frame_mse: np.ndarray    # (B, used)
    gop_bpp: np.ndarray      # (B, n_gops)
    gop_mse: np.ndarray      # (B, n_gops)
    gop_display: list[tuple[int, ...]]  # display times per GOP
    bpp: np.ndarray          # (B,)
    mse: np.ndarray          # (B,)
    psnr: np.ndarray         # (B,)
    latents: list[dict]      # per coded frame: display t, kind, arrays

    def squeeze(self) -> "CodeResult":
        """Drop the batch axis of a single-clip result."""
        if self.decoded.shape[0] != 1:
            raise ValueError("squeeze needs a single-clip result")
        sq = {k: (v[0] if isinstance(v, np.ndarray) else v)
              for k, v in self.__dict__.items()}
        sq["latents"] = [
            {k: (v[0] if isinstance(v, np.ndarray) else
                 [f[0] for f in v] if isinstance(v, list) else v)
             for k, v in entry.items()}
            for entry in self.latents]
        return CodeResult(**sq)


def _bind_params(bindings: dict, params: CodecParams) -> dict:
    bindings.update(params.tensors())
    return bindings


def code_videos(videos: np.ndarray, params: CodecParams, structure: str,
                gop_size: int, mode: str = "eval",
                rng: np.random.Generator | None = None) -> CodeResult:
    """Code a batch of equally sized clips (B,T,H,W,C)."""
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim != 5:
        raise CodecError(f"expected (B,T,H,W,C), got {videos.shape}")
    bt, t = videos.shape[:2]
    cg = coding_graph(structure=structure, gop_size=gop_size, n_frames=t,
                      frame_shape=videos.shape[2:], batch=bt,
                      latent_dim=params.latent_dim, mode=mode,
                      theta=params.theta, block=params.block,
                      radius=params.radius, alpha_i=params.alpha_i,
                      alpha_r=params.alpha_r)
    bindings = _bind_params({"x": videos}, params)
    if mode == "train":
        if rng is None:
            raise CodecError("train mode needs an rng for quantization noise")
        bindings.update(cg.noise_bindings(rng))
    vals = cg.graph.eval(bindings)
    return collect_result(cg, vals)


def collect_result(cg: CodingGraph, vals: ad.Values) -> CodeResult:
    display = sorted(cg.dec)
    decoded = np.stack([vals[cg.dec[t]] for t in display], axis=1)
    fb = np.stack([vals[cg.frame_bits[t]] for t in display], axis=1)
    fm = np.stack([vals[cg.frame_mse[t]] for t in display], axis=1)
    gb = np.stack([vals[gr.bpp] for gr in cg.gops], axis=1)
    gm = np.stack([vals[gr.mse] for gr in cg.gops], axis=1)
    mse = vals[cg.mse]
    latents = []
    for t in sorted(cg.latents):
        def perclip(a):  # (B*nb, K) -> (B, nb, K)
            return a.reshape(cg.batch, -1, a.shape[1])
        entry = {"t": t, "kind": cg.latents[t]["kind"],
                 "latent": perclip(vals[cg.latents[t]["latent"]])}
        if "flows" in cg.latents[t]:
            entry["flows"] = [perclip(vals[f]) for f in cg.latents[t]["flows"]]
        latents.append(entry)
    return CodeResult(
        structure=cg.structure, gop_size=cg.gop_size, used=cg.used,
        decoded=decoded, frame_bits=fb, frame_mse=fm, gop_bpp=gb, gop_mse=gm,
        gop_display=[gr.display_ts for gr in cg.gops],
        bpp=vals[cg.bpp], mse=mse,
        psnr=np.array([psnr_from_mse(m) for m in mse]), latents=latents)


def code_video(video: np.ndarray, params: CodecParams, structure: str,
               gop_size: int, mode: str = "eval",
               rng: np.random.Generator | None = None) -> CodeResult:
    """Code one clip (T,H,W,C); result arrays have no batch axis."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise CodecError(f"expected (T,H,W,C), got {video.shape}")
    return code_videos(video[None], params, structure, gop_size, mode,
                       rng).squeeze()


# ------------------------------------------------ single-route public ops

_SMALL_CACHE: dict[tuple, tuple] = {}


def motion_estimate(cur: np.ndarray, ref: np.ndarray,
                    params: CodecParams) -> np.ndarray:
    """Soft block flow (nblocks, 2) with components dx, dy in
    [-radius, radius]; entry order is row-major over blocks."""
    cur = np.asarray(cur, dtype=np.float64)
    if cur.shape != ref.shape or cur.ndim != 3:
        raise CodecError(f"expected matching (H,W,C) frames, got {cur.shape}")
    h, w, c = cur.shape
    key = ("me", cur.shape, params.theta, params.radius, params.block)
    if key not in _SMALL_CACHE:
        g = ad.Graph()
        a = g.leaf("cur", (1, h, w, c), diff=False)
        b = g.leaf("ref", (1, h, w, c), diff=False)
        nb = (h // params.block) * (w // params.block)
        k = (2 * params.radius + 1) ** 2
        soft = g.softmax(g.smul(g.reshape(
            g.block_match(a, b, params.radius, params.block), (nb, k)),
            1.0 / params.theta), axis=1)
        flow = g.matmul(soft, g.const(_disp_table(params.radius)))
        _SMALL_CACHE[key] = (g, flow)
    g, flow = _SMALL_CACHE[key]
    return g.eval({"cur": cur[None], "ref": np.asarray(ref, float)[None]})[flow]


def motion_compensate(refs, flows, block: int = BLOCK) -> np.ndarray:
    """Warp each reference frame by its per-block flow and average the
    predictions.  Accepts a single (ref, flow) pair or two of each."""
    if isinstance(refs, np.ndarray) and refs.ndim == 3:
        refs, flows = [refs], [flows]
    refs = [np.asarray(r, dtype=np.float64) for r in refs]
    flows = [np.asarray(f, dtype=np.float64) for f in flows]
    h, w, c = refs[0].shape
    key = ("mc", len(refs), refs[0].shape, block)
    if key not in _SMALL_CACHE:
        g = ad.Graph()
        preds = []
        hb, wb = h // block, w // block
        for i in range(len(refs)):
            r = g.leaf(f"ref{i}", (1, h, w, c), diff=False)
            f = g.leaf(f"flow{i}", (hb * wb, 2), diff=False)
            preds.append(g.warp(r, g.block_expand(
                g.reshape(f, (1, hb, wb, 2)), block)))
        out = preds[0] if len(preds) == 1 else \
            g.smul(g.add(preds[0], preds[1]), 0.5)
        _SMALL_CACHE[key] = (g, out)
    g, out = _SMALL_CACHE[key]
    bindings = {}
    for i, (r, f) in enumerate(zip(refs, flows)):
        bindings[f"ref{i}"] = r[None]
        bindings[f"flow{i}"] = f
    return g.eval(bindings)[out][0]


def transform_code(vol: np.ndarray, params: CodecParams, coder: str = "i",
                   mode: str = "eval",
                   rng: np.random.Generator | None = None):
    """Block transform coding of one frame-shaped volume.

    Returns (quantized latents (nblocks, latent), reconstruction (H,W,C),
    bits).  The reconstruction is left unclamped; range clamping is the
    caller's concern when assembling display frames.
    """
    if coder not in ("i", "r"):
        raise CodecError(f"coder must be 'i' or 'r', got {coder!r}")
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise CodecError(f"expected (H,W,C), got {vol.shape}")
    h, w, c = vol.shape
    ld = params.latent_dim
    alpha = params.alpha_i if coder == "i" else params.alpha_r
    key = ("tc", vol.shape, ld, mode, params.block, alpha)
    if key not in _SMALL_CACHE:
        g = ad.Graph()
        xv = g.leaf("v", (1, h, w, c), diff=False)
        dims = params.block * params.block * c
        nb = (h // params.block) * (w // params.block)
        a = g.leaf("a", (dims, ld), diff=False)
        s = g.leaf("s", (ld, dims), diff=False)
        ls = g.leaf("ls", (ld,), diff=False)
        lat = g.smul(g.matmul(g.blockify(xv, params.block), a), alpha)
        if mode == "eval":
            q = g.round_ste(lat)
        else:
            q = g.add(lat, g.leaf("u", (nb, ld), diff=False))
        bits = g.sum(g.bits_mass(q, ls))
        rec = g.smul(g.unblockify(g.matmul(q, s), (1, h, w, c), params.block),
                     1.0 / alpha)
        _SMALL_CACHE[key] = (g, q, rec, bits)
    g, q, rec, bits = _SMALL_CACHE[key]
    which = coder
    bindings = {"v": vol[None],
                "a": getattr(params, f"analysis_{which}"),
                "s": getattr(params, f"synthesis_{which}"),
                "ls": getattr(params, f"log_scale_{which}")}
    if mode == "train":
        if rng is None:
            raise CodecError("train mode needs an rng")
        nb = (h // params.block) * (w // params.block)
        bindings["u"] = rng.uniform(-0.5, 0.5, (nb, ld))
    vals = g.eval(bindings)
    return vals[q], vals[rec], float(vals[bits])


# ----------------------------------------------------------------- training

def train_codec(clips, lam: float, epochs: int = 3, seed: int = 0,
                latent_dim: int = DEFAULT_LATENT, window: int = 5,
                batch: int = 8, lr: float = 1.5e-3,
                theta: float = DEFAULT_THETA, noise_aug: float = 0.0):
    """Fit codec weights by rate-distortion descent.

    Minimizes mean(bpp + lam * mse) over random ``window``-frame chunks
    coded as single non-hierarchical GOPs in train mode (quantization
    noise).  With ``noise_aug`` > 0 each chunk is coded after adding
    Gaussian pixel noise of sigma ~ U(0, noise_aug) while distortion is
    still measured against the clean chunk, so the coder learns to drop
    unstructured noise instead of spending rate on it.  Returns
    (CodecParams, per-step loss trace).  Raises CodecError if the loss
    goes non-finite.
    """
    clips = [np.asarray(cl, dtype=np.float64) for cl in clips]
    if not clips:
        raise CodecError("no training clips")
    if noise_aug < 0.0:
        raise CodecError(f"noise_aug must be >= 0, got {noise_aug}")
    t, h, w, c = clips[0].shape
    if any(cl.shape != clips[0].shape for cl in clips):
        raise CodecError("training clips must share a shape")
    if t < window:
        raise CodecError(f"clips of {t} frames too short for window {window}")
    params = init_params(lam, seed=seed, latent_dim=latent_dim, theta=theta)
    denoise = noise_aug > 0.0
    cg = coding_graph(structure="nh", gop_size=window, n_frames=window,
                      frame_shape=(h, w, c), batch=batch,
                      latent_dim=latent_dim, mode="train", theta=theta,
                      alpha_i=params.alpha_i, alpha_r=params.alpha_r,
                      diff_params=True, rd_lambda=float(lam),
                      distortion_target=denoise)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(lr=lr)
    weights = params.tensors()
    steps = epochs * max(1, len(clips) // batch)
    trace = []
    for step in range(steps):
        idx = rng.integers(0, len(clips), size=batch)
        t0 = rng.integers(0, t - window + 1, size=batch)
        x = np.stack([clips[i][s:s + window] for i, s in zip(idx, t0)])
        bindings = dict(weights)
        if denoise:
            sig = rng.uniform(0.0, noise_aug)
            bindings["x"] = np.clip(x + rng.normal(0.0, sig, x.shape),
                                    0.0, 1.0)
            bindings["x_target"] = x
        else:
            bindings["x"] = x
        bindings.update(cg.noise_bindings(rng))
        try:
            vals = cg.graph.eval(bindings)
            loss = float(vals[cg.rd_loss])
            grads = cg.graph.backward(vals, cg.rd_loss)
        except ad.GraphError as e:
            raise CodecError(f"training diverged at step {step}: {e}") from None
        if not np.isfinite(loss):
            raise CodecError(f"training diverged at step {step}: loss={loss}")
        trace.append(loss)
        opt.step(weights, grads)
    for name in _TENSOR_FIELDS:
        setattr(params, name, weights[name])
    return params, trace

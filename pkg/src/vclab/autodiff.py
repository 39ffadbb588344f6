"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`Graph` is a flat, append-only list of nodes built once and then
evaluated many times with different leaf bindings.  Evaluation is pure: it
returns a :class:`Values` table and mutates nothing, so one graph can be
shared by several drivers.  ``backward`` consumes a Values table plus a
scalar loss node and returns gradients for every differentiable leaf
(zeros for leaves the loss never touched).

Shapes are static and checked at build time; binding shapes and dtypes are
checked at eval time.  Every intermediate is float64.  Image-shaped
primitives (warp, block matching, blockify) expect a leading batch axis,
which is how the codec amortizes numpy dispatch across clips.

Two deliberately non-smooth kinds: ``round_ste`` uses straight-through
rounding (forward rint, gradient exactly 1) and ``clamp`` passes gradient
only strictly inside the interval, so the subgradient at the boundary is 0.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

LOG2 = math.log(2.0)

# Mass of the unit quantization bin under a logistic density is clipped to
# this floor before taking the log, which bounds any single entry's rate.
MASS_FLOOR = 1e-300


class GraphError(ValueError):
    """Raised for malformed graphs, bad bindings, or non-finite values."""


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


class Ref:
    """Handle to one node of a Graph.  Supports arithmetic sugar."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph._shapes[self.nid]

    def __repr__(self):
        g = self.graph
        return f"Ref({self.nid}: {g._kinds[self.nid]} {g._shapes[self.nid]})"

    def _other(self, other) -> "Ref":
        if isinstance(other, Ref):
            return other
        raise TypeError(f"expected Ref, got {type(other).__name__}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.sadd(self, float(other))
        return self.graph.add(self, self._other(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.sadd(self, -float(other))
        return self.graph.sub(self, self._other(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.smul(self, float(other))
        return self.graph.mul(self, self._other(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.graph.smul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._other(other))

    def __getitem__(self, key):
        return self.graph.slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.reshape(self, shape)

    def sum(self, axis=None):
        return self.graph.sum(self, axis)

    def mean(self, axis=None):
        return self.graph.mean(self, axis)

    def clamp(self, lo: float, hi: float):
        return self.graph.clamp(self, lo, hi)


class Values:
    """Evaluation result: node id -> ndarray, indexable by Ref."""

    __slots__ = ("_vals",)

    def __init__(self, vals: list):
        self._vals = vals

    def __getitem__(self, ref: Ref) -> np.ndarray:
        return self._vals[ref.nid]


def _normalize_axis(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise GraphError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _reduced_shape(shape, axes) -> tuple[int, ...]:
    if axes is None:
        return ()
    return tuple(s for i, s in enumerate(shape) if i not in axes)


class Graph:
    """Append-only computation graph of named leaves, constants and ops."""

    def __init__(self):
        self._kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list[dict] = []
        self._shapes: list[tuple[int, ...]] = []
        self._reaches_diff: list[bool] = []
        self._leaves: dict[str, int] = {}
        self._consts: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------- builders

    def _emit(self, kind: str, inputs: Sequence[Ref], shape, **attrs) -> Ref:
        ids = []
        reaches = False
        for r in inputs:
            if r.graph is not self:
                raise GraphError("mixing nodes from different graphs")
            ids.append(r.nid)
            reaches = reaches or self._reaches_diff[r.nid]
        nid = len(self._kinds)
        self._kinds.append(kind)
        self._inputs.append(tuple(ids))
        self._attrs.append(attrs)
        self._shapes.append(tuple(int(s) for s in shape))
        self._reaches_diff.append(reaches)
        return Ref(self, nid)

    def leaf(self, name: str, shape, diff: bool = True) -> Ref:
        """Declare a named input.  diff=False marks data the loss never
        differentiates through (parameters during attacks, noise draws)."""
        if name in self._leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        r = self._emit("leaf", (), tuple(shape), name=name, diff=bool(diff))
        self._leaves[name] = r.nid
        self._reaches_diff[r.nid] = bool(diff)
        return r

    def const(self, value) -> Ref:
        v = _as_f64(value)
        r = self._emit("const", (), v.shape)
        self._consts[r.nid] = v
        return r

    def _unary(self, kind, a: Ref, out_shape=None, **attrs) -> Ref:
        return self._emit(kind, (a,), a.shape if out_shape is None else out_shape,
                          **attrs)

    def _same_shape(self, kind, a: Ref, b: Ref) -> Ref:
        if a.shape != b.shape:
            raise GraphError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
        return self._emit(kind, (a, b), a.shape)

    def add(self, a, b):
        return self._same_shape("add", a, b)

    def sub(self, a, b):
        return self._same_shape("sub", a, b)

    def mul(self, a, b):
        return self._same_shape("mul", a, b)

    def smul(self, a, s: float):
        return self._unary("smul", a, scalar=float(s))

    def sadd(self, a, s: float):
        return self._unary("sadd", a, scalar=float(s))

    def matmul(self, a, b):
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return self._emit("matmul", (a, b), (a.shape[0], b.shape[1]))

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != math.prod(a.shape):
            raise GraphError(f"reshape: cannot reshape {a.shape} to {shape}")
        return self._unary("reshape", a, shape, to=shape)

    def slice(self, a, key):
        if not isinstance(key, tuple):
            key = (key,)
        if len(key) > len(a.shape):
            raise GraphError(f"slice: too many indices for shape {a.shape}")
        norm = []
        shape = []
        for dim, k in zip(a.shape, key):
            if isinstance(k, int):
                if not -dim <= k < dim:
                    raise GraphError(f"slice: index {k} out of range for dim {dim}")
                norm.append(k % dim)
            elif isinstance(k, slice):
                if k.step not in (None, 1):
                    raise GraphError("slice: only step 1 supported")
                start, stop, _ = k.indices(dim)
                if stop < start:
                    stop = start
                norm.append(slice(start, stop))
                shape.append(stop - start)
            else:
                raise GraphError(f"slice: unsupported index {k!r}")
        shape.extend(a.shape[len(key):])
        return self._unary("slice", a, tuple(shape), key=tuple(norm))

    def concat(self, parts: Iterable[Ref], axis: int) -> Ref:
        parts = list(parts)
        if not parts:
            raise GraphError("concat: empty input list")
        nd = len(parts[0].shape)
        axis = axis % nd
        base = list(parts[0].shape)
        total = 0
        for p in parts:
            if len(p.shape) != nd:
                raise GraphError("concat: rank mismatch")
            for i in range(nd):
                if i != axis and p.shape[i] != base[i]:
                    raise GraphError(f"concat: shape mismatch on axis {i}")
            total += p.shape[axis]
        base[axis] = total
        return self._emit("concat", parts, tuple(base), axis=axis)

    def relu(self, a):
        return self._unary("relu", a)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def exp(self, a):
        return self._unary("exp", a)

    def log(self, a):
        return self._unary("log", a)

    def square(self, a):
        return self._unary("square", a)

    def softmax(self, a, axis: int):
        axis = axis % len(a.shape)
        return self._unary("softmax", a, axis=axis)

    def sum(self, a, axis=None):
        axes = _normalize_axis(axis, len(a.shape))
        return self._unary("sum", a, _reduced_shape(a.shape, axes), axes=axes)

    def mean(self, a, axis=None):
        axes = _normalize_axis(axis, len(a.shape))
        n = math.prod(a.shape) if axes is None else math.prod(a.shape[i] for i in axes)
        return self._unary("mean", a, _reduced_shape(a.shape, axes),
                           axes=axes, count=n)

    def max(self, a, axis=None):
        axes = _normalize_axis(axis, len(a.shape))
        if axes is not None and len(axes) != 1:
            raise GraphError("max: a single axis or None")
        return self._unary("max", a, _reduced_shape(a.shape, axes), axes=axes)

    def clamp(self, a, lo: float, hi: float):
        if not lo < hi:
            raise GraphError(f"clamp: empty interval [{lo}, {hi}]")
        return self._unary("clamp", a, lo=float(lo), hi=float(hi))

    def round_ste(self, a):
        return self._unary("round_ste", a)

    def blockify(self, a, block: int):
        """(N, H, W, C) -> (N*nby*nbx, block*block*C), blocks row-major,
        each block flattened y-major, x, then channel."""
        if len(a.shape) != 4:
            raise GraphError(f"blockify: expected (N,H,W,C), got {a.shape}")
        n, h, w, c = a.shape
        if h % block or w % block:
            raise GraphError(f"blockify: {h}x{w} not divisible by {block}")
        nb = (h // block) * (w // block)
        return self._unary("blockify", a, (n * nb, block * block * c), block=block)

    def unblockify(self, a, like: tuple[int, int, int, int], block: int):
        n, h, w, c = like
        nb = (h // block) * (w // block)
        if a.shape != (n * nb, block * block * c):
            raise GraphError(f"unblockify: {a.shape} does not tile {like}")
        return self._unary("unblockify", a, like, block=block, like=tuple(like))

    def block_expand(self, a, factor: int):
        """Per-block values (N, hb, wb, K) -> per-pixel (N, hb*f, wb*f, K)."""
        if len(a.shape) != 4:
            raise GraphError(f"block_expand: expected rank 4, got {a.shape}")
        n, hb, wb, k = a.shape
        return self._unary("block_expand", a, (n, hb * factor, wb * factor, k),
                           factor=factor)

    def warp(self, img, flow):
        """Bilinear backward warp: out(y,x) = img(y+dy, x+dx), coordinates
        clamped to the frame.  flow[...,0] is dx, flow[...,1] is dy.
        Gradient w.r.t. flow is zero where the source coordinate leaves
        the frame."""
        if len(img.shape) != 4 or len(flow.shape) != 4 or flow.shape[3] != 2:
            raise GraphError(f"warp: expected (N,H,W,C) and (N,H,W,2), got "
                             f"{img.shape} and {flow.shape}")
        if img.shape[:3] != flow.shape[:3]:
            raise GraphError(f"warp: batch/spatial mismatch {img.shape} vs {flow.shape}")
        return self._emit("warp", (img, flow), img.shape)

    def block_match(self, cur, ref, radius: int, block: int):
        """Negated SSD between each block of `cur` and the displaced block of
        `ref`, for every integer displacement in [-radius, radius]^2 with
        edge-clamped sampling.  Output (N, nblocks, (2r+1)^2); displacement
        j encodes dy = j // (2r+1) - radius, dx = j % (2r+1) - radius."""
        if cur.shape != ref.shape or len(cur.shape) != 4:
            raise GraphError(f"block_match: bad shapes {cur.shape}, {ref.shape}")
        n, h, w, c = cur.shape
        if h % block or w % block:
            raise GraphError(f"block_match: {h}x{w} not divisible by {block}")
        nb = (h // block) * (w // block)
        k = (2 * radius + 1) ** 2
        return self._emit("block_match", (cur, ref), (n, nb, k),
                          radius=radius, block=block)

    def bits_mass(self, v, log_scale):
        """Per-entry code length in bits of integerized values under a
        zero-mean logistic with per-column scale exp(log_scale):
        -log2(F((v+.5)/s) - F((v-.5)/s)), mass floored at 1e-300."""
        if len(v.shape) != 2 or log_scale.shape != (v.shape[1],):
            raise GraphError(f"bits_mass: expected (M,K) and (K,), got "
                             f"{v.shape} and {log_scale.shape}")
        return self._emit("bits_mass", (v, log_scale), v.shape)

    def motion_features(self, clip, ndir: int = 8):
        """Fused oriented frame-difference descriptor for (N,T,H,W,C) clips.

        For each consecutive frame pair, correlates the temporal difference
        with the spatial gradient of the later frame along `ndir` evenly
        spaced directions, averaged over pixels, channels and pairs.
        """
        if len(clip.shape) != 5:
            raise GraphError(f"motion_features: expected (N,T,H,W,C), got {clip.shape}")
        n, t, h, w, c = clip.shape
        if t < 2 or h < 2 or w < 2:
            raise GraphError("motion_features: clip too small")
        return self._unary("motion_features", clip, (n, ndir), ndir=int(ndir))

    # ----------------------------------------------------------- execution

    def eval(self, bindings: dict[str, np.ndarray], check: bool = True) -> Values:
        """Run the graph.  Raises GraphError on missing/mis-shaped bindings,
        unknown binding names, or (when check=True) non-finite values."""
        unknown = set(bindings) - set(self._leaves)
        if unknown:
            raise GraphError(f"bindings for unknown leaves: {sorted(unknown)}")
        n = len(self._kinds)
        vals: list = [None] * n
        for nid in range(n):
            kind = self._kinds[nid]
            attrs = self._attrs[nid]
            if kind == "leaf":
                name = attrs["name"]
                if name not in bindings:
                    raise GraphError(f"leaf {name!r} not bound")
                v = _as_f64(bindings[name])
                if v.shape != self._shapes[nid]:
                    raise GraphError(f"leaf {name!r}: bound shape {v.shape}, "
                                     f"declared {self._shapes[nid]}")
                vals[nid] = v
                continue
            if kind == "const":
                vals[nid] = self._consts[nid]
                continue
            ins = self._inputs[nid]
            try:
                # non-finite values are detected below; silence numpy's
                # redundant divide/overflow warnings on the way there
                with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                    v = _FORWARD[kind](attrs, *(vals[i] for i in ins))
            except GraphError:
                raise
            except Exception as exc:  # pragma: no cover - defensive
                raise GraphError(f"node {nid} ({kind}): {exc}") from exc
            if check and not math.isfinite(float(np.sum(v))):
                raise GraphError(f"node {nid} ({kind}) produced non-finite values")
            vals[nid] = v
        return Values(vals)

    def backward(self, values: Values, loss: Ref) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every diff leaf.  Leaves the
        loss does not depend on get zero arrays."""
        if loss.graph is not self:
            raise GraphError("loss belongs to a different graph")
        if self._shapes[loss.nid] != ():
            raise GraphError(f"loss must be scalar, got shape {self._shapes[loss.nid]}")
        vals = values._vals
        adj: list = [None] * len(self._kinds)
        adj[loss.nid] = np.ones(())
        grads: dict[str, np.ndarray] = {}
        reaches = self._reaches_diff
        for nid in range(loss.nid, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            kind = self._kinds[nid]
            if kind == "leaf":
                a = self._attrs[nid]
                if a["diff"]:
                    grads[a["name"]] = np.asarray(g, dtype=np.float64)
                continue
            if kind == "const":
                continue
            ins = self._inputs[nid]
            needed = tuple(reaches[i] for i in ins)
            gs = _VJP[kind](self._attrs[nid], np.asarray(g), vals[nid],
                            tuple(vals[i] for i in ins), needed)
            for i, gi in zip(ins, gs):
                if gi is None or not reaches[i]:
                    continue
                adj[i] = gi if adj[i] is None else adj[i] + gi
            adj[nid] = None  # free memory as we go
        for name, nid in self._leaves.items():
            if self._attrs[nid]["diff"] and name not in grads:
                grads[name] = np.zeros(self._shapes[nid])
        return grads


# ---------------------------------------------------------------- forwards

def _expand_axes(g, axes, shape):
    if axes is None:
        return np.broadcast_to(g, shape)
    gg = np.expand_dims(g, axes)
    return np.broadcast_to(gg, shape)


def _fw_add(attrs, a, b):
    return a + b


def _fw_sub(attrs, a, b):
    return a - b


def _fw_mul(attrs, a, b):
    return a * b


def _fw_smul(attrs, a):
    return a * attrs["scalar"]


def _fw_sadd(attrs, a):
    return a + attrs["scalar"]


def _fw_matmul(attrs, a, b):
    return a @ b


def _fw_reshape(attrs, a):
    return a.reshape(attrs["to"])


def _fw_slice(attrs, a):
    return a[attrs["key"]]


def _fw_concat(attrs, *parts):
    return np.concatenate(parts, axis=attrs["axis"])


def _fw_relu(attrs, a):
    return np.maximum(a, 0.0)


def _fw_sigmoid(attrs, a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fw_exp(attrs, a):
    return np.exp(a)


def _fw_log(attrs, a):
    return np.log(a)


def _fw_square(attrs, a):
    return a * a


def _fw_softmax(attrs, a):
    ax = attrs["axis"]
    m = a.max(axis=ax, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=ax, keepdims=True)


def _fw_sum(attrs, a):
    return np.asarray(a.sum(axis=attrs["axes"]))


def _fw_mean(attrs, a):
    return np.asarray(a.mean(axis=attrs["axes"]))


def _fw_max(attrs, a):
    axes = attrs["axes"]
    return np.asarray(a.max() if axes is None else a.max(axis=axes[0]))


def _fw_clamp(attrs, a):
    return np.clip(a, attrs["lo"], attrs["hi"])


def _fw_round(attrs, a):
    return np.rint(a)


def _blockify(a, block):
    n, h, w, c = a.shape
    hb, wb = h // block, w // block
    return (a.reshape(n, hb, block, wb, block, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n * hb * wb, block * block * c))


def _unblockify(a, like, block):
    n, h, w, c = like
    hb, wb = h // block, w // block
    return (a.reshape(n, hb, wb, block, block, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h, w, c))


def _fw_blockify(attrs, a):
    return _blockify(a, attrs["block"])


def _fw_unblockify(attrs, a):
    return _unblockify(a, attrs["like"], attrs["block"])


def _fw_block_expand(attrs, a):
    f = attrs["factor"]
    return np.repeat(np.repeat(a, f, axis=1), f, axis=2)


def _warp_coords(img, flow):
    n, h, w, _ = img.shape
    ys_raw = np.arange(h, dtype=np.float64)[:, None] + flow[..., 1]
    xs_raw = np.arange(w, dtype=np.float64)[None, :] + flow[..., 0]
    ys = np.clip(ys_raw, 0.0, h - 1.0)
    xs = np.clip(xs_raw, 0.0, w - 1.0)
    y0 = np.minimum(ys.astype(np.int64), h - 2)
    x0 = np.minimum(xs.astype(np.int64), w - 2)
    fy = ys - y0
    fx = xs - x0
    return ys_raw, xs_raw, y0, x0, fy, fx


def _warp_gather(img, y0, x0):
    n, h, w, c = img.shape
    flat = img.reshape(n * h * w, c)
    base = (np.arange(n) * h * w)[:, None, None]
    idx = base + y0 * w + x0
    i00 = flat[idx]
    i01 = flat[idx + 1]
    i10 = flat[idx + w]
    i11 = flat[idx + w + 1]
    return i00, i01, i10, i11


def _fw_warp(attrs, img, flow):
    _, _, y0, x0, fy, fx = _warp_coords(img, flow)
    i00, i01, i10, i11 = _warp_gather(img, y0, x0)
    fy = fy[..., None]
    fx = fx[..., None]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    return top + fy * (bot - top)


def _fw_block_match(attrs, cur, ref):
    r, block = attrs["radius"], attrs["block"]
    n, h, w, c = cur.shape
    hb, wb = h // block, w // block
    side = 2 * r + 1
    pad = np.pad(ref, ((0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    out = np.empty((n, hb, wb, side * side))
    tmp = np.empty_like(cur)
    for j in range(side * side):
        dy, dx = divmod(j, side)
        sh = pad[:, dy:dy + h, dx:dx + w]
        np.subtract(cur, sh, out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out[..., j] = tmp.reshape(n, hb, block, wb, block, c).sum(axis=(2, 4, 5))
    return -out.reshape(n, hb * wb, side * side)


def _logistic_terms(v, log_scale):
    s = np.exp(log_scale)
    u = -np.abs(v)  # mass is symmetric; evaluate on the stable side
    a = (u + 0.5) / s
    b = (u - 0.5) / s
    sa = _fw_sigmoid(None, a)
    sb = _fw_sigmoid(None, b)
    mass = np.maximum(sa - sb, MASS_FLOOR)
    return s, u, a, b, sa, sb, mass


def _fw_bits_mass(attrs, v, log_scale):
    mass = _logistic_terms(v, log_scale)[-1]
    return -np.log2(mass)


def _fw_motion_features(attrs, clip):
    ndir = attrs["ndir"]
    n, t, h, w, c = clip.shape
    ang = 2.0 * np.pi * np.arange(ndir) / ndir
    cos, sin = np.cos(ang), np.sin(ang)
    acc_x = np.zeros(n)
    acc_y = np.zeros(n)
    for ti in range(1, t):
        f1 = clip[:, ti]
        d = (f1 - clip[:, ti - 1])[:, :h - 1, :w - 1]
        gx = (f1[:, :, 1:] - f1[:, :, :-1])[:, :h - 1]
        gy = (f1[:, 1:] - f1[:, :-1])[:, :, :w - 1]
        acc_x += (d * gx).mean(axis=(1, 2, 3))
        acc_y += (d * gy).mean(axis=(1, 2, 3))
    acc_x /= (t - 1)
    acc_y /= (t - 1)
    return -(acc_x[:, None] * cos[None, :] + acc_y[:, None] * sin[None, :])


# -------------------------------------------------------------------- VJPs
# Signature: vjp(attrs, g, out, ins, needed) -> tuple of per-input grads.
# Implementations may return None for inputs whose `needed` flag is False.

def _vj_add(attrs, g, out, ins, needed):
    return g, g


def _vj_sub(attrs, g, out, ins, needed):
    return g, -g


def _vj_mul(attrs, g, out, ins, needed):
    a, b = ins
    return (g * b if needed[0] else None), (g * a if needed[1] else None)


def _vj_smul(attrs, g, out, ins, needed):
    return (g * attrs["scalar"],)


def _vj_sadd(attrs, g, out, ins, needed):
    return (g,)


def _vj_matmul(attrs, g, out, ins, needed):
    a, b = ins
    ga = g @ b.T if needed[0] else None
    gb = a.T @ g if needed[1] else None
    return ga, gb


def _vj_reshape(attrs, g, out, ins, needed):
    return (g.reshape(ins[0].shape),)


def _vj_slice(attrs, g, out, ins, needed):
    big = np.zeros(ins[0].shape)
    big[attrs["key"]] = g
    return (big,)


def _vj_concat(attrs, g, out, ins, needed):
    ax = attrs["axis"]
    sizes = [a.shape[ax] for a in ins]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def _vj_relu(attrs, g, out, ins, needed):
    return (g * (ins[0] > 0),)


def _vj_sigmoid(attrs, g, out, ins, needed):
    return (g * out * (1.0 - out),)


def _vj_exp(attrs, g, out, ins, needed):
    return (g * out,)


def _vj_log(attrs, g, out, ins, needed):
    return (g / ins[0],)


def _vj_square(attrs, g, out, ins, needed):
    return (2.0 * g * ins[0],)


def _vj_softmax(attrs, g, out, ins, needed):
    ax = attrs["axis"]
    dot = (g * out).sum(axis=ax, keepdims=True)
    return (out * (g - dot),)


def _vj_sum(attrs, g, out, ins, needed):
    return (_expand_axes(g, attrs["axes"], ins[0].shape),)


def _vj_mean(attrs, g, out, ins, needed):
    return (_expand_axes(g / attrs["count"], attrs["axes"], ins[0].shape),)


def _vj_max(attrs, g, out, ins, needed):
    a = ins[0]
    axes = attrs["axes"]
    big = np.zeros(a.shape)
    if axes is None:
        idx = np.unravel_index(np.argmax(a), a.shape)
        big[idx] = g
    else:
        ax = axes[0]
        am = np.expand_dims(np.argmax(a, axis=ax), ax)
        np.put_along_axis(big, am, np.expand_dims(g, ax), axis=ax)
    return (big,)


def _vj_clamp(attrs, g, out, ins, needed):
    a = ins[0]
    return (g * ((a > attrs["lo"]) & (a < attrs["hi"])),)


def _vj_round(attrs, g, out, ins, needed):
    return (g,)


def _vj_blockify(attrs, g, out, ins, needed):
    return (_unblockify(g, ins[0].shape, attrs["block"]),)


def _vj_unblockify(attrs, g, out, ins, needed):
    return (_blockify(g, attrs["block"]),)


def _vj_block_expand(attrs, g, out, ins, needed):
    f = attrs["factor"]
    n, hb, wb, k = ins[0].shape
    return (g.reshape(n, hb, f, wb, f, k).sum(axis=(2, 4)),)


def _vj_warp(attrs, g, out, ins, needed):
    img, flow = ins
    n, h, w, c = img.shape
    ys_raw, xs_raw, y0, x0, fy, fx = _warp_coords(img, flow)
    i00, i01, i10, i11 = _warp_gather(img, y0, x0)
    fyc = fy[..., None]
    fxc = fx[..., None]
    gimg = None
    if needed[0]:
        w00 = (1 - fyc) * (1 - fxc) * g
        w01 = (1 - fyc) * fxc * g
        w10 = fyc * (1 - fxc) * g
        w11 = fyc * fxc * g
        base = (np.arange(n) * h * w)[:, None, None]
        idx = ((base + y0 * w + x0)[..., None] * c
               + np.arange(c)).ravel()
        size = n * h * w * c
        acc = np.bincount(idx, weights=w00.ravel(), minlength=size)
        acc += np.bincount(idx + c, weights=w01.ravel(), minlength=size)
        acc += np.bincount(idx + w * c, weights=w10.ravel(), minlength=size)
        acc += np.bincount(idx + (w + 1) * c, weights=w11.ravel(), minlength=size)
        gimg = acc.reshape(img.shape)
    gflow = None
    if needed[1]:
        inb_x = (xs_raw >= 0.0) & (xs_raw <= w - 1.0)
        inb_y = (ys_raw >= 0.0) & (ys_raw <= h - 1.0)
        dx_lin = ((1 - fyc) * (i01 - i00) + fyc * (i11 - i10)) * g
        dy_lin = ((1 - fxc) * (i10 - i00) + fxc * (i11 - i01)) * g
        gflow = np.empty(flow.shape)
        gflow[..., 0] = dx_lin.sum(axis=3) * inb_x
        gflow[..., 1] = dy_lin.sum(axis=3) * inb_y
    return gimg, gflow


def _vj_block_match(attrs, g, out, ins, needed):
    cur, ref = ins
    r, block = attrs["radius"], attrs["block"]
    n, h, w, c = cur.shape
    hb, wb = h // block, w // block
    side = 2 * r + 1
    pad = np.pad(ref, ((0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    gq = g.reshape(n, hb, wb, side * side)
    gcur = np.zeros(cur.shape) if needed[0] else None
    gpad = np.zeros(pad.shape) if needed[1] else None
    for j in range(side * side):
        dy, dx = divmod(j, side)
        sh = pad[:, dy:dy + h, dx:dx + w]
        # expand the per-block weight to pixels of that block
        wj = np.broadcast_to(
            gq[..., j][:, :, None, :, None],
            (n, hb, block, wb, block)).reshape(n, h, w, 1)
        term = (-2.0 * wj) * (cur - sh)
        if gcur is not None:
            gcur += term
        if gpad is not None:
            gpad[:, dy:dy + h, dx:dx + w] -= term
    gref = None
    if gpad is not None:
        # fold the replicated margins back onto the border pixels
        core = gpad[:, r:r + h, r:r + w].copy()
        core[:, 0] += gpad[:, :r, r:r + w].sum(axis=1)
        core[:, -1] += gpad[:, r + h:, r:r + w].sum(axis=1)
        core[:, :, 0] += gpad[:, r:r + h, :r].sum(axis=2)
        core[:, :, -1] += gpad[:, r:r + h, r + w:].sum(axis=2)
        core[:, 0, 0] += gpad[:, :r, :r].sum(axis=(1, 2))
        core[:, 0, -1] += gpad[:, :r, r + w:].sum(axis=(1, 2))
        core[:, -1, 0] += gpad[:, r + h:, :r].sum(axis=(1, 2))
        core[:, -1, -1] += gpad[:, r + h:, r + w:].sum(axis=(1, 2))
        gref = core
    return gcur, gref


def _vj_bits_mass(attrs, g, out, ins, needed):
    v, log_scale = ins
    s, u, a, b, sa, sb, mass = _logistic_terms(v, log_scale)
    dmass = -g / (mass * LOG2)
    da = sa * (1.0 - sa)
    db = sb * (1.0 - sb)
    gv = None
    if needed[0]:
        du = dmass * (da - db) / s
        gv = du * -np.sign(v)
    gs = None
    if needed[1]:
        gs = (dmass * (db * b - da * a)).sum(axis=0)
    return gv, gs


def _vj_motion_features(attrs, g, out, ins, needed):
    clip = ins[0]
    ndir = attrs["ndir"]
    n, t, h, w, c = clip.shape
    ang = 2.0 * np.pi * np.arange(ndir) / ndir
    # out = -(acc_x * cos + acc_y * sin); fold g back onto the two sums
    gax = -(g * np.cos(ang)[None, :]).sum(axis=1)
    gay = -(g * np.sin(ang)[None, :]).sum(axis=1)
    m = (h - 1) * (w - 1) * c
    scale = 1.0 / ((t - 1) * m)
    cx = (gax * scale)[:, None, None, None]
    cy = (gay * scale)[:, None, None, None]
    gclip = np.zeros(clip.shape)
    for ti in range(1, t):
        f1 = clip[:, ti]
        d = (f1 - clip[:, ti - 1])[:, :h - 1, :w - 1]
        gx = (f1[:, :, 1:] - f1[:, :, :-1])[:, :h - 1]
        gy = (f1[:, 1:] - f1[:, :-1])[:, :, :w - 1]
        gd = cx * gx + cy * gy
        ggx = cx * d
        ggy = cy * d
        # d = f1[crop] - f0[crop]
        gclip[:, ti, :h - 1, :w - 1] += gd
        gclip[:, ti - 1, :h - 1, :w - 1] -= gd
        # gx = f1[:, :h-1, 1:] - f1[:, :h-1, :-1]
        gclip[:, ti, :h - 1, 1:] += ggx
        gclip[:, ti, :h - 1, :w - 1] -= ggx
        # gy = f1[:, 1:, :w-1] - f1[:, :h-1, :w-1]
        gclip[:, ti, 1:, :w - 1] += ggy
        gclip[:, ti, :h - 1, :w - 1] -= ggy
    return (gclip,)


_FORWARD = {
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul, "smul": _fw_smul,
    "sadd": _fw_sadd, "matmul": _fw_matmul, "reshape": _fw_reshape,
    "slice": _fw_slice, "concat": _fw_concat, "relu": _fw_relu,
    "sigmoid": _fw_sigmoid, "exp": _fw_exp, "log": _fw_log,
    "square": _fw_square, "softmax": _fw_softmax, "sum": _fw_sum,
    "mean": _fw_mean, "max": _fw_max, "clamp": _fw_clamp,
    "round_ste": _fw_round, "blockify": _fw_blockify,
    "unblockify": _fw_unblockify, "block_expand": _fw_block_expand,
    "warp": _fw_warp, "block_match": _fw_block_match,
    "bits_mass": _fw_bits_mass, "motion_features": _fw_motion_features,
}

_VJP = {
    "add": _vj_add, "sub": _vj_sub, "mul": _vj_mul, "smul": _vj_smul,
    "sadd": _vj_sadd, "matmul": _vj_matmul, "reshape": _vj_reshape,
    "slice": _vj_slice, "concat": _vj_concat, "relu": _vj_relu,
    "sigmoid": _vj_sigmoid, "exp": _vj_exp, "log": _vj_log,
    "square": _vj_square, "softmax": _vj_softmax, "sum": _vj_sum,
    "mean": _vj_mean, "max": _vj_max, "clamp": _vj_clamp,
    "round_ste": _vj_round, "blockify": _vj_blockify,
    "unblockify": _vj_unblockify, "block_expand": _vj_block_expand,
    "warp": _vj_warp, "block_match": _vj_block_match,
    "bits_mass": _vj_bits_mass, "motion_features": _vj_motion_features,
}


def grad_check(graph: Graph, loss: Ref, bindings: dict[str, np.ndarray],
               wrt: str, h: float = 1e-5, rng=None) -> float:
    """Relative error between the backward gradient of `wrt` and a central
    finite difference along a random direction.  Cheap: two extra evals."""
    rng = np.random.default_rng(0) if rng is None else rng
    base = {k: _as_f64(v) for k, v in bindings.items()}
    grads = graph.backward(graph.eval(base), loss)
    gref = grads[wrt]
    v = rng.standard_normal(gref.shape)
    nv = np.linalg.norm(v)
    if nv > 0:
        v = v / nv
    up = dict(base)
    dn = dict(base)
    up[wrt] = base[wrt] + h * v
    dn[wrt] = base[wrt] - h * v
    lref = loss
    f_up = float(graph.eval(up)._vals[lref.nid])
    f_dn = float(graph.eval(dn)._vals[lref.nid])
    fd = (f_up - f_dn) / (2.0 * h)
    an = float((gref * v).sum())
    denom = max(abs(fd), abs(an), 1e-8)
    return abs(fd - an) / denom

"""Group-of-pictures reference structures.

Three structures over a GOP of ``gop_size`` frames:

* ``nh``  non-hierarchical: I P P P ..., each P referencing the previous
  frame in display order.
* ``hp``  hierarchical-P: the anchor frame at position ceil(G/2)+1 is coded
  right after the I frame referencing it, then the two halves are coded as
  P chains (2..anchor-1 off the I side, anchor+1..G off the anchor).
* ``hb``  hierarchical-B: first and last frame of the GOP are coded first
  (I then P), then midpoints recursively as B frames referencing their
  enclosing coded pair.  Consecutive GOPs share a boundary frame: frame 1
  of a non-initial GOP is the previous GOP's last frame, reused without
  spending bits.

Frame positions ``n`` inside a GOP are 1-based (matching the schedule
tuples); display indices into a clip are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

STRUCTURES = ("nh", "hp", "hb")

I_FRAME = "I"
P_FRAME = "P"
B_FRAME = "B"
REUSED = "R"


@dataclass(frozen=True)
class FrameSpec:
    """One frame of a GOP in coding order. refs are 1-based GOP positions."""
    n: int
    kind: str
    refs: tuple[int, ...]


def display_index(structure: str, gop_size: int, g: int, n: int) -> int:
    """0-based display index of GOP-local position n (1-based) in GOP g."""
    _check_structure(structure)
    if not 1 <= n <= gop_size:
        raise ValueError(f"n must be in 1..{gop_size}, got {n}")
    if structure == "hb":
        return g * (gop_size - 1) + (n - 1)
    return g * gop_size + (n - 1)


def _check_structure(structure: str) -> None:
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}, expected one of "
                         f"{STRUCTURES}")


def _bisect(lo: int, hi: int, out: list[FrameSpec]) -> None:
    if hi - lo <= 1:
        return
    mid = (lo + hi) // 2
    out.append(FrameSpec(mid, B_FRAME, (lo, hi)))
    _bisect(lo, mid, out)
    _bisect(mid, hi, out)


def gop_schedule(structure: str, gop_size: int,
                 first_gop: bool = True) -> list[FrameSpec]:
    """Coding-order schedule for one GOP."""
    _check_structure(structure)
    if gop_size < 2:
        raise ValueError("gop_size must be at least 2")
    if structure == "nh":
        out = [FrameSpec(1, I_FRAME, ())]
        out.extend(FrameSpec(n, P_FRAME, (n - 1,))
                   for n in range(2, gop_size + 1))
        return out
    if structure == "hp":
        anchor = math.ceil(gop_size / 2) + 1
        if anchor > gop_size:
            anchor = gop_size
        out = [FrameSpec(1, I_FRAME, ()),
               FrameSpec(anchor, P_FRAME, (1,))]
        out.extend(FrameSpec(n, P_FRAME, (n - 1,))
                   for n in range(2, anchor))
        out.extend(FrameSpec(n, P_FRAME, (n - 1,))
                   for n in range(anchor + 1, gop_size + 1))
        return out
    # hb
    head = FrameSpec(1, I_FRAME if first_gop else REUSED, ())
    out = [head, FrameSpec(gop_size, P_FRAME, (1,))]
    _bisect(1, gop_size, out)
    return out


def gop_map(structure: str, gop_size: int, g: int, n: int) -> int:
    """1-based display time of the n-th frame *in coding order* of GOP g.

    For the non-hierarchical structure this is the identity g*G + n; for
    the hierarchical structures it applies the coding-order permutation.
    """
    sched = gop_schedule(structure, gop_size, first_gop=(g == 0))
    if not 1 <= n <= gop_size:
        raise ValueError(f"coding index must be in 1..{gop_size}, got {n}")
    return display_index(structure, gop_size, g, sched[n - 1].n) + 1


def usable_frames(structure: str, gop_size: int, n_frames: int) -> int:
    """Largest prefix of a clip this structure can tile with whole GOPs."""
    _check_structure(structure)
    if structure == "hb":
        if n_frames < gop_size:
            raise ValueError(f"clip of {n_frames} frames shorter than one "
                             f"hb GOP of {gop_size}")
        return 1 + ((n_frames - 1) // (gop_size - 1)) * (gop_size - 1)
    if n_frames < gop_size:
        raise ValueError(f"clip of {n_frames} frames shorter than one "
                         f"GOP of {gop_size}")
    return (n_frames // gop_size) * gop_size


def plan_video(structure: str, gop_size: int, n_frames: int):
    """Coding plan for a whole clip.

    Returns (plan, used) where `used` is the number of leading frames
    covered and `plan` is a list of GOPs, each a list of
    (display_t, kind, ref_display_ts) tuples in coding order.
    """
    used = usable_frames(structure, gop_size, n_frames)
    if structure == "hb":
        n_gops = (used - 1) // (gop_size - 1)
    else:
        n_gops = used // gop_size
    plan = []
    for g in range(n_gops):
        sched = gop_schedule(structure, gop_size, first_gop=(g == 0))
        gop = [(display_index(structure, gop_size, g, fs.n), fs.kind,
                tuple(display_index(structure, gop_size, g, r)
                      for r in fs.refs))
               for fs in sched]
        plan.append(gop)
    return plan, used

"""vclab: a desk-scale lab for adversarial attacks on learned video coding.

The pieces, bottom up: a small reverse-mode autodiff engine
(:mod:`vclab.autodiff`), a synthetic moving-shapes dataset
(:mod:`vclab.video`), GOP reference structures (:mod:`vclab.gop`), a
blockwise transform video codec with soft motion estimation
(:mod:`vclab.codec`), a clip-direction classifier (:mod:`vclab.classifier`),
rate/quality and classification attacks (:mod:`vclab.attacks`), input-side
defenses (:mod:`vclab.defenses`), and experiment drivers plus a CLI
(:mod:`vclab.experiments`, :mod:`vclab.cli`).
"""

__version__ = "0.1.0"

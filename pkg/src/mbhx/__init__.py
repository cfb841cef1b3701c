"""Automatic extraction of semi-transparent motion-blurred hands.

The pipeline: procedural motion-blur synthesis (:mod:`mbhx.synth`), a
shared-encoder / dual-decoder network (:mod:`mbhx.network`) built on a small
reverse-mode autodiff core (:mod:`mbhx.autodiff`), the matting losses
(:mod:`mbhx.losses`), SGD training and SAD/MSE evaluation
(:mod:`mbhx.training`).
"""

__version__ = "0.1.0"

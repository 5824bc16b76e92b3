"""demoforge: grow large synthetic manipulation datasets from a few demos.

The pipeline in one breath: summarize a recorded demonstration into a
keypose-level text description, retarget those keyposes to a new scene,
warp the dense trajectory through the retargeted keyposes, roll it out,
and let a Thompson-sampling bandit decide which annotations earn reuse
and when a fresh one is worth minting.
"""

__version__ = "0.1.0"

"""junctionsim: scene-level mixed-traffic simulation for signalized intersections.

Pipeline: generate synthetic episodes -> train a compact attention dynamics
model on interaction-decoupled agent subsets -> run closed-loop rollouts ->
score fidelity and long-term stability.
"""

__version__ = "0.1.0"

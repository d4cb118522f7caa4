"""Neural closed-loop optimal controllers.

Open-loop trajectory generation by indirect shooting, supervised and
rollout-gradient training of feedback networks, and closed-loop cost-ratio
evaluation with optional measurement noise.
"""

__version__ = "0.1.0"

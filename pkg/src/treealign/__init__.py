"""Process-supervised reasoning alignment on a synthetic grounding world.

Subpackages cover the full stack: entropy-guided reasoning trees, Monte
Carlo step labelling, hallucination injection, token-level process reward
models, drop-moment reward shaping, tree-structured group-relative policy
optimization, and verifier-guided test-time scaling.
"""

__version__ = "0.1.0"

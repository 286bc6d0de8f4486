"""Tunable knobs with their shipped defaults.

Everything here is overridable per call; the dataclass exists so benches and
the CLI can thread one bundle of settings through the stack.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

FIXTURES_ENV = "AGENTMEM_FIXTURES"


def fixtures_root() -> Path:
    """Bundled fixture directory, overridable via AGENTMEM_FIXTURES."""
    override = os.environ.get(FIXTURES_ENV)
    if override:
        return Path(override)
    return Path(__file__).parent / "fixtures"


@dataclass
class Config:
    # element matcher
    match_weights: tuple[float, float, float] = (0.5, 0.2, 0.3)  # resource_id, class, text
    match_threshold: float = 0.8

    # embedding
    embed_dim: int = 256

    # profile memory
    update_k: int = 5
    retrieval_k: int = 3
    token_budget: int = 2000
    split_threshold: int = 20

    # experience memory
    min_template_similarity: float = 0.6

    # action memory reuse schedule: threshold(depth) = tau0 + tau_step * depth, capped
    tau0: float = 0.55
    tau_step: float = 0.05
    tau_cap: float = 0.95

    # execution
    step_limit: int = 50

    # planning-stage virtual durations (ms)
    plan_profile_ms: int = 30
    plan_template_ms: int = 20
    plan_rewrite_ms: int = 100

    fixtures: Path = field(default_factory=fixtures_root)


DEFAULT = Config()

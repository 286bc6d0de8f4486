"""agentmem: a memory-centric execution kernel for GUI automation agents.

Three memory primitives (user-profile graph, experience templates, action
caches) plus the services that keep them honest: record/replay with
verification and rollback, a virtual-clock scheduler with three parallelism
modes, and interrupt-aware exception handling. Model calls go through five
oracle roles with deterministic scripted implementations, so every behavior
here is reproducible and testable offline.
"""

__version__ = "0.1.0"

from .config import Config, DEFAULT, fixtures_root

__all__ = ["Config", "DEFAULT", "fixtures_root", "__version__"]

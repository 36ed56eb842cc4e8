"""Desk-scale simulator of ledger-backed secure federated lifelong learning.

Submodules: knowledge_index (hyperplane-hash retrieval), ledger (hash-linked
chain with replay screening), consensus (correlation-scored three-phase
commit), arbitration (sliced fixed-point aggregation audit), learner
(synthetic lifelong-learning substrate), cost_model (closed-form cost
oracles), sim (scenario orchestration), cli (command-line entry point).
"""

from . import (  # noqa: F401
    arbitration,
    consensus,
    cost_model,
    knowledge_index,
    learner,
    ledger,
    sim,
)

__version__ = "0.1.0"

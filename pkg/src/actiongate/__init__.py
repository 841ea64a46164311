"""actiongate: a trust-boundary validation gateway for tool-using agents.

Every action an agent proposes crosses a mediation boundary before it can
touch the filesystem, the network, or a message channel. The boundary is a
graduated pipeline — self-protection checks, a declarative policy layer, a
heuristic/classifier gate, a budget-limited evaluator with a canary secret,
and finally human approval — that fails closed at every stage. Around it sit
information-flow taint tracking, pre-destruction snapshots, and a
hash-chained audit ledger, plus an evaluation harness that drives the whole
stack over its wire protocol.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Action,
    ActionType,
    Decision,
    MalformedAction,
    Session,
    TierId,
    Verdict,
)

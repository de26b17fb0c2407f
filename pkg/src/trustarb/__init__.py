"""Trust-aware multi-agent visual-classification orchestration.

Vision agents produce (label, confidence, justification) triples over a shared
wire protocol; a non-visual arbiter weighs them with calibrated trust profiles
and, when trust runs low, grounds a re-evaluation round in retrieved visual
precedents before deciding.
"""

__version__ = "0.1.0"

from .core import (
    AgentPrediction,
    FinalDecision,
    LabelSet,
    ManualClock,
    Policy,
    Sample,
    Stage,
    SystemClock,
    canonicalize_label,
    default_label_set,
)
from .trust import ScoredOutcome, TrustProfile, build_trust_profile, trust_score
from .vectorstore import (
    ClassVote,
    EmbeddingRecord,
    RetrievalHit,
    build_index,
    knn_query,
    load_index,
    normalize,
    save_index,
    weighted_vote,
)

__all__ = [
    "AgentPrediction",
    "ClassVote",
    "EmbeddingRecord",
    "FinalDecision",
    "LabelSet",
    "ManualClock",
    "Policy",
    "RetrievalHit",
    "Sample",
    "ScoredOutcome",
    "Stage",
    "SystemClock",
    "TrustProfile",
    "build_index",
    "build_trust_profile",
    "canonicalize_label",
    "default_label_set",
    "knn_query",
    "load_index",
    "normalize",
    "save_index",
    "trust_score",
    "weighted_vote",
]

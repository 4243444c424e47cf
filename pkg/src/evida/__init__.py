"""Evidence-grounded prediction of country-conditioned survey answer distributions."""

from .bank import (
    EvidenceBank,
    GroupKey,
    ItemEvidence,
    SurveyItem,
    build_bank,
    build_item_evidence,
    ingest_respondents,
    load_bank,
    save_bank,
    support,
)
from .inference import InferenceConfig, PredictionResult, run_two_stage
from .retrieval import EvidenceIndex, HashingEncoder, RetrievalQuery, retrieve
from .rewards import RewardWeights, combine, group_advantages, jsd
from .values import (
    LMHSignature,
    Thresholds,
    WelzelProfile,
    discretize_profile,
    discretize_scalar,
    mean_profile,
)

__version__ = "0.1.0"

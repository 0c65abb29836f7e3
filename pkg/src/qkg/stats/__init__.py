from qkg.stats.leakage import (
    CaseClass,
    CaseLabel,
    EvidenceLabel,
    SignalSet,
    adjusted_accuracy,
    classify_case,
    decisive_items,
    detect_signals,
    label_evidence,
    leakage_adjusted_paired_test,
    relabel_unclassified,
)
from qkg.stats.mcnemar import format_p, mcnemar_exact

__all__ = [
    "CaseClass", "CaseLabel", "EvidenceLabel", "SignalSet", "adjusted_accuracy",
    "classify_case", "decisive_items", "detect_signals", "label_evidence",
    "leakage_adjusted_paired_test", "relabel_unclassified", "format_p", "mcnemar_exact",
]

"""policyledger: a deterministic, seedable simulator of automated security
policy compliance, built around a tamper-evident hash-chained ledger, a
policy-as-code rule engine, a CTI classification pipeline and a calibrated
human-team baseline."""

__version__ = "0.1.0"

from .cti import Decision, DecisionKind, ForestModel, ThreatClass, ThreatCategory
from .ledger import Ledger, TransactionRecord, TxKind, WorldState, replay_state, verify_chain
from .metrics import act, build_comparison_report, cer, confidence_interval, paired_t_test, variance_std
from .policy import PolicyDocument, PolicyRule, load_policy_document
from .runner import RunConfig, run_scenario
from .simnet import AnalystTeam, Endpoint, Fleet, NetworkModel, provision_fleet

__all__ = [
    "AnalystTeam",
    "Decision",
    "DecisionKind",
    "Endpoint",
    "Fleet",
    "ForestModel",
    "Ledger",
    "NetworkModel",
    "PolicyDocument",
    "PolicyRule",
    "RunConfig",
    "ThreatCategory",
    "ThreatClass",
    "TransactionRecord",
    "TxKind",
    "WorldState",
    "act",
    "build_comparison_report",
    "cer",
    "confidence_interval",
    "load_policy_document",
    "paired_t_test",
    "provision_fleet",
    "replay_state",
    "run_scenario",
    "variance_std",
    "verify_chain",
]

"""CTI ingestion, feature hashing, stump-forest classification, and the
three-way response decision.

The classifier is a fixed forest of 100 one-feature decision stumps over
a 256-wide hashed feature space: tokens, technique ids and CVE ids hash
into reserved sub-ranges and the CVSS score is binned. Every stump that
fires casts its (severity, category) vote scaled by a per-stump weight;
the feedback loop nudges those weights multiplicatively based on
enforcement outcomes and never touches the stump structure.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Protocol

from .canonical import canonical_json, stable_index
from .errors import FeedSchemaError, InputError, WidthMismatch
from .policy import PolicyRule, RuleSet, query_policies

MODEL_FORMAT = "policyledger-model/1"

FEATURE_WIDTH = 256
# Reserved sub-ranges of the feature vector.
TOKEN_RANGE = (0, 192)
TECHNIQUE_RANGE = (192, 224)
CVE_RANGE = (224, 250)
CVSS_BASE = 250  # five bins, then the absent-CVSS slot
CVSS_ABSENT = 255

SEVERITY_NAMES = {0: "informational", 1: "low", 2: "medium", 3: "high", 4: "critical"}

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ThreatCategory(str, Enum):
    MALWARE = "malware"
    RANSOMWARE = "ransomware"
    EXPLOIT = "exploit"
    PHISHING = "phishing"
    RECON = "recon"
    OTHER = "other"


_CATEGORY_ORDER = {cat.value: i for i, cat in enumerate(ThreatCategory)}


@dataclass(frozen=True)
class ThreatClass:
    severity: int  # 0 informational .. 4 critical
    category: ThreatCategory

    def __post_init__(self):
        if not 0 <= self.severity <= 4:
            raise InputError(f"severity {self.severity} outside 0..4")

    @property
    def severity_name(self) -> str:
        return SEVERITY_NAMES[self.severity]


class DecisionKind(str, Enum):
    NO_ACTION_REQUIRED = "no_action_required"
    IMMEDIATE_ACTION_REQUIRED = "immediate_action_required"
    STANDARD_MITIGATION_REQUIRED = "standard_mitigation_required"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    matched_rule_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class ThreatReport:
    report_id: str
    source: str
    actor: Optional[str]
    technique_ids: tuple[str, ...]
    cve_ids: tuple[str, ...]
    cvss: Optional[float]
    tokens: tuple[str, ...]
    received_at: int


def normalize_tokens(text: str) -> tuple[str, ...]:
    """Lowercase word list with punctuation stripped."""
    return tuple(_TOKEN_RE.findall(text.lower()))


# --------------------------------------------------------------------------
# Feed ingestion


def _parse_item(raw: dict) -> ThreatReport:
    if not isinstance(raw, dict):
        raise ValueError("item is not an object")
    for key, typ in (("report_id", str), ("source", str), ("text", str)):
        if not isinstance(raw.get(key), typ):
            raise ValueError(f"missing or invalid {key}")
    received = raw.get("received_at", 0)
    if not isinstance(received, int) or isinstance(received, bool):
        raise ValueError("received_at must be an integer tick")
    actor = raw.get("actor")
    if actor is not None and not isinstance(actor, str):
        raise ValueError("actor must be a string")
    techniques = raw.get("technique_ids", [])
    cves = raw.get("cve_ids", [])
    if not isinstance(techniques, list) or not isinstance(cves, list):
        raise ValueError("technique_ids/cve_ids must be lists")
    cvss = raw.get("cvss")
    if cvss is not None:
        if isinstance(cvss, bool) or not isinstance(cvss, (int, float)):
            raise ValueError("cvss must be a number")
        cvss = float(cvss)
        if not 0.0 <= cvss <= 10.0:
            raise ValueError(f"cvss {cvss} outside 0..10")
    return ThreatReport(
        report_id=raw["report_id"],
        source=raw["source"],
        actor=actor,
        technique_ids=tuple(str(t).upper() for t in techniques),
        cve_ids=tuple(str(c).upper() for c in cves),
        cvss=cvss,
        tokens=normalize_tokens(raw["text"]),
        received_at=received,
    )


def ingest_feed(raw: str) -> tuple[list[ThreatReport], list[str]]:
    """Parse a feed into normalized reports.

    Malformed items are skipped with one diagnostic each (never a silent
    drop); an unreadable envelope raises FeedSchemaError.
    """
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FeedSchemaError(f"feed envelope is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise FeedSchemaError("feed envelope must be an array of items")
    reports: list[ThreatReport] = []
    diagnostics: list[str] = []
    for i, raw_item in enumerate(data):
        try:
            reports.append(_parse_item(raw_item))
        except ValueError as exc:
            diagnostics.append(f"item[{i}]: {exc}")
    return reports, diagnostics


class FeedClient(Protocol):
    """Pluggable feed source; only a file-backed implementation ships."""

    def fetch(self, url: str) -> str: ...


class FileFeedClient:
    """Resolves feed "URLs" as local paths (fixtures)."""

    def fetch(self, url: str) -> str:
        path = url.removeprefix("file://")
        return Path(path).read_text(encoding="utf-8")


# --------------------------------------------------------------------------
# Feature encoding


def token_feature(token: str) -> int:
    lo, hi = TOKEN_RANGE
    return lo + stable_index(f"tok:{token}", hi - lo)


def technique_feature(technique_id: str) -> int:
    lo, hi = TECHNIQUE_RANGE
    return lo + stable_index(f"tech:{technique_id.upper()}", hi - lo)


def cve_feature(cve_id: str) -> int:
    lo, hi = CVE_RANGE
    return lo + stable_index(f"cve:{cve_id.upper()}", hi - lo)


def cvss_feature(cvss: Optional[float]) -> int:
    if cvss is None:
        return CVSS_ABSENT
    return CVSS_BASE + min(int(cvss / 2.0), 4)


def encode_features(report: ThreatReport) -> list[int]:
    """Pure function report -> fixed-width count vector."""
    fv = [0] * FEATURE_WIDTH
    for token in report.tokens:
        fv[token_feature(token)] += 1
    for tid in report.technique_ids:
        fv[technique_feature(tid)] += 1
    for cid in report.cve_ids:
        fv[cve_feature(cid)] += 1
    fv[cvss_feature(report.cvss)] += 1
    return fv


# --------------------------------------------------------------------------
# Stump forest


@dataclass(frozen=True)
class Stump:
    feature_index: int
    threshold: int
    vote_severity: int
    vote_category: ThreatCategory

    def fires(self, fv: list[int]) -> bool:
        return fv[self.feature_index] > self.threshold


@dataclass(frozen=True)
class ForestModel:
    """Fixed stump structure with mutable-by-replacement vote weights."""

    width: int
    stumps: tuple[Stump, ...]
    weights: tuple[float, ...]
    threshold: int = 3  # severity cutoff for immediate action
    learning_rate: float = 0.05
    weight_floor: float = 0.01
    weight_cap: float = 100.0

    def __post_init__(self):
        if len(self.stumps) != len(self.weights):
            raise InputError("one weight per stump required")
        if any(w < 0 for w in self.weights):
            raise InputError("weights must be non-negative")

    def to_json(self) -> str:
        return canonical_json(
            {
                "format": MODEL_FORMAT,
                "width": self.width,
                "threshold": self.threshold,
                "learning_rate": self.learning_rate,
                "weight_floor": self.weight_floor,
                "weight_cap": self.weight_cap,
                "stumps": [
                    {
                        "feature_index": s.feature_index,
                        "threshold": s.threshold,
                        "vote_severity": s.vote_severity,
                        "vote_category": s.vote_category.value,
                    }
                    for s in self.stumps
                ],
                "weights": list(self.weights),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        data = json.loads(text)
        if data.get("format") != MODEL_FORMAT:
            raise InputError(f"unsupported model format {data.get('format')!r}")
        stumps = tuple(
            Stump(
                feature_index=int(s["feature_index"]),
                threshold=int(s["threshold"]),
                vote_severity=int(s["vote_severity"]),
                vote_category=ThreatCategory(s["vote_category"]),
            )
            for s in data["stumps"]
        )
        return cls(
            width=int(data["width"]),
            stumps=stumps,
            weights=tuple(float(w) for w in data["weights"]),
            threshold=int(data["threshold"]),
            learning_rate=float(data.get("learning_rate", 0.05)),
            weight_floor=float(data.get("weight_floor", 0.01)),
            weight_cap=float(data.get("weight_cap", 100.0)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ForestModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def classify(model: ForestModel, fv: list[int]) -> ThreatClass:
    """Weighted stump vote; ties break toward the higher severity.

    The default when no stump fires is informational/other.
    """
    if len(fv) != model.width:
        raise WidthMismatch(f"vector width {len(fv)} != model width {model.width}")
    totals: dict[tuple[int, str], float] = {}
    for stump, weight in zip(model.stumps, model.weights):
        if stump.fires(fv):
            key = (stump.vote_severity, stump.vote_category.value)
            totals[key] = totals.get(key, 0.0) + weight
    if not totals:
        return ThreatClass(0, ThreatCategory.OTHER)
    # Highest mass wins; ties fail safe to higher severity, then to the
    # earlier category in enum order for determinism.
    best = min(
        totals.items(),
        key=lambda kv: (-kv[1], -kv[0][0], _CATEGORY_ORDER[kv[0][1]]),
    )
    (severity, category), _ = best
    return ThreatClass(severity, ThreatCategory(category))


def decide(matched_policies: list[PolicyRule], threshold: int = 3) -> Decision:
    """Three-way response decision over the matched policy rules."""
    if not matched_policies:
        return Decision(DecisionKind.NO_ACTION_REQUIRED)
    rule_ids = tuple(r.rule_id for r in matched_policies)
    if max(r.severity_weight for r in matched_policies) > threshold:
        return Decision(DecisionKind.IMMEDIATE_ACTION_REQUIRED, rule_ids)
    return Decision(DecisionKind.STANDARD_MITIGATION_REQUIRED, rule_ids)


def update_model(model: ForestModel, predicted: ThreatClass, success: bool) -> ForestModel:
    """Multiplicative feedback on the stumps voting the predicted class.

    Success multiplies their weights by (1 + rate), failure by
    (1 - rate); weights stay clamped and structure never changes.
    """
    factor = 1.0 + model.learning_rate if success else 1.0 - model.learning_rate
    new_weights = []
    for stump, weight in zip(model.stumps, model.weights):
        if (
            stump.vote_severity == predicted.severity
            and stump.vote_category == predicted.category
        ):
            weight = min(model.weight_cap, max(model.weight_floor, weight * factor))
        new_weights.append(weight)
    return replace(model, weights=tuple(new_weights))


# --------------------------------------------------------------------------
# Full pipeline (one pass per feed poll)


@dataclass
class CycleOutcome:
    report: ThreatReport
    threat_class: ThreatClass
    matched: list[PolicyRule]
    decision: Decision
    results: list


def process_threat_intelligence(
    feed_text: str,
    model: ForestModel,
    rules: RuleSet,
    engine,
) -> tuple[list[CycleOutcome], ForestModel, list[str]]:
    """Run one ingest->classify->decide->enforce->learn pass per report.

    Each report is one decision cycle and commits one block through the
    engine. A failed stage aborts that report's cycle only. Returns the
    outcomes, the updated model, and ingest diagnostics.
    """
    reports, diagnostics = ingest_feed(feed_text)
    outcomes: list[CycleOutcome] = []
    for report in reports:
        fv = encode_features(report)
        threat_class = classify(model, fv)
        matched = query_policies(rules, threat_class.severity, report.technique_ids)
        decision = decide(matched, model.threshold)
        plan = engine.execute_decision(decision, matched, threat_class, report)
        results = engine.enforce(plan)
        engine.commit_cycle()
        success = all(r.success for r in results) if results else True
        model = update_model(model, threat_class, success)
        outcomes.append(CycleOutcome(report, threat_class, matched, decision, results))
    return outcomes, model, diagnostics


# --------------------------------------------------------------------------
# Default model fixture


_TOKEN_LEXICON: list[tuple[str, int, ThreatCategory]] = [
    ("ransomware", 4, ThreatCategory.RANSOMWARE),
    ("nokoyawa", 4, ThreatCategory.RANSOMWARE),
    ("encrypting", 3, ThreatCategory.RANSOMWARE),
    ("smbv1", 3, ThreatCategory.EXPLOIT),
    ("exploit", 3, ThreatCategory.EXPLOIT),
    ("exploitation", 3, ThreatCategory.EXPLOIT),
    ("privilege", 3, ThreatCategory.EXPLOIT),
    ("escalation", 3, ThreatCategory.EXPLOIT),
    ("brute", 2, ThreatCategory.RECON),
    ("bruteforce", 2, ThreatCategory.RECON),
    ("advisory", 0, ThreatCategory.OTHER),
    ("informational", 0, ThreatCategory.OTHER),
    ("maintenance", 0, ThreatCategory.OTHER),
    ("ransom", 4, ThreatCategory.RANSOMWARE),
    ("lockbit", 4, ThreatCategory.RANSOMWARE),
    ("wannacry", 4, ThreatCategory.RANSOMWARE),
    ("extortion", 3, ThreatCategory.RANSOMWARE),
    ("wiper", 4, ThreatCategory.RANSOMWARE),
    ("exfiltrated", 3, ThreatCategory.RANSOMWARE),
    ("rce", 4, ThreatCategory.EXPLOIT),
    ("0day", 4, ThreatCategory.EXPLOIT),
    ("eternalblue", 4, ThreatCategory.EXPLOIT),
    ("overflow", 3, ThreatCategory.EXPLOIT),
    ("injection", 3, ThreatCategory.EXPLOIT),
    ("vulnerability", 2, ThreatCategory.EXPLOIT),
    ("cve", 2, ThreatCategory.EXPLOIT),
    ("shellcode", 3, ThreatCategory.EXPLOIT),
    ("deserialization", 3, ThreatCategory.EXPLOIT),
    ("xss", 2, ThreatCategory.EXPLOIT),
    ("sqli", 3, ThreatCategory.EXPLOIT),
    ("heap", 3, ThreatCategory.EXPLOIT),
    ("malware", 3, ThreatCategory.MALWARE),
    ("trojan", 3, ThreatCategory.MALWARE),
    ("botnet", 3, ThreatCategory.MALWARE),
    ("worm", 3, ThreatCategory.MALWARE),
    ("rootkit", 4, ThreatCategory.MALWARE),
    ("loader", 2, ThreatCategory.MALWARE),
    ("apt", 3, ThreatCategory.MALWARE),
    ("infostealer", 3, ThreatCategory.MALWARE),
    ("dropper", 3, ThreatCategory.MALWARE),
    ("payload", 2, ThreatCategory.MALWARE),
    ("spyware", 3, ThreatCategory.MALWARE),
    ("adware", 1, ThreatCategory.MALWARE),
    ("cryptominer", 2, ThreatCategory.MALWARE),
    ("ddos", 3, ThreatCategory.MALWARE),
    ("persistence", 3, ThreatCategory.MALWARE),
    ("packed", 2, ThreatCategory.MALWARE),
    ("evasion", 2, ThreatCategory.MALWARE),
    ("implant", 3, ThreatCategory.MALWARE),
    ("phishing", 2, ThreatCategory.PHISHING),
    ("spearphishing", 3, ThreatCategory.PHISHING),
    ("lure", 1, ThreatCategory.PHISHING),
    ("smishing", 2, ThreatCategory.PHISHING),
    ("bec", 3, ThreatCategory.PHISHING),
    ("impersonation", 2, ThreatCategory.PHISHING),
    ("vishing", 2, ThreatCategory.PHISHING),
    ("pretexting", 2, ThreatCategory.PHISHING),
    ("whaling", 3, ThreatCategory.PHISHING),
    ("typosquatting", 2, ThreatCategory.PHISHING),
    ("quishing", 2, ThreatCategory.PHISHING),
    ("recon", 1, ThreatCategory.RECON),
    ("scanning", 1, ThreatCategory.RECON),
    ("scan", 1, ThreatCategory.RECON),
    ("enumeration", 1, ThreatCategory.RECON),
    ("probe", 1, ThreatCategory.RECON),
    ("sweep", 1, ThreatCategory.RECON),
    ("harvesting", 1, ThreatCategory.RECON),
    ("bulletin", 0, ThreatCategory.OTHER),
    ("newsletter", 0, ThreatCategory.OTHER),
    ("routine", 0, ThreatCategory.OTHER),
    ("notice", 0, ThreatCategory.OTHER),
    ("summary", 0, ThreatCategory.OTHER),
]

_TECHNIQUE_LEXICON: list[tuple[str, int, ThreatCategory]] = [
    ("T1486", 4, ThreatCategory.RANSOMWARE),
    ("T1490", 4, ThreatCategory.RANSOMWARE),
    ("T1021.001", 3, ThreatCategory.EXPLOIT),
    ("T1210", 3, ThreatCategory.EXPLOIT),
    ("T1566", 2, ThreatCategory.PHISHING),
    ("T1595", 1, ThreatCategory.RECON),
    ("T1046", 1, ThreatCategory.RECON),
    ("T1068", 4, ThreatCategory.EXPLOIT),
    ("T1021", 3, ThreatCategory.EXPLOIT),
    ("T1190", 4, ThreatCategory.EXPLOIT),
    ("T1203", 3, ThreatCategory.EXPLOIT),
    ("T1003", 4, ThreatCategory.EXPLOIT),
    ("T1598", 2, ThreatCategory.PHISHING),
    ("T1087", 1, ThreatCategory.RECON),
    ("T1105", 3, ThreatCategory.MALWARE),
    ("T1055", 3, ThreatCategory.MALWARE),
    ("T1078", 3, ThreatCategory.MALWARE),
    ("T1204", 2, ThreatCategory.MALWARE),
    ("T1547", 3, ThreatCategory.MALWARE),
    ("T1071", 3, ThreatCategory.MALWARE),
]

_CVE_LEXICON: list[tuple[str, int, ThreatCategory]] = [
    ("CVE-2023-28252", 4, ThreatCategory.RANSOMWARE),
    ("CVE-2017-0144", 4, ThreatCategory.EXPLOIT),
]

_CVSS_BIN_VOTES = [
    (0, 0, ThreatCategory.OTHER),
    (1, 1, ThreatCategory.OTHER),
    (2, 2, ThreatCategory.OTHER),
    (3, 3, ThreatCategory.OTHER),
    (4, 4, ThreatCategory.OTHER),
]


def build_default_model(stump_count: int = 100) -> ForestModel:
    """Construct the shipped 100-stump fixture forest.

    Stump features come from the same hash mapping the encoder uses; the
    builder asserts the curated features do not collide.
    """
    stumps: list[Stump] = []
    for token, severity, category in _TOKEN_LEXICON:
        stumps.append(Stump(token_feature(token), 0, severity, category))
    for tid, severity, category in _TECHNIQUE_LEXICON:
        stumps.append(Stump(technique_feature(tid), 0, severity, category))
    for cid, severity, category in _CVE_LEXICON:
        stumps.append(Stump(cve_feature(cid), 0, severity, category))
    for bin_idx, severity, category in _CVSS_BIN_VOTES:
        stumps.append(Stump(CVSS_BASE + bin_idx, 0, severity, category))
    stumps.append(Stump(CVSS_ABSENT, 0, 0, ThreatCategory.OTHER))

    seen: dict[int, Stump] = {}
    for stump in stumps:
        if stump.feature_index in seen:
            raise InputError(
                f"fixture feature collision at index {stump.feature_index}"
            )
        seen[stump.feature_index] = stump
    if len(stumps) != stump_count:
        raise InputError(f"fixture defines {len(stumps)} stumps, expected {stump_count}")
    return ForestModel(
        width=FEATURE_WIDTH,
        stumps=tuple(stumps),
        weights=tuple(1.0 for _ in stumps),
    )

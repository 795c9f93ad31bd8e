"""Policy documents, executable compliance rules, and conflict resolution.

Documents are structured JSON (one per file) and compile into predicate
rules over the closed endpoint attribute vocabulary. Rules that reference
an unknown attribute raise AmbiguityError at load time: an ambiguous
policy is a surfaced failure, never a silent skip.

Conflicts between rules that pin the same attribute to different values
are resolved by a weighted matrix: score = 2 * regulatory_importance +
severity_weight, ties to the lexicographically smaller rule id.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .canonical import canonical_json
from .errors import AmbiguityError, InputError, SchemaError

#: Closed attribute set; identical to the simulated endpoint's fields.
ENDPOINT_ATTRIBUTES = (
    "smbv1_enabled",
    "rdp_port",
    "firewall_rules",
    "proxy_outbound_blocked",
    "isolated",
    "patch_level",
    "infected",
)

COMPARATORS = ("equals", "not_equals", "lt", "gt", "in")

ACTION_KINDS = (
    "disable_smbv1",
    "set_rdp_port",
    "update_firewall_rule",
    "update_proxy_rule",
    "isolate_endpoint",
    "revoke_access",
    "update_permissions",
    "apply_patch",
    "update_ids_params",
)

TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(\.\d{3})?$")


@dataclass(frozen=True)
class EnforcementActionSpec:
    """One remediation: an action kind plus kind-specific params and a
    target selector ("all", explicit endpoint ids, or "non_compliant")."""

    kind: str
    params: dict = field(default_factory=dict)
    target_selector: object = "non_compliant"

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise InputError(f"unknown action kind {self.kind!r}")
        if self.kind == "set_rdp_port":
            port = self.params.get("port")
            if not isinstance(port, int) or not 1 <= port <= 65535:
                raise InputError(f"set_rdp_port requires port in 1..65535, got {port!r}")
        if self.kind == "update_firewall_rule":
            for key in ("direction", "target", "verdict"):
                if key not in self.params:
                    raise InputError(f"update_firewall_rule missing param {key!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "target_selector": self.target_selector}


@dataclass(frozen=True)
class Condition:
    attribute: str
    comparator: str
    value: object

    def holds(self, attrs: dict) -> bool:
        observed = attrs.get(self.attribute)
        if self.comparator == "equals":
            return observed == self.value
        if self.comparator == "not_equals":
            return observed != self.value
        if self.comparator == "lt":
            return observed < self.value
        if self.comparator == "gt":
            return observed > self.value
        if self.comparator == "in":
            return observed in self.value
        raise InputError(f"unknown comparator {self.comparator!r}")

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "comparator": self.comparator, "value": self.value}


@dataclass(frozen=True)
class PolicyRule:
    """Executable encoding of one policy condition.

    The condition is a conjunction of attribute comparisons; an endpoint
    is compliant with the rule when every comparison holds.
    """

    rule_id: str
    condition: tuple[Condition, ...]
    severity_weight: int
    regulatory_importance: int
    remediation: EnforcementActionSpec
    technique_tags: tuple[str, ...] = ()
    policy_id: str = ""

    def is_compliant(self, attrs: dict) -> bool:
        return all(cond.holds(attrs) for cond in self.condition)

    def observed(self, attrs: dict) -> dict:
        """The endpoint's actual values for this rule's attributes."""
        return {c.attribute: attrs.get(c.attribute) for c in self.condition}

    def conflict_score(self) -> int:
        # Weighted decision matrix: regulatory importance counts double.
        return 2 * self.regulatory_importance + self.severity_weight

    def pinned_values(self) -> dict:
        """attribute -> required value for equals-conditions (conflict axis)."""
        return {
            c.attribute: c.value for c in self.condition if c.comparator == "equals"
        }

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "condition": [c.to_dict() for c in self.condition],
            "severity_weight": self.severity_weight,
            "regulatory_importance": self.regulatory_importance,
            "remediation": self.remediation.to_dict(),
            "technique_tags": list(self.technique_tags),
        }


@dataclass(frozen=True)
class PolicyDocument:
    policy_id: str
    title: str
    version: int
    source_framework: str
    effective_from: int
    rules: tuple[PolicyRule, ...]

    def to_dict(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "title": self.title,
            "version": self.version,
            "source_framework": self.source_framework,
            "effective_from": self.effective_from,
            "rules": [r.to_dict() for r in self.rules],
        }


# --------------------------------------------------------------------------
# Loading


def _require(data: dict, key: str, typ, path: str):
    if key not in data:
        raise SchemaError(f"{path}.{key}", "missing field")
    value = data[key]
    if typ is int and isinstance(value, bool):
        raise SchemaError(f"{path}.{key}", "expected integer, got boolean")
    if not isinstance(value, typ):
        raise SchemaError(f"{path}.{key}", f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _load_rule(data: dict, path: str, policy_id: str) -> PolicyRule:
    rule_id = _require(data, "rule_id", str, path)
    raw_conditions = _require(data, "condition", list, path)
    if not raw_conditions:
        raise SchemaError(f"{path}.condition", "must not be empty")
    conditions = []
    for i, raw in enumerate(raw_conditions):
        cpath = f"{path}.condition[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(cpath, "expected object")
        attribute = _require(raw, "attribute", str, cpath)
        comparator = _require(raw, "comparator", str, cpath)
        if "value" not in raw:
            raise SchemaError(f"{cpath}.value", "missing field")
        if attribute not in ENDPOINT_ATTRIBUTES:
            raise AmbiguityError(
                f"{cpath}: attribute {attribute!r} is not in the endpoint vocabulary; "
                f"ambiguous conditions are rejected, not skipped"
            )
        if comparator not in COMPARATORS:
            raise SchemaError(f"{cpath}.comparator", f"unknown comparator {comparator!r}")
        conditions.append(Condition(attribute, comparator, raw["value"]))

    severity = _require(data, "severity_weight", int, path)
    importance = _require(data, "regulatory_importance", int, path)
    if not 0 <= severity <= 4:
        raise SchemaError(f"{path}.severity_weight", f"{severity} outside 0..4")
    if not 0 <= importance <= 4:
        raise SchemaError(f"{path}.regulatory_importance", f"{importance} outside 0..4")

    raw_rem = _require(data, "remediation", dict, path)
    kind = _require(raw_rem, "kind", str, f"{path}.remediation")
    try:
        remediation = EnforcementActionSpec(
            kind=kind,
            params=raw_rem.get("params", {}),
            target_selector=raw_rem.get("target_selector", "non_compliant"),
        )
    except InputError as exc:
        raise SchemaError(f"{path}.remediation", str(exc)) from exc

    tags = data.get("technique_tags", [])
    if not isinstance(tags, list):
        raise SchemaError(f"{path}.technique_tags", "expected list")
    for tag in tags:
        if not isinstance(tag, str) or not TECHNIQUE_ID_RE.match(tag):
            raise SchemaError(f"{path}.technique_tags", f"bad technique id {tag!r}")

    return PolicyRule(
        rule_id=rule_id,
        condition=tuple(conditions),
        severity_weight=severity,
        regulatory_importance=importance,
        remediation=remediation,
        technique_tags=tuple(tags),
        policy_id=policy_id,
    )


def load_policy_document(source: str) -> PolicyDocument:
    """Parse and fully validate one policy document from JSON text."""
    try:
        data = json.loads(source)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("$", "document must be an object")

    policy_id = _require(data, "policy_id", str, "$")
    title = _require(data, "title", str, "$")
    version = _require(data, "version", int, "$")
    if version < 1:
        raise SchemaError("$.version", "must be a positive integer")
    framework = _require(data, "source_framework", str, "$")
    effective = _require(data, "effective_from", int, "$")
    raw_rules = _require(data, "rules", list, "$")
    if not raw_rules:
        raise SchemaError("$.rules", "must not be empty")
    known = set(data) - {
        "policy_id", "title", "version", "source_framework", "effective_from", "rules",
    }
    if known:
        raise SchemaError("$", f"unknown fields: {sorted(known)}")

    rules = tuple(
        _load_rule(raw, f"$.rules[{i}]", policy_id)
        for i, raw in enumerate(raw_rules)
    )
    seen_ids = [r.rule_id for r in rules]
    if len(set(seen_ids)) != len(seen_ids):
        raise SchemaError("$.rules", "duplicate rule_id")
    return PolicyDocument(policy_id, title, version, framework, effective, rules)


def load_policy_file(path: str | Path) -> PolicyDocument:
    return load_policy_document(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Encoding and querying


@dataclass(frozen=True)
class RuleSet:
    """Compiled rules in deterministic order: severity desc, rule_id asc."""

    rules: tuple[PolicyRule, ...]

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)


def encode_rules(doc: PolicyDocument) -> tuple[RuleSet, dict]:
    """Compile a document into an ordered rule set plus the canonical
    deploy payload whose digest is stable across runs."""
    ordered = tuple(
        sorted(doc.rules, key=lambda r: (-r.severity_weight, r.rule_id))
    )
    return RuleSet(ordered), doc.to_dict()


def combine_rule_sets(rule_sets: Iterable[RuleSet]) -> RuleSet:
    merged: list[PolicyRule] = []
    for rs in rule_sets:
        merged.extend(rs.rules)
    merged.sort(key=lambda r: (-r.severity_weight, r.rule_id))
    return RuleSet(tuple(merged))


def serialize_document(doc: PolicyDocument) -> str:
    """Canonical single-line form; load(serialize(load(x))) is idempotent."""
    return canonical_json(doc.to_dict())


def query_policies(
    rules: RuleSet, severity: int, technique_ids: Iterable[str] = ()
) -> list[PolicyRule]:
    """Rules relevant to a classified threat.

    Tagged threats match on technique intersection. Untagged threats
    match every rule whose severity weight is at least the threat
    severity — except severity 0 (informational), which matches nothing
    and so drives "no action required".
    """
    tags = set(technique_ids)
    if tags:
        matched = [r for r in rules if tags & set(r.technique_tags)]
    elif severity <= 0:
        matched = []
    else:
        matched = [r for r in rules if r.severity_weight >= severity]
    return sorted(matched, key=lambda r: (-r.severity_weight, r.rule_id))


def resolve_conflicts(candidates: list[PolicyRule]) -> list[PolicyRule]:
    """Keep, per contradicted attribute, the rule with the highest
    weighted-matrix score; output sorted by score desc, rule_id asc.

    Deterministic and idempotent; the result never pins one attribute to
    two different values.
    """
    ranked = sorted(candidates, key=lambda r: (-r.conflict_score(), r.rule_id))
    pinned: dict[str, object] = {}
    kept: list[PolicyRule] = []
    for rule in ranked:
        mine = rule.pinned_values()
        clash = any(attr in pinned and pinned[attr] != val for attr, val in mine.items())
        if clash:
            continue
        pinned.update(mine)
        kept.append(rule)
    return kept


# --------------------------------------------------------------------------
# ATT&CK technique -> mitigation mapping


@dataclass(frozen=True)
class MitigationMapping:
    technique_id: str
    mitigation_id: str
    action: EnforcementActionSpec


class MitigationCatalog:
    """Curated technique -> mitigation fixture (desk-scale, not a full
    ATT&CK ingest)."""

    def __init__(self, mappings: Iterable[MitigationMapping]):
        self.mappings = list(mappings)

    @classmethod
    def from_json(cls, text: str) -> "MitigationCatalog":
        data = json.loads(text)
        if not isinstance(data, list):
            raise SchemaError("$", "mapping fixture must be an array")
        out = []
        for i, raw in enumerate(data):
            path = f"$[{i}]"
            tid = _require(raw, "technique_id", str, path)
            if not TECHNIQUE_ID_RE.match(tid):
                raise SchemaError(f"{path}.technique_id", f"bad technique id {tid!r}")
            mid = _require(raw, "mitigation_id", str, path)
            action_raw = _require(raw, "action", dict, path)
            action = EnforcementActionSpec(
                kind=_require(action_raw, "kind", str, f"{path}.action"),
                params=action_raw.get("params", {}),
                target_selector=action_raw.get("target_selector", "non_compliant"),
            )
            out.append(MitigationMapping(tid, mid, action))
        return cls(out)

    @classmethod
    def from_file(cls, path: str | Path) -> "MitigationCatalog":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def map_technique_to_mitigations(self, technique_id: str) -> list[EnforcementActionSpec]:
        """All mapped actions for a technique; empty when unknown."""
        if not isinstance(technique_id, str) or not TECHNIQUE_ID_RE.match(technique_id):
            raise InputError(f"technique id {technique_id!r} does not match T####(.###)?")
        return [m.action for m in self.mappings if m.technique_id == technique_id]

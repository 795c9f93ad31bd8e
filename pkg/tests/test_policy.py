"""Policy loading, rule encoding, conflict resolution, ATT&CK mapping."""

import json
import random

import pytest

from policyledger.errors import AmbiguityError, InputError, SchemaError
from policyledger.policy import (
    Condition,
    EnforcementActionSpec,
    MitigationCatalog,
    PolicyRule,
    combine_rule_sets,
    encode_rules,
    load_policy_document,
    load_policy_file,
    query_policies,
    resolve_conflicts,
    serialize_document,
)
from policyledger.runner import fixture_path


def make_rule(rule_id, attr="rdp_port", value=33089, severity=2, importance=3,
              kind="set_rdp_port", params=None, tags=()):
    return PolicyRule(
        rule_id=rule_id,
        condition=(Condition(attr, "equals", value),),
        severity_weight=severity,
        regulatory_importance=importance,
        remediation=EnforcementActionSpec(kind=kind, params=params or {"port": value}),
        technique_tags=tuple(tags),
    )


# -- loading -----------------------------------------------------------------


def test_smbv1_fixture_loads_one_disable_rule(smbv1_doc):
    assert len(smbv1_doc.rules) == 1
    rule = smbv1_doc.rules[0]
    assert rule.condition[0] == Condition("smbv1_enabled", "equals", False)
    assert rule.remediation.kind == "disable_smbv1"


def test_rdp_fixture_pins_port_33089(rdp_doc):
    rule = rdp_doc.rules[0]
    assert rule.condition[0] == Condition("rdp_port", "equals", 33089)
    assert rule.remediation.params["port"] == 33089


def test_unknown_attribute_is_an_ambiguity_error(smbv1_doc):
    doc = smbv1_doc.to_dict()
    doc["rules"][0]["condition"][0]["attribute"] = "telnet_banner"
    with pytest.raises(AmbiguityError):
        load_policy_document(json.dumps(doc))


@pytest.mark.parametrize(
    "mutate, path_fragment",
    [
        (lambda d: d.pop("title"), "$.title"),
        (lambda d: d.update(version="one"), "$.version"),
        (lambda d: d.update(version=0), "$.version"),
        (lambda d: d.update(rules=[]), "$.rules"),
        (lambda d: d["rules"][0].pop("severity_weight"), "severity_weight"),
        (lambda d: d["rules"][0].update(severity_weight=9), "severity_weight"),
        (lambda d: d["rules"][0].update(regulatory_importance=-1), "regulatory_importance"),
        (lambda d: d["rules"][0].update(technique_tags=["1021"]), "technique_tags"),
        (lambda d: d.update(extra_field=1), "$"),
        (lambda d: d["rules"][0].update(condition=[]), "condition"),
    ],
)
def test_schema_errors_carry_a_path(smbv1_doc, mutate, path_fragment):
    doc = smbv1_doc.to_dict()
    mutate(doc)
    with pytest.raises(SchemaError) as err:
        load_policy_document(json.dumps(doc))
    assert path_fragment in str(err.value)


def test_duplicate_rule_ids_rejected(smbv1_doc):
    doc = smbv1_doc.to_dict()
    doc["rules"].append(doc["rules"][0])
    with pytest.raises(SchemaError):
        load_policy_document(json.dumps(doc))


def test_bad_port_in_remediation_is_schema_error(rdp_doc):
    doc = rdp_doc.to_dict()
    doc["rules"][0]["remediation"]["params"]["port"] = 99999
    with pytest.raises(SchemaError):
        load_policy_document(json.dumps(doc))


def test_load_serialize_round_trip_is_idempotent(smbv1_doc, rdp_doc, ransomware_doc):
    for doc in (smbv1_doc, rdp_doc, ransomware_doc):
        once = serialize_document(load_policy_document(serialize_document(doc)))
        assert once == serialize_document(doc)


# -- encoding ----------------------------------------------------------------


def test_rule_evaluation_on_endpoint_attrs(smbv1_doc):
    rule = smbv1_doc.rules[0]
    assert not rule.is_compliant({"smbv1_enabled": True})
    assert rule.is_compliant({"smbv1_enabled": False})


def test_encode_orders_by_severity_then_rule_id(smbv1_doc, rdp_doc, ransomware_doc):
    rs = combine_rule_sets([encode_rules(d)[0] for d in (rdp_doc, smbv1_doc, ransomware_doc)])
    # Independent comparator oracle.
    expected = sorted(
        [r for d in (rdp_doc, smbv1_doc, ransomware_doc) for r in d.rules],
        key=lambda r: (-r.severity_weight, r.rule_id),
    )
    assert [r.rule_id for r in rs] == [r.rule_id for r in expected]
    assert [r.severity_weight for r in rs] == sorted(
        [r.severity_weight for r in expected], reverse=True
    )


def test_encode_payload_digest_is_stable(smbv1_doc):
    from policyledger.canonical import digest_value

    _, p1 = encode_rules(smbv1_doc)
    _, p2 = encode_rules(smbv1_doc)
    assert digest_value(p1) == digest_value(p2)


# -- query_policies ------------------------------------------------------------


def test_query_matches_on_technique_intersection(rdp_doc):
    rs, _ = encode_rules(rdp_doc)
    # Set-intersection oracle.
    matched = query_policies(rs, severity=2, technique_ids=["T1021.001"])
    oracle = [r for r in rs if set(r.technique_tags) & {"T1021.001"}]
    assert matched == oracle
    assert [r.rule_id for r in matched] == ["rdp-port-33089"]


def test_query_no_matching_tags_and_severity_zero_is_empty(smbv1_doc):
    rs, _ = encode_rules(smbv1_doc)
    assert query_policies(rs, severity=0, technique_ids=["T9999"]) == []
    assert query_policies(rs, severity=0, technique_ids=[]) == []


def test_untagged_critical_matches_exactly_severity_four_rules(
    smbv1_doc, rdp_doc, ransomware_doc
):
    rs = combine_rule_sets([encode_rules(d)[0] for d in (smbv1_doc, rdp_doc, ransomware_doc)])
    matched = query_policies(rs, severity=4, technique_ids=[])
    oracle = [r for r in rs if r.severity_weight >= 4]  # filter oracle
    assert matched == oracle
    assert all(r.severity_weight == 4 for r in matched)


def test_query_result_is_subset_and_tag_monotone(smbv1_doc, rdp_doc, ransomware_doc):
    rs = combine_rule_sets([encode_rules(d)[0] for d in (smbv1_doc, rdp_doc, ransomware_doc)])
    all_tags = sorted({t for r in rs for t in r.technique_tags})
    rng = random.Random(99)
    for _ in range(200):
        k = rng.randint(1, len(all_tags))
        tags = rng.sample(all_tags, k)
        severity = rng.randint(0, 4)
        result = query_policies(rs, severity, tags)
        assert set(r.rule_id for r in result) <= set(r.rule_id for r in rs)
        # adding one more matching tag never shrinks the result
        extra = rng.choice(all_tags)
        wider = query_policies(rs, severity, tags + [extra])
        assert set(r.rule_id for r in result) <= set(r.rule_id for r in wider)


# -- resolve_conflicts -----------------------------------------------------------


def test_weighted_matrix_prefers_importance():
    # scores: 2*3+2 = 8 vs 2*1+4 = 6 -> the 33089 rule wins
    a = make_rule("keep-33089", value=33089, severity=2, importance=3)
    b = make_rule("want-3390", value=3390, severity=4, importance=1,
                  params={"port": 3390})
    kept = resolve_conflicts([a, b])
    assert [r.rule_id for r in kept] == ["keep-33089"]


def test_single_candidate_is_identity(smbv1_doc):
    rule = smbv1_doc.rules[0]
    assert resolve_conflicts([rule]) == [rule]


def test_equal_scores_break_ties_by_rule_id():
    a = make_rule("b-rule", value=1111, severity=2, importance=3, params={"port": 1111})
    b = make_rule("a-rule", value=2222, severity=2, importance=3, params={"port": 2222})
    kept = resolve_conflicts([a, b])
    assert [r.rule_id for r in kept] == ["a-rule"]


def test_resolve_is_idempotent_and_contradiction_free():
    rng = random.Random(7)
    attrs = ["rdp_port", "patch_level"]
    for _ in range(100):
        candidates = [
            make_rule(
                f"r{i:02d}",
                attr=rng.choice(attrs),
                value=rng.randint(1, 4),
                severity=rng.randint(0, 4),
                importance=rng.randint(0, 4),
                kind="apply_patch",
                params={"level": 1},
            )
            for i in range(rng.randint(1, 8))
        ]
        once = resolve_conflicts(candidates)
        assert resolve_conflicts(once) == once
        pinned = {}
        for rule in once:
            for attr, value in rule.pinned_values().items():
                assert pinned.setdefault(attr, value) == value
        scores = [r.conflict_score() for r in once]
        assert scores == sorted(scores, reverse=True)


# -- mitigation mapping ------------------------------------------------------


@pytest.fixture(scope="module")
def catalog():
    return MitigationCatalog.from_file(fixture_path("attack_mappings.json"))


def test_rdp_technique_maps_to_port_move_and_firewall(catalog):
    actions = catalog.map_technique_to_mitigations("T1021.001")
    assert [a.kind for a in actions] == ["set_rdp_port", "update_firewall_rule"]
    assert actions[0].params["port"] == 33089


def test_unknown_technique_maps_to_nothing(catalog):
    assert catalog.map_technique_to_mitigations("T9999") == []


def test_malformed_technique_id_is_rejected(catalog):
    with pytest.raises(InputError):
        catalog.map_technique_to_mitigations("1021")


def test_every_mapping_resolves_to_a_defined_action_kind(catalog):
    from policyledger.policy import ACTION_KINDS

    assert len(catalog.mappings) >= 15
    for mapping in catalog.mappings:
        assert mapping.action.kind in ACTION_KINDS


def test_fixture_policies_are_mutually_conflict_free(smbv1_doc, rdp_doc, ransomware_doc):
    rules = [r for d in (smbv1_doc, rdp_doc, ransomware_doc) for r in d.rules]
    assert resolve_conflicts(rules) == sorted(
        rules, key=lambda r: (-r.conflict_score(), r.rule_id)
    )


def test_comparator_semantics():
    assert Condition("patch_level", "gt", 2).holds({"patch_level": 3})
    assert not Condition("patch_level", "gt", 2).holds({"patch_level": 2})
    assert Condition("patch_level", "lt", 2).holds({"patch_level": 1})
    assert Condition("rdp_port", "not_equals", 3389).holds({"rdp_port": 33089})
    assert Condition("rdp_port", "in", [33089, 40000]).holds({"rdp_port": 33089})
    assert not Condition("rdp_port", "in", [33089, 40000]).holds({"rdp_port": 3389})

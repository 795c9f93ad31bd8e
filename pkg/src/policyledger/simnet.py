"""Discrete-event endpoint fleet with seeded, replayable randomness.

Time is an integer millisecond clock advanced only by the scenario
engine; nothing in the package reads the wall clock. All randomness is
derived from one master seed through per-endpoint substreams, so adding
an endpoint never perturbs another endpoint's draws and identical seeds
replay to byte-identical results.

The automated arm dispatches an enforcement plan to every target in
parallel: each endpoint draws its own apply latency and failure from its
substream, so an endpoint's enforcement time equals its own draw. The
human baseline is a five-analyst team working per-endpoint tasks from
individual queues; task durations are lognormal scaled by role speed,
errors are Bernoulli scaled by role error propensity, and completion
ticks accumulate along each analyst's queue.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional

from .canonical import substream
from .errors import InputError, UnknownEndpoint
from .policy import ENDPOINT_ATTRIBUTES, EnforcementActionSpec


class SimClock:
    """Monotone integer millisecond clock."""

    def __init__(self, start: int = 0):
        self._now = start

    @property
    def now(self) -> int:
        return self._now

    def advance(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise InputError("clock cannot move backwards")
        self._now += delta_ms
        return self._now

    def advance_to(self, tick: int) -> int:
        self._now = max(self._now, tick)
        return self._now


@dataclass
class Endpoint:
    """Simulated host configuration; the attribute set is closed and is
    exactly the policy condition vocabulary."""

    endpoint_id: str
    smbv1_enabled: bool = True
    rdp_port: int = 3389
    firewall_rules: list = field(default_factory=list)
    proxy_outbound_blocked: bool = False
    isolated: bool = False
    patch_level: int = 0
    infected: bool = False

    def attrs(self) -> dict:
        out = asdict(self)
        out.pop("endpoint_id")
        out["firewall_rules"] = [list(r) for r in self.firewall_rules]
        return out


class Fleet:
    """Ordered endpoint collection plus a log of every enforcement-driven
    attribute mutation (the audit-completeness ground truth)."""

    def __init__(self, endpoints: Iterable[Endpoint]):
        self._endpoints: dict[str, Endpoint] = {}
        for ep in endpoints:
            if ep.endpoint_id in self._endpoints:
                raise InputError(f"duplicate endpoint id {ep.endpoint_id}")
            self._endpoints[ep.endpoint_id] = ep
        self.mutation_log: list[dict] = []

    def __len__(self) -> int:
        return len(self._endpoints)

    def __contains__(self, endpoint_id: str) -> bool:
        return endpoint_id in self._endpoints

    def ids(self) -> list[str]:
        return sorted(self._endpoints)

    def get(self, endpoint_id: str) -> Endpoint:
        try:
            return self._endpoints[endpoint_id]
        except KeyError:
            raise UnknownEndpoint(endpoint_id) from None

    def endpoints(self) -> list[Endpoint]:
        return [self._endpoints[eid] for eid in self.ids()]

    def record_mutation(self, endpoint_id: str, attribute: str, value, tick: int, cause: str):
        self.mutation_log.append(
            {
                "endpoint_id": endpoint_id,
                "attribute": attribute,
                "value": value,
                "tick": tick,
                "cause": cause,
            }
        )


def provision_fleet(n: int = 60, profile: Optional[dict] = None) -> Fleet:
    """n identically configured endpoints: SMBv1 on, RDP on 3389, clean."""
    if n < 1:
        raise InputError(f"fleet size must be >= 1, got {n}")
    overrides = profile or {}
    unknown = set(overrides) - set(ENDPOINT_ATTRIBUTES)
    if unknown:
        raise InputError(f"unknown endpoint attributes in profile: {sorted(unknown)}")
    endpoints = []
    for i in range(n):
        ep = Endpoint(endpoint_id=f"ep-{i:03d}")
        for attr, value in overrides.items():
            setattr(ep, attr, copy.deepcopy(value))
        endpoints.append(ep)
    return Fleet(endpoints)


def snapshot(fleet: Fleet) -> dict:
    """Deep, immutable-by-copy view: endpoint id -> attribute dict."""
    return {eid: copy.deepcopy(fleet.get(eid).attrs()) for eid in fleet.ids()}


# --------------------------------------------------------------------------
# Network model


def _check_prob(name: str, p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise InputError(f"{name} must be in [0,1], got {p}")
    return p


@dataclass
class NetworkModel:
    """Latency/failure parameters for both arms.

    Automated latencies are base + uniform jitter per endpoint; the bases
    are calibrated so a default run's mean enforcement times land on the
    reference aggregates (about 194 s for the SMBv1 hardening and 321 s
    for the RDP move). Human task times are lognormal around a per-task
    median with sigma 0.35, about 28 min for SMBv1 work and 38 min for
    RDP work, with per-task error probabilities 0.15 / 0.20.
    """

    auto_base_ms: int = 194_000
    auto_base_by_kind: dict = field(
        default_factory=lambda: {"set_rdp_port": 321_000}
    )
    auto_jitter_ms: int = 500
    auto_failure_prob: float = 0.02
    human_median_ms: int = 1_680_000  # 28 min
    human_median_ms_by_kind: dict = field(
        default_factory=lambda: {"set_rdp_port": 2_280_000}  # 38 min
    )
    human_sigma_log: float = 0.35
    human_error_prob: float = 0.15
    human_error_prob_by_kind: dict = field(
        default_factory=lambda: {"set_rdp_port": 0.20}
    )
    seed: int = 42

    def __post_init__(self):
        _check_prob("auto_failure_prob", self.auto_failure_prob)
        _check_prob("human_error_prob", self.human_error_prob)
        for kind, p in self.human_error_prob_by_kind.items():
            _check_prob(f"human_error_prob_by_kind[{kind}]", p)
        for name, value in (
            ("auto_base_ms", self.auto_base_ms),
            ("human_median_ms", self.human_median_ms),
        ):
            if value <= 0:
                raise InputError(f"{name} must be positive")
        if self.auto_jitter_ms < 0 or self.auto_jitter_ms >= self.auto_base_ms:
            raise InputError("auto_jitter_ms must be in [0, auto_base_ms)")

    def auto_base_for(self, kind: str) -> int:
        return int(self.auto_base_by_kind.get(kind, self.auto_base_ms))

    def human_median_for(self, kind: str) -> int:
        return int(self.human_median_ms_by_kind.get(kind, self.human_median_ms))

    def human_error_for(self, kind: str) -> float:
        return float(self.human_error_prob_by_kind.get(kind, self.human_error_prob))


@dataclass(frozen=True)
class ApplyResult:
    endpoint_id: str
    action_kind: str
    outcome: str  # "success" | "failure"
    failure_reason: Optional[str]
    duration_ms: int
    finished_at: int
    applied: dict = field(default_factory=dict)  # attribute -> new value

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_dict(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "action_kind": self.action_kind,
            "outcome": self.outcome,
            "failure_reason": self.failure_reason,
            "duration_ms": self.duration_ms,
            "finished_at": self.finished_at,
            "applied": self.applied,
        }


# --------------------------------------------------------------------------
# Applying actions


def _mutate(fleet: Fleet, ep: Endpoint, action: EnforcementActionSpec, tick: int, cause: str) -> dict:
    """Apply the action's attribute write; returns {attribute: new value}
    for the ledger. Unmodeled kinds succeed without touching state."""
    kind = action.kind
    applied: dict = {}

    def write(attr: str, value):
        setattr(ep, attr, value)
        applied[attr] = value
        fleet.record_mutation(ep.endpoint_id, attr, value, tick, cause)

    if kind == "disable_smbv1":
        write("smbv1_enabled", False)
    elif kind == "set_rdp_port":
        write("rdp_port", int(action.params["port"]))
    elif kind == "update_firewall_rule":
        rule = [
            str(action.params["direction"]),
            str(action.params["target"]),
            str(action.params["verdict"]),
        ]
        new_rules = [list(r) for r in ep.firewall_rules] + [rule]
        write("firewall_rules", new_rules)
        # An outbound deny-all is what "outbound blocked" means here.
        if rule[0] == "outbound" and rule[1] == "*" and rule[2] == "deny":
            write("proxy_outbound_blocked", True)
    elif kind == "update_proxy_rule":
        write("proxy_outbound_blocked", bool(action.params.get("blocked", True)))
    elif kind == "isolate_endpoint":
        write("isolated", bool(action.params.get("isolated", True)))
    elif kind == "apply_patch":
        write("patch_level", int(action.params.get("level", ep.patch_level + 1)))
    # revoke_access / update_permissions / update_ids_params have no
    # modeled endpoint attribute; the result record is still audited.
    return applied


def apply_action(
    fleet: Fleet,
    endpoint_id: str,
    action: EnforcementActionSpec,
    net: NetworkModel,
    stream,
    issued_at: int,
    cause: str = "enforce",
) -> ApplyResult:
    """Apply one action to one endpoint using that endpoint's substream.

    Draw order is fixed (latency, then failure). On failure the endpoint
    state is left bit-identical. Isolated endpoints reject everything
    except un-isolation.
    """
    ep = fleet.get(endpoint_id)
    base = net.auto_base_for(action.kind)
    jitter = stream.randint(-net.auto_jitter_ms, net.auto_jitter_ms) if net.auto_jitter_ms else 0
    duration = max(1, base + jitter)
    failed = stream.random() < net.auto_failure_prob

    unisolating = action.kind == "isolate_endpoint" and action.params.get("isolated") is False
    if ep.isolated and not unisolating:
        return ApplyResult(endpoint_id, action.kind, "failure", "isolated", duration, issued_at + duration)
    if failed:
        return ApplyResult(endpoint_id, action.kind, "failure", "apply-error", duration, issued_at + duration)
    applied = _mutate(fleet, ep, action, issued_at + duration, cause)
    return ApplyResult(endpoint_id, action.kind, "success", None, duration, issued_at + duration, applied)


# --------------------------------------------------------------------------
# Threat injection


@dataclass(frozen=True)
class ThreatScenario:
    """Synthetic exploitation event; defaults mirror the ransomware case
    (privilege-escalation CVE, high severity, impact techniques)."""

    affected_ids: tuple[str, ...]
    technique_ids: tuple[str, ...] = ("T1486", "T1490")
    cve_ids: tuple[str, ...] = ("CVE-2023-28252",)
    cvss: float = 7.8
    actor: str = "ransomware-affiliate"
    text: str = "ransomware intrusion encrypting hosts after privilege escalation"


def inject_threat(fleet: Fleet, scenario: ThreatScenario, tick: int) -> Optional[dict]:
    """Mark the affected endpoints infected and emit one threat alert.

    Returns the alert body (consumed by the engine as a ThreatAlert event
    and a synthetic threat report), or None for an empty affected set.
    """
    if not scenario.affected_ids:
        return None
    for eid in scenario.affected_ids:
        if eid not in fleet:
            raise UnknownEndpoint(eid)
    for eid in scenario.affected_ids:
        ep = fleet.get(eid)
        ep.infected = True
    return {
        "report_id": "injected-threat",
        "affected": sorted(scenario.affected_ids),
        "technique_ids": list(scenario.technique_ids),
        "cve_ids": list(scenario.cve_ids),
        "cvss": scenario.cvss,
        "actor": scenario.actor,
        "text": scenario.text,
        "occurred_at": tick,
    }


# --------------------------------------------------------------------------
# Human baseline


@dataclass(frozen=True)
class Analyst:
    name: str
    role: str  # lead | senior | junior
    speed_multiplier: float
    error_multiplier: float

    def __post_init__(self):
        if self.speed_multiplier <= 0 or self.error_multiplier <= 0:
            raise InputError("analyst multipliers must be positive")


DEFAULT_ROLE_SPEED = {"lead": 0.9, "senior": 1.0, "junior": 1.3}
DEFAULT_ROLE_ERROR = {"lead": 0.8, "senior": 1.0, "junior": 1.4}


@dataclass(frozen=True)
class AnalystTeam:
    """Five-member team: one lead, two senior, two junior analysts.

    The lead assigns endpoint tasks weighted-round-robin by role speed
    (faster roles take proportionally more tasks); members then work
    their queues in parallel on the simulated clock.
    """

    members: tuple[Analyst, ...]

    @classmethod
    def default(
        cls,
        role_speed: Optional[dict] = None,
        role_error: Optional[dict] = None,
    ) -> "AnalystTeam":
        speed = {**DEFAULT_ROLE_SPEED, **(role_speed or {})}
        error = {**DEFAULT_ROLE_ERROR, **(role_error or {})}
        roster = [
            ("lead-1", "lead"),
            ("senior-1", "senior"),
            ("senior-2", "senior"),
            ("junior-1", "junior"),
            ("junior-2", "junior"),
        ]
        return cls(
            tuple(
                Analyst(name, role, speed[role], error[role]) for name, role in roster
            )
        )

    @classmethod
    def uniform(cls, role: str, count: int = 5) -> "AnalystTeam":
        """Variant roster for sensitivity runs (e.g. junior-only)."""
        return cls(
            tuple(
                Analyst(f"{role}-{i + 1}", role, DEFAULT_ROLE_SPEED[role], DEFAULT_ROLE_ERROR[role])
                for i in range(count)
            )
        )

    def assign(self, task_count: int) -> list[int]:
        """Task index -> member index, weighted round-robin by speed."""
        counts = [0] * len(self.members)
        out = []
        for _ in range(task_count):
            pick = min(
                range(len(self.members)),
                key=lambda i: ((counts[i] + 1) * self.members[i].speed_multiplier, i),
            )
            counts[pick] += 1
            out.append(pick)
        return out


def run_human_process(
    plan: list[tuple[str, EnforcementActionSpec]],
    team: AnalystTeam,
    net: NetworkModel,
    master_seed: int,
    fleet: Fleet,
    issued_at: int,
) -> list[ApplyResult]:
    """Execute an enforcement plan with the analyst team.

    Each task's duration is its analyst's hands-on time (lognormal draw
    scaled by role speed); completion ticks accumulate along each
    analyst's queue, so finished_at reflects queueing delay while the
    duration itself does not. Misconfiguration errors leave the endpoint
    unchanged. Results are returned in plan order.
    """
    if not plan:
        raise InputError("human process requires a non-empty plan")
    assignment = team.assign(len(plan))
    busy_until = [issued_at] * len(team.members)
    results: list[ApplyResult] = []
    for task_idx, (endpoint_id, action) in enumerate(plan):
        member = team.members[assignment[task_idx]]
        stream = substream(master_seed, "human", endpoint_id, action.kind)
        median = net.human_median_for(action.kind)
        draw = stream.lognormvariate(math.log(median), net.human_sigma_log)
        duration = max(1, int(round(draw * member.speed_multiplier)))
        err_p = min(1.0, net.human_error_for(action.kind) * member.error_multiplier)
        errored = stream.random() < err_p

        member_idx = assignment[task_idx]
        finished = busy_until[member_idx] + duration
        busy_until[member_idx] = finished

        ep = fleet.get(endpoint_id)
        unisolating = action.kind == "isolate_endpoint" and action.params.get("isolated") is False
        if ep.isolated and not unisolating:
            results.append(
                ApplyResult(endpoint_id, action.kind, "failure", "isolated", duration, finished)
            )
        elif errored:
            results.append(
                ApplyResult(endpoint_id, action.kind, "failure", "misconfiguration", duration, finished)
            )
        else:
            applied = _mutate(fleet, ep, action, finished, "human")
            results.append(
                ApplyResult(endpoint_id, action.kind, "success", None, duration, finished, applied)
            )
    return results

"""Community authorization: VO rights, signed assertions, and policy intersection.

A virtual organization keeps a store of rights granted to its members and
issues short-lived signed assertions stating a subset of them. A resource
combines those assertions with its own local policy: the effective rights are
the intersection, and the resource always stays the final authority (a
request the local policy does not cover is denied no matter what the VO
says).

Right patterns are either exact resource strings or prefixes ending in a
single trailing ``*``.
"""

from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass
from typing import Iterable, Mapping

from . import encoding
from .credstore import (
    Certificate,
    CredentialSet,
    TrustAnchorStore,
    ValidatedIdentity,
    chain_from_doc,
    chain_to_doc,
    now_seconds,
    sign_bytes,
    validate_chain,
    verify_bytes,
)
from .errors import (
    AssertionExpired,
    AssertionInvalid,
    MalformedDocument,
    MalformedRight,
    NoRightsGranted,
)

DEFAULT_ASSERTION_LIFETIME = 600  # seconds

VO_KEY_PREFIX = "VO:"

REASON_GRANTED = "Granted"
REASON_DENIED_LOCAL = "DeniedLocal"
REASON_DENIED_VO = "DeniedVO"
REASON_ASSERTION_EXPIRED = "AssertionExpired"
REASON_ASSERTION_INVALID = "AssertionInvalid"
REASON_NO_ASSERTION = "NoAssertion"


@dataclass(frozen=True)
class Right:
    """(resource pattern, action) pair; pattern wildcards are trailing-* only."""

    resource: str
    action: str

    def validate(self) -> "Right":
        if not self.resource or not self.action:
            raise MalformedRight("resource and action must be nonempty")
        if "*" in self.resource[:-1]:
            raise MalformedRight(f"interior wildcard in {self.resource!r}")
        if any(ch.isspace() for ch in self.resource + self.action):
            raise MalformedRight("rights must not contain whitespace")
        return self

    def matches(self, request: "Right") -> bool:
        """Does this granted right cover a concrete request?"""
        if self.action != request.action:
            return False
        if self.resource.endswith("*"):
            return request.resource.startswith(self.resource[:-1])
        return self.resource == request.resource

    def to_doc(self) -> dict:
        return {"resource": self.resource, "action": self.action}

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "Right":
        m = encoding.expect_map(doc, {"resource", "action"})
        return cls(resource=str(m["resource"]), action=str(m["action"])).validate()


def match_any(granted: Iterable[Right], request: Right) -> bool:
    return any(r.matches(request) for r in granted)


@dataclass(frozen=True)
class CasAssertion:
    """Signed statement of a subject's rights within a VO."""

    subject: str
    vo_name: str
    rights: tuple[Right, ...]
    not_before: int
    not_after: int
    signature: bytes = b""

    def body_doc(self) -> dict:
        return {
            "subject": self.subject,
            "vo_name": self.vo_name,
            "rights": [r.to_doc() for r in sorted(self.rights, key=lambda r: (r.resource, r.action))],
            "not_before": self.not_before,
            "not_after": self.not_after,
        }

    def body_bytes(self) -> bytes:
        return encoding.encode(self.body_doc())

    def to_doc(self) -> dict:
        doc = self.body_doc()
        doc["signature"] = self.signature
        return doc

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "CasAssertion":
        try:
            m = encoding.expect_map(
                doc, {"subject", "vo_name", "rights", "not_before", "not_after", "signature"}
            )
            rights = m["rights"]
            if not isinstance(rights, list):
                raise MalformedDocument("rights must be an array")
            return cls(
                subject=str(m["subject"]),
                vo_name=str(m["vo_name"]),
                rights=tuple(Right.from_doc(r) for r in rights),
                not_before=int(m["not_before"]),
                not_after=int(m["not_after"]),
                signature=bytes(m["signature"]),
            )
        except (TypeError, ValueError, MalformedDocument, MalformedRight) as exc:
            raise AssertionInvalid(f"bad assertion document: {exc}") from exc


class VoPolicyStore:
    """Rights granted by one VO, keyed by grid identity.

    Reads take a consistent snapshot; administrative writes are serialized.
    """

    def __init__(self, vo_name: str, grants: Mapping[str, Iterable[Right]] | None = None):
        self.vo_name = vo_name
        self._grants: dict[str, set[Right]] = {}
        self._lock = threading.RLock()
        for identity, rights in (grants or {}).items():
            for right in rights:
                self.grant(identity, right)

    def grant(self, subject: str, right: Right) -> None:
        right.validate()
        with self._lock:
            self._grants.setdefault(subject, set()).add(right)

    def revoke(self, subject: str, right: Right) -> None:
        right.validate()
        with self._lock:
            rights = self._grants.get(subject)
            if rights is not None:
                rights.discard(right)
                if not rights:
                    del self._grants[subject]

    def grants_for(self, subject: str) -> frozenset[Right]:
        with self._lock:
            return frozenset(self._grants.get(subject, ()))

    def snapshot(self) -> dict[str, frozenset[Right]]:
        with self._lock:
            return {k: frozenset(v) for k, v in self._grants.items()}

    def save(self, path: str) -> None:
        with self._lock:
            lines = []
            for identity in sorted(self._grants):
                for right in sorted(self._grants[identity], key=lambda r: (r.resource, r.action)):
                    lines.append(f"{identity} {right.resource} {right.action}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path: str, vo_name: str) -> "VoPolicyStore":
        store = cls(vo_name)
        for identity, right in read_rights_lines(open(path, encoding="utf-8").read()):
            store.grant(identity, right)
        return store


def read_rights_lines(text: str) -> list[tuple[str, Right]]:
    """Parse `<identity-or-VO:key> <resource> <action>` lines.

    Identities may contain spaces, so the resource and action are taken from
    the right-hand end of each line.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.rsplit(None, 2)
        if len(parts) != 3:
            raise MalformedRight(f"line {lineno}: expected '<key> <resource> <action>'")
        identity, resource, action = parts
        out.append((identity, Right(resource=resource, action=action).validate()))
    return out


def parse_local_policy(text: str) -> dict[str, set[Right]]:
    """Local policy file: same grammar, keys either grid identities or VO:<name>."""
    policy: dict[str, set[Right]] = {}
    for key, right in read_rights_lines(text):
        policy.setdefault(key, set()).add(right)
    return policy


# -- issuance and verification -----------------------------------------------------


def cas_issue(
    store: VoPolicyStore,
    requester: ValidatedIdentity,
    requested: Iterable[Right] | None,
    validity: tuple[int, int],
    cas_cred: CredentialSet,
) -> CasAssertion:
    """Issue an assertion for an authenticated requester.

    The rights set is the requester's grants intersected with the requested
    set (all grants when no subset is requested).
    """
    granted = store.grants_for(requester.effective_identity)
    if requested is None:
        rights = granted
    else:
        rights = granted & {r.validate() for r in requested}
    if not rights:
        raise NoRightsGranted(f"no rights for {requester.effective_identity!r}")
    not_before, not_after = validity
    assertion = CasAssertion(
        subject=requester.effective_identity,
        vo_name=store.vo_name,
        rights=tuple(sorted(rights, key=lambda r: (r.resource, r.action))),
        not_before=not_before,
        not_after=not_after,
    )
    signature = sign_bytes(cas_cred.private_key, assertion.body_bytes())
    return dataclasses.replace(assertion, signature=signature)


def cas_verify(
    assertion: CasAssertion,
    cas_chain: tuple[Certificate, ...],
    *,
    now: int | None = None,
    anchors: TrustAnchorStore | None = None,
) -> frozenset[Right]:
    """Check an assertion against the issuing service's chain (pinned, or
    validated against a trust store when one is given); returns its rights."""
    now = now_seconds() if now is None else now
    if anchors is not None:
        validate_chain(cas_chain, anchors, now)
    if not assertion.rights:
        raise AssertionInvalid("assertion carries no rights")
    if not verify_bytes(cas_chain[-1].subject_public_key, assertion.body_bytes(), assertion.signature):
        raise AssertionInvalid("assertion signature does not verify")
    if not (assertion.not_before <= now < assertion.not_after):
        raise AssertionExpired(f"assertion window [{assertion.not_before}, {assertion.not_after}) at {now}")
    return frozenset(assertion.rights)


@dataclass(frozen=True)
class PolicyDecision:
    allowed: bool
    reason: str

    def __post_init__(self):
        if self.allowed and self.reason != REASON_GRANTED:
            raise ValueError("allowed decisions must carry the Granted reason")


def authorize(
    local_policy: Mapping[str, Iterable[Right]],
    assertion: CasAssertion | None,
    requester: ValidatedIdentity,
    request: Right,
    *,
    cas_chain: tuple[Certificate, ...] | None = None,
    now: int | None = None,
) -> PolicyDecision:
    """Resource-side decision combining local policy with VO policy.

    Local policy keys are grid identities or ``VO:<name>`` wildcard entries.
    A requester-specific entry grants on its own; a VO entry additionally
    requires a valid assertion from that VO covering the request, so the
    effective rights are the local/VO intersection. Decisions are returned,
    never raised.
    """
    now = now_seconds() if now is None else now
    specific = local_policy.get(requester.effective_identity, ())
    if match_any(specific, request):
        return PolicyDecision(True, REASON_GRANTED)
    vo_names = {
        key[len(VO_KEY_PREFIX):]
        for key, rights in local_policy.items()
        if key.startswith(VO_KEY_PREFIX) and match_any(rights, request)
    }
    if not vo_names:
        return PolicyDecision(False, REASON_DENIED_LOCAL)
    if assertion is None:
        return PolicyDecision(False, REASON_NO_ASSERTION)
    if assertion.vo_name not in vo_names:
        return PolicyDecision(False, REASON_NO_ASSERTION)
    if cas_chain is None:
        return PolicyDecision(False, REASON_ASSERTION_INVALID)
    try:
        vo_rights = cas_verify(assertion, cas_chain, now=now)
    except AssertionExpired:
        return PolicyDecision(False, REASON_ASSERTION_EXPIRED)
    except AssertionInvalid:
        return PolicyDecision(False, REASON_ASSERTION_INVALID)
    if assertion.subject != requester.effective_identity:
        return PolicyDecision(False, REASON_ASSERTION_INVALID)
    if match_any(vo_rights, request):
        return PolicyDecision(True, REASON_GRANTED)
    return PolicyDecision(False, REASON_DENIED_VO)

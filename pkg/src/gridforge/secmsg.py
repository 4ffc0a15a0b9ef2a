"""Message-level security.

Two modes of protection:

* stateless signed envelopes, self-contained and verifiable without any prior
  exchange (the recipient may not even exist when the message is signed);
* stateful security contexts established by a three-token handshake
  (hello / hello-reply / finish) that mutually authenticates both parties and
  derives fresh direction keys from an ephemeral key agreement, after which
  messages are integrity-protected (and optionally encrypted) with strict
  sequence numbering.

A context also supports in-band delegation: the peer generates a keypair,
sends the public half over the protected channel, and receives back a proxy
certificate chain; the private key never crosses the wire.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import threading
from dataclasses import dataclass

from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives import hashes
from cryptography.exceptions import InvalidTag

from . import encoding
from .credstore import (
    Certificate,
    CredentialSet,
    TrustAnchorStore,
    ValidatedIdentity,
    chain_from_doc,
    chain_to_doc,
    describe_credential,
    generate_keypair,
    issue_proxy_certificate,
    now_seconds,
    public_key_for,
    sign_bytes,
    validate_chain,
    verify_bytes,
)
from .errors import (
    AuthTagInvalid,
    ContextClosed,
    ContextNotEstablished,
    CredentialExpired,
    DelegationDepthExhausted,
    GridForgeError,
    MalformedDocument,
    MalformedEnvelope,
    NoSatisfyingCredential,
    ReplayDetected,
    SequenceViolation,
    StaleTimestamp,
    SignatureInvalid,
    TranscriptMismatch,
)

DEFAULT_SKEW = 300        # +/- seconds an envelope timestamp may deviate
DEFAULT_NONCE_TTL = 600   # seconds a seen nonce is retained

MODE_STATELESS = "StatelessSigned"
MODE_CONTEXT = "Context"

_ENVELOPE_FIELDS = {"payload", "signer_chain", "timestamp", "nonce", "target_hint", "signature"}
_PROTECTED_FIELDS = {"context_id", "seq", "body", "auth_tag", "confidential"}


# -- stateless envelopes ---------------------------------------------------------


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    signer_chain: tuple[Certificate, ...]
    timestamp: int
    nonce: bytes
    signature: bytes
    target_hint: str | None = None

    def to_doc(self) -> dict:
        return {
            "payload": self.payload,
            "signer_chain": chain_to_doc(self.signer_chain),
            "timestamp": self.timestamp,
            "nonce": self.nonce,
            "target_hint": self.target_hint,
            "signature": self.signature,
        }

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "SignedEnvelope":
        try:
            m = encoding.expect_map(doc, _ENVELOPE_FIELDS)
            hint = m["target_hint"]
            if hint is not None and not isinstance(hint, str):
                raise MalformedDocument("target_hint must be a string or none")
            return cls(
                payload=bytes(m["payload"]),
                signer_chain=chain_from_doc(m["signer_chain"]),
                timestamp=int(m["timestamp"]),
                nonce=bytes(m["nonce"]),
                signature=bytes(m["signature"]),
                target_hint=hint,
            )
        except (TypeError, ValueError, MalformedDocument) as exc:
            raise MalformedEnvelope(f"bad envelope: {exc}") from exc


def _envelope_signing_bytes(payload: bytes, timestamp: int, nonce: bytes, target_hint: str | None) -> bytes:
    return encoding.encode({
        "payload": payload,
        "timestamp": timestamp,
        "nonce": nonce,
        "target_hint": target_hint,
    })


def sign_envelope(
    cred: CredentialSet,
    payload: bytes,
    target_hint: str | None = None,
    *,
    now: int | None = None,
) -> SignedEnvelope:
    now = now_seconds() if now is None else now
    if not cred.valid_at(now):
        raise CredentialExpired(f"{cred.leaf.subject!r} not valid at {now}")
    nonce = os.urandom(16)
    signature = sign_bytes(cred.private_key, _envelope_signing_bytes(payload, now, nonce, target_hint))
    return SignedEnvelope(
        payload=payload,
        signer_chain=cred.chain,
        timestamp=now,
        nonce=nonce,
        signature=signature,
        target_hint=target_hint,
    )


class ReplayCache:
    """Bounded-memory nonce cache; safe under concurrent verification."""

    def __init__(self, ttl: int = DEFAULT_NONCE_TTL):
        self.ttl = ttl
        self._seen: dict[bytes, int] = {}
        self._lock = threading.Lock()

    def check_and_store(self, nonce: bytes, now: int) -> bool:
        """True if fresh (and records it); False if already seen."""
        with self._lock:
            cutoff = now - self.ttl
            if len(self._seen) > 1024:
                for key in [k for k, t in self._seen.items() if t < cutoff]:
                    del self._seen[key]
            seen_at = self._seen.get(nonce)
            if seen_at is not None and seen_at >= cutoff:
                return False
            self._seen[nonce] = now
            return True


def verify_envelope(
    env: SignedEnvelope,
    anchors: TrustAnchorStore,
    replay_cache: ReplayCache | None,
    *,
    now: int | None = None,
    skew: int = DEFAULT_SKEW,
) -> tuple[bytes, ValidatedIdentity]:
    """Validate chain, signature, freshness, and nonce uniqueness; returns (payload, signer)."""
    now = now_seconds() if now is None else now
    who = validate_chain(env.signer_chain, anchors, now)
    message = _envelope_signing_bytes(env.payload, env.timestamp, env.nonce, env.target_hint)
    if not verify_bytes(env.signer_chain[-1].subject_public_key, message, env.signature):
        raise SignatureInvalid(detail="envelope signature does not verify")
    if abs(now - env.timestamp) > skew:
        raise StaleTimestamp(f"timestamp {env.timestamp} outside +/-{skew}s of {now}")
    if replay_cache is not None and not replay_cache.check_and_store(env.nonce, now):
        raise ReplayDetected("envelope nonce already accepted")
    return env.payload, who


# -- security contexts ------------------------------------------------------------

STATE_INITIATED = "Initiated"
STATE_RESPONDED = "Responded"
STATE_ESTABLISHED = "Established"
STATE_CLOSED = "Closed"

_LABEL_SERVER = b"ctx-sig-responder:"
_LABEL_CLIENT = b"ctx-sig-initiator:"


@dataclass(frozen=True)
class ProtectedMessage:
    context_id: bytes
    seq: int
    body: bytes            # ciphertext when confidential, plaintext otherwise
    auth_tag: bytes
    confidential: bool

    def to_doc(self) -> dict:
        return {
            "context_id": self.context_id,
            "seq": self.seq,
            "body": self.body,
            "auth_tag": self.auth_tag,
            "confidential": int(self.confidential),
        }

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "ProtectedMessage":
        try:
            m = encoding.expect_map(doc, _PROTECTED_FIELDS)
            if m["confidential"] not in (0, 1):
                raise MalformedDocument("confidential flag must be 0 or 1")
            return cls(
                context_id=bytes(m["context_id"]),
                seq=int(m["seq"]),
                body=bytes(m["body"]),
                auth_tag=bytes(m["auth_tag"]),
                confidential=bool(m["confidential"]),
            )
        except (TypeError, ValueError, MalformedDocument) as exc:
            raise MalformedEnvelope(f"bad protected message: {exc}") from exc


class SecurityContext:
    """Mutually authenticated session state for one peer.

    Owned by a single request-handling task at a time; wrap/unwrap are not
    internally synchronized.
    """

    def __init__(self, role: str, cred: CredentialSet):
        self.role = role  # "initiator" | "responder"
        self.state = STATE_INITIATED if role == "initiator" else STATE_RESPONDED
        self.local_identity = describe_credential(cred)
        self.peer_identity: ValidatedIdentity | None = None
        self.context_id = b""
        self.send_key = b""   # 64 bytes: cipher key || mac key
        self.recv_key = b""
        self.send_seq = 0
        self.recv_seq = 0
        # handshake scratch, cleared on establishment
        self._cred = cred
        self._eph: X25519PrivateKey | None = X25519PrivateKey.generate()
        self._nonce = os.urandom(16)
        self._hello_hash = b""
        self._peer_chain: tuple[Certificate, ...] = ()
        self._pending_keys: tuple[bytes, bytes] | None = None

    @property
    def established(self) -> bool:
        return self.state == STATE_ESTABLISHED

    def close(self) -> None:
        self.state = STATE_CLOSED

    # internal ------------------------------------------------------------

    def _derive_keys(self, peer_eph: bytes, nonce_c: bytes, nonce_s: bytes) -> None:
        assert self._eph is not None
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(peer_eph))
        okm = HKDF(
            algorithm=hashes.SHA256(),
            length=128,
            salt=nonce_c + nonce_s,
            info=b"grid-context-keys",
        ).derive(shared)
        i2r, r2i = okm[:64], okm[64:]
        if self.role == "initiator":
            self._pending_keys = (i2r, r2i)
        else:
            self._pending_keys = (r2i, i2r)
        self.context_id = hashlib.sha256(b"ctx-id:" + nonce_c + nonce_s).digest()[:16]

    def _establish(self) -> None:
        assert self._pending_keys is not None
        self.send_key, self.recv_key = self._pending_keys
        self.state = STATE_ESTABLISHED
        self._eph = None
        self._pending_keys = None


def _token_map(doc: encoding.Value, keys: set[str]) -> dict:
    try:
        return encoding.expect_map(doc, keys)
    except MalformedDocument as exc:
        raise TranscriptMismatch(f"malformed token: {exc}") from exc


def context_initiate(cred: CredentialSet) -> tuple[SecurityContext, dict]:
    """Start a handshake; returns the context and the hello token to send."""
    ctx = SecurityContext("initiator", cred)
    assert ctx._eph is not None
    token1 = {
        "type": "hello",
        "chain": chain_to_doc(cred.chain),
        "nonce": ctx._nonce,
        "ephemeral": ctx._eph.public_key().public_bytes_raw(),
    }
    ctx._hello_hash = hashlib.sha256(encoding.encode(token1)).digest()
    return ctx, token1


def context_respond(
    cred: CredentialSet,
    token1: encoding.Value,
    anchors: TrustAnchorStore,
    *,
    now: int | None = None,
) -> tuple[SecurityContext, dict]:
    """Consume a hello token; returns the responder context and the reply token."""
    now = now_seconds() if now is None else now
    t1 = _token_map(token1, {"type", "chain", "nonce", "ephemeral"})
    if t1["type"] != "hello":
        raise TranscriptMismatch(f"expected hello token, got {t1['type']!r}")
    try:
        peer_chain = chain_from_doc(t1["chain"])
        peer_eph = bytes(t1["ephemeral"])
        nonce_c = bytes(t1["nonce"])
    except (TypeError, ValueError, MalformedDocument) as exc:
        raise TranscriptMismatch(f"malformed hello token: {exc}") from exc
    ctx = SecurityContext("responder", cred)
    ctx.peer_identity = validate_chain(peer_chain, anchors, now)
    ctx._peer_chain = peer_chain
    ctx._hello_hash = hashlib.sha256(encoding.encode(t1)).digest()
    assert ctx._eph is not None
    core = {
        "type": "hello-reply",
        "chain": chain_to_doc(cred.chain),
        "nonce": ctx._nonce,
        "ephemeral": ctx._eph.public_key().public_bytes_raw(),
    }
    transcript = _LABEL_SERVER + ctx._hello_hash + hashlib.sha256(encoding.encode(core)).digest()
    token2 = dict(core)
    token2["signature"] = sign_bytes(cred.private_key, transcript)
    ctx._derive_keys(peer_eph, nonce_c, ctx._nonce)
    # transcript hash now covers both hello tokens, for the finish signature
    ctx._hello_hash = ctx._hello_hash + hashlib.sha256(encoding.encode(token2)).digest()
    return ctx, token2


def context_complete(
    ctx: SecurityContext,
    token2: encoding.Value,
    anchors: TrustAnchorStore,
    *,
    now: int | None = None,
) -> dict:
    """Initiator consumes the reply token, becomes Established, and emits the finish token."""
    now = now_seconds() if now is None else now
    if ctx.state != STATE_INITIATED:
        raise ContextNotEstablished(f"cannot complete from state {ctx.state}")
    t2 = _token_map(token2, {"type", "chain", "nonce", "ephemeral", "signature"})
    if t2["type"] != "hello-reply":
        raise TranscriptMismatch(f"expected hello-reply token, got {t2['type']!r}")
    try:
        peer_chain = chain_from_doc(t2["chain"])
        peer_eph = bytes(t2["ephemeral"])
        nonce_s = bytes(t2["nonce"])
        signature = bytes(t2["signature"])
    except (TypeError, ValueError, MalformedDocument) as exc:
        raise TranscriptMismatch(f"malformed hello-reply token: {exc}") from exc
    ctx.peer_identity = validate_chain(peer_chain, anchors, now)
    core = {k: t2[k] for k in ("type", "chain", "nonce", "ephemeral")}
    transcript = _LABEL_SERVER + ctx._hello_hash + hashlib.sha256(encoding.encode(core)).digest()
    if not verify_bytes(peer_chain[-1].subject_public_key, transcript, signature):
        raise TranscriptMismatch("responder signature does not match transcript")
    ctx._derive_keys(peer_eph, ctx._nonce, nonce_s)
    full_hash = ctx._hello_hash + hashlib.sha256(encoding.encode(t2)).digest()
    finish_sig = sign_bytes(ctx._cred.private_key, _LABEL_CLIENT + full_hash)
    ctx._establish()
    return {"type": "finish", "signature": finish_sig}


def context_finish(ctx: SecurityContext, token3: encoding.Value) -> None:
    """Responder consumes the finish token and becomes Established."""
    if ctx.state != STATE_RESPONDED:
        raise ContextNotEstablished(f"cannot finish from state {ctx.state}")
    t3 = _token_map(token3, {"type", "signature"})
    if t3["type"] != "finish":
        raise TranscriptMismatch(f"expected finish token, got {t3['type']!r}")
    try:
        signature = bytes(t3["signature"])
    except (TypeError, ValueError) as exc:
        raise TranscriptMismatch("malformed finish token") from exc
    if not verify_bytes(
        ctx._peer_chain[-1].subject_public_key, _LABEL_CLIENT + ctx._hello_hash, signature
    ):
        raise TranscriptMismatch("initiator signature does not match transcript")
    ctx._establish()


# -- protected messaging -----------------------------------------------------------


def _require_established(ctx: SecurityContext) -> None:
    if ctx.state == STATE_CLOSED:
        raise ContextClosed("context is closed")
    if ctx.state != STATE_ESTABLISHED:
        raise ContextNotEstablished(f"context in state {ctx.state}")


def _aad(context_id: bytes, seq: int, confidential: bool) -> bytes:
    return encoding.encode({"context_id": context_id, "seq": seq, "confidential": int(confidential)})


def context_wrap(ctx: SecurityContext, payload: bytes, confidential: bool = False) -> ProtectedMessage:
    _require_established(ctx)
    seq = ctx.send_seq
    cipher_key, mac_key = ctx.send_key[:32], ctx.send_key[32:]
    aad = _aad(ctx.context_id, seq, confidential)
    if confidential:
        nonce = seq.to_bytes(12, "big")
        sealed = ChaCha20Poly1305(cipher_key).encrypt(nonce, payload, aad)
        body, tag = sealed[:-16], sealed[-16:]
    else:
        body = payload
        tag = hmac.new(mac_key, aad + payload, hashlib.sha256).digest()
    ctx.send_seq += 1
    return ProtectedMessage(context_id=ctx.context_id, seq=seq, body=body, auth_tag=tag, confidential=confidential)


def context_unwrap(ctx: SecurityContext, msg: ProtectedMessage) -> bytes:
    _require_established(ctx)
    if msg.context_id != ctx.context_id:
        raise AuthTagInvalid("message bound to a different context")
    if msg.seq != ctx.recv_seq:
        raise SequenceViolation(f"expected seq {ctx.recv_seq}, got {msg.seq}")
    cipher_key, mac_key = ctx.recv_key[:32], ctx.recv_key[32:]
    aad = _aad(ctx.context_id, msg.seq, msg.confidential)
    if msg.confidential:
        nonce = msg.seq.to_bytes(12, "big")
        try:
            payload = ChaCha20Poly1305(cipher_key).decrypt(nonce, msg.body + msg.auth_tag, aad)
        except InvalidTag as exc:
            raise AuthTagInvalid("decryption failed") from exc
    else:
        expected = hmac.new(mac_key, aad + msg.body, hashlib.sha256).digest()
        if not hmac.compare_digest(expected, msg.auth_tag):
            raise AuthTagInvalid("integrity tag does not verify")
        payload = msg.body
    ctx.recv_seq += 1
    return payload


# -- in-context delegation -----------------------------------------------------------


def delegation_request(ctx: SecurityContext) -> tuple[bytes, ProtectedMessage]:
    """Recipient side: mint a keypair and wrap the public half for the delegator."""
    private, public = generate_keypair()
    msg = context_wrap(ctx, encoding.encode({"type": "delegation-request", "public_key": public}))
    return private, msg


def delegation_reply(
    ctx: SecurityContext,
    request: ProtectedMessage,
    delegator: CredentialSet,
    validity: tuple[int, int],
    depth: int | None = None,
    *,
    now: int | None = None,
) -> ProtectedMessage:
    """Delegator side: answer a delegation request with a proxy chain for the offered key."""
    now = now_seconds() if now is None else now
    doc = encoding.decode(context_unwrap(ctx, request))
    m = encoding.expect_map(doc, {"type", "public_key"})
    if m["type"] != "delegation-request":
        raise MalformedEnvelope(f"expected delegation-request, got {m['type']!r}")
    cert = issue_proxy_certificate(delegator, bytes(m["public_key"]), validity, depth, None, now)
    chain = delegator.chain + (cert,)
    return context_wrap(ctx, encoding.encode({"type": "delegation-chain", "chain": chain_to_doc(chain)}))


def delegation_accept(ctx: SecurityContext, reply: ProtectedMessage, private_key: bytes) -> CredentialSet:
    """Recipient side: assemble the delegated credential from the returned chain."""
    doc = encoding.decode(context_unwrap(ctx, reply))
    m = encoding.expect_map(doc, {"type", "chain"})
    if m["type"] != "delegation-chain":
        raise MalformedEnvelope(f"expected delegation-chain, got {m['type']!r}")
    chain = chain_from_doc(m["chain"])
    if public_key_for(private_key) != chain[-1].subject_public_key:
        raise MalformedEnvelope("delegated chain is not for the offered key")
    return CredentialSet(chain=chain, private_key=private_key)


def delegate_over_context(
    delegator_ctx: SecurityContext,
    recipient_ctx: SecurityContext,
    delegator: CredentialSet,
    validity: tuple[int, int],
    depth: int | None = None,
    *,
    now: int | None = None,
) -> CredentialSet:
    """Run the two-message delegation sub-protocol between two in-process contexts."""
    private, request = delegation_request(recipient_ctx)
    reply = delegation_reply(delegator_ctx, request, delegator, validity, depth, now=now)
    return delegation_accept(recipient_ctx, reply, private)


# -- policy discovery ----------------------------------------------------------------


@dataclass(frozen=True)
class PolicyDescriptor:
    """Published security requirements of a service."""

    service_name: str
    accepted_trust_roots: tuple[str, ...]
    required_message_mode: str
    required_assertion: str | None = None  # VO name, when an assertion must accompany requests

    def __post_init__(self):
        if not self.accepted_trust_roots:
            raise ValueError("accepted_trust_roots must be nonempty")

    def to_doc(self) -> dict:
        return {
            "service_name": self.service_name,
            "accepted_trust_roots": list(self.accepted_trust_roots),
            "required_message_mode": self.required_message_mode,
            "required_assertion": self.required_assertion,
        }

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "PolicyDescriptor":
        m = encoding.expect_map(
            doc,
            {"service_name", "accepted_trust_roots", "required_message_mode", "required_assertion"},
        )
        roots = m["accepted_trust_roots"]
        if not isinstance(roots, list):
            raise MalformedDocument("accepted_trust_roots must be an array")
        assertion = m["required_assertion"]
        return cls(
            service_name=str(m["service_name"]),
            accepted_trust_roots=tuple(str(r) for r in roots),
            required_message_mode=str(m["required_message_mode"]),
            required_assertion=None if assertion is None else str(assertion),
        )


@dataclass(frozen=True)
class MechanismPlan:
    credential: CredentialSet
    mode: str
    assertion: object | None = None  # CasAssertion when the policy demands one


def select_mechanism(
    policy: PolicyDescriptor,
    available: list[CredentialSet],
    assertions: list | None = None,
    *,
    now: int | None = None,
) -> MechanismPlan:
    """Pick a credential (and assertion) satisfying a published policy.

    Eligible credentials root at an accepted trust anchor and are within
    validity; the one with the longest remaining validity wins, ties broken
    by lexicographic leaf subject.
    """
    now = now_seconds() if now is None else now
    eligible = [
        cred for cred in available
        if cred.root.subject in policy.accepted_trust_roots and cred.valid_at(now)
    ]
    if not eligible:
        raise NoSatisfyingCredential(
            f"no credential roots at any of {list(policy.accepted_trust_roots)}"
        )
    chosen_assertion = None
    if policy.required_assertion is not None:
        candidates = [
            a for a in (assertions or [])
            if a.vo_name == policy.required_assertion and a.not_before <= now < a.not_after
        ]
        if not candidates:
            raise NoSatisfyingCredential(
                f"policy requires an assertion from VO {policy.required_assertion!r}"
            )
        chosen_assertion = max(candidates, key=lambda a: a.not_after)
    eligible.sort(key=lambda c: (-c.leaf.not_after, c.leaf.subject))
    return MechanismPlan(credential=eligible[0], mode=policy.required_message_mode, assertion=chosen_assertion)

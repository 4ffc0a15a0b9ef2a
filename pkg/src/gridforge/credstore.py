"""Certificates, credential sets, proxy delegation, and chain validation.

The model is a deliberately small stand-in for an X.509-style PKI: a
certificate is a signed, canonically encoded record; a credential set is a
root-first chain plus the leaf's private key. Users extend their own identity
by signing short-lived proxy certificates, and a validator walks the chain
checking signatures, validity windows, linkage, proxy naming, and delegation
depth accounting.

Delegation depth ``None`` means unlimited; unlimited minus one is unlimited.
"""

from __future__ import annotations

import dataclasses
import os
import secrets
import stat
import time
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.exceptions import InvalidSignature

from . import encoding
from .errors import (
    BrokenChain,
    DelegationDepthExhausted,
    DepthViolation,
    Expired,
    InvalidName,
    InvalidValidity,
    MalformedCredential,
    MalformedDocument,
    NotACA,
    ParentExpired,
    ProxyNamingViolation,
    SignatureInvalid,
    UntrustedRoot,
    ValidityExceedsIssuer,
)

CERT_CA = "CA"
CERT_END_ENTITY = "EndEntity"
CERT_PROXY = "Proxy"
_CERT_TYPES = (CERT_CA, CERT_END_ENTITY, CERT_PROXY)

SIGNATURE_SCHEME = "ed25519"

# Extension keys used by host-minted service credentials.
EXT_GRID_IDENTITY = "grid_identity"
EXT_LOCAL_ACCOUNT = "local_account"
EXT_LOCAL_POLICY = "local_policy"

_CERT_FIELDS = {
    "serial", "subject", "issuer", "subject_public_key", "not_before",
    "not_after", "cert_type", "max_delegation_depth", "extensions",
    "scheme", "signature",
}


def now_seconds() -> int:
    return int(time.time())


# -- key primitives -----------------------------------------------------------

def generate_keypair() -> tuple[bytes, bytes]:
    """Fresh (signing_key, verification_key) pair, 32 raw bytes each."""
    private = Ed25519PrivateKey.generate()
    return (
        private.private_bytes_raw(),
        private.public_key().public_bytes_raw(),
    )


def sign_bytes(signing_key: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(signing_key).sign(message)


def verify_bytes(verification_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verification_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def public_key_for(signing_key: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(signing_key).public_key().public_bytes_raw()


# -- certificate model ----------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    serial: int
    subject: str
    issuer: str
    subject_public_key: bytes
    not_before: int
    not_after: int
    cert_type: str
    max_delegation_depth: int | None  # None = unlimited (not applicable on CAs)
    extensions: dict[str, str] = field(default_factory=dict)
    scheme: str = SIGNATURE_SCHEME
    signature: bytes = b""

    def body_doc(self) -> dict:
        return {
            "serial": self.serial,
            "subject": self.subject,
            "issuer": self.issuer,
            "subject_public_key": self.subject_public_key,
            "not_before": self.not_before,
            "not_after": self.not_after,
            "cert_type": self.cert_type,
            "max_delegation_depth": self.max_delegation_depth,
            "extensions": dict(self.extensions),
            "scheme": self.scheme,
        }

    def body_bytes(self) -> bytes:
        return encoding.encode(self.body_doc())

    def to_doc(self) -> dict:
        doc = self.body_doc()
        doc["signature"] = self.signature
        return doc

    def encoded(self) -> bytes:
        return encoding.encode(self.to_doc())

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "Certificate":
        m = encoding.expect_map(doc, _CERT_FIELDS)
        try:
            ext = m["extensions"]
            if not isinstance(ext, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in ext.items()
            ):
                raise MalformedDocument("extensions must map strings to strings")
            depth = m["max_delegation_depth"]
            if depth is not None and (not isinstance(depth, int) or depth < 0):
                raise MalformedDocument("bad delegation depth")
            cert = cls(
                serial=int(m["serial"]),
                subject=str(m["subject"]),
                issuer=str(m["issuer"]),
                subject_public_key=bytes(m["subject_public_key"]),
                not_before=int(m["not_before"]),
                not_after=int(m["not_after"]),
                cert_type=str(m["cert_type"]),
                max_delegation_depth=depth,
                extensions=dict(ext),
                scheme=str(m["scheme"]),
                signature=bytes(m["signature"]),
            )
        except (TypeError, ValueError) as exc:
            raise MalformedDocument(f"bad certificate field: {exc}") from exc
        if cert.cert_type not in _CERT_TYPES:
            raise MalformedDocument(f"unknown cert_type {cert.cert_type!r}")
        return cert


@dataclass(frozen=True)
class CredentialSet:
    """A root-first certificate chain plus the leaf's signing key."""

    chain: tuple[Certificate, ...]
    private_key: bytes

    @property
    def leaf(self) -> Certificate:
        return self.chain[-1]

    @property
    def root(self) -> Certificate:
        return self.chain[0]

    def public_chain(self) -> tuple[Certificate, ...]:
        return self.chain

    def valid_at(self, now: int) -> bool:
        return self.leaf.not_before <= now < self.leaf.not_after


@dataclass(frozen=True)
class ValidatedIdentity:
    """Result of a successful chain validation."""

    effective_identity: str   # nearest non-proxy ancestor's subject
    leaf_subject: str
    remaining_delegation_depth: int | None
    extensions: dict[str, str]

    @property
    def leaf_is_proxy(self) -> bool:
        return self.leaf_subject != self.effective_identity


class TrustAnchorStore:
    """Set of self-signed CA certificates that terminate trusted chains."""

    def __init__(self, anchors: list[Certificate] | None = None):
        self._by_bytes: dict[bytes, Certificate] = {}
        for cert in anchors or []:
            self.add(cert)

    def add(self, cert: Certificate) -> None:
        if cert.cert_type != CERT_CA or cert.issuer != cert.subject:
            raise NotACA(f"anchor {cert.subject!r} is not a self-signed CA")
        if not verify_bytes(cert.subject_public_key, cert.body_bytes(), cert.signature):
            raise SignatureInvalid(0, f"anchor {cert.subject!r} self-signature invalid")
        self._by_bytes[cert.encoded()] = cert

    def contains(self, cert: Certificate) -> bool:
        return cert.encoded() in self._by_bytes

    def subjects(self) -> list[str]:
        return sorted(c.subject for c in self._by_bytes.values())

    def __len__(self) -> int:
        return len(self._by_bytes)

    @classmethod
    def load_dir(cls, path: str) -> "TrustAnchorStore":
        store = cls()
        for name in sorted(os.listdir(path)):
            if name.startswith(".") or not name.endswith(".cert"):
                continue
            store.add(Certificate.from_doc(encoding.read_doc(os.path.join(path, name))))
        return store


# -- issuance --------------------------------------------------------------------


def _fresh_serial() -> int:
    return secrets.randbits(63)


def _make_cert(
    *,
    subject: str,
    issuer: str,
    subject_public_key: bytes,
    not_before: int,
    not_after: int,
    cert_type: str,
    max_delegation_depth: int | None,
    extensions: dict[str, str] | None,
    signing_key: bytes,
    serial: int | None = None,
) -> Certificate:
    cert = Certificate(
        serial=_fresh_serial() if serial is None else serial,
        subject=subject,
        issuer=issuer,
        subject_public_key=subject_public_key,
        not_before=not_before,
        not_after=not_after,
        cert_type=cert_type,
        max_delegation_depth=max_delegation_depth,
        extensions=dict(extensions or {}),
    )
    signature = sign_bytes(signing_key, cert.body_bytes())
    return dataclasses.replace(cert, signature=signature)


def create_ca(name: str, validity: tuple[int, int]) -> CredentialSet:
    """Self-signed certificate authority credential."""
    if not name:
        raise InvalidName("CA name must be nonempty")
    not_before, not_after = validity
    if not_before >= not_after:
        raise InvalidValidity(f"not_before {not_before} >= not_after {not_after}")
    private, public = generate_keypair()
    cert = _make_cert(
        subject=name,
        issuer=name,
        subject_public_key=public,
        not_before=not_before,
        not_after=not_after,
        cert_type=CERT_CA,
        max_delegation_depth=None,
        extensions=None,
        signing_key=private,
    )
    return CredentialSet(chain=(cert,), private_key=private)


def issue_identity(ca: CredentialSet, subject: str, validity: tuple[int, int]) -> CredentialSet:
    """CA-signed end-entity credential. Over-long validity is rejected, not clamped."""
    if ca.leaf.cert_type != CERT_CA:
        raise NotACA(f"{ca.leaf.subject!r} cannot issue identities")
    if not subject:
        raise InvalidName("subject must be nonempty")
    not_before, not_after = validity
    if not_before >= not_after:
        raise InvalidValidity(f"not_before {not_before} >= not_after {not_after}")
    if not_before < ca.leaf.not_before or not_after > ca.leaf.not_after:
        raise ValidityExceedsIssuer(
            f"[{not_before}, {not_after}) outside issuer window "
            f"[{ca.leaf.not_before}, {ca.leaf.not_after})"
        )
    private, public = generate_keypair()
    cert = _make_cert(
        subject=subject,
        issuer=ca.leaf.subject,
        subject_public_key=public,
        not_before=not_before,
        not_after=not_after,
        cert_type=CERT_END_ENTITY,
        max_delegation_depth=None,
        extensions=None,
        signing_key=ca.private_key,
    )
    return CredentialSet(chain=ca.chain + (cert,), private_key=private)


def chain_remaining_depth(chain: tuple[Certificate, ...]) -> int | None:
    """Minimum over the chain of (declared depth - proxies already below); None = unlimited."""
    remaining: int | None = None
    for i, cert in enumerate(chain):
        if cert.cert_type == CERT_CA or cert.max_delegation_depth is None:
            continue
        below = sum(1 for c in chain[i + 1:] if c.cert_type == CERT_PROXY)
        avail = cert.max_delegation_depth - below
        if remaining is None or avail < remaining:
            remaining = avail
    return remaining


def issue_proxy_certificate(
    parent: CredentialSet,
    subject_public_key: bytes,
    validity: tuple[int, int],
    depth: int | None,
    extensions: dict[str, str] | None,
    now: int,
) -> Certificate:
    """Sign a proxy certificate for an externally supplied key.

    Shared by local proxy creation and in-context delegation, where the new
    private key never leaves the recipient. Validity is clamped to the
    parent's window; declared depth is clamped to the parent's remaining
    budget minus one.
    """
    leaf = parent.leaf
    if leaf.cert_type not in (CERT_END_ENTITY, CERT_PROXY):
        raise MalformedCredential("proxies derive from end-entity or proxy credentials")
    if not (leaf.not_before <= now < leaf.not_after):
        raise ParentExpired(f"parent {leaf.subject!r} not valid at {now}")
    remaining = chain_remaining_depth(parent.chain)
    if remaining is not None and remaining < 1:
        raise DelegationDepthExhausted(f"chain of {leaf.subject!r} has no delegation budget")
    if remaining is None:
        declared = depth
    else:
        cap = remaining - 1
        declared = cap if depth is None else min(depth, cap)
    not_before, not_after = validity
    not_before = max(not_before, leaf.not_before)
    not_after = min(not_after, leaf.not_after)
    if not_before >= not_after:
        raise InvalidValidity("requested validity does not intersect parent's")
    serial = _fresh_serial()
    return _make_cert(
        subject=f"{leaf.subject}/CN=proxy-{serial}",
        issuer=leaf.subject,
        subject_public_key=subject_public_key,
        not_before=not_before,
        not_after=not_after,
        cert_type=CERT_PROXY,
        max_delegation_depth=declared,
        extensions=extensions,
        signing_key=parent.private_key,
        serial=serial,
    )


def create_proxy(
    parent: CredentialSet,
    validity: tuple[int, int],
    depth: int | None = None,
    extensions: dict[str, str] | None = None,
    *,
    now: int | None = None,
) -> CredentialSet:
    """Extend `parent` with a freshly keyed proxy certificate."""
    now = now_seconds() if now is None else now
    private, public = generate_keypair()
    cert = issue_proxy_certificate(parent, public, validity, depth, extensions, now)
    return CredentialSet(chain=parent.chain + (cert,), private_key=private)


# -- validation -------------------------------------------------------------------

_ISSUABLE = {
    CERT_CA: (CERT_CA, CERT_END_ENTITY),
    CERT_END_ENTITY: (CERT_PROXY,),
    CERT_PROXY: (CERT_PROXY,),
}


def validate_chain(
    chain: tuple[Certificate, ...] | list[Certificate],
    anchors: TrustAnchorStore,
    now: int,
) -> ValidatedIdentity:
    """Walk a root-first chain and return the identity it proves.

    Checks, in order per certificate: anchor membership (root only),
    issuer/subject linkage and issuing capability, proxy naming, signature,
    validity window; then delegation-depth accounting over the whole chain.
    """
    chain = tuple(chain)
    if not chain:
        raise MalformedCredential("empty chain")
    if not anchors.contains(chain[0]):
        raise UntrustedRoot(f"root {chain[0].subject!r} is not anchored")
    for i, cert in enumerate(chain):
        parent = chain[i - 1] if i else cert
        if i:
            if cert.issuer != parent.subject:
                raise BrokenChain(i, f"issuer {cert.issuer!r} != parent subject {parent.subject!r}")
            if cert.cert_type not in _ISSUABLE[parent.cert_type]:
                raise BrokenChain(i, f"{parent.cert_type} cannot issue {cert.cert_type}")
        if cert.cert_type == CERT_PROXY:
            expected = f"{parent.subject}/CN=proxy-{cert.serial}"
            if cert.subject != expected:
                raise ProxyNamingViolation(i, f"subject {cert.subject!r} != {expected!r}")
        if cert.scheme != SIGNATURE_SCHEME or not verify_bytes(
            parent.subject_public_key, cert.body_bytes(), cert.signature
        ):
            raise SignatureInvalid(i, f"signature on {cert.subject!r} does not verify")
        if not (cert.not_before <= now < cert.not_after):
            raise Expired(i, f"{cert.subject!r} not valid at {now}")
    for i, cert in enumerate(chain):
        if cert.cert_type == CERT_CA or cert.max_delegation_depth is None:
            continue
        below = sum(1 for c in chain[i + 1:] if c.cert_type == CERT_PROXY)
        if below > cert.max_delegation_depth:
            raise DepthViolation(i, f"{below} proxies below budget {cert.max_delegation_depth}")
    return describe_chain(chain)


def describe_chain(chain: tuple[Certificate, ...]) -> ValidatedIdentity:
    """Identity summary of a chain without trust validation (local use)."""
    effective = next(
        (c.subject for c in reversed(chain) if c.cert_type != CERT_PROXY),
        chain[0].subject,
    )
    return ValidatedIdentity(
        effective_identity=effective,
        leaf_subject=chain[-1].subject,
        remaining_delegation_depth=chain_remaining_depth(chain),
        extensions=dict(chain[-1].extensions),
    )


def describe_credential(cred: CredentialSet) -> ValidatedIdentity:
    return describe_chain(cred.chain)


def same_user_trust(a: ValidatedIdentity, b: ValidatedIdentity) -> bool:
    """Implicit trust between two proxies of the same user."""
    return a.leaf_is_proxy and b.leaf_is_proxy and a.effective_identity == b.effective_identity


# -- serialization ------------------------------------------------------------------


def chain_to_doc(chain: tuple[Certificate, ...] | list[Certificate]) -> list:
    return [cert.to_doc() for cert in chain]


def chain_from_doc(doc: encoding.Value) -> tuple[Certificate, ...]:
    if not isinstance(doc, list) or not doc:
        raise MalformedDocument("certificate chain must be a nonempty array")
    return tuple(Certificate.from_doc(item) for item in doc)


def save_certificate(cert: Certificate, path: str) -> None:
    encoding.write_doc(path, cert.to_doc())


def load_certificate(path: str) -> Certificate:
    return Certificate.from_doc(encoding.read_doc(path))


def save_credential(cred: CredentialSet, cert_path: str, key_path: str) -> None:
    """Chain and private key land in separate files; the key file is owner-only."""
    encoding.write_doc(cert_path, chain_to_doc(cred.chain))
    encoding.write_doc(key_path, {"scheme": SIGNATURE_SCHEME, "private_key": cred.private_key})
    os.chmod(key_path, stat.S_IRUSR | stat.S_IWUSR)


def load_credential(cert_path: str, key_path: str) -> CredentialSet:
    chain = chain_from_doc(encoding.read_doc(cert_path))
    key_doc = encoding.expect_map(encoding.read_doc(key_path), {"scheme", "private_key"})
    if key_doc["scheme"] != SIGNATURE_SCHEME:
        raise MalformedCredential(f"unsupported key scheme {key_doc['scheme']!r}")
    private = bytes(key_doc["private_key"])
    if public_key_for(private) != chain[-1].subject_public_key:
        raise MalformedCredential("private key does not match leaf certificate")
    return CredentialSet(chain=chain, private_key=private)

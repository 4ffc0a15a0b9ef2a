"""Operational error hierarchy.

Every error carries a stable machine-readable ``code`` (its class name) so it
can cross the wire in error frames and be re-raised on the client side, and so
the CLI can emit ``ERR <code> <detail>`` lines.
"""

from __future__ import annotations

_REGISTRY: dict[str, type["GridForgeError"]] = {}


class GridForgeError(Exception):
    """Base class for all operational errors."""

    code = "GridForgeError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__
        _REGISTRY[cls.code] = cls

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail
        # Flow step attribution, set when an error crosses a service boundary.
        self.step: int | None = None

    def __str__(self) -> str:
        return self.detail or self.code

    def to_wire(self) -> dict:
        doc: dict = {"code": self.code, "detail": self.detail}
        if self.step is not None:
            doc["step"] = self.step
        index = getattr(self, "index", None)
        if index is not None:
            doc["index"] = index
        return doc


class IndexedError(GridForgeError):
    """Error tied to a position in a chain or log."""

    def __init__(self, index: int, detail: str = ""):
        super().__init__(detail or f"at index {index}")
        self.index = index


def from_wire(doc: dict) -> GridForgeError:
    """Reconstruct an error from its wire fields (unknown codes degrade to RemoteError)."""
    cls = _REGISTRY.get(str(doc.get("code", "")), RemoteError)
    detail = str(doc.get("detail", ""))
    if issubclass(cls, IndexedError):
        err: GridForgeError = cls(int(doc.get("index", -1)), detail)
    else:
        err = cls(detail)
    step = doc.get("step")
    if step is not None:
        err.step = int(step)
    return err


class RemoteError(GridForgeError):
    """A peer reported an error whose code is not known locally."""


class MalformedDocument(GridForgeError):
    """Canonical document bytes could not be decoded."""


# -- credential store ---------------------------------------------------------

class InvalidName(GridForgeError):
    """Empty or unusable distinguished name."""


class InvalidValidity(GridForgeError):
    """not_before does not precede not_after."""


class NotACA(GridForgeError):
    """Issuing credential is not a certificate authority."""


class ValidityExceedsIssuer(GridForgeError):
    """Requested validity extends past the issuer's own."""


class DelegationDepthExhausted(GridForgeError):
    """No delegation budget remains on this chain."""


class ParentExpired(GridForgeError):
    """Parent credential is outside its validity window."""


class MalformedCredential(GridForgeError):
    """Credential structure violates the chain model."""


class UntrustedRoot(GridForgeError):
    """Chain root is not in the trust anchor store."""


class SignatureInvalid(IndexedError):
    """A signature failed to verify (index -1 when not chain-positional)."""

    def __init__(self, index: int = -1, detail: str = ""):
        super().__init__(index, detail)


class Expired(IndexedError):
    """Certificate at index is outside its validity window."""


class BrokenChain(IndexedError):
    """Issuer/subject linkage or issuing capability violated at index."""


class ProxyNamingViolation(IndexedError):
    """Proxy subject does not follow the parent-derived naming rule."""


class DepthViolation(IndexedError):
    """Chain contains more proxies below index than its declared budget."""


# -- message security ---------------------------------------------------------

class CredentialExpired(GridForgeError):
    """Signing credential is outside its validity window."""


class StaleTimestamp(GridForgeError):
    """Envelope timestamp outside the acceptance window."""


class ReplayDetected(GridForgeError):
    """Envelope nonce was already accepted."""


class MalformedEnvelope(GridForgeError):
    """Envelope or frame structure is not as expected."""


class TranscriptMismatch(GridForgeError):
    """Handshake token inconsistent with the transcript seen so far."""


class SequenceViolation(GridForgeError):
    """Protected message arrived out of order or was replayed."""


class AuthTagInvalid(GridForgeError):
    """Protected message failed integrity verification."""


class ContextClosed(GridForgeError):
    """Security context is closed."""


class ContextNotEstablished(GridForgeError):
    """Operation requires an established security context."""


class NoSatisfyingCredential(GridForgeError):
    """No held credential/assertion satisfies the service policy."""


# -- community authorization ----------------------------------------------------

class MalformedRight(GridForgeError):
    """Right pattern violates the prefix-wildcard grammar."""


class NoRightsGranted(GridForgeError):
    """Issuance would produce an empty rights set."""


class AssertionInvalid(GridForgeError):
    """Assertion signature or binding is invalid."""


class AssertionExpired(GridForgeError):
    """Assertion is outside its validity window."""


class NotAuthorized(GridForgeError):
    """Authenticated caller is not permitted to perform this operation."""


# -- identity mapping -----------------------------------------------------------

class ParseError(IndexedError):
    """Unparseable map or policy line (index = 1-based line number)."""


class DuplicateIdentity(IndexedError):
    """Identity appears on more than one line (index = 1-based line number)."""


class NoMapping(GridForgeError):
    """Grid identity has no local account mapping."""


class AccountNotPermitted(GridForgeError):
    """Requested account is not listed for this identity."""


# -- job management -------------------------------------------------------------

class InvalidJobDescription(GridForgeError):
    """Job description fields violate the sandbox-relative path rules."""


class StarterFailure(GridForgeError):
    """Account service factory could not be started."""


class NetworkOriginRejected(GridForgeError):
    """Privileged helper invoked with a network-origin marker."""


class UnknownAccount(GridForgeError):
    """Account is not configured on this resource."""


class HostCredentialUnavailable(GridForgeError):
    """Host credential files are missing or unreadable."""


class AccountMismatch(GridForgeError):
    """Signer does not map to the account this factory serves."""


class GridIdentityMismatch(GridForgeError):
    """Service credential embeds a different grid identity than expected."""


class UntrustedHost(GridForgeError):
    """Service credential does not root at an accepted host authority."""


class NotOwner(GridForgeError):
    """Context peer is not the owner of this job."""


class InvalidTransition(GridForgeError):
    """Job state transition outside the allowed graph."""


class NoDelegatedCredential(GridForgeError):
    """Job cannot start before delegation completes."""


class QueueNotPermitted(GridForgeError):
    """Requested queue is not in the account's allowed list."""


# -- harness / CLI ----------------------------------------------------------------

class ChainBroken(IndexedError):
    """Audit log digest chain broken at index."""


class AlreadyRunning(GridForgeError):
    """Service deployment is already running."""


class NotRunning(GridForgeError):
    """Service deployment is not running."""


class ConfigError(GridForgeError):
    """Deployment configuration is missing or inconsistent."""


class TransportError(GridForgeError):
    """Loopback transport failure (connect, framing, or premature close)."""


class JobNotFound(GridForgeError):
    """Unknown job id."""

"""Client side of the job-initiation flow.

`client_submit` drives the whole sequence: sign the job request, send it
through the router, mutually authenticate with the returned per-job service,
authorize that service's host-minted credential (right host *and* the
caller's own grid identity embedded), delegate a credential for the job, and
start it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .. import encoding, transport
from ..audit import AuditLog
from ..cas import CasAssertion
from ..credstore import (
    EXT_GRID_IDENTITY,
    CredentialSet,
    TrustAnchorStore,
    describe_credential,
    now_seconds,
)
from ..errors import (
    GridForgeError,
    GridIdentityMismatch,
    JobNotFound,
    MalformedEnvelope,
    UntrustedHost,
    UntrustedRoot,
)
from ..secmsg import (
    PolicyDescriptor,
    ProtectedMessage,
    context_complete,
    context_initiate,
    context_unwrap,
    context_wrap,
    delegation_reply,
    sign_envelope,
)
from .jobs import JobDescription
from .services import OP_SUBMIT, new_flow_id


def fetch_policy(endpoint: str) -> PolicyDescriptor:
    """Published security policy of a service endpoint."""
    reply = transport.call(endpoint, {"kind": transport.KIND_POLICY})
    return PolicyDescriptor.from_doc(reply.get("body"))


def submit_request(
    cred: CredentialSet,
    description: JobDescription,
    router_endpoint: str,
    *,
    assertion: CasAssertion | None = None,
    audit: AuditLog | None = None,
    flow: str | None = None,
    now: int | None = None,
) -> dict:
    """Steps 1-6: sign the request, route it, and return the factory's answer
    ({job_id, mjs_endpoint, owner})."""
    now = now_seconds() if now is None else now
    flow = flow or new_flow_id()
    identity = describe_credential(cred)
    payload = encoding.encode({
        "op": OP_SUBMIT,
        "job": description.validate().to_doc(),
        "assertion": None if assertion is None else assertion.to_doc(),
    })
    envelope = sign_envelope(cred, payload, target_hint="job-factory", now=now)
    if audit is not None:
        audit.append(
            identity.effective_identity,
            f"step=1 request-signed flow={flow}",
        )
    frame = {
        "kind": transport.KIND_ENVELOPE,
        "op": OP_SUBMIT,
        "declared_identity": identity.effective_identity,
        "flow": flow,
        "body": envelope.to_doc(),
    }
    reply = transport.call(router_endpoint, frame)
    body = reply.get("body")
    if not isinstance(body, dict) or "job_id" not in body or "mjs_endpoint" not in body:
        raise MalformedEnvelope("factory reply missing job fields")
    body["flow"] = flow
    return body


class JobSession:
    """An established conversation with one managed job service."""

    def __init__(self, conn: transport.Conversation, ctx, cred: CredentialSet):
        self._conn = conn
        self._ctx = ctx
        self._cred = cred

    @property
    def peer(self):
        return self._ctx.peer_identity

    def _protected_exchange(self, doc: dict) -> encoding.Value:
        message = context_wrap(self._ctx, encoding.encode(doc))
        self._conn.send({"kind": transport.KIND_PROTECTED, "body": message.to_doc()})
        return encoding.decode(context_unwrap(self._ctx, self._recv_protected()))

    def _recv_protected(self) -> ProtectedMessage:
        frame = transport.expect_reply(self._conn.recv())
        if frame.get("kind") != transport.KIND_PROTECTED:
            raise MalformedEnvelope(f"expected protected frame, got {frame.get('kind')!r}")
        return ProtectedMessage.from_doc(frame.get("body"))

    def delegate(
        self,
        validity: tuple[int, int],
        depth: int | None = None,
        *,
        now: int | None = None,
    ) -> None:
        """Run the in-context delegation sub-protocol; the service ends up
        holding a proxy credential for this session's identity."""
        init = context_wrap(self._ctx, encoding.encode({"op": "delegate-init"}))
        self._conn.send({"kind": transport.KIND_PROTECTED, "body": init.to_doc()})
        request_msg = self._recv_protected()
        chain_msg = delegation_reply(self._ctx, request_msg, self._cred, validity, depth, now=now)
        self._conn.send({"kind": transport.KIND_PROTECTED, "body": chain_msg.to_doc()})
        ack = encoding.decode(context_unwrap(self._ctx, self._recv_protected()))
        if not isinstance(ack, dict) or ack.get("ok") != 1:
            raise MalformedEnvelope("delegation was not acknowledged")

    def start(self) -> dict:
        return self._op("start")

    def status(self) -> dict:
        return self._op("status")

    def cancel(self) -> dict:
        return self._op("cancel")

    def _op(self, op: str) -> dict:
        reply = self._protected_exchange({"op": op})
        if not isinstance(reply, dict):
            raise MalformedEnvelope("job reply is not a record snapshot")
        return reply

    def close(self) -> None:
        self._ctx.close()
        self._conn.close()

    def __enter__(self) -> "JobSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def mjs_connect(
    cred: CredentialSet,
    mjs_endpoint: str,
    expected_identity: str,
    host_anchors: TrustAnchorStore,
    *,
    now: int | None = None,
) -> JobSession:
    """Mutually authenticate with a managed job service and authorize it:
    its credential must root at an accepted host authority and embed the
    caller's own grid identity."""
    now = now_seconds() if now is None else now
    conn = transport.Conversation(mjs_endpoint)
    try:
        ctx, token1 = context_initiate(cred)
        conn.send({"kind": transport.KIND_TOKEN, "body": token1})
        reply = transport.expect_reply(conn.recv())
        if reply.get("kind") != transport.KIND_TOKEN:
            raise MalformedEnvelope("expected a handshake token frame")
        try:
            token3 = context_complete(ctx, reply.get("body"), host_anchors, now=now)
        except UntrustedRoot as exc:
            raise UntrustedHost(f"service credential is not host-rooted: {exc.detail}") from exc
        conn.send({"kind": transport.KIND_TOKEN, "body": token3})
        ack = transport.expect_reply(conn.recv())
        if ack.get("kind") != transport.KIND_RESULT:
            raise MalformedEnvelope("handshake was not acknowledged")
        embedded = ctx.peer_identity.extensions.get(EXT_GRID_IDENTITY)
        if embedded != expected_identity:
            raise GridIdentityMismatch(
                f"service credential embeds {embedded!r}, expected {expected_identity!r}"
            )
        return JobSession(conn, ctx, cred)
    except BaseException:
        conn.close()
        raise


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    mjs_endpoint: str
    owner: str
    flow: str


def client_submit(
    cred: CredentialSet,
    description: JobDescription,
    router_endpoint: str,
    host_anchors: TrustAnchorStore,
    *,
    assertion: CasAssertion | None = None,
    audit: AuditLog | None = None,
    delegation_depth: int | None = 0,
    now: int | None = None,
    start: bool = True,
) -> JobHandle:
    """Full job-initiation flow; returns once the job has been started."""
    now = now_seconds() if now is None else now
    identity = describe_credential(cred)
    result = submit_request(
        cred, description, router_endpoint, assertion=assertion, audit=audit, now=now
    )
    handle = JobHandle(
        job_id=str(result["job_id"]),
        mjs_endpoint=str(result["mjs_endpoint"]),
        owner=str(result["owner"]),
        flow=str(result["flow"]),
    )
    try:
        with mjs_connect(
            cred, handle.mjs_endpoint, identity.effective_identity, host_anchors, now=now
        ) as session:
            session.delegate((now, cred.leaf.not_after), delegation_depth, now=now)
            if start:
                session.start()
    except GridForgeError as exc:
        if exc.step is None:
            exc.step = 7
        raise
    return handle


def job_session(
    cred: CredentialSet,
    handle_or_endpoint,
    host_anchors: TrustAnchorStore,
    *,
    now: int | None = None,
) -> JobSession:
    """Reconnect to a job's service for status/cancel."""
    endpoint = getattr(handle_or_endpoint, "mjs_endpoint", handle_or_endpoint)
    if not endpoint:
        raise JobNotFound("no endpoint recorded for this job")
    return mjs_connect(
        cred, endpoint, describe_credential(cred).effective_identity, host_anchors, now=now
    )

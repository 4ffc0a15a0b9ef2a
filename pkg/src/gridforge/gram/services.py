"""Job-initiation services: request router, master factory, per-account local
factories, and per-job managed services.

Trust placement mirrors the least-privilege split: the router is
identity-blind and routes on a declared-identity header without any
cryptographic verification; all verification happens in the factories. Only
the privileged helpers (behind the local gate) touch host credentials or
spawn per-account services. Per-job services authenticate clients through a
mutual handshake and accept control operations from the job owner only.
"""

from __future__ import annotations

import threading
import time
import uuid
from typing import Callable

from .. import encoding, transport
from ..audit import AuditLog
from ..credstore import (
    CredentialSet,
    TrustAnchorStore,
    now_seconds,
    validate_chain,
)
from ..errors import (
    AccountMismatch,
    GridForgeError,
    MalformedEnvelope,
    NoDelegatedCredential,
    NotOwner,
    QueueNotPermitted,
)
from ..gridmap import GridMap, map_identity
from ..secmsg import (
    MODE_STATELESS,
    PolicyDescriptor,
    ProtectedMessage,
    ReplayCache,
    SignedEnvelope,
    context_finish,
    context_respond,
    context_unwrap,
    context_wrap,
    delegation_accept,
    delegation_request,
    sign_envelope,
    verify_envelope,
)
from .jobs import (
    AccountSandbox,
    JOB_ACTIVE,
    JOB_PENDING,
    JobDescription,
    JobRecord,
    cancel_job,
    launch_job,
    new_job_id,
)
from .privileged import AccountServiceStarter, flow_event, grim_fields

OP_SUBMIT = "job-submit"
OP_REGISTER = "register"
OP_DEREGISTER = "deregister"


class ServiceRegistry:
    """Grid identity -> local factory endpoint; atomic read/update."""

    def __init__(self):
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()

    def set(self, identity: str, endpoint: str) -> None:
        with self._lock:
            self._entries[identity] = endpoint

    def remove(self, identity: str, endpoint: str | None = None) -> None:
        with self._lock:
            if endpoint is None or self._entries.get(identity) == endpoint:
                self._entries.pop(identity, None)

    def lookup(self, identity: str) -> str | None:
        with self._lock:
            return self._entries.get(identity)

    def snapshot(self) -> dict[str, str]:
        with self._lock:
            return dict(self._entries)


def _flow_of(doc: dict) -> str | None:
    flow = doc.get("flow")
    return flow if isinstance(flow, str) else None


def _attach_step(step: int):
    """Decorator-ish context: tag errors raised inside with a flow step."""
    class _Tagger:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if isinstance(exc, GridForgeError) and exc.step is None:
                exc.step = step
            return False

    return _Tagger()


class ProxyRouter:
    """Routes signed job requests to the requester's local factory when one is
    registered, to the master factory otherwise. Holds no privileges and never
    verifies the requests it routes; registration messages, which are
    addressed to the router itself, must be signed under a host-rooted
    credential."""

    def __init__(
        self,
        registry: ServiceRegistry,
        host_anchors: TrustAnchorStore,
        audit: AuditLog,
        descriptor: PolicyDescriptor,
        *,
        skew: int = 300,
        clock: Callable[[], int] = now_seconds,
    ):
        self.registry = registry
        self.mmjfs_endpoint = ""  # set by the harness once the master factory is up
        self._host_anchors = host_anchors
        self._audit = audit
        self._descriptor = descriptor
        self._skew = skew
        self._clock = clock
        self._replay = ReplayCache()

    def serve_connection(self, conn, origin) -> None:
        doc = conn.recv()
        if doc is None:
            return
        if not isinstance(doc, dict) or "kind" not in doc:
            raise MalformedEnvelope("frame has no kind")
        if doc["kind"] == transport.KIND_POLICY:
            conn.send({"kind": transport.KIND_RESULT, "body": self._descriptor.to_doc()})
            return
        if doc["kind"] != transport.KIND_ENVELOPE:
            raise MalformedEnvelope(f"router cannot handle {doc['kind']!r} frames")
        if doc.get("op") in (OP_REGISTER, OP_DEREGISTER):
            conn.send({"kind": transport.KIND_RESULT, "body": self._handle_registration(doc)})
            return
        conn.send(self._route(doc))

    def _route(self, doc: dict) -> dict:
        declared = doc.get("declared_identity")
        if not isinstance(declared, str) or not declared:
            raise MalformedEnvelope("routed frames need a declared_identity header")
        endpoint = self.registry.lookup(declared)
        target = "lmjfs" if endpoint else "mmjfs"
        if endpoint is None:
            endpoint = self.mmjfs_endpoint
        self._audit.append("router", flow_event("request-routed", 2, _flow_of(doc), to=target))
        reply = transport.call(endpoint, doc)
        return reply

    def _handle_registration(self, doc: dict) -> dict:
        env = SignedEnvelope.from_doc(doc.get("body"))
        payload, who = verify_envelope(
            env, self._host_anchors, self._replay, now=self._clock(), skew=self._skew
        )
        body = encoding.expect_map(encoding.decode(payload), {"op", "identity", "endpoint"})
        grid_identity, _account, _policy = grim_fields(who)
        if not grid_identity or body["identity"] != grid_identity:
            raise MalformedEnvelope("registration identity does not match the factory credential")
        identity, endpoint = str(body["identity"]), str(body["endpoint"])
        if body["op"] == OP_REGISTER:
            self.registry.set(identity, endpoint)
            self._audit.append(
                "router", flow_event("lmjfs-registered", 5, _flow_of(doc), identity=identity)
            )
        else:
            self.registry.remove(identity, endpoint)
            self._audit.append("router", f"lmjfs-deregistered identity={identity}")
        return {"ok": 1}


class MasterJobFactory:
    """Shared, unprivileged entry point for users without a running local
    factory: verifies the request, maps the signer to a local account, has the
    starter bring up that account's factory, and re-dispatches the original
    envelope to it."""

    def __init__(
        self,
        user_anchors: TrustAnchorStore,
        gridmap: GridMap,
        starter: AccountServiceStarter,
        registry: ServiceRegistry,
        audit: AuditLog,
        *,
        skew: int = 300,
        clock: Callable[[], int] = now_seconds,
    ):
        self._anchors = user_anchors
        self._gridmap = gridmap
        self._starter = starter
        self._registry = registry
        self._audit = audit
        self._skew = skew
        self._clock = clock
        self._replay = ReplayCache()
        self._descriptor = PolicyDescriptor(
            service_name="master-job-factory",
            accepted_trust_roots=tuple(user_anchors.subjects()),
            required_message_mode=MODE_STATELESS,
        )

    def serve_connection(self, conn, origin) -> None:
        doc = conn.recv()
        if doc is None:
            return
        if not isinstance(doc, dict) or "kind" not in doc:
            raise MalformedEnvelope("frame has no kind")
        if doc["kind"] == transport.KIND_POLICY:
            conn.send({"kind": transport.KIND_RESULT, "body": self._descriptor.to_doc()})
            return
        if doc["kind"] != transport.KIND_ENVELOPE or doc.get("op") != OP_SUBMIT:
            raise MalformedEnvelope("master factory only accepts job-submit envelopes")
        conn.send(self._handle_submit(doc))

    def _handle_submit(self, doc: dict) -> dict:
        flow = _flow_of(doc)
        with _attach_step(3):
            env = SignedEnvelope.from_doc(doc.get("body"))
            _payload, who = verify_envelope(
                env, self._anchors, self._replay, now=self._clock(), skew=self._skew
            )
            self._audit.append(
                "mmjfs", flow_event("request-verified", 3, flow, grid=who.effective_identity)
            )
            account = map_identity(self._gridmap, who.effective_identity)
            self._audit.append(
                "mmjfs",
                flow_event("identity-mapped", 3, flow, grid=who.effective_identity, account=account),
            )
        endpoint = self._registry.lookup(who.effective_identity)
        if endpoint is None:
            with _attach_step(4):
                endpoint = self._starter.start(
                    transport.local_origin("master-factory"), account, who.effective_identity, flow
                )
        # re-dispatch the original envelope; the local factory verifies it again
        # against its own replay cache
        return transport.call(endpoint, doc)


class LocalJobFactory:
    """Per-grid-identity factory bound to one local account. Holds a
    host-minted service credential, registers itself with the router, verifies
    job requests, and instantiates one managed job service per job."""

    def __init__(
        self,
        account: str,
        grid_identity: str,
        service_credential: CredentialSet,
        user_anchors: TrustAnchorStore,
        gridmap: GridMap,
        router_endpoint: str,
        audit: AuditLog,
        sandbox_root: str,
        *,
        allowed_queues: tuple[str, ...] = ("default",),
        idle_seconds: int = 600,
        skew: int = 300,
        clock: Callable[[], int] = now_seconds,
        track_service: Callable[[object], None] | None = None,
    ):
        self.account = account
        self.grid_identity = grid_identity
        self._cred = service_credential
        self._anchors = user_anchors
        self._gridmap = gridmap
        self._router_endpoint = router_endpoint
        self._audit = audit
        self._sandbox_root = sandbox_root
        self._queues = allowed_queues
        self._idle = idle_seconds
        self._skew = skew
        self._clock = clock
        self._track = track_service or (lambda svc: None)
        self._replay = ReplayCache()
        self._last_activity = time.monotonic()
        self._stopped = threading.Event()
        self._server = transport.FrameServer(self)
        self._descriptor = PolicyDescriptor(
            service_name=f"local-job-factory:{account}",
            accepted_trust_roots=tuple(user_anchors.subjects()),
            required_message_mode=MODE_STATELESS,
        )

    @property
    def endpoint(self) -> str:
        return self._server.endpoint

    def start(self, flow: str | None = None) -> None:
        self._server.start()
        self._send_registration(OP_REGISTER, flow)
        threading.Thread(target=self._idle_monitor, name=f"idle-{self.account}", daemon=True).start()

    def shutdown(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        try:
            self._send_registration(OP_DEREGISTER, None)
        except (GridForgeError, OSError):
            pass
        self._server.stop()

    def _send_registration(self, op: str, flow: str | None) -> None:
        payload = encoding.encode({
            "op": op,
            "identity": self.grid_identity,
            "endpoint": self.endpoint,
        })
        env = sign_envelope(self._cred, payload, target_hint="router", now=self._clock())
        frame: dict = {"kind": transport.KIND_ENVELOPE, "op": op, "body": env.to_doc()}
        if flow:
            frame["flow"] = flow
        transport.call(self._router_endpoint, frame)

    def _idle_monitor(self) -> None:
        while not self._stopped.is_set():
            if self._stopped.wait(min(self._idle / 4 or 1, 5)):
                return
            if time.monotonic() - self._last_activity >= self._idle:
                self.shutdown()
                return

    def serve_connection(self, conn, origin) -> None:
        doc = conn.recv()
        if doc is None:
            return
        self._last_activity = time.monotonic()
        if not isinstance(doc, dict) or "kind" not in doc:
            raise MalformedEnvelope("frame has no kind")
        if doc["kind"] == transport.KIND_POLICY:
            conn.send({"kind": transport.KIND_RESULT, "body": self._descriptor.to_doc()})
            return
        if doc["kind"] != transport.KIND_ENVELOPE or doc.get("op") != OP_SUBMIT:
            raise MalformedEnvelope("local factory only accepts job-submit envelopes")
        conn.send({"kind": transport.KIND_RESULT, "body": self._handle_submit(doc)})

    def _handle_submit(self, doc: dict) -> dict:
        flow = _flow_of(doc)
        actor = f"lmjfs:{self.account}"
        with _attach_step(6):
            env = SignedEnvelope.from_doc(doc.get("body"))
            payload, who = verify_envelope(
                env, self._anchors, self._replay, now=self._clock(), skew=self._skew
            )
            signer_account = map_identity(self._gridmap, who.effective_identity)
            if signer_account != self.account:
                raise AccountMismatch(
                    f"{who.effective_identity!r} maps to {signer_account!r}, not {self.account!r}"
                )
            self._audit.append(
                actor, flow_event("request-verified", 6, flow, grid=who.effective_identity)
            )
            request = encoding.expect_map(encoding.decode(payload), {"op", "job", "assertion"})
            description = JobDescription.from_doc(request["job"])
            record = JobRecord(
                job_id=new_job_id(),
                description=description,
                owner=who.effective_identity,
                local_account=self.account,
            )
            mjs = ManagedJobService(
                record,
                self._cred,
                self._anchors,
                self._audit,
                AccountSandbox(self._sandbox_root, self.account),
                flow=flow,
                allowed_queues=self._queues,
                clock=self._clock,
            )
            mjs.start()
            self._track(mjs)
            self._audit.append(actor, flow_event("mjs-created", 6, flow, job=record.job_id))
        return {"job_id": record.job_id, "mjs_endpoint": mjs.endpoint, "owner": record.owner}


class ManagedJobService:
    """Per-job service instance: mutual authentication, in-context delegation,
    then owner-only start/status/cancel."""

    def __init__(
        self,
        record: JobRecord,
        service_credential: CredentialSet,
        user_anchors: TrustAnchorStore,
        audit: AuditLog,
        sandbox: AccountSandbox,
        *,
        flow: str | None = None,
        allowed_queues: tuple[str, ...] = ("default",),
        clock: Callable[[], int] = now_seconds,
    ):
        self.record = record
        self._cred = service_credential
        self._anchors = user_anchors
        self._audit = audit
        self._sandbox = sandbox
        self._flow = flow
        self._queues = allowed_queues
        self._clock = clock
        self._server = transport.FrameServer(self)

    @property
    def endpoint(self) -> str:
        return self._server.endpoint

    def start(self) -> None:
        self._server.start()

    def shutdown(self) -> None:
        self._server.stop()

    def _actor(self) -> str:
        return f"mjs:{self.record.job_id}"

    def serve_connection(self, conn, origin) -> None:
        with _attach_step(7):
            ctx = self._handshake(conn)
            while True:
                frame = conn.recv()
                if frame is None:
                    return
                if not isinstance(frame, dict) or frame.get("kind") != transport.KIND_PROTECTED:
                    raise MalformedEnvelope("expected a protected frame")
                message = ProtectedMessage.from_doc(frame.get("body"))
                request = encoding.decode(context_unwrap(ctx, message))
                if not isinstance(request, dict) or "op" not in request:
                    raise MalformedEnvelope("protected request has no op")
                self._dispatch(conn, ctx, request)

    def _handshake(self, conn):
        frame = conn.recv()
        if frame is None or not isinstance(frame, dict) or frame.get("kind") != transport.KIND_TOKEN:
            raise MalformedEnvelope("expected a handshake token frame")
        ctx, token2 = context_respond(self._cred, frame.get("body"), self._anchors, now=self._clock())
        conn.send({"kind": transport.KIND_TOKEN, "body": token2})
        frame = conn.recv()
        if frame is None or not isinstance(frame, dict) or frame.get("kind") != transport.KIND_TOKEN:
            raise MalformedEnvelope("expected the finish token frame")
        context_finish(ctx, frame.get("body"))
        conn.send({"kind": transport.KIND_RESULT, "body": {"established": 1}})
        if self.record.delegated_credential is None:
            self._audit.append(
                self._actor(),
                flow_event(
                    "context-established", 7, self._flow,
                    peer=ctx.peer_identity.effective_identity,
                ),
            )
        else:
            self._audit.append(
                self._actor(),
                f"context-reestablished peer={ctx.peer_identity.effective_identity}",
            )
        return ctx

    def _dispatch(self, conn, ctx, request: dict) -> None:
        op = request["op"]
        if op == "delegate-init":
            self._handle_delegation(conn, ctx)
            return
        if ctx.peer_identity.effective_identity != self.record.owner:
            raise NotOwner(
                f"{ctx.peer_identity.effective_identity!r} does not own {self.record.job_id}"
            )
        if op == "start":
            self._handle_start()
        elif op == "status":
            pass
        elif op == "cancel":
            cancel_job(self.record)
            self._audit.append(self._actor(), f"job-state job={self.record.job_id} state=Canceled")
        else:
            raise MalformedEnvelope(f"unknown job operation {op!r}")
        reply = context_wrap(ctx, encoding.encode(self.record.snapshot()))
        conn.send({"kind": transport.KIND_PROTECTED, "body": reply.to_doc()})

    def _handle_delegation(self, conn, ctx) -> None:
        private, request_msg = delegation_request(ctx)
        conn.send({"kind": transport.KIND_PROTECTED, "body": request_msg.to_doc()})
        frame = conn.recv()
        if frame is None or not isinstance(frame, dict) or frame.get("kind") != transport.KIND_PROTECTED:
            raise MalformedEnvelope("expected the delegation chain frame")
        cred = delegation_accept(ctx, ProtectedMessage.from_doc(frame.get("body")), private)
        delegated = validate_chain(cred.chain, self._anchors, self._clock())
        if delegated.effective_identity != self.record.owner:
            raise NotOwner("delegated credential does not speak for the job owner")
        self.record.delegated_credential = cred
        self._audit.append(
            self._actor(), flow_event("delegation-completed", 7, self._flow, job=self.record.job_id)
        )
        ack = context_wrap(ctx, encoding.encode({"ok": 1}))
        conn.send({"kind": transport.KIND_PROTECTED, "body": ack.to_doc()})

    def _handle_start(self) -> None:
        if self.record.state != JOB_PENDING:
            # let the state machine produce the canonical error
            self.record.transition(JOB_ACTIVE)
        if self.record.delegated_credential is None:
            raise NoDelegatedCredential(f"{self.record.job_id} has no delegated credential")
        if self.record.description.queue not in self._queues:
            raise QueueNotPermitted(
                f"queue {self.record.description.queue!r} not allowed for {self.record.local_account!r}"
            )

        def _on_exit(record: JobRecord) -> None:
            self._audit.append(
                self._actor(),
                f"job-state job={record.job_id} state={record.state} exit={record.exit_code}",
            )

        def _on_active(record: JobRecord) -> None:
            self._audit.append(self._actor(), f"job-state job={record.job_id} state=Active")

        launch_job(self.record, self._sandbox, on_exit=_on_exit, on_active=_on_active)


def new_flow_id() -> str:
    return uuid.uuid4().hex[:8]

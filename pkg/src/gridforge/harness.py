"""Local multi-service deployment: wires the router, master factory,
community-authorization service, and privileged helpers over loopback ports,
and provides the bootstrap that mints a self-contained test grid (CAs, host
and user credentials, gridmap, policy files, config).
"""

from __future__ import annotations

import os
import threading
from typing import Callable

from . import encoding, transport
from .audit import AuditLog
from .cas import (
    CasAssertion,
    Right,
    VoPolicyStore,
    cas_issue,
)
from .config import DeploymentConfig, write_config
from .credstore import (
    CredentialSet,
    TrustAnchorStore,
    chain_to_doc,
    create_ca,
    issue_identity,
    load_credential,
    now_seconds,
    save_certificate,
    save_credential,
)
from .errors import ConfigError, MalformedEnvelope, NotAuthorized
from .gram import (
    AccountServiceStarter,
    LocalJobFactory,
    MasterJobFactory,
    ProxyRouter,
    ResourceIdentityMapper,
    ServiceRegistry,
)
from .gridmap import load_gridmap
from .secmsg import (
    MODE_STATELESS,
    PolicyDescriptor,
    ReplayCache,
    SignedEnvelope,
    verify_envelope,
)

OP_CAS = "cas"


class CommunityAuthorizationService:
    """VO service endpoint: assertion issuance plus administrative grant and
    revoke, every request authenticated as a signed envelope."""

    def __init__(
        self,
        store: VoPolicyStore,
        policy_path: str,
        credential: CredentialSet,
        admin_identity: str,
        user_anchors: TrustAnchorStore,
        audit: AuditLog,
        *,
        assertion_lifetime: int = 600,
        skew: int = 300,
        clock: Callable[[], int] = now_seconds,
    ):
        self.store = store
        self._policy_path = policy_path
        self._cred = credential
        self._admin = admin_identity
        self._anchors = user_anchors
        self._audit = audit
        self._lifetime = assertion_lifetime
        self._skew = skew
        self._clock = clock
        self._replay = ReplayCache()
        self._descriptor = PolicyDescriptor(
            service_name="community-authorization",
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
        if doc["kind"] != transport.KIND_ENVELOPE:
            raise MalformedEnvelope("authorization service accepts envelope frames only")
        conn.send({"kind": transport.KIND_RESULT, "body": self._handle(doc)})

    def _handle(self, doc: dict) -> dict:
        env = SignedEnvelope.from_doc(doc.get("body"))
        payload, who = verify_envelope(
            env, self._anchors, self._replay, now=self._clock(), skew=self._skew
        )
        request = encoding.decode(payload)
        if not isinstance(request, dict) or "op" not in request:
            raise MalformedEnvelope("authorization request has no op")
        op = request["op"]
        if op == "request_assertion":
            return self._issue(request, who)
        if op in ("cas_grant", "cas_revoke"):
            return self._admin_change(op, request, who)
        raise MalformedEnvelope(f"unknown authorization op {op!r}")

    def _issue(self, request: dict, who) -> dict:
        requested = request.get("requested")
        rights = None
        if requested is not None:
            if not isinstance(requested, list):
                raise MalformedEnvelope("requested rights must be an array")
            rights = [Right.from_doc(r) for r in requested]
        lifetime = request.get("lifetime")
        lifetime = self._lifetime if not isinstance(lifetime, int) else min(lifetime, self._lifetime)
        now = self._clock()
        assertion = cas_issue(self.store, who, rights, (now, now + lifetime), self._cred)
        self._audit.append(
            "cas", f"assertion-issued subject={assertion.subject} rights={len(assertion.rights)}"
        )
        return {"assertion": assertion.to_doc(), "chain": chain_to_doc(self._cred.chain)}

    def _admin_change(self, op: str, request: dict, who) -> dict:
        if who.effective_identity != self._admin:
            raise NotAuthorized(f"{who.effective_identity!r} is not the VO administrator")
        subject = request.get("subject")
        if not isinstance(subject, str) or not subject:
            raise MalformedEnvelope("grant/revoke needs a subject")
        right = Right.from_doc(request.get("right"))
        if op == "cas_grant":
            self.store.grant(subject, right)
        else:
            self.store.revoke(subject, right)
        self.store.save(self._policy_path)
        self._audit.append(
            "cas", f"{op.replace('_', '-')} subject={subject} {right.resource}:{right.action}"
        )
        return {"ok": 1}


class Deployment:
    """All services of one resource, wired in-process over loopback ports."""

    def __init__(self, config: DeploymentConfig, *, clock: Callable[[], int] = now_seconds):
        self.config = config
        self._clock = clock
        self._servers: list[transport.FrameServer] = []
        self._dynamic: list = []  # local factories and per-job services
        self._dynamic_lock = threading.Lock()
        self.audit: AuditLog | None = None
        self.registry = ServiceRegistry()
        self.endpoints: dict[str, str] = {}
        self.user_anchors: TrustAnchorStore | None = None
        self.host_anchors: TrustAnchorStore | None = None

    def _track(self, service) -> None:
        with self._dynamic_lock:
            self._dynamic.append(service)

    def start(self) -> dict[str, str]:
        cfg = self.config
        cfg.validate_service_paths()
        os.makedirs(cfg.state_dir, exist_ok=True)
        self.audit = AuditLog(cfg.audit_path)
        self.user_anchors = TrustAnchorStore.load_dir(cfg.anchors_user_dir)
        self.host_anchors = TrustAnchorStore.load_dir(cfg.anchors_host_dir)
        gridmap = load_gridmap(cfg.gridmap_path)

        grim = ResourceIdentityMapper(
            cfg.host_credential,
            cfg.host_key,
            cfg.accounts,
            self.audit,
            lifetime=cfg.grim_lifetime_seconds,
        )
        router = ProxyRouter(
            self.registry,
            self.host_anchors,
            self.audit,
            PolicyDescriptor(
                service_name="job-router",
                accepted_trust_roots=tuple(self.user_anchors.subjects()),
                required_message_mode=MODE_STATELESS,
            ),
            skew=cfg.skew_seconds,
            clock=self._clock,
        )
        router_server = transport.FrameServer(router, port=cfg.router_port)

        def _spawn_local_factory(account: str, grid_identity: str, flow: str | None) -> str:
            # Boot sequence of a per-account factory: acquire a host-minted
            # credential, come up, then register with the router.
            cred = grim.issue(
                transport.local_origin("factory-boot"),
                grid_identity,
                account,
                flow=flow,
                now=self._clock(),
            )
            factory = LocalJobFactory(
                account,
                grid_identity,
                cred,
                self.user_anchors,
                gridmap,
                router_server.endpoint,
                self.audit,
                cfg.sandbox_root,
                allowed_queues=cfg.accounts[account],
                idle_seconds=cfg.lmjfs_idle_seconds,
                skew=cfg.skew_seconds,
                clock=self._clock,
                track_service=self._track,
            )
            factory.start(flow)
            self._track(factory)
            return factory.endpoint

        starter = AccountServiceStarter(cfg.accounts, _spawn_local_factory, self.audit)
        self.grim = grim
        self.starter = starter

        mmjfs = MasterJobFactory(
            self.user_anchors,
            gridmap,
            starter,
            self.registry,
            self.audit,
            skew=cfg.skew_seconds,
            clock=self._clock,
        )
        mmjfs_server = transport.FrameServer(mmjfs, port=cfg.mmjfs_port)
        router.mmjfs_endpoint = mmjfs_server.endpoint

        store = VoPolicyStore.load(cfg.cas_policy_path, cfg.cas_vo)
        cas_cred = load_credential(cfg.cas_credential, cfg.cas_key)
        cas = CommunityAuthorizationService(
            store,
            cfg.cas_policy_path,
            cas_cred,
            cfg.cas_admin,
            self.user_anchors,
            self.audit,
            assertion_lifetime=cfg.assertion_lifetime,
            skew=cfg.skew_seconds,
            clock=self._clock,
        )
        cas_server = transport.FrameServer(cas, port=cfg.cas_port)

        for server in (router_server, mmjfs_server, cas_server):
            server.start()
            self._servers.append(server)

        self.endpoints = {
            "router": router_server.endpoint,
            "mmjfs": mmjfs_server.endpoint,
            "cas": cas_server.endpoint,
        }
        write_endpoints(cfg.endpoints_path, self.endpoints)
        self.audit.append("harness", "services-started " + " ".join(
            f"{name}={ep}" for name, ep in sorted(self.endpoints.items())
        ))
        return self.endpoints

    def stop(self) -> None:
        with self._dynamic_lock:
            dynamic, self._dynamic = self._dynamic, []
        for service in dynamic:
            try:
                service.shutdown()
            except Exception:
                pass
        for server in self._servers:
            server.stop()
        self._servers = []
        if self.audit is not None:
            self.audit.append("harness", "services-stopped")
        try:
            os.remove(self.config.endpoints_path)
        except OSError:
            pass


def write_endpoints(path: str, endpoints: dict[str, str]) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for name, endpoint in sorted(endpoints.items()):
            fh.write(f"{name}={endpoint}\n")


def read_endpoints(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"no endpoints file at {path!r}; are services up?")
    endpoints = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                name, _, endpoint = line.partition("=")
                endpoints[name] = endpoint
    return endpoints


# -- bootstrap ---------------------------------------------------------------------

TEN_YEARS = 10 * 365 * 24 * 3600
ONE_YEAR = 365 * 24 * 3600


def bootstrap_deployment(
    target_dir: str,
    users: list[str],
    *,
    vo_name: str = "testgrid",
    queues: tuple[str, ...] = ("default", "batch"),
    now: int | None = None,
) -> str:
    """Create a self-contained grid under `target_dir`; returns the config path.

    Mints separate user and host CAs, one credential per user, the host
    credential, the authorization-service credential, a gridmap mapping each
    user to a same-named local account, and an empty VO policy file. The first
    user is both the default CLI identity and the VO administrator.
    """
    if not users:
        raise ConfigError("bootstrap needs at least one user")
    now = now_seconds() if now is None else now
    dirs = {name: os.path.join(target_dir, name) for name in (
        "anchors-user", "anchors-host", "creds", "sandbox", "state",
    )}
    for path in dirs.values():
        os.makedirs(path, exist_ok=True)

    user_ca = create_ca("/O=TestGrid/CN=User CA", (now - 60, now + TEN_YEARS))
    host_ca = create_ca("/O=TestGrid/CN=Host CA", (now - 60, now + TEN_YEARS))
    save_certificate(user_ca.leaf, os.path.join(dirs["anchors-user"], "user-ca.cert"))
    save_certificate(host_ca.leaf, os.path.join(dirs["anchors-host"], "host-ca.cert"))
    save_credential(user_ca, os.path.join(dirs["creds"], "user-ca.cert"),
                    os.path.join(dirs["creds"], "user-ca.key"))
    save_credential(host_ca, os.path.join(dirs["creds"], "host-ca.cert"),
                    os.path.join(dirs["creds"], "host-ca.key"))

    host = issue_identity(host_ca, "/O=TestGrid/CN=host/localhost", (now - 60, now + ONE_YEAR))
    save_credential(host, os.path.join(dirs["creds"], "host.cert"),
                    os.path.join(dirs["creds"], "host.key"))

    cas_cred = issue_identity(user_ca, "/O=TestGrid/CN=Community Authorization",
                              (now - 60, now + ONE_YEAR))
    save_credential(cas_cred, os.path.join(dirs["creds"], "cas.cert"),
                    os.path.join(dirs["creds"], "cas.key"))

    identities = {}
    gridmap_lines = []
    accounts: dict[str, tuple[str, ...]] = {}
    for name in users:
        account = name.lower()
        identity = f"/O=TestGrid/CN={name.capitalize()}"
        cred = issue_identity(user_ca, identity, (now - 60, now + ONE_YEAR))
        save_credential(cred, os.path.join(dirs["creds"], f"{account}.cert"),
                        os.path.join(dirs["creds"], f"{account}.key"))
        identities[name] = identity
        gridmap_lines.append(f'"{identity}" {account}')
        accounts[account] = queues
        os.makedirs(os.path.join(dirs["sandbox"], account), exist_ok=True)

    with open(os.path.join(target_dir, "gridmap"), "w", encoding="utf-8") as fh:
        fh.write("# grid identity -> local account\n")
        fh.write("\n".join(gridmap_lines) + "\n")
    with open(os.path.join(target_dir, "cas-policy"), "w", encoding="utf-8") as fh:
        fh.write("")

    first = users[0].lower()
    config_path = os.path.join(target_dir, "gridforge.conf")
    write_config(
        config_path,
        {
            "anchors.user": "anchors-user",
            "anchors.host": "anchors-host",
            "host.credential": "creds/host.cert",
            "host.key": "creds/host.key",
            "gridmap": "gridmap",
            "cas.policy": "cas-policy",
            "cas.credential": "creds/cas.cert",
            "cas.key": "creds/cas.key",
            "cas.vo": vo_name,
            "cas.admin": identities[users[0]],
            "sandbox": "sandbox",
            "state": "state",
            "user.credential": f"creds/{first}.cert",
            "user.key": f"creds/{first}.key",
        },
        accounts,
    )
    return config_path

"""The two privileged helpers and the local-only invocation gate.

Everything that can touch host credentials or spawn per-account services is
confined to AccountServiceStarter (the setuid-starter stand-in) and
ResourceIdentityMapper (the GRIM stand-in). Neither accepts an invocation
whose Origin carries the network marker that every listener stamps on inbound
connections, which is the desk-scale version of "privileged programs accept
no network connections".
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Mapping

from ..audit import AuditLog
from ..credstore import (
    CERT_PROXY,
    CredentialSet,
    EXT_GRID_IDENTITY,
    EXT_LOCAL_ACCOUNT,
    EXT_LOCAL_POLICY,
    create_proxy,
    load_credential,
    now_seconds,
)
from ..errors import (
    HostCredentialUnavailable,
    NetworkOriginRejected,
    StarterFailure,
    UnknownAccount,
)
from ..transport import Origin

GRIM_MAX_LIFETIME = 12 * 3600  # seconds


def require_local(origin: Origin, helper: str) -> None:
    """The gate: refuse any invocation stamped as network-originated."""
    if origin.is_network:
        raise NetworkOriginRejected(f"{helper} accepts local invocations only (origin {origin.peer or '?'})")


class AccountServiceStarter:
    """Privileged helper whose sole function is starting a pre-configured
    per-account job factory. One invocation at a time."""

    def __init__(
        self,
        accounts: Mapping[str, tuple[str, ...]],
        spawn: Callable[[str, str, str | None], str],
        audit: AuditLog | None = None,
    ):
        self._accounts = dict(accounts)
        self._spawn = spawn  # (account, grid_identity, flow) -> endpoint
        self._audit = audit
        self._lock = threading.Lock()

    def start(self, origin: Origin, account: str, grid_identity: str, flow: str | None = None) -> str:
        require_local(origin, "account-service starter")
        if account not in self._accounts:
            raise UnknownAccount(f"account {account!r} is not configured")
        with self._lock:
            if self._audit is not None:
                self._audit.append("starter", flow_event("starter-invoked", 4, flow, account=account))
            try:
                return self._spawn(account, grid_identity, flow)
            except Exception as exc:
                if isinstance(exc, NetworkOriginRejected):
                    raise
                raise StarterFailure(f"could not start factory for {account!r}: {exc}") from exc


class ResourceIdentityMapper:
    """Privileged helper minting host-rooted proxies that embed the user's
    grid identity, local account, and the account's local policy."""

    def __init__(
        self,
        host_credential_path: str,
        host_key_path: str,
        accounts: Mapping[str, tuple[str, ...]],
        audit: AuditLog | None = None,
        lifetime: int = GRIM_MAX_LIFETIME,
    ):
        self._cred_path = host_credential_path
        self._key_path = host_key_path
        self._accounts = dict(accounts)
        self._audit = audit
        self._lifetime = min(lifetime, GRIM_MAX_LIFETIME)
        self._lock = threading.Lock()

    def issue(
        self,
        origin: Origin,
        grid_identity: str,
        account: str,
        local_policy: str | None = None,
        *,
        flow: str | None = None,
        now: int | None = None,
    ) -> CredentialSet:
        require_local(origin, "resource identity mapper")
        if account not in self._accounts:
            raise UnknownAccount(f"account {account!r} is not configured")
        now = now_seconds() if now is None else now
        with self._lock:
            if not (os.path.exists(self._cred_path) and os.path.exists(self._key_path)):
                raise HostCredentialUnavailable(f"host credential files missing under {self._cred_path!r}")
            try:
                host = load_credential(self._cred_path, self._key_path)
            except OSError as exc:
                raise HostCredentialUnavailable(str(exc)) from exc
            policy = ",".join(self._accounts[account]) if local_policy is None else local_policy
            cred = create_proxy(
                host,
                (now, now + self._lifetime),
                depth=0,
                extensions={
                    EXT_GRID_IDENTITY: grid_identity,
                    EXT_LOCAL_ACCOUNT: account,
                    EXT_LOCAL_POLICY: policy,
                },
                now=now,
            )
            if self._audit is not None:
                self._audit.append(
                    "grim", flow_event("grim-credential-issued", 5, flow, account=account, grid=grid_identity)
                )
            return cred


def grim_fields(cred_or_extensions) -> tuple[str, str, str]:
    """(grid_identity, local_account, local_policy) from a host-minted credential."""
    ext = cred_or_extensions
    if hasattr(ext, "extensions"):
        ext = ext.extensions
    return (
        ext.get(EXT_GRID_IDENTITY, ""),
        ext.get(EXT_LOCAL_ACCOUNT, ""),
        ext.get(EXT_LOCAL_POLICY, ""),
    )


def is_grim_credential(cred: CredentialSet) -> bool:
    leaf = cred.leaf
    return leaf.cert_type == CERT_PROXY and all(
        key in leaf.extensions for key in (EXT_GRID_IDENTITY, EXT_LOCAL_ACCOUNT, EXT_LOCAL_POLICY)
    )


def flow_event(name: str, step: int, flow: str | None, **extra: str) -> str:
    """Audit event string for one step of the job-initiation flow."""
    parts = [f"step={step}", name]
    if flow:
        parts.append(f"flow={flow}")
    parts.extend(f"{k}={v}" for k, v in extra.items())
    return " ".join(parts)

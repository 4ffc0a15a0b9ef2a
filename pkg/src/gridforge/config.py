"""Deployment configuration: textual key=value file.

Accounts are declared as ``account.<name> = queue1,queue2`` lines naming the
queues each local account accepts. Relative paths are resolved against the
config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ConfigError

ENV_CONFIG = "GRIDFORGE_CONFIG"

_PATH_KEYS = {
    "anchors.user": "anchors_user_dir",
    "anchors.host": "anchors_host_dir",
    "host.credential": "host_credential",
    "host.key": "host_key",
    "gridmap": "gridmap_path",
    "cas.policy": "cas_policy_path",
    "cas.credential": "cas_credential",
    "cas.key": "cas_key",
    "sandbox": "sandbox_root",
    "state": "state_dir",
    "audit": "audit_path",
    "user.credential": "user_credential",
    "user.key": "user_key",
    "proxy.credential": "proxy_credential",
    "proxy.key": "proxy_key",
}

_INT_KEYS = {
    "port.router": "router_port",
    "port.cas": "cas_port",
    "port.mmjfs": "mmjfs_port",
    "skew": "skew_seconds",
    "nonce.ttl": "nonce_ttl",
    "assertion.lifetime": "assertion_lifetime",
    "lmjfs.idle": "lmjfs_idle_seconds",
    "grim.lifetime": "grim_lifetime_seconds",
}

_STR_KEYS = {
    "cas.vo": "cas_vo",
    "cas.admin": "cas_admin",
}

# Paths that must exist before services come up.
_SERVICE_PATH_FIELDS = (
    "anchors_user_dir",
    "anchors_host_dir",
    "host_credential",
    "host_key",
    "gridmap_path",
    "cas_policy_path",
    "cas_credential",
    "cas_key",
    "sandbox_root",
)


@dataclass
class DeploymentConfig:
    anchors_user_dir: str = ""
    anchors_host_dir: str = ""
    host_credential: str = ""
    host_key: str = ""
    gridmap_path: str = ""
    cas_policy_path: str = ""
    cas_credential: str = ""
    cas_key: str = ""
    sandbox_root: str = ""
    state_dir: str = ""
    audit_path: str = ""
    user_credential: str = ""
    user_key: str = ""
    proxy_credential: str = ""
    proxy_key: str = ""
    cas_vo: str = "testgrid"
    cas_admin: str = ""
    router_port: int = 0
    cas_port: int = 0
    mmjfs_port: int = 0
    skew_seconds: int = 300
    nonce_ttl: int = 600
    assertion_lifetime: int = 600
    lmjfs_idle_seconds: int = 600
    grim_lifetime_seconds: int = 43200
    accounts: dict[str, tuple[str, ...]] = field(default_factory=dict)
    config_path: str = ""

    @classmethod
    def load(cls, path: str) -> "DeploymentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        cfg = cls(config_path=os.path.abspath(path))
        base = os.path.dirname(cfg.config_path)
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = key.strip(), value.strip()
                if key in _PATH_KEYS:
                    resolved = value if os.path.isabs(value) else os.path.join(base, value)
                    setattr(cfg, _PATH_KEYS[key], resolved)
                elif key in _INT_KEYS:
                    try:
                        setattr(cfg, _INT_KEYS[key], int(value))
                    except ValueError as exc:
                        raise ConfigError(f"{path}:{lineno}: {key} must be an integer") from exc
                elif key in _STR_KEYS:
                    setattr(cfg, _STR_KEYS[key], value)
                elif key.startswith("account."):
                    name = key[len("account."):]
                    queues = tuple(q.strip() for q in value.split(",") if q.strip())
                    cfg.accounts[name] = queues or ("default",)
                else:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if not cfg.state_dir:
            cfg.state_dir = os.path.join(base, "state")
        if not cfg.audit_path:
            cfg.audit_path = os.path.join(cfg.state_dir, "audit.log")
        if not cfg.proxy_credential:
            cfg.proxy_credential = os.path.join(cfg.state_dir, "proxy.cert")
        if not cfg.proxy_key:
            cfg.proxy_key = os.path.join(cfg.state_dir, "proxy.key")
        return cfg

    def validate_service_paths(self) -> None:
        missing = [
            getattr(self, name) or f"<{name} unset>"
            for name in _SERVICE_PATH_FIELDS
            if not (getattr(self, name) and os.path.exists(getattr(self, name)))
        ]
        if missing:
            raise ConfigError("missing deployment paths: " + ", ".join(missing))
        if not self.accounts:
            raise ConfigError("no account.<name> entries configured")

    # state-dir conventions shared by the harness and CLI
    @property
    def pidfile(self) -> str:
        return os.path.join(self.state_dir, "services.pid")

    @property
    def endpoints_path(self) -> str:
        return os.path.join(self.state_dir, "endpoints")

    @property
    def jobs_index_path(self) -> str:
        return os.path.join(self.state_dir, "jobs.index")

    @property
    def assertion_path(self) -> str:
        return os.path.join(self.state_dir, f"assertion.{self.cas_vo}")


def resolve_config_path(explicit: str | None) -> str:
    path = explicit or os.environ.get(ENV_CONFIG, "")
    if not path:
        raise ConfigError(f"no config: pass --config or set {ENV_CONFIG}")
    return path


def write_config(path: str, values: dict[str, str], accounts: dict[str, tuple[str, ...]]) -> None:
    lines = [f"{key} = {value}" for key, value in values.items()]
    lines += [f"account.{name} = {','.join(queues)}" for name, queues in sorted(accounts.items())]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

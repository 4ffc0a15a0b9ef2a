"""gridctl: operator CLI.

Exit codes: 0 on success, 2 for usage errors, 1 for operational errors, which
additionally emit a machine-readable ``ERR <code> <detail>`` line on stderr.
The deployment config is located via --config or the GRIDFORGE_CONFIG
environment variable.
"""

from __future__ import annotations

import argparse
import os
import signal
import subprocess
import sys
import time

from . import encoding
from .audit import AuditLog, verify_or_raise
from .cas import CasAssertion, Right
from .config import DeploymentConfig, ENV_CONFIG, resolve_config_path
from .credstore import (
    CredentialSet,
    TrustAnchorStore,
    create_proxy,
    describe_credential,
    load_credential,
    now_seconds,
    save_credential,
)
from .errors import (
    AlreadyRunning,
    ConfigError,
    GridForgeError,
    JobNotFound,
    NotRunning,
)
from .gram import JobDescription, client_submit, fetch_policy, job_session
from .gridmap import load_gridmap, map_identity
from .harness import Deployment, bootstrap_deployment, read_endpoints
from .secmsg import select_mechanism, sign_envelope
from . import transport

TERMINAL_STATES = {"Done", "Failed", "Canceled"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridctl",
        description="Operate the loopback grid: credentials, authorization, jobs, services.",
    )
    parser.add_argument("--config", help=f"deployment config (default: ${ENV_CONFIG})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deploy-init", help="bootstrap a self-contained grid directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--user", action="append", default=[], help="repeatable; first is the CLI user")
    p.add_argument("--vo", default="testgrid")

    p = sub.add_parser("proxy-init", help="create a proxy credential from the user credential")
    p.add_argument("--hours", type=float, default=12.0)
    p.add_argument("--depth", default="unlimited", help="delegation budget (integer or 'unlimited')")

    sub.add_parser("proxy-info", help="show the active proxy credential")

    p = sub.add_parser("cas-request", help="request a VO rights assertion")
    p.add_argument("--right", nargs=2, action="append", metavar=("RESOURCE", "ACTION"))
    p.add_argument("--lifetime", type=int)

    p = sub.add_parser("cas-admin", help="administer VO policy (admin identity only)")
    p.add_argument("action", choices=["grant", "revoke"])
    p.add_argument("--subject", required=True)
    p.add_argument("--resource", required=True)
    p.add_argument("--action-name", dest="right_action", default="read")

    p = sub.add_parser("gridmap", help="grid-mapfile operations")
    gm = p.add_subparsers(dest="gridmap_command", required=True)
    c = gm.add_parser("check", help="map an identity to its local account")
    c.add_argument("identity")
    c.add_argument("--account")

    p = sub.add_parser("job-submit", help="submit a job through the full initiation flow")
    p.add_argument("--exe", required=True)
    p.add_argument("--arg", action="append", default=[])
    p.add_argument("--workdir", default=".")
    p.add_argument("--stdout", default="stdout.txt")
    p.add_argument("--stderr", default="stderr.txt")
    p.add_argument("--queue", default="default")
    p.add_argument("--assertion", help="attach a saved assertion document")

    p = sub.add_parser("job-status", help="query a submitted job")
    p.add_argument("job_id")
    p.add_argument("--wait", type=float, default=0.0, help="seconds to wait for a terminal state")

    p = sub.add_parser("job-cancel", help="cancel a submitted job")
    p.add_argument("job_id")

    p = sub.add_parser("services", help="manage the local service deployment")
    p.add_argument("services_command", choices=["up", "down", "run", "status"])

    p = sub.add_parser("audit", help="audit log operations")
    p.add_argument("audit_command", choices=["verify"])

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except GridForgeError as err:
        print(f"ERR {err.code} {err.detail}".rstrip(), file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    handlers = {
        "deploy-init": cmd_deploy_init,
        "proxy-init": cmd_proxy_init,
        "proxy-info": cmd_proxy_info,
        "cas-request": cmd_cas_request,
        "cas-admin": cmd_cas_admin,
        "gridmap": cmd_gridmap,
        "job-submit": cmd_job_submit,
        "job-status": cmd_job_status,
        "job-cancel": cmd_job_cancel,
        "services": cmd_services,
        "audit": cmd_audit,
    }
    return handlers[args.command](args)


def _config(args) -> DeploymentConfig:
    return DeploymentConfig.load(resolve_config_path(args.config))


def _user_credential(cfg: DeploymentConfig) -> CredentialSet:
    if not (cfg.user_credential and os.path.exists(cfg.user_credential)):
        raise ConfigError("no user credential configured; run deploy-init or set user.credential")
    return load_credential(cfg.user_credential, cfg.user_key)


def _available_credentials(cfg: DeploymentConfig) -> list[CredentialSet]:
    creds = []
    if os.path.exists(cfg.proxy_credential) and os.path.exists(cfg.proxy_key):
        creds.append(load_credential(cfg.proxy_credential, cfg.proxy_key))
    creds.append(_user_credential(cfg))
    return creds


def _active_credential(cfg: DeploymentConfig) -> CredentialSet:
    return _available_credentials(cfg)[0]


def _endpoints(cfg: DeploymentConfig) -> dict[str, str]:
    return read_endpoints(cfg.endpoints_path)


def _load_assertion(path: str) -> CasAssertion:
    doc = encoding.read_doc(path)
    if isinstance(doc, dict) and "assertion" in doc:
        doc = doc["assertion"]
    return CasAssertion.from_doc(doc)


# -- commands --------------------------------------------------------------------


def cmd_deploy_init(args) -> int:
    users = args.user or ["alice"]
    config_path = bootstrap_deployment(args.dir, users, vo_name=args.vo)
    print(config_path)
    print(f"export {ENV_CONFIG}={config_path}")
    return 0


def cmd_proxy_init(args) -> int:
    cfg = _config(args)
    user = _user_credential(cfg)
    depth = None if args.depth == "unlimited" else int(args.depth)
    now = now_seconds()
    proxy = create_proxy(user, (now, now + int(args.hours * 3600)), depth, now=now)
    os.makedirs(os.path.dirname(cfg.proxy_credential) or ".", exist_ok=True)
    save_credential(proxy, cfg.proxy_credential, cfg.proxy_key)
    info = describe_credential(proxy)
    print(f"proxy created: {proxy.leaf.subject}")
    print(f"effective identity: {info.effective_identity}")
    print(f"valid until: {proxy.leaf.not_after}")
    return 0


def cmd_proxy_info(args) -> int:
    cfg = _config(args)
    if not os.path.exists(cfg.proxy_credential):
        raise ConfigError(f"no proxy at {cfg.proxy_credential}; run proxy-init")
    proxy = load_credential(cfg.proxy_credential, cfg.proxy_key)
    info = describe_credential(proxy)
    remaining = info.remaining_delegation_depth
    now = now_seconds()
    print(f"subject: {info.leaf_subject}")
    print(f"effective identity: {info.effective_identity}")
    print(f"remaining delegation depth: {'unlimited' if remaining is None else remaining}")
    print(f"seconds remaining: {max(0, proxy.leaf.not_after - now)}")
    return 0


def cmd_cas_request(args) -> int:
    cfg = _config(args)
    endpoints = _endpoints(cfg)
    cred = _active_credential(cfg)
    requested = None
    if args.right:
        requested = [Right(resource=r, action=a).validate().to_doc() for r, a in args.right]
    payload: dict = {"op": "request_assertion", "requested": requested, "lifetime": args.lifetime}
    reply = _cas_call(endpoints["cas"], cred, payload)
    os.makedirs(os.path.dirname(cfg.assertion_path) or ".", exist_ok=True)
    encoding.write_doc(cfg.assertion_path, reply)
    assertion = CasAssertion.from_doc(reply["assertion"])
    print(f"assertion for {assertion.subject} (VO {assertion.vo_name})")
    for right in assertion.rights:
        print(f"  {right.resource} {right.action}")
    print(f"saved to {cfg.assertion_path}")
    return 0


def cmd_cas_admin(args) -> int:
    cfg = _config(args)
    endpoints = _endpoints(cfg)
    cred = _active_credential(cfg)
    payload = {
        "op": "cas_grant" if args.action == "grant" else "cas_revoke",
        "subject": args.subject,
        "right": Right(resource=args.resource, action=args.right_action).validate().to_doc(),
    }
    _cas_call(endpoints["cas"], cred, payload)
    print(f"{args.action} applied for {args.subject}")
    return 0


def _cas_call(endpoint: str, cred: CredentialSet, payload: dict) -> dict:
    envelope = sign_envelope(cred, encoding.encode(payload), target_hint="cas")
    reply = transport.call(endpoint, {
        "kind": transport.KIND_ENVELOPE,
        "op": "cas",
        "body": envelope.to_doc(),
    })
    return reply.get("body", {})


def cmd_gridmap(args) -> int:
    cfg = _config(args)
    gm = load_gridmap(cfg.gridmap_path)
    account = map_identity(gm, args.identity, args.account)
    print(account)
    return 0


def cmd_job_submit(args) -> int:
    cfg = _config(args)
    endpoints = _endpoints(cfg)
    assertion = _load_assertion(args.assertion) if args.assertion else None
    policy = fetch_policy(endpoints["router"])
    plan = select_mechanism(policy, _available_credentials(cfg),
                            [assertion] if assertion else [])
    host_anchors = TrustAnchorStore.load_dir(cfg.anchors_host_dir)
    description = JobDescription(
        executable=args.exe,
        arguments=tuple(args.arg),
        working_dir=args.workdir,
        stdout_path=args.stdout,
        stderr_path=args.stderr,
        queue=args.queue,
    )
    handle = client_submit(
        plan.credential,
        description,
        endpoints["router"],
        host_anchors,
        assertion=assertion,
        audit=AuditLog(cfg.audit_path),
    )
    _record_job(cfg, handle.job_id, handle.mjs_endpoint, handle.owner)
    print(f"{handle.job_id} {handle.mjs_endpoint}")
    return 0


def _record_job(cfg: DeploymentConfig, job_id: str, endpoint: str, owner: str) -> None:
    os.makedirs(os.path.dirname(cfg.jobs_index_path) or ".", exist_ok=True)
    with open(cfg.jobs_index_path, "a", encoding="utf-8") as fh:
        fh.write(f"{job_id} {endpoint} {owner}\n")


def _lookup_job(cfg: DeploymentConfig, job_id: str) -> str:
    if os.path.exists(cfg.jobs_index_path):
        with open(cfg.jobs_index_path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) >= 2 and parts[0] == job_id:
                    return parts[1]
    raise JobNotFound(f"unknown job {job_id!r}")


def _job_op(args, op: str) -> int:
    cfg = _config(args)
    endpoint = _lookup_job(cfg, args.job_id)
    cred = _active_credential(cfg)
    host_anchors = TrustAnchorStore.load_dir(cfg.anchors_host_dir)
    deadline = time.monotonic() + getattr(args, "wait", 0.0)
    while True:
        with job_session(cred, endpoint, host_anchors) as session:
            snapshot = session.cancel() if op == "cancel" else session.status()
        state = snapshot["state"]
        if op == "cancel" or state in TERMINAL_STATES or time.monotonic() >= deadline:
            break
        time.sleep(0.1)
    exit_code = snapshot.get("exit_code")
    print(f"{snapshot['job_id']} {state}" + (f" exit={exit_code}" if exit_code is not None else ""))
    return 0


def cmd_job_status(args) -> int:
    return _job_op(args, "status")


def cmd_job_cancel(args) -> int:
    return _job_op(args, "cancel")


def cmd_services(args) -> int:
    cfg = _config(args)
    command = args.services_command
    if command == "run":
        return _services_run(cfg)
    if command == "up":
        return _services_up(cfg, args)
    if command == "down":
        return _services_down(cfg)
    return _services_status(cfg)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except (ProcessLookupError, PermissionError):
        return False


def _read_pid(cfg: DeploymentConfig) -> int | None:
    try:
        with open(cfg.pidfile, encoding="ascii") as fh:
            return int(fh.read().strip())
    except (OSError, ValueError):
        return None


def _services_run(cfg: DeploymentConfig) -> int:
    deployment = Deployment(cfg)
    deployment.start()
    os.makedirs(cfg.state_dir, exist_ok=True)
    with open(cfg.pidfile, "w", encoding="ascii") as fh:
        fh.write(str(os.getpid()))
    stop = {"flag": False}

    def _terminate(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)
    for name, endpoint in sorted(deployment.endpoints.items()):
        print(f"{name}={endpoint}", flush=True)
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        deployment.stop()
        try:
            os.remove(cfg.pidfile)
        except OSError:
            pass
    return 0


def _services_up(cfg: DeploymentConfig, args) -> int:
    pid = _read_pid(cfg)
    if pid is not None and _pid_alive(pid):
        raise AlreadyRunning(f"services already running (pid {pid})")
    cfg.validate_service_paths()
    os.makedirs(cfg.state_dir, exist_ok=True)
    log = open(os.path.join(cfg.state_dir, "services.log"), "ab")
    subprocess.Popen(
        [sys.executable, "-m", "gridforge.cli", "--config", cfg.config_path, "services", "run"],
        stdout=log,
        stderr=log,
        start_new_session=True,
    )
    log.close()
    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        if os.path.exists(cfg.endpoints_path) and _read_pid(cfg) is not None:
            endpoints = read_endpoints(cfg.endpoints_path)
            for name, endpoint in sorted(endpoints.items()):
                print(f"{name}={endpoint}")
            return 0
        time.sleep(0.1)
    raise ConfigError("services did not come up within 15s; see state/services.log")


def _services_down(cfg: DeploymentConfig) -> int:
    pid = _read_pid(cfg)
    if pid is None or not _pid_alive(pid):
        for stale in (cfg.pidfile, cfg.endpoints_path):
            try:
                os.remove(stale)
            except OSError:
                pass
        raise NotRunning("services are not running")
    os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + 15
    while _pid_alive(pid) and time.monotonic() < deadline:
        time.sleep(0.1)
    if _pid_alive(pid):
        os.kill(pid, signal.SIGKILL)
    print("services stopped")
    return 0


def _services_status(cfg: DeploymentConfig) -> int:
    pid = _read_pid(cfg)
    if pid is not None and _pid_alive(pid):
        print(f"running (pid {pid})")
        for name, endpoint in sorted(read_endpoints(cfg.endpoints_path).items()):
            print(f"{name}={endpoint}")
        return 0
    print("not running")
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    count = verify_or_raise(cfg.audit_path)
    print(f"OK {count} entries")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Job descriptions, the job state machine, and sandboxed process launch.

Real privilege switching is out of scope: a "sandbox" is a per-account
directory and every launch is tagged with the account it runs as. Job paths
(working directory, stdout, stderr) are account-relative and may not escape
the sandbox.
"""

from __future__ import annotations

import os
import subprocess
import threading
import uuid
from dataclasses import dataclass, field

from .. import encoding
from ..credstore import CredentialSet
from ..errors import InvalidJobDescription, InvalidTransition, MalformedDocument

JOB_PENDING = "Pending"
JOB_ACTIVE = "Active"
JOB_DONE = "Done"
JOB_FAILED = "Failed"
JOB_CANCELED = "Canceled"

ALLOWED_TRANSITIONS: dict[str, frozenset[str]] = {
    JOB_PENDING: frozenset({JOB_ACTIVE, JOB_CANCELED}),
    JOB_ACTIVE: frozenset({JOB_DONE, JOB_FAILED, JOB_CANCELED}),
    JOB_DONE: frozenset(),
    JOB_FAILED: frozenset(),
    JOB_CANCELED: frozenset(),
}

_DESC_FIELDS = {"executable", "arguments", "working_dir", "stdout_path", "stderr_path", "queue"}


@dataclass(frozen=True)
class JobDescription:
    executable: str
    arguments: tuple[str, ...] = ()
    working_dir: str = "."
    stdout_path: str = "stdout.txt"
    stderr_path: str = "stderr.txt"
    queue: str = "default"

    def validate(self) -> "JobDescription":
        if not self.executable:
            raise InvalidJobDescription("executable must be nonempty")
        for label, path in (
            ("working_dir", self.working_dir),
            ("stdout_path", self.stdout_path),
            ("stderr_path", self.stderr_path),
        ):
            if os.path.isabs(path) or ".." in path.split("/"):
                raise InvalidJobDescription(f"{label} must stay inside the account sandbox: {path!r}")
        return self

    def to_doc(self) -> dict:
        return {
            "executable": self.executable,
            "arguments": list(self.arguments),
            "working_dir": self.working_dir,
            "stdout_path": self.stdout_path,
            "stderr_path": self.stderr_path,
            "queue": self.queue,
        }

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "JobDescription":
        m = encoding.expect_map(doc, _DESC_FIELDS)
        args = m["arguments"]
        if not isinstance(args, list):
            raise MalformedDocument("arguments must be an array")
        return cls(
            executable=str(m["executable"]),
            arguments=tuple(str(a) for a in args),
            working_dir=str(m["working_dir"]),
            stdout_path=str(m["stdout_path"]),
            stderr_path=str(m["stderr_path"]),
            queue=str(m["queue"]),
        ).validate()


def new_job_id() -> str:
    return f"job-{uuid.uuid4().hex[:12]}"


class JobRecord:
    """One managed job. State transitions are serialized per record."""

    def __init__(self, job_id: str, description: JobDescription, owner: str, local_account: str):
        self.job_id = job_id
        self.description = description
        self.owner = owner
        self.local_account = local_account
        self.state = JOB_PENDING
        self.delegated_credential: CredentialSet | None = None
        self.exit_code: int | None = None
        self._lock = threading.Lock()
        self._process: subprocess.Popen | None = None
        self._done = threading.Event()

    def transition(self, new_state: str) -> None:
        with self._lock:
            if new_state not in ALLOWED_TRANSITIONS[self.state]:
                raise InvalidTransition(f"{self.state} -> {new_state}")
            self.state = new_state
        if new_state in (JOB_DONE, JOB_FAILED, JOB_CANCELED):
            self._done.set()

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "job_id": self.job_id,
                "owner": self.owner,
                "local_account": self.local_account,
                "state": self.state,
                "exit_code": self.exit_code,
                "description": self.description.to_doc(),
            }

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)


class AccountSandbox:
    """Per-account directory tree under the deployment sandbox root."""

    def __init__(self, root: str, account: str):
        self.account = account
        self.base = os.path.join(root, account)

    def resolve(self, relative: str) -> str:
        path = os.path.normpath(os.path.join(self.base, relative))
        if not (path + os.sep).startswith(self.base + os.sep) and path != self.base:
            raise InvalidJobDescription(f"path {relative!r} escapes the sandbox")
        return path

    def ensure(self) -> None:
        os.makedirs(self.base, exist_ok=True)


def launch_job(record: JobRecord, sandbox: AccountSandbox, on_exit=None, on_active=None) -> None:
    """Move a Pending job to Active and run its executable in the sandbox.

    The launch is tagged with the sandbox account; a watcher thread records
    the exit code and drives the terminal transition. `on_active` fires after
    the Active transition but before the process spawns, so state-change
    observers see events in causal order.
    """
    desc = record.description
    sandbox.ensure()
    workdir = sandbox.resolve(desc.working_dir)
    os.makedirs(workdir, exist_ok=True)
    stdout_path = sandbox.resolve(desc.stdout_path)
    stderr_path = sandbox.resolve(desc.stderr_path)

    record.transition(JOB_ACTIVE)
    if on_active is not None:
        on_active(record)
    stdout = open(stdout_path, "wb")
    stderr = open(stderr_path, "wb")
    try:
        process = subprocess.Popen(
            [desc.executable, *desc.arguments],
            cwd=workdir,
            stdout=stdout,
            stderr=stderr,
            env={**os.environ, "GRIDFORGE_ACCOUNT": sandbox.account},
        )
    except OSError:
        stdout.close()
        stderr.close()
        record.transition(JOB_FAILED)
        if on_exit is not None:
            on_exit(record)
        return
    record._process = process

    def _watch() -> None:
        code = process.wait()
        stdout.close()
        stderr.close()
        try:
            with record._lock:
                if record.state != JOB_ACTIVE:
                    return
                record.exit_code = code
            record.transition(JOB_DONE)
        except InvalidTransition:
            return  # cancel won the race
        if on_exit is not None:
            on_exit(record)

    threading.Thread(target=_watch, name=f"watch-{record.job_id}", daemon=True).start()


def cancel_job(record: JobRecord) -> None:
    """Cancel from Pending or Active; terminates a running process."""
    record.transition(JOB_CANCELED)
    process = record._process
    if process is not None and process.poll() is None:
        process.terminate()
        try:
            process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            process.kill()

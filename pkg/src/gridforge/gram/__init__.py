"""Job-initiation architecture: router, factories, per-job services, and the
privileged helpers behind the local gate."""

from .client import (
    JobHandle,
    JobSession,
    client_submit,
    fetch_policy,
    job_session,
    mjs_connect,
    submit_request,
)
from .jobs import (
    JOB_ACTIVE,
    JOB_CANCELED,
    JOB_DONE,
    JOB_FAILED,
    JOB_PENDING,
    AccountSandbox,
    JobDescription,
    JobRecord,
    cancel_job,
    launch_job,
)
from .privileged import (
    AccountServiceStarter,
    ResourceIdentityMapper,
    grim_fields,
    is_grim_credential,
    require_local,
)
from .services import (
    LocalJobFactory,
    ManagedJobService,
    MasterJobFactory,
    ProxyRouter,
    ServiceRegistry,
    new_flow_id,
)

__all__ = [
    "AccountSandbox",
    "AccountServiceStarter",
    "JobDescription",
    "JobHandle",
    "JobRecord",
    "JobSession",
    "JOB_ACTIVE",
    "JOB_CANCELED",
    "JOB_DONE",
    "JOB_FAILED",
    "JOB_PENDING",
    "LocalJobFactory",
    "ManagedJobService",
    "MasterJobFactory",
    "ProxyRouter",
    "ResourceIdentityMapper",
    "ServiceRegistry",
    "cancel_job",
    "client_submit",
    "fetch_policy",
    "grim_fields",
    "is_grim_credential",
    "job_session",
    "launch_job",
    "mjs_connect",
    "new_flow_id",
    "require_local",
    "submit_request",
]

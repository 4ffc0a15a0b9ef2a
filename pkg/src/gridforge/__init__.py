"""gridforge: a desk-scale grid security infrastructure.

Proxy-credential delegation, community authorization with policy
intersection, grid-identity mapping, message-level security (stateless signed
envelopes and stateful mutually authenticated contexts), and a
least-privilege multi-service job-initiation flow, all runnable on one
machine over loopback transport.
"""

from .credstore import (
    Certificate,
    CredentialSet,
    TrustAnchorStore,
    ValidatedIdentity,
    create_ca,
    create_proxy,
    describe_credential,
    generate_keypair,
    issue_identity,
    load_credential,
    same_user_trust,
    save_credential,
    validate_chain,
)
from .cas import (
    CasAssertion,
    PolicyDecision,
    Right,
    VoPolicyStore,
    authorize,
    cas_issue,
    cas_verify,
)
from .gridmap import GridMap, map_identity, parse_gridmap, serialize_gridmap
from .secmsg import (
    MechanismPlan,
    PolicyDescriptor,
    ProtectedMessage,
    ReplayCache,
    SecurityContext,
    SignedEnvelope,
    context_complete,
    context_finish,
    context_initiate,
    context_respond,
    context_unwrap,
    context_wrap,
    delegate_over_context,
    select_mechanism,
    sign_envelope,
    verify_envelope,
)
from .audit import AuditEntry, AuditLog, verify_file
from .config import DeploymentConfig
from .harness import Deployment, bootstrap_deployment

__version__ = "0.1.0"

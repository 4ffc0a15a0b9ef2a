"""Shared fixtures: a small test grid (CAs, users, host) and a live deployment."""

from __future__ import annotations

import os

import pytest

from gridforge.config import DeploymentConfig
from gridforge.credstore import (
    TrustAnchorStore,
    create_ca,
    issue_identity,
    load_credential,
)
from gridforge.harness import Deployment, bootstrap_deployment

NOW = 1_700_000_000  # frozen clock for pure crypto tests
HOUR = 3600
YEAR = 365 * 24 * 3600


@pytest.fixture(scope="session")
def user_ca():
    return create_ca("/O=TestGrid/CN=User CA", (NOW - HOUR, NOW + YEAR))


@pytest.fixture(scope="session")
def host_ca():
    return create_ca("/O=TestGrid/CN=Host CA", (NOW - HOUR, NOW + YEAR))


@pytest.fixture(scope="session")
def anchors(user_ca):
    return TrustAnchorStore([user_ca.leaf])


@pytest.fixture(scope="session")
def host_anchors(host_ca):
    return TrustAnchorStore([host_ca.leaf])


@pytest.fixture(scope="session")
def alice(user_ca):
    return issue_identity(user_ca, "/O=TestGrid/CN=Alice", (NOW - HOUR, NOW + 30 * 24 * HOUR))


@pytest.fixture(scope="session")
def bob(user_ca):
    return issue_identity(user_ca, "/O=TestGrid/CN=Bob", (NOW - HOUR, NOW + 30 * 24 * HOUR))


@pytest.fixture(scope="session")
def service_cred(host_ca):
    return issue_identity(host_ca, "/O=TestGrid/CN=host/localhost", (NOW - HOUR, NOW + 30 * 24 * HOUR))


class LiveGrid:
    """A bootstrapped deployment plus convenient access to its credentials."""

    def __init__(self, root: str, users: list[str]):
        self.root = root
        self.config_path = bootstrap_deployment(root, users)
        self.config = DeploymentConfig.load(self.config_path)
        self.deployment = Deployment(self.config)
        self.endpoints = self.deployment.start()
        self.user_anchors = self.deployment.user_anchors
        self.host_anchors = self.deployment.host_anchors

    def credential(self, user: str):
        account = user.lower()
        return load_credential(
            os.path.join(self.root, f"creds/{account}.cert"),
            os.path.join(self.root, f"creds/{account}.key"),
        )

    @property
    def audit_path(self) -> str:
        return self.config.audit_path

    def stop(self) -> None:
        self.deployment.stop()


@pytest.fixture
def grid(tmp_path):
    live = LiveGrid(str(tmp_path / "grid"), ["alice", "bob"])
    yield live
    live.stop()
